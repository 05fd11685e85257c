//! Plateau learning-rate decay and early stopping, both maximising a
//! monitored metric.

use serde::{Deserialize, Serialize};

/// Tracks the best value seen and how long it has stood.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct Monitor {
    pub best: Option<f64>,
    pub best_epoch: Option<usize>,
    /// Consecutive epochs without improvement.
    pub wait: usize,
}

impl Monitor {
    /// Record `value`; returns whether it beats the best by more than `min_delta`.
    fn observe(&mut self, value: f64, epoch: usize, min_delta: f64) -> bool {
        let improved = self.best.is_none_or(|b| value - min_delta > b);
        if improved {
            self.best = Some(value);
            self.best_epoch = Some(epoch);
            self.wait = 0;
        } else {
            self.wait += 1;
        }
        improved
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PlateauScheduler {
    pub patience: usize,
    pub factor: f64,
    pub min_lr: f64,
    pub min_delta: f64,
    pub monitor: Monitor,
}

impl PlateauScheduler {
    pub fn new(patience: usize, factor: f64, min_lr: f64, min_delta: f64) -> Self {
        Self {
            patience,
            factor,
            min_lr,
            min_delta,
            monitor: Monitor::default(),
        }
    }

    /// Feed one epoch's metric; returns the learning rate for the next epoch.
    pub fn step(&mut self, value: f64, epoch: usize, lr: f64) -> f64 {
        self.monitor.observe(value, epoch, self.min_delta);
        if self.monitor.wait >= self.patience {
            self.monitor.wait = 0;
            return (lr * self.factor).max(self.min_lr);
        }
        lr
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct StopDecision {
    pub improved: bool,
    pub stop: bool,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EarlyStopper {
    pub patience: usize,
    pub min_delta: f64,
    pub monitor: Monitor,
}

impl EarlyStopper {
    pub fn new(patience: usize, min_delta: f64) -> Self {
        Self {
            patience,
            min_delta,
            monitor: Monitor::default(),
        }
    }

    pub fn step(&mut self, value: f64, epoch: usize) -> StopDecision {
        let improved = self.monitor.observe(value, epoch, self.min_delta);
        StopDecision {
            improved,
            stop: self.monitor.wait >= self.patience,
        }
    }
}
