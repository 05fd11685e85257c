//! The two-phase training loop.

use std::fmt;
use std::fs::{File, OpenOptions};
use std::io::Write;
use std::path::{Path, PathBuf};
use std::sync::Arc;
use std::time::Instant;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::adam::Adam;
use super::checkpoint::save_checkpoint;
use super::config::TrainConfig;
use super::infer::score_split;
use super::schedule::{EarlyStopper, PlateauScheduler};
use crate::data::{augment, central_mask, class_weights, stream_seed, Batch, Dataset, Sample, Split};
use crate::error::{Result, SmarcError};
use crate::loss::{total_loss, LossTargets};
use crate::metrics::argmax;
use crate::model::SmarcModel;
use crate::params::ParamStore;
use crate::tensor::{Graph, Tensor};

// Stream salts so shuffling, augmentation and dropout never share draws.
const SHUFFLE_STREAM: u64 = 0x5348_5546;
const AUGMENT_STREAM: u64 = 0x4155_474d;
const DROPOUT_STREAM: u64 = 0x4452_4f50;

pub const CHECKPOINT_FILE: &str = "best.ckpt";
pub const LOG_FILE: &str = "train_log.tsv";

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum Phase {
    /// Head only, trunk frozen.
    A,
    /// Everything trainable.
    B,
}

impl fmt::Display for Phase {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Phase::A => "A",
            Phase::B => "B",
        })
    }
}

/// Per-epoch summary. Losses are sample-weighted means over the epoch.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    /// 1-based, counted across both phases.
    pub epoch: usize,
    pub phase: Phase,
    pub lr: f64,
    pub loss_total: f64,
    pub loss_rgb: f64,
    pub loss_ce: f64,
    /// Accuracy of the in-epoch (dropout, augmented) predictions.
    pub train_acc: f64,
    pub val_acc: f64,
    pub val_psnr: f64,
    /// Wall clock, kept out of checkpoints so runs stay byte-identical.
    #[serde(skip)]
    pub seconds: f64,
}

impl EpochRecord {
    pub const TSV_HEADER: &'static str = "epoch\tphase\tlr\tloss_total\tloss_rgb\tloss_ce\tval_acc\tval_psnr";

    pub fn tsv_line(&self) -> String {
        format!(
            "{}\t{}\t{:e}\t{:.6}\t{:.6}\t{:.6}\t{:.6}\t{:.4}",
            self.epoch, self.phase, self.lr, self.loss_total, self.loss_rgb, self.loss_ce, self.val_acc, self.val_psnr
        )
    }
}

/// Everything needed to resume or audit a run.
#[derive(Clone, Debug, PartialEq)]
pub struct TrainState {
    /// Epochs completed so far.
    pub epoch: usize,
    pub phase: Phase,
    pub lr: f64,
    pub adam: Adam,
    pub plateau: PlateauScheduler,
    pub stopper: EarlyStopper,
    pub history: Vec<EpochRecord>,
}

impl TrainState {
    pub fn new(cfg: &TrainConfig, params: &ParamStore<f32>) -> Self {
        Self {
            epoch: 0,
            phase: Phase::A,
            lr: cfg.phase_a_lr,
            adam: Adam::new(params, cfg.adam_beta1, cfg.adam_beta2, cfg.adam_eps),
            plateau: PlateauScheduler::new(cfg.plateau_patience, cfg.plateau_factor, cfg.min_lr, cfg.min_delta),
            stopper: EarlyStopper::new(cfg.early_stop_patience, cfg.min_delta),
            history: Vec::new(),
        }
    }

    pub fn best_epoch(&self) -> Option<usize> {
        self.stopper.monitor.best_epoch
    }

    pub fn best_val_acc(&self) -> Option<f64> {
        self.stopper.monitor.best
    }
}

#[derive(Clone, Debug)]
pub struct TrainOutcome {
    pub state: TrainState,
    pub stopped_early: bool,
    /// Whether the model now holds the best-epoch weights.
    pub restored_best: bool,
}

pub struct Trainer<'a> {
    cfg: TrainConfig,
    dataset: &'a Dataset,
    split: &'a Split,
    mask: Tensor<f32>,
    class_weights: Vec<f64>,
    out_dir: Option<PathBuf>,
    on_epoch: Option<Box<dyn FnMut(&EpochRecord, &SmarcModel<f32>) + 'a>>,
}

impl<'a> Trainer<'a> {
    pub fn new(cfg: TrainConfig, dataset: &'a Dataset, split: &'a Split) -> Result<Self> {
        cfg.validate()?;
        if dataset.size != cfg.arch.input_size {
            return Err(SmarcError::Config(vec![format!(
                "dataset image size {} differs from input_size {}",
                dataset.size, cfg.arch.input_size
            )]));
        }
        if dataset.num_classes() != cfg.arch.num_classes {
            return Err(SmarcError::Config(vec![format!(
                "dataset has {} classes but num_classes is {}",
                dataset.num_classes(),
                cfg.arch.num_classes
            )]));
        }
        if split.train.is_empty() || split.val.is_empty() {
            return Err(SmarcError::Dataset("training needs non-empty train and val splits".into()));
        }
        let train_labels: Vec<usize> = split.train.iter().map(|&i| dataset.items[i].label).collect();
        let class_weights = class_weights(&train_labels, cfg.arch.num_classes)?;
        let mask = central_mask(cfg.arch.input_size, cfg.visible_fraction)?;
        Ok(Self {
            cfg,
            dataset,
            split,
            mask,
            class_weights,
            out_dir: None,
            on_epoch: None,
        })
    }

    /// Write the training log and best-epoch checkpoints under `dir`.
    pub fn with_output(mut self, dir: &Path) -> Self {
        self.out_dir = Some(dir.to_path_buf());
        self
    }

    /// Called after every epoch with its record and the current weights.
    pub fn on_epoch(mut self, f: impl FnMut(&EpochRecord, &SmarcModel<f32>) + 'a) -> Self {
        self.on_epoch = Some(Box::new(f));
        self
    }

    pub fn config(&self) -> &TrainConfig {
        &self.cfg
    }

    pub fn class_weights(&self) -> &[f64] {
        &self.class_weights
    }

    pub fn mask(&self) -> &Tensor<f32> {
        &self.mask
    }

    fn open_log(&self) -> Result<Option<File>> {
        let Some(dir) = &self.out_dir else { return Ok(None) };
        std::fs::create_dir_all(dir).map_err(|e| SmarcError::io(dir, e))?;
        let path = dir.join(LOG_FILE);
        let mut f = OpenOptions::new()
            .create(true)
            .write(true)
            .truncate(true)
            .open(&path)
            .map_err(|e| SmarcError::io(&path, e))?;
        writeln!(f, "{}", EpochRecord::TSV_HEADER).map_err(|e| SmarcError::io(&path, e))?;
        Ok(Some(f))
    }

    fn training_samples(&self, order: &[usize], epoch: usize) -> Result<Vec<Sample>> {
        let aug_seed = stream_seed(self.cfg.seed ^ AUGMENT_STREAM, epoch as u64);
        let (dataset, mask, on) = (self.dataset, &self.mask, self.cfg.augment);
        order
            .par_iter()
            .map(|&i| {
                let mut s = dataset.sample(i, mask)?;
                if on {
                    let mut rng = ChaCha8Rng::seed_from_u64(stream_seed(aug_seed, i as u64));
                    let (image, mask, _) = augment(&s.image, &s.mask, &mut rng)?;
                    s.image = image;
                    s.mask = mask;
                }
                Ok(s)
            })
            .collect()
    }

    /// One pass over the shuffled training split.
    fn run_epoch(
        &self,
        model: &mut SmarcModel<f32>,
        state: &mut TrainState,
        epoch: usize,
        frozen: Option<&Arc<Vec<bool>>>,
    ) -> Result<EpochRecord> {
        let mut order = self.split.train.clone();
        order.shuffle(&mut ChaCha8Rng::seed_from_u64(stream_seed(self.cfg.seed ^ SHUFFLE_STREAM, epoch as u64)));
        let drop_seed = stream_seed(self.cfg.seed ^ DROPOUT_STREAM, epoch as u64);
        let abort = |reason: String| SmarcError::TrainingAborted { epoch, reason };

        let (mut total, mut rgb, mut ce, mut correct) = (0.0, 0.0, 0.0, 0usize);
        for (bi, chunk) in order.chunks(self.cfg.batch_size).enumerate() {
            let batch = Batch::from_samples(&self.training_samples(chunk, epoch)?)?;
            let mut g = Graph::new();
            if let Some(f) = frozen {
                g = g.with_frozen(Arc::clone(f));
            }
            let mut drop_rng = ChaCha8Rng::seed_from_u64(stream_seed(drop_seed, bi as u64));
            let fv = model.forward_graph(&mut g, &batch.input, Some(&mut drop_rng))?;
            let targets = LossTargets {
                image: &batch.target,
                mask: &batch.input.mask,
                labels: &batch.labels,
                class_weights: &self.class_weights,
            };
            let frozen_flags = frozen.map(|f| f.as_slice());
            let lv = total_loss(&mut g, fv.reconstruction, fv.logits, &targets, &self.cfg.loss, &model.params, frozen_flags)?;
            let vals = lv.values(&g);
            if !vals.total.is_finite() {
                return Err(abort(format!("non-finite loss {} in batch {bi}", vals.total)));
            }
            let grads = g.backward(lv.total)?.for_params(model.params.len());
            state
                .adam
                .step(&mut model.params, &grads, frozen_flags, state.lr)
                .map_err(|e| abort(format!("batch {bi}: {e}")))?;

            let n = batch.len() as f64;
            total += vals.total * n;
            rgb += vals.rgb * n;
            ce += vals.ce * n;
            let probs = g.value(fv.probs);
            let k = probs.shape()[1];
            for (row, &label) in probs.data().chunks(k).zip(&batch.labels) {
                let row: Vec<f64> = row.iter().map(|&v| v as f64).collect();
                correct += (argmax(&row) == label) as usize;
            }
        }
        let n = order.len() as f64;
        Ok(EpochRecord {
            epoch,
            phase: state.phase,
            lr: state.lr,
            loss_total: total / n,
            loss_rgb: rgb / n,
            loss_ce: ce / n,
            train_acc: correct as f64 / n,
            val_acc: 0.0,
            val_psnr: 0.0,
            seconds: 0.0,
        })
    }

    fn finish_epoch(
        &mut self,
        model: &SmarcModel<f32>,
        state: &mut TrainState,
        mut rec: EpochRecord,
        started: Instant,
        log: &mut Option<File>,
    ) -> Result<EpochRecord> {
        let val = score_split(model, self.dataset, &self.split.val, &self.mask, self.cfg.batch_size)?;
        rec.val_acc = val.accuracy;
        rec.val_psnr = val.psnr_mean;
        rec.seconds = started.elapsed().as_secs_f64();
        if let (Some(f), Some(dir)) = (log.as_mut(), &self.out_dir) {
            writeln!(f, "{}", rec.tsv_line()).map_err(|e| SmarcError::io(dir.join(LOG_FILE), e))?;
        }
        state.epoch = rec.epoch;
        state.history.push(rec.clone());
        if let Some(cb) = self.on_epoch.as_mut() {
            cb(&rec, model);
        }
        Ok(rec)
    }

    /// Phase A (head warm-up on a frozen trunk) then Phase B (end-to-end
    /// with plateau decay and early stopping on validation accuracy).
    pub fn run(&mut self, model: &mut SmarcModel<f32>) -> Result<TrainOutcome> {
        if model.cfg != self.cfg.arch {
            return Err(SmarcError::Config(vec!["model architecture differs from the training config".into()]));
        }
        let mut log = self.open_log()?;
        let mut state = TrainState::new(&self.cfg, &model.params);
        let frozen = model.trunk_frozen_set();

        let mut epoch = 0;
        for _ in 0..self.cfg.phase_a_epochs {
            epoch += 1;
            let t0 = Instant::now();
            let rec = self.run_epoch(model, &mut state, epoch, Some(&frozen))?;
            self.finish_epoch(model, &mut state, rec, t0, &mut log)?;
        }

        // Fine-tuning starts from fresh optimizer state.
        state.phase = Phase::B;
        state.lr = self.cfg.phase_b_lr;
        state.adam = Adam::new(&model.params, self.cfg.adam_beta1, self.cfg.adam_beta2, self.cfg.adam_eps);
        let mut best: Option<ParamStore<f32>> = None;
        let mut stopped_early = false;
        for _ in 0..self.cfg.phase_b_max_epochs {
            epoch += 1;
            let t0 = Instant::now();
            let rec = self.run_epoch(model, &mut state, epoch, None)?;
            let rec = self.finish_epoch(model, &mut state, rec, t0, &mut log)?;

            let decision = state.stopper.step(rec.val_acc, epoch);
            state.lr = state.plateau.step(rec.val_acc, epoch, state.lr);
            if decision.improved {
                best = Some(model.params.clone());
                if let Some(dir) = &self.out_dir {
                    save_checkpoint(&dir.join(CHECKPOINT_FILE), model, Some(&self.cfg), Some(&state))?;
                }
            }
            if decision.stop {
                stopped_early = true;
                break;
            }
        }

        let restored_best = match best {
            Some(p) if self.cfg.restore_best => {
                model.params = p;
                true
            }
            _ => false,
        };
        Ok(TrainOutcome {
            state,
            stopped_early,
            restored_best,
        })
    }
}
