//! Optimisation: Adam, plateau decay, early stopping, the two-phase trainer
//! and checkpoint persistence.

pub mod adam;
pub mod checkpoint;
pub mod config;
pub mod infer;
pub mod schedule;
pub mod trainer;

pub use adam::Adam;
pub use checkpoint::{encode_checkpoint, load_checkpoint, load_weights_into, save_checkpoint, Checkpoint};
pub use config::TrainConfig;
pub use infer::{run_inference, score_split, Prediction, SplitScores};
pub use schedule::{EarlyStopper, Monitor, PlateauScheduler, StopDecision};
pub use trainer::{EpochRecord, Phase, TrainOutcome, TrainState, Trainer, CHECKPOINT_FILE, LOG_FILE};
