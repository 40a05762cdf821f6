//! Synthetic data, configuration, training, evaluation, checkpoints and
//! keypoint visualisation.

pub mod checkpoint;
pub mod config;
pub mod dataset;
pub mod eval;
pub mod train;
pub mod viz;

pub use checkpoint::Checkpoint;
pub use config::{RunConfig, TrainConfig};
pub use dataset::{Clip, DataConfig};
pub use eval::{evaluate, EvalMetrics};
pub use train::{train, EpochMetrics, TrainOutcome};
