//! Joint training of detector, adapter and removal network.

mod checkpoint;
mod config;
mod data;
mod trainer;

pub use checkpoint::{Checkpoint, TrainingState, CHECKPOINT_MAGIC, CHECKPOINT_VERSION};
pub use config::{TrainConfig, TrainFile};
pub use data::{augment, crop_patch, l1_objective, Flips, TrainSample};
pub use trainer::{train, Phase, SampleTrace, StepTrace, Trainer};
