//! Configuration, synthetic data, checkpoints and the training loop.

pub mod checkpoint;
pub mod config;
pub mod data;
pub mod train;

pub use checkpoint::TrainState;
pub use config::{Augment, Config, Preset, TrainConfig};
pub use data::{generate, DataSpec, Dataset, Manifest, CLASSES};
pub use train::{read_log, step_rng, train, RunPaths, StepLog, TrainData};
