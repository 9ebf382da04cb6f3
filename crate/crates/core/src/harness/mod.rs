//! Experiment orchestration: configuration, training, evaluation, threshold
//! scans and grid search, plus the on-disk formats they exchange.

pub mod config;
pub mod data;
pub mod evaluate;
pub mod optim;
pub mod records;
pub mod run;
pub mod scan;
pub mod train;

pub use config::{ExperimentConfig, Task};
