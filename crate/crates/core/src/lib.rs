pub mod autodiff;
pub mod bnn_model;
pub mod calib_metrics;
pub mod checkpoint;
pub mod datasets;
pub mod eau_loss;
pub mod error;
pub mod harness;
pub mod traj_model;
pub mod trajectory;

pub use error::{Error, Result};
