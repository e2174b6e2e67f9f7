//! Bayesian neural networks trained on a sequence of tasks with a functional
//! regulariser that keeps the current posterior's predictive marginals close
//! to those of the previous posterior.

pub mod adam;
pub mod bnn;
pub mod data;
pub mod distributions;
pub mod error;
pub mod metrics;
pub mod regularizer;
pub mod rng;
pub mod tensor;
pub mod trainer;

pub use bnn::{Architecture, HeadMode, VariationalParams};
pub use distributions::{Divergence, Family};
pub use error::{Error, Result};
pub use metrics::{average_accuracy, backward_transfer, emit, RunReport};
pub use tensor::{DiffArray, Tape};
pub use trainer::{run_sequence, TrainConfig, Trainer};
