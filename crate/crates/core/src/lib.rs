//! Maximum-likelihood direction-of-arrival estimation for compact microphone
//! arrays, with a room simulator, an SRP-PHAT baseline and an evaluation harness.

// `!(x > 0.0)` guards are deliberate: they reject NaN along with non-positives.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod awd;
pub mod baseline;
pub mod dictionary;
pub mod error;
pub mod estimator;
pub mod frontend;
pub mod harness;
pub mod likelihood;
pub mod simulator;
pub mod stimulus;

pub use error::{Error, Result};
pub use estimator::{analyze, MleConfig, MleEstimator, MleOutput};
pub use harness::{run_experiment, ErrorReport, EstimatorKind, ExperimentConfig, RunOptions};
