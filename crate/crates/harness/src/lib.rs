//! Configuration, staging and experiment drivers behind the `cvqkd` CLI.

#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod config;
pub mod data;
pub mod error;
pub mod experiments;
pub mod pipeline;
pub mod report;

pub use config::{EstimatorSelection, ExperimentConfig, ExperimentId};
pub use error::{HarnessError, Result};
pub use pipeline::Pipeline;
