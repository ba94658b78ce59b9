//! Seeded experiment suites over the softmax policy model: likelihood
//! displacement surveys, negative-token mitigation, ranking overlap,
//! threshold ablations and identity validation.

pub mod config;
pub mod error;
pub mod output;
pub mod probe;
pub mod stats;
pub mod suites;
pub mod task;
pub mod validate;

pub use config::ExperimentConfig;
pub use error::{HarnessError, Result};
