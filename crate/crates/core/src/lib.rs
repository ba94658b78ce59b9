//! Desk-scale laboratory for GRPO training dynamics.
//!
//! The policy is an autoregressive softmax over a shared unembedding matrix
//! whose context embeddings are free parameters. On top of it the crate
//! provides group rollouts with binary rewards, the clipped GRPO surrogate and
//! its group-preference reduction, the token-level similarity scores used to
//! detect and mitigate lazy likelihood displacement, and single-step probes
//! that measure how an update moves the likelihood of correct responses.

pub mod dynamics;
pub mod error;
pub mod linalg;
pub mod model;
pub mod nthr;
pub mod objective;
pub mod rollout;
pub mod snapshot;

pub use error::{LabError, Result};
pub use model::{ContextKey, Distribution, ParamGradient, PolicyParams, QuestionId, TokenId, Vocabulary};
