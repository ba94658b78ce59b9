//! Error type shared by every module of the crate.

/// Failure modes of the model, rollout, objective and probe operations.
#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum LabError {
    #[error("missing context embedding: question {question}, prefix length {prefix_len}")]
    MissingContext { question: u64, prefix_len: usize },
    #[error("degenerate group: success rate {0} leaves no advantage signal")]
    DegenerateGroup(f64),
    #[error("rewards have not been assigned")]
    Unscored,
    #[error("rewards are already assigned")]
    AlreadyScored,
    #[error("advantages have not been computed")]
    NoAdvantages,
    #[error("group has no positive responses")]
    NoPositives,
    #[error("shape mismatch: {0}")]
    Shape(String),
    #[error("non-finite value in {0}")]
    NonFinite(&'static str),
    #[error("invalid argument: {0}")]
    InvalidArgument(String),
    #[error("the NTHR variant requires a token score report")]
    MissingReport,
    #[error("responses {first} and {second} share their first token")]
    SharedFirstToken { first: usize, second: usize },
    #[error("malformed parameter snapshot: {0}")]
    Snapshot(String),
    #[error("learning rate calibration did not converge after {0} halvings")]
    Calibration(u32),
}

pub type Result<T> = std::result::Result<T, LabError>;
