//! Harness failures, each mapped to a stable category and exit code.

use lld_core::LabError;

#[derive(Debug, thiserror::Error)]
pub enum HarnessError {
    #[error("{0}")]
    Config(String),
    #[error("{context}: {source}")]
    Io {
        context: String,
        #[source]
        source: std::io::Error,
    },
    #[error("every one of the {0} questions produced a degenerate group")]
    EmptySurvey(usize),
    #[error("{found} valid questions, at least {needed} required")]
    InsufficientQuestions { found: usize, needed: usize },
    #[error("question {question}: {source}")]
    Model {
        question: u64,
        #[source]
        source: LabError,
    },
    #[error("{0}")]
    Csv(#[from] csv::Error),
    #[error("validation failed: {0}")]
    Validation(String),
}

impl HarnessError {
    /// Machine-readable category printed with every error.
    pub fn category(&self) -> &'static str {
        match self {
            Self::Config(_) => "config",
            Self::Io { .. } | Self::Csv(_) => "io",
            Self::EmptySurvey(_) => "empty-survey",
            Self::InsufficientQuestions { .. } => "insufficient-questions",
            Self::Model { .. } => "model",
            Self::Validation(_) => "validation",
        }
    }

    /// Nonzero and distinct per category; 2 is left to argument parsing.
    pub fn exit_code(&self) -> i32 {
        match self.category() {
            "config" => 3,
            "io" => 4,
            "empty-survey" => 5,
            "insufficient-questions" => 6,
            "model" => 7,
            _ => 8,
        }
    }

    pub fn io(context: impl Into<String>, source: std::io::Error) -> Self {
        Self::Io { context: context.into(), source }
    }

    pub fn model(question: u64) -> impl FnOnce(LabError) -> Self {
        move |source| Self::Model { question, source }
    }
}

pub type Result<T> = std::result::Result<T, HarnessError>;
