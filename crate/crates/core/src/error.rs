use thiserror::Error;

/// Errors raised by the training laboratory.
#[derive(Debug, Error)]
pub enum CrpoError {
    #[error("vocabulary too small: {vocab_size} tokens cannot hold disjoint answer/focus/marker ranges (need at least {required})")]
    VocabularyTooSmall { vocab_size: usize, required: usize },

    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("{what} must not be empty")]
    Empty { what: &'static str },

    #[error("group needs at least 2 members, got {len}")]
    GroupTooSmall { len: usize },

    #[error("non-finite input to {0}")]
    NonFinite(&'static str),

    #[error("style statistics for character {character} are not initialized")]
    StatsUninitialized { character: usize },

    #[error("gate would flip advantage sign: gamma {gamma} * h_id {h_id} > 1")]
    GateFlipsSign { gamma: f64, h_id: f64 },

    #[error("shape mismatch: expected {expected}, found {found}")]
    ShapeMismatch { expected: String, found: String },

    #[error("step {step}: {source}")]
    Step {
        step: usize,
        #[source]
        source: Box<CrpoError>,
    },

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),

    #[error(transparent)]
    Csv(#[from] csv::Error),
}

pub type Result<T> = std::result::Result<T, CrpoError>;

impl CrpoError {
    pub(crate) fn invalid(msg: impl Into<String>) -> Self {
        CrpoError::InvalidArgument(msg.into())
    }

    pub(crate) fn at_step(self, step: usize) -> Self {
        CrpoError::Step {
            step,
            source: Box::new(self),
        }
    }
}
