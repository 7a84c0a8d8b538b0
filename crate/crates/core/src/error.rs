use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

/// Every failure the library can report.
///
/// Variants are grouped by the caller's likely reaction: `Structural`,
/// `Validation`, `Vocabulary` and `Config` point at bad input or wiring,
/// the rest at runtime conditions.
#[derive(Debug, Error)]
pub enum Error {
    #[error("structural error: {0}")]
    Structural(String),

    #[error("validation error: {0}")]
    Validation(String),

    #[error("configuration error: {0}")]
    Config(String),

    #[error("channel `{channel}` has no category in dimension {dim} of the {scale} vocabulary")]
    Vocabulary {
        channel: String,
        dim: usize,
        scale: String,
    },

    #[error("non-finite gradient for parameter `{param}`")]
    NonFiniteGradient { param: String },

    #[error("gradient oracle invalid: {0}")]
    OracleInvalid(String),

    #[error("masking infeasible: {0}")]
    MaskingInfeasible(String),

    #[error("loss undefined: {0}")]
    LossUndefined(String),

    #[error("metric undefined: {0}")]
    MetricUndefined(String),

    #[error("degenerate labels: {0}")]
    DegenerateLabels(String),

    #[error("unsupported tokenizer variant: {0}")]
    UnsupportedVariant(String),

    #[error("format error at byte {offset}: {msg}")]
    Format { offset: u64, msg: String },

    #[error("incompatible checkpoint version {found} (expected {expected})")]
    Incompatible { found: u32, expected: u32 },

    #[error("checkpoint corrupted: {0}")]
    Corruption(String),

    #[error("empty training set: {0}")]
    EmptyTrainingSet(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),

    #[error(transparent)]
    Csv(#[from] csv::Error),
}

impl Error {
    pub(crate) fn structural(msg: impl Into<String>) -> Self {
        Error::Structural(msg.into())
    }

    pub(crate) fn validation(msg: impl Into<String>) -> Self {
        Error::Validation(msg.into())
    }

    /// True for errors caused by bad input or configuration rather than a
    /// failure during execution.
    pub fn is_validation(&self) -> bool {
        matches!(
            self,
            Error::Structural(_)
                | Error::Validation(_)
                | Error::Config(_)
                | Error::Vocabulary { .. }
                | Error::MaskingInfeasible(_)
                | Error::DegenerateLabels(_)
                | Error::UnsupportedVariant(_)
                | Error::EmptyTrainingSet(_)
        )
    }
}
