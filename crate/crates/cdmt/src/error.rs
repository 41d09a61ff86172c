use thiserror::Error;

/// Errors surfaced by the library.
#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid argument: {0}")]
    InvalidArg(String),

    #[error("diffusion step t={t} out of range 1..={t_max}")]
    StepOutOfRange { t: usize, t_max: usize },

    #[error("dimension mismatch: {0}")]
    DimMismatch(String),

    #[error("degenerate normalization: posterior mass underflowed to zero (t={t})")]
    DegenerateNormalization { t: usize },

    #[error("unknown schedule kind `{0}`")]
    UnknownScheduleKind(String),

    #[error("unknown language tag `{0}`")]
    UnknownLanguage(String),

    #[error("vocabulary error: {0}")]
    Vocab(String),

    #[error("corpus error: {0}")]
    Corpus(String),

    #[error("config error: {0}")]
    Config(String),

    #[error("checkpoint error: {0}")]
    Checkpoint(String),

    #[error("training diverged: {0}")]
    Diverged(String),

    #[error("metric error: {0}")]
    Metric(String),

    #[error("io error on {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
}

impl Error {
    pub(crate) fn io(path: impl Into<String>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }
}

pub type Result<T> = std::result::Result<T, Error>;
