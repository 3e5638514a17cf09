use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    #[error(transparent)]
    Autodiff(#[from] usad_autodiff::Error),

    #[error("invalid input: {0}")]
    Invalid(String),

    #[error("config error: {0}")]
    Config(String),

    #[error("data error: {0}")]
    Data(String),

    #[error("label {0} has no prototype")]
    MissingLabel(usize),

    #[error("shape error in {stage}: {msg}")]
    Shape { stage: &'static str, msg: String },

    #[error("non-finite loss in {stage} at epoch {epoch}")]
    Diverged { stage: &'static str, epoch: usize },

    #[error("data hash mismatch: checkpoint has {expected}, data has {found} (use force to override)")]
    HashMismatch { expected: String, found: String },

    #[error("{path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },

    #[error(transparent)]
    Csv(#[from] csv::Error),
}

impl Error {
    /// True for problems caused by the caller's config or data rather than
    /// by a defect in this crate.
    pub fn is_user_error(&self) -> bool {
        match self {
            Error::Autodiff(e) => matches!(e, usad_autodiff::Error::Corrupt(_) | usad_autodiff::Error::Io(_)),
            Error::Diverged { .. } | Error::Shape { .. } => false,
            _ => true,
        }
    }

    pub fn io(path: impl AsRef<std::path::Path>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.as_ref().display().to_string(),
            source,
        }
    }
}

pub type Result<T, E = Error> = std::result::Result<T, E>;

pub(crate) fn invalid<T>(msg: impl Into<String>) -> Result<T> {
    Err(Error::Invalid(msg.into()))
}
