use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("validation error: {0}")]
    Validation(String),

    /// The count constraints of an assignment problem cannot be met.
    #[error("infeasible: {0}")]
    Infeasible(String),

    /// Malformed binary file; `offset` is the byte position where reading failed.
    #[error("format error at byte {offset}: {message}")]
    Format { offset: u64, message: String },

    /// Malformed text input (labels, JSON); `context` names the line or key.
    #[error("parse error ({context}): {message}")]
    Parse { context: String, message: String },

    #[error("training error: {0}")]
    Training(String),

    #[error("epoch {epoch}: {source}")]
    Epoch {
        epoch: usize,
        #[source]
        source: Box<Error>,
    },

    #[error(transparent)]
    Io(#[from] std::io::Error),
}

impl Error {
    pub(crate) fn validation(msg: impl Into<String>) -> Self {
        Error::Validation(msg.into())
    }

    pub(crate) fn format(offset: u64, msg: impl Into<String>) -> Self {
        Error::Format {
            offset,
            message: msg.into(),
        }
    }

    pub(crate) fn parse(context: impl Into<String>, msg: impl Into<String>) -> Self {
        Error::Parse {
            context: context.into(),
            message: msg.into(),
        }
    }

    pub(crate) fn at_epoch(self, epoch: usize) -> Self {
        Error::Epoch {
            epoch,
            source: Box::new(self),
        }
    }

    /// True when the root cause is an infeasible assignment problem.
    pub fn is_infeasible(&self) -> bool {
        match self {
            Error::Infeasible(_) => true,
            Error::Epoch { source, .. } => source.is_infeasible(),
            _ => false,
        }
    }
}
