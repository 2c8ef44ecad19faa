use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    /// Every atom has zero usage and no floor was supplied.
    #[error("degenerate atom distribution: all row sums are zero")]
    DegenerateDistribution,

    /// The closed-form atom update has a zero denominator.
    #[error("atom {0} is unused and carries no transport mass")]
    AtomUnused(usize),

    #[error("transport problem of size {rows}x{cols} exceeds the exact solver cap of {cap} cells; use sinkhorn")]
    TooLarge { rows: usize, cols: usize, cap: usize },

    #[error("numeric failure: {0}")]
    NumericFailure(String),

    #[error("malformed model file at byte {offset}: {reason}")]
    Parse { offset: usize, reason: String },

    #[error("unsupported model file version {found} (expected {expected})")]
    UnsupportedVersion { found: u32, expected: u32 },

    #[error("{context}: {source}")]
    Stage {
        context: String,
        #[source]
        source: Box<Error>,
    },

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Image(#[from] image::ImageError),
}

impl Error {
    pub(crate) fn invalid(msg: impl Into<String>) -> Self {
        Error::InvalidArgument(msg.into())
    }

    pub(crate) fn in_stage(self, context: impl Into<String>) -> Self {
        Error::Stage {
            context: context.into(),
            source: Box::new(self),
        }
    }

    /// Strips any stage annotations.
    pub fn root(&self) -> &Error {
        match self {
            Error::Stage { source, .. } => source.root(),
            other => other,
        }
    }
}
