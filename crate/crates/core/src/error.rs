use std::path::PathBuf;

use thiserror::Error;

use crate::raster::LinkId;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("shape error: {0}")]
    Shape(String),

    #[error("invalid config field `{field}`: {message}")]
    Config { field: String, message: String },

    #[error("rejected record: {0}")]
    RejectedRecord(String),

    #[error("links with no observations in any period: {0:?}")]
    UnfillableLinks(Vec<LinkId>),

    #[error("unknown link {0}")]
    UnknownLink(LinkId),

    #[error("insufficient data: need at least {required} periods, have {available}")]
    InsufficientData { required: usize, available: usize },

    #[error("numeric failure in {context}")]
    NumericFailure { context: String },

    #[error("contract violation: {0}")]
    Contract(String),

    #[error("division guard: prediction at index {index} is zero")]
    DivisionGuard { index: usize },

    #[error("empty dataset")]
    EmptyDataset,

    #[error("dataset of {samples} samples is smaller than {folds} folds")]
    TooFewSamples { samples: usize, folds: usize },

    #[error("training diverged at epoch {epoch}: loss is not finite")]
    Divergence { epoch: usize },

    #[error("{path}:{line}: {message}")]
    Parse {
        path: String,
        line: usize,
        message: String,
    },

    #[error("no records")]
    NoRecords,

    #[error("bad file format: {0}")]
    Format(String),

    #[error("missing checkpoint {0}")]
    MissingCheckpoint(PathBuf),

    #[error("architecture mismatch: config says {expected}, checkpoint holds {found}")]
    ArchitectureMismatch { expected: String, found: String },

    #[error("unknown architecture `{0}`")]
    UnknownArchitecture(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),
}

impl Error {
    pub(crate) fn shape(msg: impl Into<String>) -> Self {
        Error::Shape(msg.into())
    }

    pub(crate) fn config(field: impl Into<String>, message: impl Into<String>) -> Self {
        Error::Config {
            field: field.into(),
            message: message.into(),
        }
    }

    pub(crate) fn numeric(context: impl Into<String>) -> Self {
        Error::NumericFailure {
            context: context.into(),
        }
    }
}
