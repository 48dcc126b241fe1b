use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    /// A container could not be parsed. `offset` is the byte position at which
    /// parsing stopped.
    #[error("format error at byte {offset}: {message}")]
    Format { offset: u64, message: String },

    #[error("checksum mismatch: stored {stored:016x}, computed {computed:016x}")]
    Checksum { stored: u64, computed: u64 },

    #[error("image/mask alignment error: image shape {image:?}, mask shape {mask:?}")]
    Alignment { image: Vec<usize>, mask: Vec<usize> },

    /// Not enough slices in one stratum; the volume is excluded from the dataset.
    #[error("volume {volume_id} skipped: {reason}")]
    VolumeSkipped { volume_id: String, reason: String },

    #[error("numeric degeneracy: {0}")]
    NumericDegeneracy(String),

    #[error("store consistency error: {0}")]
    StoreConsistency(String),

    #[error("duplicate id: {0}")]
    DuplicateId(String),

    #[error("no candidates left after filtering")]
    EmptyCandidates,

    #[error("unknown id: {0}")]
    NotFound(String),

    /// Metric is undefined for this input (e.g. relevance rank with an empty mask).
    #[error("undefined: {0}")]
    Undefined(String),

    #[error("training diverged at epoch {epoch}, step {step}: loss={loss}, embedding_std={embedding_std}, lr={lr}")]
    TrainingDiverged {
        epoch: usize,
        step: usize,
        loss: f64,
        embedding_std: f64,
        lr: f64,
    },

    #[error("unsupported: {0}")]
    Unsupported(String),

    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

impl Error {
    pub fn invalid(msg: impl Into<String>) -> Self {
        Error::InvalidArgument(msg.into())
    }

    pub fn format(offset: u64, msg: impl Into<String>) -> Self {
        Error::Format {
            offset,
            message: msg.into(),
        }
    }

    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    /// True for errors caused by bad caller input (as opposed to I/O or internal failures).
    pub fn is_validation(&self) -> bool {
        matches!(
            self,
            Error::InvalidArgument(_) | Error::Format { .. } | Error::Alignment { .. }
        )
    }
}
