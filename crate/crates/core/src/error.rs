use std::path::PathBuf;

use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("shape mismatch in {op}: {detail}")]
    ShapeMismatch { op: &'static str, detail: String },

    #[error("invalid configuration: {0}")]
    InvalidConfig(String),

    #[error("non-finite value produced by {op}")]
    Numerical { op: &'static str },

    #[error("graph error: {0}")]
    Graph(String),

    #[error("invalid label {value}: labels must be 0 or 1")]
    InvalidLabel { value: f64 },

    #[error("model has no trainable parameters")]
    NoTrainableParameters,

    /// A numerical failure during training, tagged with where it happened.
    #[error("training diverged at epoch {epoch}, batch {batch}: {source}")]
    TrainingDiverged {
        epoch: usize,
        batch: usize,
        #[source]
        source: Box<Error>,
    },

    #[error("i/o error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("malformed file at byte {offset}: {detail}")]
    Format { offset: u64, detail: String },

    #[error("unsupported image format for {path} (magic bytes {magic})")]
    UnsupportedFormat { path: PathBuf, magic: String },

    #[error("class directory {0} contains no decodable image")]
    EmptyClass(PathBuf),

    #[error("fold {fold}: training split lacks class {missing}")]
    DegenerateFold { fold: usize, missing: &'static str },
}

impl Error {
    pub(crate) fn shape(op: &'static str, detail: impl Into<String>) -> Self {
        Error::ShapeMismatch {
            op,
            detail: detail.into(),
        }
    }

    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    /// True for errors caused by non-finite arithmetic.
    pub fn is_numerical(&self) -> bool {
        matches!(self, Error::Numerical { .. } | Error::TrainingDiverged { .. })
    }
}
