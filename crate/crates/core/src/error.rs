use std::path::PathBuf;

/// Errors produced anywhere in the quantization pipeline.
#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("shape mismatch: {0}")]
    Shape(String),

    #[error("matrix is singular at working precision (pivot {pivot:e})")]
    Singular { pivot: f64 },

    #[error("{placement}: effective transform is singular (pivot {pivot:e})")]
    SingularTransform { placement: String, pivot: f64 },

    #[error("unbound leaf `{0}`")]
    UnboundLeaf(String),

    #[error("graph root must be a scalar, found shape {0:?}")]
    NonScalarRoot(Vec<usize>),

    #[error("invalid quantization parameters: {0}")]
    InvalidQuantParams(String),

    #[error("invalid configuration: {0}")]
    Config(String),

    #[error("epoch {epoch} is outside 1..={epochs}")]
    EpochOutOfRange { epoch: usize, epochs: usize },

    #[error("block {block}: singular effective matrix at epoch {epoch}: {source}")]
    SingularAtEpoch {
        block: usize,
        epoch: usize,
        #[source]
        source: Box<Error>,
    },

    #[error("block {block}: optimization diverged at epoch {epoch} (loss is not finite)")]
    Diverged { block: usize, epoch: usize },

    #[error("bad magic: expected AFQT")]
    BadMagic,

    #[error("unsupported container version {found} (expected {expected})")]
    VersionMismatch { found: u32, expected: u32 },

    #[error("overlapping or unsorted payload offsets at `{0}`")]
    OverlappingOffsets(String),

    #[error("truncated container: {0}")]
    Truncated(String),

    #[error("malformed container header: {0}")]
    Header(String),

    #[error("duplicate tensor name `{0}`")]
    DuplicateName(String),

    #[error("missing tensor `{0}`")]
    MissingTensor(String),

    #[error("token id {id} out of vocabulary range (vocab size {vocab})")]
    TokenOutOfRange { id: usize, vocab: usize },

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
    pub(crate) fn shape(msg: impl Into<String>) -> Self {
        Error::Shape(msg.into())
    }

    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    /// True for errors that mean the numbers blew up rather than bad input.
    pub fn is_numerical(&self) -> bool {
        matches!(
            self,
            Error::Diverged { .. }
                | Error::Singular { .. }
                | Error::SingularTransform { .. }
                | Error::SingularAtEpoch { .. }
        )
    }
}

pub type Result<T, E = Error> = std::result::Result<T, E>;
