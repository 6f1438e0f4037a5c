use std::path::PathBuf;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("unreadable file {path}: {reason}")]
    UnreadableFile { path: PathBuf, reason: String },

    #[error("unsupported image format: {0}")]
    UnsupportedFormat(PathBuf),

    #[error("empty dataset at {0}")]
    EmptyDataset(PathBuf),

    #[error("mixed layout at {0}: both class subdirectories and loose images")]
    MixedLayout(PathBuf),

    #[error("invalid bounding box {bbox:?} for a {width}x{height} image")]
    InvalidBox {
        bbox: [usize; 4],
        width: usize,
        height: usize,
    },

    #[error("network spec mismatch: {0}")]
    SpecMismatch(String),

    #[error("incompatible checkpoint: {0}")]
    IncompatibleCheckpoint(String),

    #[error("checkpoint format version mismatch: {0}")]
    VersionMismatch(String),

    #[error("discriminator score out of (0,1): {0}")]
    ScoreOutOfRange(f64),

    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),

    #[error("label {label} out of range for {num_classes} classes")]
    LabelOutOfRange { label: usize, num_classes: usize },

    #[error("class count mismatch: {0}")]
    ClassCountMismatch(String),

    #[error("incompatible victim: {0}")]
    IncompatibleVictim(String),

    #[error("training diverged at epoch {epoch}: non-finite {what}")]
    Divergence { epoch: usize, what: String },

    #[error("frame dimension mismatch: {0}")]
    DimensionMismatch(String),

    #[error("empty frame set")]
    EmptyFrameset,

    #[error("invalid config: {0}")]
    InvalidConfig(String),

    #[error("i/o failure on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error(transparent)]
    Json(#[from] serde_json::Error),

    #[error(transparent)]
    Tensor(#[from] candle_core::Error),

    #[error("image encoding failed: {0}")]
    Encode(String),
}

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    /// Errors caused by bad inputs or configuration, as opposed to failures
    /// while the pipeline was running.
    pub fn is_validation(&self) -> bool {
        matches!(
            self,
            Error::InvalidConfig(_)
                | Error::EmptyDataset(_)
                | Error::MixedLayout(_)
                | Error::SpecMismatch(_)
                | Error::IncompatibleCheckpoint(_)
                | Error::IncompatibleVictim(_)
                | Error::ClassCountMismatch(_)
                | Error::LabelOutOfRange { .. }
                | Error::VersionMismatch(_)
                | Error::UnsupportedFormat(_)
                | Error::UnreadableFile { .. }
                | Error::EmptyFrameset
        )
    }
}
