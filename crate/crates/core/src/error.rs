use std::path::PathBuf;

use thiserror::Error;

/// Errors produced anywhere in the registration and atlas pipeline.
#[derive(Debug, Error)]
pub enum Error {
    #[error("I/O error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("malformed NIfTI header: {0}")]
    MalformedHeader(String),

    #[error("unsupported NIfTI datatype code {0} (expected 4 = int16 or 16 = float32)")]
    UnsupportedDatatype(i16),

    #[error("unsupported dimension count {0} (expected 3)")]
    Dimension(i16),

    #[error("unsupported orientation: {0}")]
    Orientation(String),

    #[error("geometry mismatch: {0}")]
    GeometryMismatch(String),

    #[error("invalid geometry: {0}")]
    InvalidGeometry(String),

    #[error("degenerate input: {0}")]
    Degenerate(String),

    #[error("underdetermined affine fit: {found} block correspondences, need at least {needed}")]
    Underdetermined { found: usize, needed: usize },

    #[error("singular transform (det = {0})")]
    Singular(f64),

    #[error("registration stage failed: {0}")]
    StageFailure(String),

    #[error("empty keypoint set")]
    EmptyKeypoints,

    #[error("invalid configuration: {0}")]
    Config(String),

    #[error("parse error: {0}")]
    Parse(String),

    #[error("empty selection: {0}")]
    EmptySelection(String),
}

pub type Result<T> = std::result::Result<T, Error>;

impl Error {
    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    /// Stable process exit code for the command-line driver.
    ///
    /// 2 I/O (including unreadable image files), 3 config/parse, 4 empty selection,
    /// 5 geometry mismatch, 6 degenerate input.
    pub fn exit_code(&self) -> i32 {
        match self {
            Error::Io { .. }
            | Error::MalformedHeader(_)
            | Error::UnsupportedDatatype(_)
            | Error::Dimension(_)
            | Error::Orientation(_) => 2,
            Error::Config(_) | Error::Parse(_) => 3,
            Error::EmptySelection(_) => 4,
            Error::GeometryMismatch(_) | Error::InvalidGeometry(_) => 5,
            Error::Degenerate(_)
            | Error::Underdetermined { .. }
            | Error::Singular(_)
            | Error::StageFailure(_)
            | Error::EmptyKeypoints => 6,
        }
    }
}
