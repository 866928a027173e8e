use std::path::PathBuf;

use crate::slide::PatchCoord;

pub type Result<T, E = Her2Error> = std::result::Result<T, E>;

#[derive(Debug, thiserror::Error)]
pub enum Her2Error {
    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("incomplete grid: missing patch ({}, {})", .0.row, .0.col)]
    IncompleteGrid(PatchCoord),

    #[error("incomplete grid: expected {expected} records, got {actual}")]
    RecordCount { expected: usize, actual: usize },

    #[error("mapping out of range: ({}, {}) maps to ({row}, {col}) outside the {rows}x{cols} IHC grid", .from.row, .from.col)]
    MappingOutOfRange {
        from: PatchCoord,
        row: i64,
        col: i64,
        rows: u32,
        cols: u32,
    },

    #[error("mapping is not invertible: {0}")]
    NotInvertible(String),

    #[error("backend unavailable: {0}")]
    BackendUnavailable(String),

    #[error("sidecar protocol violation: {0}")]
    ProtocolViolation(String),

    #[error("patch ({}, {}): {source}", .coord.row, .coord.col)]
    AtPatch {
        coord: PatchCoord,
        #[source]
        source: Box<Her2Error>,
    },

    #[error("ROC undefined: {0}")]
    UndefinedRoc(String),

    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("{path}: {source}")]
    Image {
        path: PathBuf,
        #[source]
        source: image::ImageError,
    },

    #[error("{context}: {source}")]
    Json {
        context: String,
        #[source]
        source: serde_json::Error,
    },

    #[error("{path}, line {line}: {message}")]
    Csv {
        path: PathBuf,
        line: u64,
        message: String,
    },
}

impl Her2Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Her2Error::Io {
            path: path.into(),
            source,
        }
    }

    /// Strips any [`Her2Error::AtPatch`] wrappers.
    pub fn root(&self) -> &Her2Error {
        match self {
            Her2Error::AtPatch { source, .. } => source.root(),
            other => other,
        }
    }
}
