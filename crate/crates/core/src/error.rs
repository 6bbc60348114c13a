use std::path::PathBuf;

use crate::taxonomy::{NodeId, TaxonomyErrorKind};

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("taxonomy line {line}: {kind}{}", id.as_ref().map(|i| format!(" (node `{i}`)")).unwrap_or_default())]
    Taxonomy {
        line: usize,
        id: Option<String>,
        kind: TaxonomyErrorKind,
    },

    #[error("invalid node id `{0}`: ids must be non-empty and contain no whitespace, `|` or `,`")]
    InvalidNodeId(String),

    #[error("unknown node `{0}`")]
    UnknownNode(NodeId),

    #[error("manifest row {row}: {message}")]
    Manifest { row: usize, message: String },

    #[error("{0}")]
    InvalidInput(String),

    #[error("dimension mismatch: {0}")]
    DimensionMismatch(String),

    #[error("image `{image_id}`: {message}")]
    Image { image_id: String, message: String },

    #[error("taxonomy checksum mismatch: checkpoint expects {expected}, loaded taxonomy is {found}")]
    ChecksumMismatch { expected: String, found: String },

    #[error("undefined: {0}")]
    Undefined(String),

    #[error("training failed: {0}")]
    Training(String),

    #[error("checkpoint {path}: {message}")]
    Checkpoint { path: PathBuf, message: String },

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Csv(#[from] csv::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

impl Error {
    pub(crate) fn invalid(msg: impl Into<String>) -> Self {
        Error::InvalidInput(msg.into())
    }
}
