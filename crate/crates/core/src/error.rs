use std::path::PathBuf;

use thiserror::Error;

/// Errors produced anywhere in the blockfold pipeline.
#[derive(Debug, Error)]
pub enum Error {
    #[error("degenerate geometry: {0}")]
    DegenerateGeometry(String),

    #[error("molecule has {0} blocks, at least 2 are required")]
    EmptyMolecule(usize),

    #[error("block {0} has no incoming edges")]
    IsolatedNode(usize),

    #[error("every position is masked, loss is undefined")]
    AllMasked,

    #[error("entity mismatch: checkpoint is {expected}, data is {found}")]
    EntityMismatch { expected: String, found: String },

    #[error("unsupported entity: {0}")]
    UnsupportedEntity(String),

    #[error("parse error{}: {msg}", .line.map(|l| format!(" at line {l}")).unwrap_or_default())]
    Parse { line: Option<usize>, msg: String },

    #[error("invalid configuration: {0}")]
    Config(String),

    #[error("checkpoint: {0}")]
    Checkpoint(String),

    #[error("non-finite loss at step {step}: {detail}")]
    NonFiniteLoss { step: usize, detail: String },

    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

impl Error {
    pub(crate) fn parse(line: Option<usize>, msg: impl Into<String>) -> Self {
        Error::Parse {
            line,
            msg: msg.into(),
        }
    }

    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }
}

pub type Result<T, E = Error> = std::result::Result<T, E>;
