use std::path::PathBuf;

use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    #[error("empty part")]
    EmptyPart,

    #[error("empty point set")]
    EmptySet,

    #[error("label out of range: label {label} with m = {m}")]
    LabelOutOfRange { label: usize, m: usize },

    #[error("non-finite coordinate at point {index}")]
    NonFinite { index: usize },

    #[error("length mismatch: {0}")]
    LengthMismatch(String),

    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("timestep {t} out of range 1..={max}")]
    TimestepOutOfRange { t: usize, max: usize },

    #[error("presence mask mismatch between transform sets")]
    PresenceMismatch,

    #[error("part {part} is absent")]
    AbsentPart { part: usize },

    #[error("flow overflow")]
    FlowOverflow,

    #[error("non-finite loss at epoch {epoch}: {what}")]
    Divergence { epoch: usize, what: String },

    #[error("checkpoint: {0}")]
    Checkpoint(String),

    #[error("checkpoint version {found} is not supported (expected {expected})")]
    VersionMismatch { found: u32, expected: u32 },

    #[error("missing file {path}")]
    MissingFile { path: PathBuf },

    #[error("parse error in {path}:{line}: {msg}")]
    Parse { path: PathBuf, line: usize, msg: String },

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

pub type Result<T> = std::result::Result<T, Error>;
