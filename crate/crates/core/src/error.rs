use std::path::PathBuf;

/// Errors produced anywhere in the recognizer pipeline.
#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("{op}: shape mismatch: {detail}")]
    Shape { op: &'static str, detail: String },

    #[error("{0}: non-finite value")]
    NonFinite(&'static str),

    #[error("label of length {label_len} needs at least {needed} frames, got {frames}")]
    NoAlignment {
        label_len: usize,
        needed: usize,
        frames: usize,
    },

    #[error("brute-force instance too large: {paths} paths (limit {limit})")]
    TooLarge { paths: u128, limit: u128 },

    #[error("invalid configuration: {0}")]
    Config(String),

    #[error("config line {line}: {msg}")]
    ConfigLine { line: usize, msg: String },

    #[error("corrupt checkpoint: {0}")]
    CorruptCheckpoint(String),

    #[error("unsupported checkpoint version {found} (expected {expected})")]
    CheckpointVersion { found: u32, expected: u32 },

    #[error("checkpoint parameter `{name}` has shape {found:?}, model expects {expected:?}")]
    CheckpointShape {
        name: String,
        found: Vec<usize>,
        expected: Vec<usize>,
    },

    #[error("text does not fit the canvas: {0}")]
    Fit(String),

    #[error("symbol {0:?} is not in the charset")]
    Charset(char),

    #[error("dataset {path}: {msg}")]
    Dataset { path: PathBuf, msg: String },

    #[error(transparent)]
    Io(#[from] std::io::Error),
}

pub type Result<T, E = Error> = std::result::Result<T, E>;

pub(crate) fn shape_err(op: &'static str, detail: impl Into<String>) -> Error {
    Error::Shape {
        op,
        detail: detail.into(),
    }
}
