use std::path::PathBuf;

use thiserror::Error;

/// Errors raised by every module in this crate.
#[derive(Debug, Error)]
pub enum OtagError {
    #[error("malformed ontology JSON at byte offset {offset}: {message}")]
    MalformedJson { offset: usize, message: String },

    #[error("duplicate ontology id {0:?}")]
    DuplicateId(String),

    #[error("child_ids reference unknown ids: {}", .0.join(", "))]
    UnknownChildIds(Vec<String>),

    #[error("ontology node has an empty id (record {0})")]
    EmptyId(usize),

    #[error("ontology has no root nodes")]
    NoRoots,

    #[error("node index {index} out of range (graph has {len} nodes)")]
    NodeOutOfRange { index: usize, len: usize },

    #[error("node {0:?} cannot reach any root through parent edges")]
    Unrooted(String),


    #[error("class list references unknown machine id {0:?}")]
    UnknownMid(String),

    #[error("class list repeats evaluation index {0}")]
    DuplicateEvalIndex(usize),

    #[error("class list repeats machine id {0:?}")]
    DuplicateMid(String),

    #[error("class list indices are not contiguous: expected {expected}, found {found}")]
    NonContiguousIndex { expected: usize, found: usize },

    #[error("prompt template must contain exactly one {{label}} placeholder, found {0}")]
    BadTemplate(usize),

    #[error("unknown description method {0:?} (valid: direct, prompt, desc, concat)")]
    UnknownMethod(String),

    #[error("target vector has no positive label")]
    NoPositives,

    #[error("no class has a positive label")]
    NoPositiveClass,

    #[error("length mismatch: expected {expected}, got {got} ({what})")]
    LengthMismatch {
        what: &'static str,
        expected: usize,
        got: usize,
    },

    #[error("non-finite value in {0}")]
    NonFinite(&'static str),

    #[error("zero-norm vector in {0}")]
    ZeroNorm(&'static str),

    #[error("invalid configuration: {0}")]
    InvalidConfig(String),

    #[error("reports have different level counts ({0} vs {1})")]
    LevelMismatch(usize, usize),

    #[error("annotation tie for clip {clip:?}, class {mid:?}: {yes} present vs {no} absent")]
    AnnotationTie {
        clip: String,
        mid: String,
        yes: usize,
        no: usize,
    },

    #[error("invalid annotation: {0}")]
    InvalidAnnotation(String),

    #[error("non-finite loss at training step {0}")]
    NonFiniteLoss(usize),

    #[error("column mismatch at position {position}: expected {expected:?}, found {found:?}")]
    ColumnMismatch {
        position: usize,
        expected: String,
        found: String,
    },

    #[error("format error in {path}: {message}")]
    Format { path: String, message: String },

    #[error("I/O error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("write failed: {0}")]
    Write(#[from] std::io::Error),

    #[error("CSV error: {0}")]
    Csv(#[from] csv::Error),

    #[error("JSON error: {0}")]
    Json(#[from] serde_json::Error),
}

impl OtagError {
    /// True for failures caused by bad input or arguments (CLI exit code 1).
    /// Everything else maps to exit code 2.
    pub fn is_user_error(&self) -> bool {
        !matches!(self, OtagError::NonFiniteLoss(_) | OtagError::Write(_))
    }

    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        OtagError::Io {
            path: path.into(),
            source,
        }
    }
}

pub type Result<T> = std::result::Result<T, OtagError>;
