use std::io;

use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("shape mismatch in {op}: {detail}")]
    Shape { op: &'static str, detail: String },

    #[error("non-finite value at index {index} entering {op}")]
    NonFinite { op: &'static str, index: usize },

    #[error("empty input to {0}")]
    Empty(&'static str),

    #[error("head_dim must be even for rotary embedding, got {0}")]
    OddHeadDim(usize),

    #[error("invalid config: {field}: {reason}")]
    Config { field: String, reason: String },

    #[error("parse error at line {line}: {reason}")]
    Parse { line: usize, reason: String },

    #[error("missing tensor `{0}`")]
    MissingTensor(String),

    #[error("tensor `{name}` has shape {found:?}, expected {expected:?}")]
    TensorShape {
        name: String,
        expected: Vec<usize>,
        found: Vec<usize>,
    },

    #[error("weight container: {0}")]
    Container(String),

    #[error("unknown token id {0}")]
    UnknownToken(u32),

    #[error("token id {id} out of range for vocab of {vocab}")]
    TokenOutOfRange { id: u32, vocab: usize },

    #[error("context overflow: {needed} positions needed, max_seq is {max_seq}")]
    ContextOverflow { needed: usize, max_seq: usize },

    #[error("state cache layer {0} is uninitialized")]
    CacheUninitialized(usize),

    #[error("state cache layer {0} is already initialized")]
    CacheAlreadyInitialized(usize),

    #[error("state cache layer {layer}: {detail}")]
    CacheShape { layer: usize, detail: String },

    #[error("session misuse: {0}")]
    Session(String),

    #[error("trace: {0}")]
    Trace(String),

    #[error("arithmetic overflow computing {0}")]
    Overflow(&'static str),

    #[error(transparent)]
    Io(#[from] io::Error),
}
