use std::path::PathBuf;

use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    #[error("i/o error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("{path}:{line}: malformed JSON: {source}")]
    Json {
        path: PathBuf,
        line: usize,
        #[source]
        source: serde_json::Error,
    },

    #[error("line {line}: field `{field}`: {message}")]
    SchemaViolation { line: usize, field: String, message: String },

    #[error("line {line}: unknown {kind} `{name}`")]
    UnknownName { line: usize, kind: &'static str, name: String },

    #[error("cannot derive entity types from relation name `{0}` and no mapping was supplied")]
    UnparseableRelation(String),

    #[error("invalid synthetic spec: {0}")]
    InvalidSpec(String),

    #[error("invalid configuration: {0}")]
    InvalidConfig(String),

    #[error("invalid input: {0}")]
    InvalidInput(String),

    #[error("zero-norm vector in {0}; cosine similarity is undefined")]
    ZeroNorm(&'static str),

    #[error("no precomputed image-to-text embedding for sample `{0}`")]
    MissingEmbedding(String),

    #[error("sequence of {len} positions exceeds max_positions {max}")]
    SequenceTooLong { len: usize, max: usize },

    #[error("training diverged at step {step}: l_d={l_d} l_s={l_s} l_c={l_c}")]
    Divergence { step: usize, l_d: f64, l_s: f64, l_c: f64 },

    #[error("checkpoint error: {0}")]
    Checkpoint(String),

    #[error("schema mismatch: {0}")]
    SchemaMismatch(String),
}

pub type Result<T, E = Error> = std::result::Result<T, E>;

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io { path: path.into(), source }
    }
}
