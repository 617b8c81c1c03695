//! Crate-wide error type.

/// Errors produced by tensor ops, the model, skip resolution, and the
/// reporting harnesses.
#[derive(Debug, thiserror::Error)]
pub enum Error {
    /// Incompatible tensor shapes, e.g. matmul inner dimensions.
    #[error("{op}: shape mismatch between {lhs:?} and {rhs:?}")]
    Shape {
        op: &'static str,
        lhs: Vec<usize>,
        rhs: Vec<usize>,
    },

    /// Argument outside the mathematical domain of an operation.
    #[error("domain error: {0}")]
    Domain(String),

    /// Invalid model or skip configuration.
    #[error("invalid configuration: {0}")]
    Config(String),

    /// Invalid runtime input (token ids, prompts, corpora, tasks).
    #[error("invalid input: {0}")]
    Input(String),

    /// Decoding past the cache capacity.
    #[error("kv cache overflow: position {pos} + {requested} new tokens exceeds max_seq_len {max_seq_len}")]
    CacheOverflow {
        pos: usize,
        requested: usize,
        max_seq_len: usize,
    },

    /// Cosine similarity of a vector with near-zero norm.
    #[error("undefined cosine similarity: vector norm below 1e-12")]
    UndefinedSimilarity,

    /// Checkpoint file does not start with the expected magic bytes.
    #[error("bad checkpoint magic: expected \"SKPT\"")]
    BadMagic,

    /// Checkpoint format version this build does not understand.
    #[error("unsupported checkpoint version {0}")]
    UnsupportedVersion(u32),

    /// Checkpoint file ends before the declared data.
    #[error("truncated checkpoint: {0}")]
    Truncated(String),

    /// Checkpoint contents inconsistent with the declared config.
    #[error("malformed checkpoint: {0}")]
    Structure(String),

    /// Unparsable skip-spec string.
    #[error("spec parse error at `{token}`: {reason}")]
    SpecParse { token: String, reason: String },

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error("invalid JSON: {0}")]
    Json(#[from] serde_json::Error),
}

pub type Result<T> = std::result::Result<T, Error>;
