use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("empty corpus")]
    EmptyCorpus,
    #[error("vocab too small: target size {target} below base alphabet {base} + 4 specials")]
    VocabTooSmall { target: usize, base: usize },
    #[error("unknown token id {0}")]
    UnknownTokenId(u32),
    #[error("invalid vocab file: {0}")]
    VocabFormat(String),

    #[error("bridge unavailable: {0}")]
    BridgeUnavailable(String),
    #[error("bridge dimension mismatch: expected {expected}, got {got}")]
    BridgeDimensionMismatch { expected: usize, got: usize },
    #[error("bridge returned invalid vector")]
    BridgeInvalidVector,

    #[error("config error: {0}")]
    Config(String),
    #[error("sequence exceeds max positions ({len} > {max})")]
    SequenceTooLong { len: usize, max: usize },
    #[error("invalid features: {0}")]
    InvalidFeatures(String),
    #[error("diverged")]
    Diverged,
    #[error("diverged at step {0}")]
    DivergedAt(u64),
    #[error("length mismatch: {0}")]
    LengthMismatch(String),

    #[error("invalid checkpoint: {0}")]
    CheckpointFormat(String),
    #[error("checkpoint checksum mismatch")]
    ChecksumMismatch,

    #[error("malformed record at line {line}: {reason}")]
    MalformedRecord { line: usize, reason: String },

    #[error("schema error at line {line}: {reason}")]
    Schema { line: usize, reason: String },

    #[error("degenerate labels")]
    DegenerateLabels,
    #[error("record {id}: {source}")]
    Record {
        id: String,
        #[source]
        source: Box<Error>,
    },

    #[error("{context}: {source}")]
    Io {
        context: String,
        #[source]
        source: std::io::Error,
    },
    #[error("json: {0}")]
    Json(#[from] serde_json::Error),
}

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            context: path.into().display().to_string(),
            source,
        }
    }
}
