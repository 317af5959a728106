use thiserror::Error;

/// Errors produced anywhere in the serving stack.
#[derive(Debug, Error)]
pub enum Error {
    #[error("shape error: {0}")]
    Shape(String),

    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("invalid config: {0}")]
    InvalidConfig(String),

    #[error("config mismatch: {0}")]
    ConfigMismatch(String),

    #[error("unknown model id `{0}`")]
    UnknownModel(String),

    #[error("context overflow: position {position} exceeds max_seq {max_seq}")]
    ContextOverflow { position: usize, max_seq: usize },

    #[error("bad checkpoint magic {found:?}")]
    BadMagic { found: [u8; 4] },

    #[error("unsupported checkpoint version {0}")]
    UnsupportedVersion(u32),

    #[error("checkpoint truncated: {0}")]
    Truncated(String),

    #[error("checkpoint manifest mismatch: {0}")]
    CountMismatch(String),

    #[error("malformed checkpoint: {0}")]
    Format(String),

    #[error("calibration target {target} outside achievable range [{min}, {max}]")]
    OutOfRange { target: f64, min: f64, max: f64 },

    #[error("generation result carries no per-step logits")]
    MissingLogits,

    #[error("i/o error: {0}")]
    Io(#[from] std::io::Error),

    #[error("json error: {0}")]
    Json(#[from] serde_json::Error),

    #[error("csv error: {0}")]
    Csv(#[from] csv::Error),
}

pub type Result<T, E = Error> = std::result::Result<T, E>;
