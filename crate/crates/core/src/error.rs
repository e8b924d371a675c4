use alloc::string::String;

/// Errors raised by the core pipeline.
#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum Error {
    #[error("series length {len} is not divisible by 2^{level}")]
    LengthNotDivisible { len: usize, level: usize },
    #[error("non-finite value at channel {channel}, step {step}")]
    NonFiniteInput { channel: usize, step: usize },
    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),
    #[error("invalid decomposition level {level} for length {len}")]
    InvalidLevel { level: usize, len: usize },
    #[error("non-positive normalization anchor at record {index}")]
    NonPositiveAnchor { index: usize },
    #[error("need at least {needed} records, got {got}")]
    TooShort { needed: usize, got: usize },
    #[error("normalization anchors are missing")]
    MissingAnchor,
    #[error("horizon {horizon} exceeds series length {len}")]
    HorizonTooLong { horizon: usize, len: usize },
    #[error("patch {pf}x{pt} does not tile a {rows}x{cols} grid")]
    PatchSizeMismatch { pf: usize, pt: usize, rows: usize, cols: usize },
    #[error("invalid configuration: {0}")]
    InvalidConfig(String),
    #[error("decoder is missing shared query table for layer {0}")]
    MissingSharedQueries(usize),
    #[error("timestep {t} outside [0, {max}]")]
    TimestepOutOfRange { t: usize, max: usize },
    #[error("token id {0} is not in the vocabulary")]
    UnknownToken(u32),
    #[error("empty batch")]
    EmptyBatch,
    #[error("children leave a gap between {0} and {1}")]
    SpanGap(String, String),
    #[error("children overlap between {0} and {1}")]
    SpanOverlap(String, String),
    #[error("children mix daily and periodic documents")]
    MixedLevels,
    #[error("parameters have not been trained or loaded")]
    UntrainedParams,
}

pub type Result<T> = core::result::Result<T, Error>;
