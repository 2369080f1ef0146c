use std::fmt;

/// Which packing constraint a batch plan violated.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Constraint {
    /// Image-channel packing: `m * b <= n`.
    SlotPacking,
    /// Fully connected packing: `b * d_in <= n` and `b * d_out <= n`.
    HeadPacking,
    /// The target is not `b0 * prod(g_i)` with every `g_i <= r_h * r_w`.
    Factorization,
}

impl fmt::Display for Constraint {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Constraint::SlotPacking => f.write_str("slot constraint m*b <= n"),
            Constraint::HeadPacking => f.write_str("fc slot constraint b*d <= n"),
            Constraint::Factorization => f.write_str("iteration factorization"),
        }
    }
}

#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("input of length {len} exceeds slot count {n}")]
    LengthExceedsSlots { len: usize, n: usize },
    #[error("no rotation key registered for offset {0}")]
    MissingRotationKey(i64),
    #[error("level exhausted: need {needed}, have {available}")]
    LevelExhausted { needed: u32, available: u32 },
    #[error("ciphertexts belong to different engine contexts")]
    ContextMismatch,
    #[error("invalid engine configuration: {0}")]
    InvalidConfig(String),
    #[error("slot constraint violated: {used} slots needed, {n} available")]
    SlotConstraintViolated { used: usize, n: usize },
    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),
    #[error("overlapping mask ranges [{0}, {1}) and [{2}, {3})")]
    OverlappingRanges(usize, usize, usize, usize),
    #[error("unsupported kernel size {0}")]
    UnsupportedKernel(usize),
    #[error("unsupported stride {0}")]
    UnsupportedStride(usize),
    #[error("block size {0} is not a power of two")]
    NonPowerOfTwoBlock(usize),
    #[error("occupancy overflow: {used} slots exceed {n}")]
    OccupancyOverflow { used: usize, n: usize },
    #[error("infeasible batch {target}: {constraint} violated ({detail})")]
    InfeasibleBatch {
        target: usize,
        constraint: Constraint,
        detail: String,
    },
    #[error("non-positive variance in channel {0}")]
    NonPositiveVariance(usize),
    #[error("non-finite value in {0}")]
    NonFiniteValue(String),
    #[error("parse error: {0}")]
    Parse(String),
    #[error("i/o error on {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
}

pub type Result<T, E = Error> = std::result::Result<T, E>;
