use thiserror::Error;

/// Crate-wide error type. Variants map onto the failure modes of each
/// subsystem; most operations return only a small subset.
#[derive(Debug, Error)]
pub enum Error {
    #[error("degenerate rotation-6d input: {0}")]
    DegenerateRotation(String),
    #[error("expected {expected} joints, got {got}")]
    WrongJointCount { expected: usize, got: usize },
    #[error("frame count mismatch: {a} vs {b}")]
    FrameMismatch { a: usize, b: usize },
    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),
    #[error("noise schedule needs at least 2 steps, got {0}")]
    BadStepCount(usize),
    #[error("empty prompt")]
    EmptyPrompt,
    #[error("empty dataset")]
    EmptyDataset,
    #[error("non-finite loss at step {step}: {value}")]
    NonFiniteLoss { step: usize, value: f64 },
    #[error("parse error at {path}:{line}: {msg}")]
    ParseError {
        path: String,
        line: usize,
        msg: String,
    },
    #[error("schema version mismatch: file has {found}, expected {expected}")]
    SchemaVersionMismatch { found: u32, expected: u32 },
    #[error("clip references skeleton '{found}', expected '{expected}'")]
    WrongSkeleton { found: String, expected: String },
    #[error("too few clips: {got} (need at least {need})")]
    TooFewClips { got: usize, need: usize },
    #[error("retrieval pool size {pool} larger than available pairs {available}")]
    PoolTooLarge { pool: usize, available: usize },
    #[error("too few samples: {got} (need at least {need})")]
    TooFewSamples { got: usize, need: usize },
    #[error("matrix square root did not converge")]
    NonConvergentSqrt,
    #[error("empty input: {0}")]
    EmptyInput(String),
    #[error("confidence report needs at least 2 replicates, got {0}")]
    ReplicatesTooFew(usize),
    #[error("checkpoint format version mismatch: file has {found}, expected {expected}")]
    CheckpointVersionMismatch { found: u32, expected: u32 },
    #[error("checkpoint holds a '{found}' model, expected '{expected}'")]
    WrongModelKind { found: String, expected: String },
    #[error("io error: {0}")]
    Io(#[from] std::io::Error),
}

pub type Result<T> = std::result::Result<T, Error>;
