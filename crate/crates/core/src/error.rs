use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("non-finite value in dimension {dim} at row {row}")]
    NonFinite { row: usize, dim: usize },

    #[error("horizon {0} too short (need at least 2 rows)")]
    HorizonTooShort(usize),

    #[error("horizon {0} must be divisible by 4")]
    HorizonNotDivisible(usize),

    #[error("shape mismatch: expected {expected}, got {got}")]
    ShapeMismatch { expected: String, got: String },

    #[error("unknown maze id {0:?}")]
    UnknownMaze(String),

    #[error("goal unreachable from cell ({0}, {1})")]
    UnreachableGoal(usize, usize),

    #[error("degenerate reference scores: random {random_ref} >= expert {expert_ref}")]
    DegenerateReference { random_ref: f64, expert_ref: f64 },

    #[error("empty dataset")]
    EmptyDataset,

    #[error("schedule needs at least one step")]
    EmptySchedule,

    #[error("beta {0} outside (0, 1)")]
    InvalidBeta(f64),

    #[error("timestep {t} outside valid range [{lo}, {hi}]")]
    InvalidTimestep { t: usize, lo: usize, hi: usize },

    #[error("nfe {nfe} invalid for {n_steps} diffusion steps")]
    InvalidNfe { nfe: usize, n_steps: usize },

    #[error("non-finite gradient (norm {0}); update skipped")]
    NonFiniteGradient(f64),

    #[error("checkpoint mismatch: {0}")]
    CheckpointMismatch(String),

    #[error("engine mismatch: request {requested}, checkpoint {found}")]
    EngineMismatch { requested: String, found: String },

    #[error("file format version mismatch")]
    VersionMismatch,

    #[error("file truncated")]
    Truncated,

    #[error("file shape disagreement: {0}")]
    ShapeDisagreement(String),

    #[error("reference scores missing or stale for {0}")]
    StaleReferences(String),

    #[error("empty report: {0}")]
    EmptyReport(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),
}
