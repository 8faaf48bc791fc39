use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("{op}: dimension mismatch between {lhs:?} and {rhs:?}")]
    Shape {
        op: &'static str,
        lhs: Vec<usize>,
        rhs: Vec<usize>,
    },

    #[error("masked_softmax: row {row} has every entry masked")]
    DegenerateRow { row: usize },

    #[error("backward: root must be a scalar, got shape {shape:?}")]
    NonScalarRoot { shape: Vec<usize> },

    #[error("backward: tape already consumed")]
    TapeConsumed,

    #[error("select: budget {n_keep} is smaller than the {pinned} pinned positions")]
    BudgetTooSmall { n_keep: usize, pinned: usize },

    #[error("select: budget {n_keep} exceeds the {active} active positions")]
    BudgetTooLarge { n_keep: usize, active: usize },

    #[error("empty active set")]
    EmptyActiveSet,

    #[error("invalid policy: {0}")]
    Policy(String),

    #[error("invalid rate bounds: lo={lo} hi={hi}")]
    RateBounds { lo: f64, hi: f64 },

    #[error("sequence length {len} exceeds the configured maximum {max}")]
    SequenceTooLong { len: usize, max: usize },

    #[error("invalid config: {field}: {message}")]
    Config { field: String, message: String },

    #[error("training diverged at step {step} (alpha={alpha})")]
    Diverged { step: usize, alpha: f64 },

    #[error("target speedup {target} is out of range; maximum achievable is {max_speedup:.4}")]
    SpeedupOutOfRange { target: f64, max_speedup: f64 },

    #[error("target speedup {target} falls between budget steps ({below:.4} .. {above:.4})")]
    SpeedupGranularity { target: f64, below: f64, above: f64 },

    #[error("checkpoint: {0}")]
    Checkpoint(String),

    #[error("trace: {0}")]
    Trace(String),

    #[error("dataset: {0}")]
    Dataset(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),
}

impl Error {
    pub fn config(field: impl Into<String>, message: impl Into<String>) -> Self {
        Error::Config {
            field: field.into(),
            message: message.into(),
        }
    }
}
