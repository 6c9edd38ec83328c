use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("shape {shape:?} does not hold {len} values")]
    InvalidShape { shape: Vec<usize>, len: usize },

    #[error("shape mismatch in {op}: {lhs:?} vs {rhs:?}")]
    ShapeMismatch {
        op: &'static str,
        lhs: Vec<usize>,
        rhs: Vec<usize>,
    },

    #[error("axis {axis} out of range for a rank-{rank} tensor")]
    InvalidAxis { axis: usize, rank: usize },

    #[error("non-finite value produced by {op}")]
    NonFinite { op: &'static str },

    #[error("division by zero in {op}")]
    DivisionByZero { op: &'static str },

    #[error("backward needs a scalar loss, got shape {0:?}")]
    NonScalarLoss(Vec<usize>),

    #[error("loss does not depend on any leaf that requires a gradient")]
    Detached,

    #[error("backward already ran on this tape")]
    AlreadyBackpropagated,

    #[error("variable was recorded on a different tape")]
    ForeignVar,

    #[error("every key is masked for query {query}")]
    AllMasked { query: usize },

    #[error("token id {id} is outside the vocabulary of {vocab}")]
    TokenOutOfRange { id: usize, vocab: usize },

    #[error("sequence of length {len} exceeds max_seq_len {max}")]
    SequenceTooLong { len: usize, max: usize },

    #[error("every position is excluded from the loss")]
    EmptyLoss,

    #[error("degenerate distribution (zero variance)")]
    Degenerate,

    #[error("invalid configuration: {0}")]
    Config(String),

    #[error("unknown parameter `{0}`")]
    UnknownParam(String),

    #[error("optimizer state is not initialised")]
    Uninitialised,

    #[error("transform of size {n} exceeds the dense limit {limit}")]
    DenseLimit { n: usize, limit: usize },

    #[error("data error: {0}")]
    Data(String),

    #[error("checkpoint format error: {0}")]
    Format(String),

    #[error("training diverged at step {step}: {source}")]
    Diverged {
        step: usize,
        #[source]
        source: Box<Error>,
    },

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

impl Error {
    pub(crate) fn config(msg: impl Into<String>) -> Self {
        Error::Config(msg.into())
    }
}
