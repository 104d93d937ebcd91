//! Crate-wide error type.

use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    /// Shape mismatch, out-of-range argument, or malformed input.
    #[error("invalid input: {0}")]
    InvalidInput(String),

    /// Attention mask with an all-masked query row, or mask/shape mismatch.
    #[error("invalid mask: {0}")]
    InvalidMask(String),

    /// Non-finite value where finite arithmetic is required.
    #[error("non-finite input: {0}")]
    NonFinite(String),

    /// Operation combination that is intentionally unsupported
    /// (e.g. KV cache together with bidirectional attention).
    #[error("unsupported combination: {0}")]
    UnsupportedCombination(String),

    /// Cache append with out-of-order or overlapping positions.
    #[error("invalid append: {0}")]
    InvalidAppend(String),

    /// Cosine similarity requested for a zero-norm snapshot.
    #[error("undefined similarity: zero-norm snapshot at index {0}")]
    UndefinedSimilarity(usize),

    /// Token id that is not a valid action bin where one is required.
    #[error("invalid token: {0}")]
    InvalidToken(String),

    /// Sequence still contains mask tokens where a completed decode is required.
    #[error("incomplete decode: {0} mask tokens remain")]
    IncompleteDecode(usize),

    /// Teacher/student contract violation during distillation.
    #[error("protocol violation: {0}")]
    ProtocolViolation(String),

    /// Decoder exceeded its iteration budget.
    #[error("non-termination: exceeded {0} iterations")]
    NonTermination(usize),

    /// Training produced a non-finite loss.
    #[error("training diverged: {0}")]
    Diverged(String),

    /// Bad run configuration or missing checkpoint.
    #[error("config error: {0}")]
    Config(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

pub type Result<T> = std::result::Result<T, Error>;

impl Error {
    /// Process exit code for the CLI: 1 for configuration problems,
    /// 2 for runtime failures.
    pub fn exit_code(&self) -> i32 {
        match self {
            Error::Config(_) => 1,
            _ => 2,
        }
    }
}
