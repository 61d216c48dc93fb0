//! Crate-wide error type.

use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("empty corpus")]
    EmptyCorpus,

    #[error("no salient candidates")]
    NoSalientCandidates,

    #[error("empty salient set")]
    EmptySalientSet,

    #[error("attention/history shape mismatch: row length {row_len}, history length {hist_len}")]
    AttentionShapeMismatch { row_len: usize, hist_len: usize },

    #[error("unnormalized attention row: sum {sum}")]
    UnnormalizedRow { sum: f64 },

    #[error("missing layer/head records for step {step}")]
    MissingRecords { step: usize },

    #[error("capture capacity exceeded: {steps} steps, capacity {capacity}")]
    CaptureCapacity { steps: usize, capacity: usize },

    #[error("truncation window too small: m = {m}")]
    TruncationWindow { m: usize },

    #[error("invalid probability row")]
    InvalidProbabilityRow,

    #[error("λ/R length mismatch: {lambdas} λ vs {rewards} R")]
    LambdaLengthMismatch { lambdas: usize, rewards: usize },

    #[error("length mismatch: {left} vs {right}")]
    LengthMismatch { left: usize, right: usize },

    #[error("empty input")]
    EmptyInput,

    #[error("history exceeds max_len: {len} > {max_len}")]
    HistoryTooLong { len: usize, max_len: usize },

    #[error("decode length exceeded")]
    DecodeLengthExceeded,

    #[error("empty history for critic")]
    EmptyHistoryForCritic,

    #[error("token id {id} out of vocab (size {vocab})")]
    TokenOutOfVocab { id: u32, vocab: usize },

    #[error("numerical divergence: {0}")]
    NumericalDivergence(String),

    #[error("configuration too large for exhaustive enumeration: vocab {vocab}, max_len {max_len}")]
    EnumerationTooLarge { vocab: usize, max_len: usize },

    #[error("invalid model config: {0}")]
    InvalidConfig(String),

    #[error("checkpoint format: {0}")]
    CheckpointFormat(String),

    #[error("attention dump format: {0}")]
    DumpFormat(String),

    #[error("io: {0}")]
    Io(#[from] std::io::Error),
}
