use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("numeric domain error: {0}")]
    NumericDomain(String),

    #[error("softmax row has every index masked")]
    DegenerateMask,

    #[error("shape mismatch: {0}")]
    Shape(String),

    #[error("invalid config: {0}")]
    Config(String),

    #[error("sequence of length {len} exceeds context {ctx}")]
    OverLength { len: usize, ctx: usize },

    #[error("token id {id} out of range for vocabulary of {vocab}")]
    TokenOutOfRange { id: u32, vocab: usize },

    #[error("context overflow after generating {} tokens", partial.len())]
    ContextOverflow { partial: Vec<u32> },

    #[error("activation not captured: {0}")]
    CaptureMiss(String),

    #[error("span index {index} outside sequence of length {len}")]
    SpanOutOfRange { index: usize, len: usize },

    #[error("traces are incompatible: {0}")]
    Incompatible(String),

    #[error("vocabulary too small: {0}")]
    VocabularyTooSmall(String),

    #[error("step {step} beyond answer count {n_answers}")]
    StepOutOfRange { step: usize, n_answers: usize },

    #[error("training diverged at step {step}: loss {loss}")]
    Divergence { step: usize, loss: f64, last_good: Option<Box<crate::model::WeightSet<f32>>> },

    #[error("empty cohort: no correct instances (accuracy {accuracy:.4} over {total} queries)")]
    EmptyCohort { accuracy: f64, total: usize },

    #[error("format error: {0}")]
    Format(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}
