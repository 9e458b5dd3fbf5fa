use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid layout: {0}")]
    InvalidLayout(String),

    #[error("invalid category table: {0}")]
    InvalidCategories(String),

    #[error("unknown category `{0}`")]
    UnknownCategory(String),

    #[error("layout objects are not in canonical order")]
    NotCanonical,

    #[error("line {line}: {msg}")]
    Parse { line: usize, msg: String },

    #[error("codebook needs {needed} distinct patch vectors but only {found} exist (short by {})", needed - found)]
    TooFewPatches { needed: usize, found: usize },

    #[error("shape mismatch: {0}")]
    Shape(String),

    #[error("token {token} out of range for vocabulary of size {vocab}")]
    TokenOutOfRange { token: usize, vocab: usize },

    #[error("category {category} out of range for {count} embedded categories")]
    CategoryOutOfRange { category: usize, count: usize },

    #[error("query row {0} has no allowed keys")]
    EmptyMaskRow(usize),

    #[error("non-finite value at position {position}")]
    NonFinite { position: usize },

    #[error("training diverged at step {step} (loss {loss})")]
    Diverged { step: usize, loss: f64 },

    #[error("invalid config: {0}")]
    Config(String),

    #[error("frozen base parameters were modified")]
    FrozenViolated,

    #[error("bad file format: {0}")]
    Format(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),
}

pub type Result<T> = std::result::Result<T, Error>;
