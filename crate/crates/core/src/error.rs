use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    #[error("schedule: {0}")]
    Schedule(String),

    #[error("extent {extent} out of bounds for {height}x{width} grid")]
    OutOfBounds { extent: String, height: usize, width: usize },

    #[error("dimension mismatch: {0}")]
    Shape(String),

    #[error("token id {id} outside vocabulary of size {vocab}")]
    TokenOutOfRange { id: u32, vocab: usize },

    #[error("invalid config: {0}")]
    Config(String),

    #[error("non-finite value in {stage} (layer {layer:?})")]
    NonFinite { stage: String, layer: Option<usize> },

    #[error("sampling at step {step}: {reason}")]
    Sampling { step: usize, reason: String },

    #[error("parse error at line {line}: {msg}")]
    Parse { line: usize, msg: String },

    #[error("checkpoint: {0}")]
    Checkpoint(String),

    #[error("tokenizer: {0}")]
    Tokenizer(String),

    #[error("image: {0}")]
    Image(#[from] image::ImageError),

    #[error(transparent)]
    Io(#[from] std::io::Error),
}

pub type Result<T> = std::result::Result<T, Error>;
