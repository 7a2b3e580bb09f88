use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("line {line}: {msg}")]
    Parse { line: usize, msg: String },

    #[error("dangling {kind} id {id}: not in the catalog")]
    DanglingId { kind: &'static str, id: u32 },

    #[error("split: {0}")]
    Split(String),

    #[error("tokenizer: {0}")]
    Tokenizer(String),

    #[error("configuration: {0}")]
    Config(String),

    #[error("missing description for {kind} `{id}`")]
    MissingDescription { kind: &'static str, id: String },

    #[error("unsupported: {0}")]
    Unsupported(String),

    #[error("evaluation: {0}")]
    Eval(String),

    #[error("non-finite loss {value} at step {step}")]
    NonFiniteLoss { step: u64, value: f64 },

    #[error("checkpoint: {0}")]
    Checkpoint(String),

    #[error(transparent)]
    Tensor(#[from] kepler_autograd::Error),

    #[error(transparent)]
    Io(#[from] std::io::Error),
}
