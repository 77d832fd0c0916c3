use std::path::PathBuf;

/// Errors raised anywhere in the compression stack.
#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("invalid shape: {0}")]
    InvalidShape(String),
    #[error("invalid argument: {0}")]
    InvalidArgument(String),
    #[error("detached tensor: {0}")]
    Detached(String),
    #[error("divergence undefined: {0}")]
    DivergenceUndefined(String),
    #[error("function is not deterministic: {0}")]
    NonDeterministic(String),
    #[error("token id {id} is outside the vocabulary of size {vocab_size}")]
    InvalidToken { id: usize, vocab_size: usize },
    #[error("sequence of length {len} exceeds the limit of {max}")]
    Length { len: usize, max: usize },
    #[error("vocabulary error: {0}")]
    Vocabulary(String),
    #[error("template error: {0}")]
    Template(String),
    #[error("capacity error: {0}")]
    Capacity(String),
    #[error("{path}:{line}: {msg}")]
    Parse { path: PathBuf, line: usize, msg: String },
    #[error("checkpoint format error: {0}")]
    Format(String),
    #[error("configuration error: {0}")]
    Config(String),
    #[error("degenerate denominator: teacher score equals no-context score ({0})")]
    DegenerateDenominator(f64),
    #[error("training diverged: {0}")]
    Diverged(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

pub type Result<T, E = Error> = std::result::Result<T, E>;
