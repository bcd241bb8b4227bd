use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    #[error("dimension mismatch: {0}")]
    Dimension(String),

    #[error("format error: {0}")]
    Format(String),

    #[error("i/o error: {0}")]
    Io(#[from] std::io::Error),

    #[error("sampling error: {0}")]
    Sampling(String),

    #[error("invalid parameter: {0}")]
    Parameter(String),

    #[error("numerical degeneracy: {0}")]
    Degenerate(String),

    #[error("domain error: {0}")]
    Domain(String),

    #[error("training diverged at step {step}: {diagnostics}")]
    Diverged { step: usize, diagnostics: String },

    #[error("training error: {0}")]
    Training(String),

    #[error("checkpoint integrity error: {0}")]
    Integrity(String),

    #[error("incompatible checkpoint version {found} (this build reads version {expected})")]
    Version { found: u32, expected: u32 },

    #[error("structural mismatch: {0}")]
    Structure(String),

    #[error("config error: {0}")]
    Config(String),

    #[error("run {run_id}: {source}")]
    Run { run_id: String, source: Box<Error> },

    #[error("tensor error: {0}")]
    Tensor(#[from] candle_core::Error),

    #[error("json error: {0}")]
    Json(#[from] serde_json::Error),

    #[error("image error: {0}")]
    Image(#[from] image::ImageError),

    #[error("csv error: {0}")]
    Csv(#[from] csv::Error),
}

pub type Result<T, E = Error> = std::result::Result<T, E>;
