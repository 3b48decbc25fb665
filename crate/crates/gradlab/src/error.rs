use thiserror::Error;

#[derive(Error, Debug)]
pub enum GradLabError {
    /// No CTC path can align the transcript to the given number of frames.
    #[error("infeasible alignment: transcript needs at least {required} frames, got {frames}")]
    InfeasibleAlignment { required: usize, frames: usize },

    #[error("enumeration too large: T={frames}, alphabet+blank={symbols} exceeds brute-force bounds")]
    EnumerationTooLarge { frames: usize, symbols: usize },

    #[error("shape mismatch: expected {expected}, got {got}")]
    ShapeMismatch { expected: String, got: String },

    #[error("zero gradient: cosine distance undefined ({side} gradient has zero norm)")]
    ZeroGradient { side: &'static str },

    #[error("degenerate std: feature dimension {dim} is constant (std < 1e-12)")]
    DegenerateStd { dim: usize },

    #[error("insufficient corpus: {0}")]
    InsufficientCorpus(String),

    #[error("invalid config: {0}")]
    InvalidConfig(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),

    #[error(transparent)]
    Csv(#[from] csv::Error),
}

pub type Result<T> = std::result::Result<T, GradLabError>;
