use thiserror::Error;

/// Errors raised by the engine. Infeasible counterfactual searches are not
/// errors; they come back as [`crate::generate::GenerationOutcome::Infeasible`].
#[derive(Debug, Error, Clone, PartialEq)]
pub enum Error {
    #[error("domain error: {0}")]
    Domain(String),

    #[error("degenerate weights: {0}")]
    DegenerateWeights(String),

    #[error("consistency error: {0}")]
    Consistency(String),

    #[error("insufficient data: {0}")]
    InsufficientData(String),

    #[error("shape mismatch: expected {expected}, got {got}")]
    Shape { expected: usize, got: usize },

    #[error("index {index} out of range (len {len})")]
    Index { index: usize, len: usize },

    #[error("singular system: {0}")]
    Singular(String),

    #[error("labeling backend failed: {0}")]
    Labeling(String),

    #[error("configuration error: {0}")]
    Config(String),

    #[error("resource limit exceeded: {0}")]
    Resource(String),

    #[error("infeasible: {0}")]
    Infeasible(String),

    #[error("data error: {0}")]
    Data(String),

    #[error("schema version mismatch: file has {found}, engine expects {expected}")]
    Version { found: u32, expected: u32 },
}

pub type Result<T> = std::result::Result<T, Error>;
