use thiserror::Error;

/// Errors raised by the optimizer and its diagnostics.
#[derive(Debug, Clone, PartialEq, Error)]
pub enum CboError {
    #[error("dimension error: {0}")]
    Dimension(String),

    #[error("invalid parameter `{name}`: {reason}")]
    InvalidParameter { name: String, reason: String },

    #[error("objective value at particle {index} is not finite ({value})")]
    NonFiniteObjective { index: usize, value: f64 },

    #[error("run diverged at step {step}: particle {particle} has a non-finite coordinate")]
    Diverged { step: u64, particle: usize },

    #[error("particle {particle} reached the origin at step {step}; sphere projection is undefined")]
    Singularity { step: u64, particle: usize },

    #[error("empty batch")]
    EmptyBatch,

    #[error("unknown {kind} `{name}`")]
    Unknown { kind: &'static str, name: String },

    #[error("configuration error: {0}")]
    Config(String),
}

impl CboError {
    pub(crate) fn param(name: &str, reason: impl Into<String>) -> Self {
        CboError::InvalidParameter {
            name: name.to_string(),
            reason: reason.into(),
        }
    }

    /// True when the error stems from numerical breakdown of a run rather
    /// than from bad input.
    pub fn is_divergence(&self) -> bool {
        matches!(self, CboError::Diverged { .. } | CboError::Singularity { .. })
    }
}

pub type Result<T> = std::result::Result<T, CboError>;
