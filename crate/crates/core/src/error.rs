use crate::params::EiState;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("invalid parameters: {0}")]
    InvalidParams(String),

    #[error("invalid configuration: {0}")]
    InvalidConfig(String),

    #[error("unstable parameters: lambda = {lambda} must be below mu = {mu}")]
    Unstable { lambda: f64, mu: f64 },

    #[error("moments cannot be inverted: {reason} (moments: {moments})")]
    MomentInversion { reason: String, moments: String },

    #[error("truncation too aggressive: row {row:?} loses {deficit:.4} of its mass")]
    TruncationTooAggressive { row: EiState, deficit: f64 },

    #[error("integration box leaks {leak:.3e} of probability mass")]
    LeakedMass { leak: f64 },

    #[error("observation {index} has value {value} above the emission bound {m_obs}")]
    ObservationExceedsBound { index: usize, value: u32, m_obs: u32 },

    #[error("shape mismatch: {0}")]
    Shape(String),

    #[error("every start failed: {0}")]
    AllStartsFailed(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Csv(#[from] csv::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

impl Error {
    /// True for errors caused by the numbers rather than by the inputs' shape.
    pub fn is_numeric(&self) -> bool {
        matches!(
            self,
            Error::Unstable { .. }
                | Error::MomentInversion { .. }
                | Error::TruncationTooAggressive { .. }
                | Error::LeakedMass { .. }
                | Error::AllStartsFailed(_)
        )
    }
}
