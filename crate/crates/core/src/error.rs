use thiserror::Error;

/// Errors produced by the simulator core.
#[derive(Debug, Error)]
pub enum Error {
    /// Shapes, dimensions, or plan/arch pairings do not line up.
    #[error("structural error: {0}")]
    Structural(String),

    /// A non-finite value appeared where finite arithmetic is required.
    #[error("numeric error: {0}")]
    Numeric(String),

    /// An argument is outside its documented domain.
    #[error("domain error: {0}")]
    Domain(String),

    /// The requested dropout rate would leave a layer with no neurons.
    #[error("infeasible dropout rate {rate} for layer {layer}: no neurons would survive")]
    InfeasibleRate { layer: usize, rate: f64 },

    /// The per-round deadline cannot be met even by a fully pruned subnet.
    #[error("deadline {deadline_s} s infeasible for device(s) {devices:?}")]
    InfeasibleDeadline { deadline_s: f64, devices: Vec<usize> },

    /// A data file failed to parse.
    #[error("parse error at byte {offset}: {msg}")]
    Parse { offset: u64, msg: String },

    #[error(transparent)]
    Io(#[from] std::io::Error),
}

pub type Result<T> = std::result::Result<T, Error>;

impl Error {
    pub(crate) fn structural(msg: impl Into<String>) -> Self {
        Error::Structural(msg.into())
    }

    pub(crate) fn domain(msg: impl Into<String>) -> Self {
        Error::Domain(msg.into())
    }

    pub(crate) fn numeric(msg: impl Into<String>) -> Self {
        Error::Numeric(msg.into())
    }
}
