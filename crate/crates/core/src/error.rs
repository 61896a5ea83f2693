use thiserror::Error;

pub type Result<T> = std::result::Result<T, UdmError>;

#[derive(Debug, Clone, Error)]
pub enum UdmError {
    #[error("invalid parameter: {0}")]
    InvalidParameter(String),

    #[error("invalid synthesis spec: {0}")]
    InvalidSpec(String),

    #[error("ill-conditioned problem: {0}")]
    IllConditioned(String),

    #[error("near-repeated poles {first} and {second} (distance {distance:.3e})")]
    DegeneratePoles {
        first: num_complex::Complex64,
        second: num_complex::Complex64,
        distance: f64,
    },

    #[error("degenerate model: {0}")]
    DegenerateModel(String),

    #[error("degenerate decomposition: {0}")]
    DegenerateDecomposition(String),

    #[error("numeric failure: {0}")]
    Numeric(String),

    #[error("solver did not converge after {iterations} iterations (KKT residual {residual:.3e})")]
    NonConverged {
        iterations: usize,
        residual: f64,
        best: Vec<f64>,
    },

    #[error("no valley-peak pair reaches the minimum amplitude")]
    EmptySna,

    #[error("observed series has zero variance")]
    UndefinedVariance,

    #[error("insufficient data: {0}")]
    InsufficientData(String),
}

impl UdmError {
    pub(crate) fn invalid(msg: impl Into<String>) -> Self {
        UdmError::InvalidParameter(msg.into())
    }
}
