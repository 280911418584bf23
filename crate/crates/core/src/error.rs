use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum Error {
    #[error("invalid parameter `{name}`: {reason}")]
    InvalidParameter { name: &'static str, reason: String },

    /// The requested δ is below what the sample batch can resolve.
    #[error("target below resolution: delta {target:e} is below the effective floor {floor:e} ({contributing} contributing samples)")]
    BelowResolution {
        target: f64,
        floor: f64,
        contributing: u64,
    },

    #[error("infeasible plan: {0}")]
    Infeasible(String),

    #[error("quadrature did not converge after {subdivisions} subdivisions (achieved error {achieved_error:e}, estimate {estimate:e})")]
    QuadratureNonConvergence {
        subdivisions: usize,
        estimate: f64,
        achieved_error: f64,
    },

    #[error("Renyi curve undefined at order {0}")]
    UndefinedOrder(f64),
}

pub(crate) fn invalid(name: &'static str, reason: impl Into<String>) -> Error {
    Error::InvalidParameter {
        name,
        reason: reason.into(),
    }
}
