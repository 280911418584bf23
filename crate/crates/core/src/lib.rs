pub mod accountant;
pub mod error;
pub mod estimators;
pub mod evr;
pub mod mechanism;
pub mod moment_bounds;
pub mod numerics;
pub mod oracle;
pub mod quadrature;
pub mod rng;

pub use error::{Error, Result};
