pub mod data;
pub mod encoder;
pub mod error;
pub mod imputation;
pub mod manifold;
pub mod metrics;
pub mod model;
pub mod ode;
pub mod rgru;
pub mod tensor;

pub use error::{Error, Result};
