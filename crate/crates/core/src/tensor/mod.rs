//! Dense matrices, parameters, reverse-mode differentiation and Adam.

mod adam;
mod matrix;
mod param;
mod tape;

pub use adam::{adam_step, Adam, AdamConfig};
pub use matrix::{cholesky, flatten_lower, lower_len, unflatten_lower, Matrix};
pub use param::{glorot_uniform, Param, ParamId, ParamStore};
pub use tape::{sigmoid, softplus, Gradients, Tape, Var};
