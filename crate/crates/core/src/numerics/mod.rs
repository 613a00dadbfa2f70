//! Dense `f64` tensors, a reverse-mode tape, and optimizers.

mod gradcheck;
mod optim;
mod params;
mod tape;
mod tensor;

pub use gradcheck::{compare_with_central_difference, finite_difference_check, finite_difference_check_params};
pub use optim::{OptimizerKind, OptimizerState};
pub use params::{xavier_uniform, Param, ParamId, ParamStore};
pub use tape::{sigmoid, softmax_values, Tape, Var};
pub use tensor::{argmax, softmax, Tensor};

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum NumericsError {
    #[error("shape error: {0}")]
    Shape(String),
    #[error("domain error: {0}")]
    Domain(String),
    #[error("usage error: {0}")]
    Usage(String),
    #[error("non-finite value: {0}")]
    NonFinite(String),
}
