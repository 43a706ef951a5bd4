//! Dense `f64` tensors with tape-based reverse-mode differentiation, named
//! parameter storage, a momentum SGD optimizer, checkpoint I/O and a central
//! finite-difference gradient checker.

mod autodiff;
pub mod checkpoint;
mod gradcheck;
mod optim;
mod params;
mod tensor;

pub use autodiff::{sigmoid, softplus, Gradients, Graph, Var};
pub use gradcheck::{finite_diff_check, forward, GradCheckReport};
pub use optim::{Sgd, SgdConfig};
pub use params::{init_uniform, Param, ParamStore};
pub use tensor::Tensor;

#[derive(Debug, thiserror::Error)]
pub enum NumericsError {
    #[error("shape mismatch: {0}")]
    Shape(String),
    #[error("non-finite value produced by {op} at {location}")]
    NonFinite { op: String, location: String },
    #[error("finite-difference step must be positive, got {0}")]
    InvalidEpsilon(f64),
    #[error("unknown parameter {0:?}")]
    UnknownParam(String),
    #[error("duplicate parameter {0:?}")]
    DuplicateParam(String),
    #[error("parameter {0:?} is frozen")]
    FrozenParam(String),
    #[error("checkpoint: {0}")]
    Checkpoint(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Json(#[from] serde_json::Error),
}
