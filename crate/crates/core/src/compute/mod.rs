//! Dense tensors, reverse-mode differentiation, parameters and checkpoints.

pub mod checkpoint;
mod gradcheck;
mod graph;
mod gru;
mod params;
mod scalar;
mod tensor;

pub use checkpoint::Checkpoint;
pub use gradcheck::{finite_difference_check, finite_difference_check_params, relative_error, FdMethod, GradCheckReport};
pub use graph::{Axis, Gradients, Graph, Var};
pub use params::{ParamId, ParameterStore};
pub use scalar::{Precision, Scalar};
pub use tensor::Tensor;
