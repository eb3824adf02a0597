//! A small reverse-mode automatic differentiation engine.
//!
//! Every forward pass records its operations on a [`Graph`]; calling
//! [`Graph::backward`] walks the tape in reverse and returns the gradient of
//! a scalar root with respect to every node that depends on a trainable leaf.
//! All arithmetic is `f64` so that finite-difference checks are meaningful.

mod graph;
mod gradcheck;
mod kernels;
mod optim;
mod params;
mod tensor;

pub use graph::{Gradients, Graph, Var, NONE};
pub use gradcheck::{check_gradients, GradCheckConfig, GradCheckReport, TensorCheck};
pub use optim::{Adam, AdamConfig};
pub use params::ParamSet;
pub use tensor::{Tensor, TensorError};
