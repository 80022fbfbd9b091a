//! Dense N-D tensors with a recorded computation graph and reverse-mode
//! differentiation.
//!
//! Volumetric tensors use the layout `[channels, x, y, z]` in row-major
//! order (z varies fastest). A [`Graph`] records every operation applied to
//! its [`Var`] handles; [`Graph::backward`] then accumulates gradients in
//! reverse append order.
//!
//! All arithmetic is 64-bit. Kernels that run on several threads split work
//! by output element only, so results are bitwise identical for any thread
//! count.

mod adam;
mod error;
pub mod gradcheck;
mod graph;
mod kernels;
pub mod rng;
mod tensor;

pub use adam::{adam_step, AdamConfig, AdamState};
pub use error::{Result, TensorError};
pub use graph::{Gradients, Graph, Mode, Var};
pub use kernels::box_mean3d;
pub use tensor::Tensor;
