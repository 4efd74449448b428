//! Minimal dense-tensor library with a tape-based reverse-mode autodiff.
//!
//! Values live in [`Tensor`] (row-major `f64`). Computation is recorded on a
//! [`Graph`], whose nodes are addressed by copyable [`Var`] handles. Trainable
//! weights live in a [`ParamStore`] and are bound into a graph per forward pass;
//! [`Graph::backward`] produces [`Gradients`] that can be folded back into the
//! store.

mod checkpoint;
mod error;
mod gradcheck;
mod graph;
pub mod kernels;
mod params;
mod rng;
mod tensor;

pub use checkpoint::{load_checkpoint, read_checkpoint, save_checkpoint, write_checkpoint};
pub use error::{Result, TensorError};
pub use gradcheck::{grad_check, grad_check_with, GradCheckOptions, GradCheckReport};
pub use graph::{Activation, Gradients, Graph, Precision, Var};
pub use params::{Init, ParamId, ParamStore, Parameter};
pub use rng::SeedRng;
pub use tensor::Tensor;
