//! Reverse-mode automatic differentiation over dense 1-D/2-D arrays.
//!
//! A [`Graph`] records forward ops define-by-run; [`Graph::backward`]
//! replays it in reverse and returns per-parameter gradients. All values
//! are 64-bit: solver compositions through time amplify rounding too much
//! for f32.

mod gradcheck;
mod graph;
mod params;
mod tensor;

pub use gradcheck::grad_check;
pub use graph::{Graph, NodeId};
pub use params::{GradBuffer, ParamStore};
pub use tensor::Tensor;
