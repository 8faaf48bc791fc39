//! Minimal dense-tensor engine with reverse-mode autodiff.
//!
//! Everything the decoder needs is expressed on 2-D row-major buffers. A
//! [`Graph`] is a tape; building an op both computes its value and records
//! how to push gradients back to its inputs.

mod element;
mod graph;
pub mod kernels;

pub use element::{is_masked, Element, Precision};
pub use graph::{Graph, Mode, TensorNode, Var};
