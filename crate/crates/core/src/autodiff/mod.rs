//! Minimal reverse-mode automatic differentiation.
//!
//! Forward operations on [`Tensor`] values are recorded on a [`Graph`]
//! (a linear tape); [`Graph::backward`] replays the tape in reverse and
//! accumulates gradients into every `requires_grad` tensor reachable from
//! the loss. The engine is strictly first-order: backward never records,
//! so a gradient can never be differentiated through.

mod graph;
mod params;
mod tensor;

pub use graph::{Graph, Primitive};
pub use params::{clip_grad_norm, sgd_step, ParamStore, ParamView};
pub use tensor::Tensor;
