//! Reverse-mode automatic differentiation.

mod graph;
mod params;

pub use graph::{Backward, Graph, Var, LAYER_NORM_EPS};
pub(crate) use graph::softplus;
pub use params::{Gradients, Param, ParamId, ParamStore};
