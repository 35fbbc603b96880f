//! Differentiable tensor substrate: a channel-last `f64` tensor, a reverse-mode tape,
//! parameter storage and the small set of layers every model component is built from.

pub mod gradcheck;
mod graph;
pub(crate) mod kernels;
pub mod layers;
mod params;
mod tensor;

pub use graph::{Activation, Graph, Var, LAYER_NORM_EPS_FLOOR};
pub use kernels::ConvSpec;
pub use params::{Gradients, Init, ParamGroup, ParamId, ParamKind, ParamStore, Parameter};
pub use tensor::{numel, strides, Shape, Tensor4};
