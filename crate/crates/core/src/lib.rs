//! RGB-X scene parsing at desk scale.
//!
//! A weight-sharing pyramid backbone encodes an RGB image and a spatially aligned
//! auxiliary map (depth, normals, thermal, polarization), per-modality enhancers split
//! the features into global and local parts, a dual-branch block fuses them stage by
//! stage, and a small multi-scale decoder predicts per-pixel classes. Everything runs on
//! the [`numerics`] tape in double precision.

pub mod data;
pub mod decoder;
pub mod encoder;
pub mod error;
pub mod eval;
pub mod fusion;
pub mod model;
pub mod numerics;
pub mod train;

pub use error::{Error, Result};
pub use model::{ModelConfig, Segmenter};
pub use numerics::{Graph, ParamGroup, ParamId, ParamStore, Tensor4, Var};
