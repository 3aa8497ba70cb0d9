//! A small define-by-run reverse-mode autodiff engine.
//!
//! Covers the operator set needed by transformer encoders/decoders, MLP heads
//! and strided convolutions, plus a [`CustomOp`] hook for kernels whose
//! gradients are derived by hand (such as a splatting renderer).

pub mod conv;
pub mod gemm;
mod graph;
mod optim;
mod params;

pub use graph::{ConvGeom, CustomOp, Grads, Graph, Var};
pub use optim::{clip_global_norm, global_norm, Adam};
pub use params::{Init, Param, ParamId, ParamStore};
