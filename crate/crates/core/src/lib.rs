//! Sparse anchor-query 3D Gaussian generation.
//!
//! Learnable 3D anchor points are embedded as transformer queries, attend to
//! position-aware multi-view image tokens and are decoded into a compact set
//! of 3D Gaussians. Training reconstructs clean views from partially noised
//! inputs (rectified flow, predicting the clean sample) through a
//! differentiable splatting renderer.

pub mod config;
pub mod data;
pub mod encoder;
pub mod error;
pub mod expansion;
pub mod experiments;
pub mod fitting;
pub mod flow;
pub mod gaussians;
pub mod geometry;
pub mod gradcheck;
pub mod image;
pub mod infer;
pub mod metrics;
pub mod model;
pub mod nn;
pub mod objective;
pub mod splatter;
pub mod trainer;

pub use autodiff;
pub use error::{Error, Result};
