//! Single-layer spatiotemporal graph transformer for traffic forecasting.
//!
//! The crate bundles a small f64 autodiff engine, graph propagation over a
//! normalized operator, shared-QKV spatiotemporal attention in quadratic and
//! linearized forms, a recursive gated interaction block, a training pipeline
//! with masked metrics, and a closed-form FLOPs analyzer, plus the `stg` CLI
//! tying them together.

pub mod error;
pub mod rng;
pub mod tensor;
pub mod util;
pub mod sparse;
pub mod tape;
pub mod graph;
pub mod metrics;
pub mod embedding;
pub mod attention;
pub mod model;
pub mod data;
pub mod train;
pub mod flops;
pub mod verify;

pub use error::{Result, StgError};
pub use tensor::Tensor;
