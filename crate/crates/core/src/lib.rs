//! Geometry-aware operator-learning surrogate for crash dynamics.
//!
//! The crate provides, from scratch:
//!
//! * `numcore` — dense tensors with logical-byte allocation tracking and a
//!   reverse-mode autodiff graph;
//! * `attn` — physics attention over learnable slices, low-rank latent
//!   routing (FLARE), point-to-context cross-attention, and the gated block
//!   combining them;
//! * `geo` — ball-query neighborhoods, multi-scale geometric features, and
//!   the context projector;
//! * `model` — the Transolver / GeoTransolver / GeoTransolver-with-FLARE
//!   backbones plus checkpoint I/O;
//! * `temporal` — autoregressive, teacher-forcing, one-shot, and
//!   time-conditional trajectory prediction with explicit Euler integration;
//! * `crashdata` — a synthetic elastoplastic beam-lattice crash generator,
//!   DoE sweeps, and the binary dataset container;
//! * `trainer` — Adam optimization, run ledgers, and evaluation.
//!
//! All numerics are generic over the scalar type: `f32` for training, `f64`
//! for the verification suites.

pub mod attn;
pub mod crashdata;
pub mod error;
pub mod geo;
pub mod model;
pub mod numcore;
pub mod scalar;
pub mod temporal;
pub mod trainer;

pub use error::{Error, Result};
pub use numcore::{Graph, NodeId, ParamId, ParamStore, Tensor};
pub use scalar::Scalar;

/// Training-precision tensor.
pub type Tensor32 = Tensor<f32>;
/// Verification-precision tensor.
pub type Tensor64 = Tensor<f64>;
/// Training-precision graph.
pub type Graph32 = Graph<f32>;
/// Verification-precision graph.
pub type Graph64 = Graph<f64>;
