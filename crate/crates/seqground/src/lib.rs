//! Simultaneous temporal grounding of an ordered sequence of instructional
//! diagrams in a video.
//!
//! The model is an encoder-free transformer decoder over *composite queries*:
//! every diagram feature is exhaustively paired with a small set of learnable
//! positional embeddings, so all diagrams of a manual are grounded in a single
//! forward pass. Self-attention among composite queries is restricted by
//! structured masks, cross-attention onto the video is guided jointly by
//! content similarity and positional similarity, and training uses restricted
//! per-diagram Hungarian matching with L1 / generalized-IoU / score losses.
//!
//! The crate ships the full pipeline: binary feature files and JSON manifests,
//! a planted-alignment synthetic data generator with an analytic oracle,
//! contrastive feature alignment, the decoder itself, the training loop, and
//! evaluation metrics with non-learning baselines. Everything numeric is
//! generic over the scalar type (`f32` or `f64`) via [`scalar::Scalar`].

pub mod align;
pub mod cli;
pub mod error;
pub mod hungarian;
pub mod io;
pub mod matching;
pub mod metrics;
pub mod model;
pub mod optim;
pub mod pe;
pub mod queries;
pub mod sampler;
pub mod scalar;
pub mod synth;
pub mod tensor;
pub mod trainer;
pub mod types;

pub use error::{Error, Result};

/// Default scalar used by the CLI pipeline.
pub type Real = f64;

/// Concrete aliases for the two supported precisions.
pub type ModelF32 = model::GroundingModel<f32>;
pub type ModelF64 = model::GroundingModel<f64>;
pub type ProjectionPairF32 = align::ProjectionPair<f32>;
pub type ProjectionPairF64 = align::ProjectionPair<f64>;
