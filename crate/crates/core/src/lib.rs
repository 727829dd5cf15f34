//! Lightweight fully-convolutional single-object tracking, from scratch.
//!
//! The crate provides the numerical substrate (dense 4-D tensors, direct
//! convolution, inference batchnorm), the model blocks (truncated
//! MobileNetV2-style backbone, pixel-wise correlation fusion, reparameterizable
//! center head), the training losses with analytic gradients, a one-pass
//! tracking pipeline, and one-pass evaluation metrics. Everything is CPU-only,
//! f32 tensors with f64 accumulation, deterministic under a fixed seed.
//!
//! Quick start:
//!
//! ```
//! use lightfc_core::config::RunConfig;
//! use lightfc_core::model::LightFc;
//!
//! let cfg = RunConfig::default();
//! let model = LightFc::random(&cfg).unwrap();
//! assert!(!model.is_fused());
//! ```
//!
//! The `lightfc` binary in this workspace wraps the pipeline as a CLI
//! (`track`, `eval`, `fuse`, `stats`, `synth`).

pub mod boxes;
pub mod config;
pub mod ecm;
pub mod error;
pub mod head;
pub mod init;
pub mod loss;
pub mod metrics;
pub mod model;
pub mod nn;
pub mod reparam;
pub mod seqio;
pub mod stats;
pub mod synth;
pub mod tensor;
pub mod track;
pub mod weights;

pub use boxes::BBox;
pub use error::{Error, Result};
pub use tensor::Tensor;
