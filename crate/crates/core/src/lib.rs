//! Weakly-supervised global action segmentation.
//!
//! Learns frame embeddings from video pairs labeled only "same activity /
//! different activity", then segments and clusters actions across videos of
//! different activities:
//!
//! - [`dataio`]: dataset ingestion, temporal downsampling, synthetic data.
//! - [`model`]: the Siamese trunk (multi-stage temporal encoder with windowed
//!   local + strided long-range attention), the drop-context network, and
//!   k-means cluster-head initialization.
//! - [`losses`]: the triadic objective (temporal smoothing + cyclic term,
//!   drop-gated cycle-back alignment, activity-level margin contrastive).
//! - [`training`]: pair construction, stratified epoch sampling, two-stage
//!   Adam loop.
//! - [`decode`]: bag-of-words grouping, per-group action clustering, ordered
//!   Viterbi decoding with a background model.
//! - [`eval`]: global Hungarian matching and the MoF / F1 / MoF-BG metrics.
//! - [`cli`]: the `synth` / `train` / `segment` / `eval` / `pipeline`
//!   commands.
//!
//! Everything is `f64`, dependency-free, and deterministic given seeds.

pub mod assignment;
pub mod autodiff;
pub mod cli;
pub mod config;
pub mod dataio;
pub mod decode;
mod error;
pub mod eval;
pub mod kmeans;
pub mod losses;
pub mod model;
pub mod rng;
pub mod tensor;
pub mod training;

pub use error::{Error, Result};
