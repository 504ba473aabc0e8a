//! Few-shot segmentation with a prompted transformer encoder.
//!
//! The crate builds the full pipeline from scratch on an f64 gradient tape:
//! a plain ViT encoder, Voronoi background partitioning, class-aware prompt
//! generation with a learnable token pool, a two-branch forward pass with
//! per-block prompt synchronization, feature/prompt proxy extraction, the
//! cosine-similarity classification head with its pairwise loss, a synthetic
//! episodic shape dataset, and a deterministic training/evaluation harness.

pub mod checkpoint;
pub mod config;
pub mod episodes;
pub mod error;
pub mod harness;
pub mod model;
pub mod netpbm;
pub mod objective;
pub mod params;
pub mod partition;
pub mod prompt;
pub mod rng;
pub mod tensor;
pub mod vit;

pub use error::{Error, Result};
pub use tensor::{Tape, Tensor, TensorId};
