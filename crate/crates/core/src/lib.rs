//! Exemplar-guided contrastive scoring of detection proposals.
//!
//! The crate is organized bottom-up:
//!
//! - [`tensor`], [`graph`], [`params`], [`optim`], [`gradcheck`]: a small f64
//!   tensor engine with reverse-mode gradients, Adam and a finite-difference checker.
//! - [`synth`]: seeded synthetic scenes, proposals and pyramid features.
//! - [`exemplar`]: k-means exemplar dictionaries and occluded rebalancing.
//! - [`learner`]: the per-level transformation and projection networks,
//!   InfoNCE losses and the offline/online training loops.
//! - [`ann`]: per-level HNSW graphs over exemplar embeddings.
//! - [`eval`]: collaborative confidence, matching, MR-2 and the ablation runner.
//! - [`pipeline`]: the stage functions shared by the CLI and the ablation runner.
//! - [`cli`]: configuration, manifests and the pipeline commands.

pub mod ann;
mod binio;
pub mod cli;
pub mod eval;
pub mod error;
pub mod exemplar;
pub mod fsutil;
pub mod gradcheck;
pub mod learner;
pub mod graph;
pub mod levels;
pub mod optim;
pub mod params;
pub mod pipeline;
pub mod rng;
pub mod synth;
pub mod tensor;

pub use error::{Error, Result};
