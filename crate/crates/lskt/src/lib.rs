//! Knowledge tracing with learning-state extraction and cluster-masked
//! sparse attention.
//!
//! The crate is organized bottom-up:
//!
//! - [`numerics`]: dense f64 tensors, a reverse-mode autodiff tape, AdamW;
//! - [`embeddings`]: exercise/interaction features under the NI/1PL/2PL/3PL
//!   schemes, including the stochastic guessing perturbation;
//! - [`lse`]: causal dilated-convolution residual blocks extracting the
//!   learning state;
//! - [`state_attention`]: the cross-batch state pool, k-means clustering,
//!   and the two-branch sparse attention producing the knowledge state;
//! - [`model`]: the assembled network, loss, training loop, checkpoints,
//!   ablation variants, and a finite-difference gradient checker;
//! - [`data`]: CSV ingestion, sequence building, splits, and a synthetic
//!   interaction generator;
//! - [`metrics`]: AUC/ACC/RMSE/MAE;
//! - [`cli`]: the batch command surface used by the `lskt` binary.

pub mod cli;
pub mod data;
pub mod embeddings;
pub mod error;
pub mod lse;
pub mod metrics;
pub mod model;
pub mod numerics;
pub mod rng;
pub mod state_attention;

pub use error::{Error, Result};
