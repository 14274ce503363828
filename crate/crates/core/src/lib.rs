//! Intention-based integrated prediction and planning for autonomous driving.
//!
//! The pipeline: traffic scenarios (agent histories, map polylines, route
//! polylines) are normalized to the ego frame and tensorized; intention
//! points are sampled along the route for the ego and taken from clustered
//! trajectory endpoints for surrounding agents; attention-based encoders
//! build context and route embeddings; an iterative intention-query decoder
//! emits multimodal prediction and planning trajectories with confidence
//! scores. Training, displacement metrics, a closed-loop simulation harness
//! (log-replay / IDM agents), and rule-based trajectory post-processing
//! round out the stack.
//!
//! Everything runs on a small self-contained tensor library with
//! reverse-mode autodiff (`nn`); no external ML framework is involved.
//!
//! Batch-level work (per-sample gradients, evaluation, rollout scoring) is
//! data-parallel via rayon when the `parallel` feature is enabled (default)
//! and falls back to sequential iteration otherwise. Both paths produce
//! bit-identical results.

pub mod cli;
pub mod config;
pub mod decoder;
pub mod encoders;
pub mod error;
pub mod geom;
pub mod intention;
pub mod metrics;
pub mod model;
pub mod nn;
pub mod parallel;
pub mod postprocess;
pub mod scene;
pub mod sim;
pub mod synthetic;
pub mod training;

pub use error::{Error, Result};
