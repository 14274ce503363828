//! Minimal dense-tensor substrate with reverse-mode autodiff.
//!
//! A [`Graph`] records every operation of one forward pass; [`Graph::backward`]
//! walks it in reverse to accumulate gradients. Parameters live in a
//! [`ParamStore`] outside the graph, so multiple graphs (one per sample) can
//! run in parallel against a shared read-only store and merge their gradient
//! maps afterwards.
//!
//! Storage is f32 for training; every op is generic over [`Real`] so the
//! gradient checks can run an f64 shadow of the same code.

mod checkpoint;
mod graph;
mod layers;
mod params;
mod tensor;

pub use checkpoint::{load_checkpoint, save_checkpoint, Checkpoint, CHECKPOINT_MAGIC};
pub use graph::{Graph, NodeId};
pub use layers::{AttnBlock, AttnConfig, LayerNorm, Linear, Mlp};
pub use params::{AdamwConfig, GradMap, Param, ParamId, ParamStore};
pub use tensor::{Real, TensorData};
