//! Dual-stream bird's-eye-view semantic scene completion.
//!
//! A single camera image plus its depth map is lifted into a voxel feature
//! grid, flattened to a BEV plane, and decoded by two cooperating query
//! streams — sparse instance queries with adaptive height sampling and
//! dense patch-level scene queries — whose BEV outputs are fused with
//! predicted height distributions into a dense semantic voxel volume.
//!
//! The crate is framework-free: tensors, layers, attention, losses, and
//! metrics are implemented directly, and every stochastic choice flows
//! through one seedable generator so a `(config, seed)` pair reproduces
//! results bit for bit.

pub mod bev;
pub mod config;
pub mod decoder;
pub mod error;
pub mod fusion;
pub mod geometry;
pub mod labels;
pub mod losses;
pub mod metrics;
pub mod nn;
pub mod pipeline;
pub mod query;
pub mod scene;
pub mod selftest;
pub mod tensor;

pub use error::{DiscError, Result};
pub use tensor::Tensor;
