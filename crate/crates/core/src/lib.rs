//! Online test-time adaptation of a toy differentiable BEV detector to
//! shifted synthetic scene streams.
//!
//! The pipeline: a per-cell MLP detector pretrained on clean synthetic
//! scenes is adapted, one pass and batch by batch, to a corrupted stream.
//! Each step applies worst-case perturbations to both the weights and the
//! input feature grids, filters pseudo-labels through an optimal bipartite
//! matcher with quantile reliability tiers, takes an SGD step at the doubly
//! perturbed point, and halts early once the moving average of matching
//! costs falls below a threshold. KITTI-style average precision and an
//! ablation harness provide the measurement side.

pub mod adapt;
pub mod config;
pub mod detector;
pub mod eval;
pub mod geom3d;
pub mod io;
pub mod matcher;
pub mod perturb;
pub mod scene_gen;

#[cfg(test)]
pub mod testutil;

pub use geom3d::{Box3D, ScoredBox};
