//! Learned outlier rejection for two-view correspondences.
//!
//! - [`diffcore`]: tensors and reverse-mode differentiation
//! - [`geometry`]: essential matrices, epipolar distances, weighted
//!   eight-point estimation and pose recovery
//! - [`datagen`]: synthetic scenes, correspondence corruption and the
//!   `.jsonl` dataset format
//! - [`fnnet`]: the filtering network, its loss and checkpoints
//! - [`pipeline`]: RANSAC, evaluation metrics and training

pub mod diffcore;
mod jsonfmt;
pub mod datagen;
pub mod fnnet;
pub mod geometry;
pub mod pipeline;
