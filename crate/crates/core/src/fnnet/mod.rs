//! The filtering network: residual point blocks, differentiable
//! clustering, soft-threshold filtering blocks, the inlier head, the
//! training loss and checkpoints.

mod checkpoint;
mod config;
pub mod layers;
mod model;
mod ops;

use thiserror::Error;

use crate::diffcore::DiffError;
use crate::geometry::GeometryError;

pub use checkpoint::{read_checkpoint, write_checkpoint, Checkpoint};
pub use config::FnNetConfig;
pub use layers::{BatchNorm, Ctx, DiffPool, DiffUnpool, FnBlock, FnBlockTrace, Linear, PointCnBlock, Weights};
pub use model::{FnNet, Forward, LossTerms, PredictionOutput, MIN_CORRESPONDENCES};

#[derive(Debug, Clone, PartialEq, Error)]
pub enum FnNetError {
    #[error("invalid network config: {0}")]
    InvalidConfig(String),
    #[error("need at least 8 correspondences, got {0}")]
    TooFewCorrespondences(usize),
    #[error("{labels} labels for {points} correspondences")]
    LabelCount { labels: usize, points: usize },
    #[error("checkpoint: {0}")]
    Checkpoint(String),
    #[error("{path}: {message}")]
    Io { path: String, message: String },
    #[error(transparent)]
    Diff(#[from] DiffError),
    #[error(transparent)]
    Geometry(#[from] GeometryError),
}
