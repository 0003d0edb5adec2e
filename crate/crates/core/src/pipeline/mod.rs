//! Orchestration: RANSAC baseline, evaluation metrics, and training with
//! checkpoints.

mod evaluate;
mod metrics;
mod ransac;
mod train;

use thiserror::Error;

use crate::datagen::DataGenError;
use crate::fnnet::FnNetError;
use crate::geometry::GeometryError;

pub use evaluate::{
    evaluate, EvalOptions, EvalReport, GroundTruthPredictor, NetPredictor, PairError, Prediction, Predictor,
    RansacPredictor,
};
pub use metrics::{map5, ClassCounts, DECOMPOSITION_FAILURE_DEG};
pub use ransac::{ransac_essential, RansacConfig, RansacResult};
pub use train::{train, EpochLog, TrainConfig};

#[derive(Debug, Clone, PartialEq, Error)]
pub enum PipelineError {
    #[error("invalid config: {0}")]
    InvalidConfig(String),
    #[error("dataset is empty")]
    EmptyDataset,
    #[error("need at least 8 correspondences, got {0}")]
    TooFewCorrespondences(usize),
    #[error("non-finite loss at epoch {epoch} on `{pair_id}`; the last checkpoint was kept")]
    NonFiniteLoss { epoch: usize, pair_id: String },
    #[error("{path}: {message}")]
    Io { path: String, message: String },
    #[error(transparent)]
    Net(#[from] FnNetError),
    #[error(transparent)]
    Geometry(#[from] GeometryError),
    #[error(transparent)]
    Data(#[from] DataGenError),
}
