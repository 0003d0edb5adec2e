//! Reverse-mode differentiation over dense `f64` tensors.
//!
//! A [`Graph`] records one forward computation; [`Graph::backward`] replays
//! it in reverse and accumulates parameter gradients into a [`ParamStore`].
//! Feature maps are laid out channels-by-points (`C×N`).

mod error;
mod graph;
mod optim;
mod param;
mod tensor;

pub use error::{DiffError, Result};
pub use graph::{
    sigmoid, soft_threshold_value, BnMode, CustomOp, Gradients, Graph, RunningStats,
    SoftThresholdKind, Var, BN_MOMENTUM, NORM_EPS,
};
pub use optim::{Adam, AdamConfig};
pub use param::{ParamId, ParamStore, Parameter};
pub use tensor::Tensor;
