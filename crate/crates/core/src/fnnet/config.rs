use serde::{Deserialize, Serialize};

use super::FnNetError;
use crate::diffcore::SoftThresholdKind;

/// Architecture and loss settings. Field names are the keys of the JSON
/// config file.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct FnNetConfig {
    pub channels: usize,
    pub n_clusters: usize,
    pub n_blocks_pre: usize,
    pub n_blocks_post: usize,
    pub n_fn_blocks: usize,
    pub threshold_kind: SoftThresholdKind,
    pub loss_alpha: f64,
    pub alpha_warmup_epochs: usize,
    /// When false, each filtering block is replaced by two plain PointCN
    /// blocks of the same depth (ablation).
    pub filter_noise: bool,
}

impl Default for FnNetConfig {
    fn default() -> Self {
        Self {
            channels: 32,
            n_clusters: 16,
            n_blocks_pre: 3,
            n_blocks_post: 3,
            n_fn_blocks: 2,
            threshold_kind: SoftThresholdKind::Linear,
            loss_alpha: 0.1,
            alpha_warmup_epochs: 2,
            filter_noise: true,
        }
    }
}

impl FnNetConfig {
    pub fn validate(&self) -> Result<(), FnNetError> {
        let bad = |m: &str| Err(FnNetError::InvalidConfig(m.to_string()));
        if self.channels < 4 {
            return bad("channels must be at least 4");
        }
        if self.n_clusters < 2 {
            return bad("n_clusters must be at least 2");
        }
        if self.n_blocks_pre == 0 || self.n_blocks_post == 0 || self.n_fn_blocks == 0 {
            return bad("block counts must be at least 1");
        }
        if !(self.loss_alpha >= 0.0 && self.loss_alpha.is_finite()) {
            return bad("loss_alpha must be finite and nonnegative");
        }
        Ok(())
    }

    /// Weight of the essential-matrix loss at `epoch` (0-based).
    pub fn alpha(&self, epoch: usize) -> f64 {
        if epoch < self.alpha_warmup_epochs {
            0.0
        } else {
            self.loss_alpha
        }
    }
}
