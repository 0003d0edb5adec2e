use rand::seq::index::sample;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::PipelineError;
use crate::datagen::INLIER_THRESHOLD;
use crate::geometry::{symmetric_epipolar_distance, weighted_eight_point, CorrespondenceSet, EssentialMatrix};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RansacConfig {
    pub iterations: usize,
    /// Symmetric epipolar distance below which a correspondence supports a
    /// hypothesis (normalized coordinates).
    pub threshold: f64,
    pub seed: u64,
}

impl Default for RansacConfig {
    fn default() -> Self {
        Self {
            iterations: 1000,
            threshold: INLIER_THRESHOLD,
            seed: 0,
        }
    }
}

impl RansacConfig {
    pub fn validate(&self) -> Result<(), PipelineError> {
        if self.iterations == 0 {
            return Err(PipelineError::InvalidConfig("ransac iterations must be at least 1".into()));
        }
        if !(self.threshold > 0.0 && self.threshold.is_finite()) {
            return Err(PipelineError::InvalidConfig("ransac threshold must be positive".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct RansacResult {
    pub essential: EssentialMatrix,
    pub inliers: Vec<bool>,
    /// No hypothesis gathered eight supporting correspondences; `essential`
    /// is the best-supported hypothesis (or the all-points fit when every
    /// minimal sample was degenerate).
    pub failed: bool,
}

fn support(corrs: &CorrespondenceSet, e: &EssentialMatrix, tau: f64) -> Vec<bool> {
    corrs
        .points
        .iter()
        .map(|p| symmetric_epipolar_distance([p[0], p[1]], [p[2], p[3]], e) < tau)
        .collect()
}

/// Hypothesize-and-verify with minimal eight-point samples, then refit on
/// the best consensus set. Deterministic for a given seed.
pub fn ransac_essential(corrs: &CorrespondenceSet, cfg: &RansacConfig) -> Result<RansacResult, PipelineError> {
    cfg.validate()?;
    let n = corrs.len();
    if n < 8 {
        return Err(PipelineError::TooFewCorrespondences(n));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut best: Option<(usize, EssentialMatrix, Vec<bool>)> = None;
    let mut weights = vec![0.0; n];
    for _ in 0..cfg.iterations {
        let idx = sample(&mut rng, n, 8);
        weights.fill(0.0);
        idx.iter().for_each(|i| weights[i] = 1.0);
        let Ok(e) = weighted_eight_point(corrs, &weights) else {
            continue;
        };
        let mask = support(corrs, &e, cfg.threshold);
        let count = mask.iter().filter(|&&m| m).count();
        if best.as_ref().is_none_or(|b| count > b.0) {
            best = Some((count, e, mask));
        }
    }
    let Some((count, e, mask)) = best else {
        let e = weighted_eight_point(corrs, &vec![1.0; n])?;
        return Ok(RansacResult {
            essential: e,
            inliers: vec![false; n],
            failed: true,
        });
    };
    if count < 8 {
        return Ok(RansacResult {
            essential: e,
            inliers: mask,
            failed: true,
        });
    }
    let w: Vec<f64> = mask.iter().map(|&m| if m { 1.0 } else { 0.0 }).collect();
    match weighted_eight_point(corrs, &w) {
        Ok(refit) => {
            let inliers = support(corrs, &refit, cfg.threshold);
            Ok(RansacResult {
                essential: refit,
                inliers,
                failed: false,
            })
        }
        Err(_) => Ok(RansacResult {
            essential: e,
            inliers: mask,
            failed: false,
        }),
    }
}
