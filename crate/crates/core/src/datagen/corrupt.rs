use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use super::record::DatasetRecord;
use super::scene::{SceneConfig, ScenePair};
use super::DataGenError;
use crate::geometry::{classify_by_epipolar, essential_from_pose, normalize_points};

/// Symmetric-epipolar-distance threshold that defines a ground-truth inlier.
pub const INLIER_THRESHOLD: f64 = 1e-4;

const MAX_ATTEMPTS: u64 = 10;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct NoiseConfig {
    pub n_total: usize,
    pub outlier_ratio: f64,
    pub inlier_jitter_px: f64,
    /// Share of outliers made by displacing a true match in image 2; the
    /// rest pair an image-1 point with a uniform random image-2 location.
    pub drift_fraction: f64,
    pub drift_px: f64,
    pub seed: u64,
}

impl Default for NoiseConfig {
    fn default() -> Self {
        Self {
            n_total: 512,
            outlier_ratio: 0.5,
            inlier_jitter_px: 0.5,
            drift_fraction: 0.5,
            drift_px: 20.0,
            seed: 0,
        }
    }
}

impl NoiseConfig {
    pub fn n_inliers(&self) -> usize {
        ((1.0 - self.outlier_ratio) * self.n_total as f64).round() as usize
    }

    pub fn validate(&self) -> Result<(), DataGenError> {
        let bad = |msg: String| Err(DataGenError::InvalidConfig(msg));
        if self.n_total < 16 {
            return bad(format!("n_total must be at least 16, got {}", self.n_total));
        }
        if !(0.0..1.0).contains(&self.outlier_ratio) {
            return bad(format!("outlier_ratio must lie in [0, 1), got {}", self.outlier_ratio));
        }
        if !(0.0..=1.0).contains(&self.drift_fraction) {
            return bad(format!("drift_fraction must lie in [0, 1], got {}", self.drift_fraction));
        }
        if !(self.inlier_jitter_px >= 0.0 && self.drift_px >= 0.0) {
            return bad("pixel noise magnitudes must be nonnegative".into());
        }
        if self.n_inliers() < 8 {
            return bad(format!("only {} inliers for {} correspondences", self.n_inliers(), self.n_total));
        }
        Ok(())
    }
}

fn corrupt_once(
    scene: &ScenePair,
    noise: &NoiseConfig,
    image: &SceneConfig,
    seed: u64,
    pair_id: &str,
) -> Result<DatasetRecord, DataGenError> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let n = noise.n_total;
    let n_out = n - noise.n_inliers();
    let n_drift = (noise.drift_fraction * n_out as f64).round() as usize;
    let jitter = Normal::new(0.0, noise.inlier_jitter_px).expect("nonnegative std-dev");
    let drift = Normal::new(noise.drift_px, noise.drift_px / 4.0).expect("nonnegative std-dev");
    let min_drift = 10.0 * noise.inlier_jitter_px;

    let mut corrs = Vec::with_capacity(n);
    for i in 0..n {
        let mut c = scene.project(i);
        for v in c.iter_mut() {
            *v += jitter.sample(&mut rng);
        }
        if i >= n - n_out {
            if i < n - n_out + n_drift {
                let angle = rng.random_range(0.0..std::f64::consts::TAU);
                let mag = drift.sample(&mut rng).max(min_drift);
                c[2] += angle.cos() * mag;
                c[3] += angle.sin() * mag;
            } else {
                c[2] = rng.random_range(0.0..image.image_size);
                c[3] = rng.random_range(0.0..image.image_size);
            }
        }
        corrs.push(c);
    }
    corrs.shuffle(&mut rng);

    let e_gt = essential_from_pose(&scene.pose)?;
    let labels = classify_by_epipolar(&normalize_points(&corrs, &scene.k1, &scene.k2), &e_gt, INLIER_THRESHOLD);
    Ok(DatasetRecord::new(pair_id.to_string(), scene, corrs, labels))
}

/// Builds one labeled record from a scene: jittered true matches, drifted
/// matches and random re-pairings, shuffled. Labels are recomputed from the
/// epipolar threshold, never taken from the construction. If fewer than 8
/// correspondences end up labeled inliers the noise is redrawn with a
/// perturbed seed, up to 10 times.
pub fn corrupt(
    scene: &ScenePair,
    noise: &NoiseConfig,
    image: &SceneConfig,
    pair_id: &str,
) -> Result<DatasetRecord, DataGenError> {
    noise.validate()?;
    if scene.points3d.len() < noise.n_total {
        return Err(DataGenError::InvalidConfig(format!(
            "scene has {} points, {} correspondences requested",
            scene.points3d.len(),
            noise.n_total
        )));
    }
    for attempt in 0..MAX_ATTEMPTS {
        let record = corrupt_once(scene, noise, image, noise.seed.wrapping_add(attempt), pair_id)?;
        if record.labels.iter().filter(|&&l| l).count() >= 8 {
            return Ok(record);
        }
    }
    Err(DataGenError::InsufficientInliers { attempts: MAX_ATTEMPTS })
}
