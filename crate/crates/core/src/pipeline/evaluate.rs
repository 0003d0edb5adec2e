use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::metrics::{map5, ClassCounts, DECOMPOSITION_FAILURE_DEG};
use super::ransac::{ransac_essential, RansacConfig};
use super::PipelineError;
use crate::datagen::{derive_seed, DatasetRecord};
use crate::fnnet::FnNet;
use crate::geometry::{decompose_essential, pose_angular_errors, CorrespondenceSet, EssentialMatrix};

/// Seed stream reserved for per-pair RANSAC runs.
const RANSAC_STREAM: u64 = 0x7261_6e73;

/// An essential-matrix estimate with the correspondences it deems inliers.
#[derive(Debug, Clone, PartialEq)]
pub struct Prediction {
    pub essential: EssentialMatrix,
    pub inliers: Vec<bool>,
}

/// Anything that maps a record to an estimate. Implementations must be
/// pure per record so evaluation can fan out.
pub trait Predictor: Sync {
    fn name(&self) -> &'static str;
    fn predict(&self, record: &DatasetRecord, corrs: &CorrespondenceSet) -> Result<Prediction, PipelineError>;
}

/// The network; a correspondence is an inlier when its weight is positive.
pub struct NetPredictor<'a>(pub &'a FnNet);

impl Predictor for NetPredictor<'_> {
    fn name(&self) -> &'static str {
        "fnnet"
    }

    fn predict(&self, _: &DatasetRecord, corrs: &CorrespondenceSet) -> Result<Prediction, PipelineError> {
        let out = self.0.predict(corrs)?;
        Ok(Prediction {
            essential: out.essential,
            inliers: out.weights.iter().map(|&w| w > 0.0).collect(),
        })
    }
}

/// Plain RANSAC over all correspondences. Each pair gets its own seed,
/// derived from the configured seed and the pair id.
pub struct RansacPredictor(pub RansacConfig);

fn pair_ransac(cfg: &RansacConfig, pair_id: &str) -> RansacConfig {
    RansacConfig {
        seed: derive_seed(cfg.seed, pair_id, RANSAC_STREAM),
        ..*cfg
    }
}

impl Predictor for RansacPredictor {
    fn name(&self) -> &'static str {
        "ransac"
    }

    fn predict(&self, record: &DatasetRecord, corrs: &CorrespondenceSet) -> Result<Prediction, PipelineError> {
        let r = ransac_essential(corrs, &pair_ransac(&self.0, &record.pair_id))?;
        Ok(Prediction {
            essential: r.essential,
            inliers: r.inliers,
        })
    }
}

/// Returns the true essential matrix and labels.
pub struct GroundTruthPredictor;

impl Predictor for GroundTruthPredictor {
    fn name(&self) -> &'static str {
        "ground_truth"
    }

    fn predict(&self, record: &DatasetRecord, _: &CorrespondenceSet) -> Result<Prediction, PipelineError> {
        Ok(Prediction {
            essential: record.essential()?,
            inliers: record.labels.clone(),
        })
    }
}

#[derive(Debug, Clone, Copy, Default, PartialEq)]
pub struct EvalOptions {
    /// Re-estimate with RANSAC on the predicted inliers only.
    pub ransac_post: Option<RansacConfig>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PairError {
    pub pair_id: String,
    pub err_r_deg: f64,
    pub err_t_deg: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalConfigEcho {
    pub predictor: String,
    pub ransac_post: bool,
    pub ransac_iterations: Option<usize>,
}

/// Pose accuracy (mAP5, percent) and inlier classification quality
/// (percent, micro-averaged over all correspondences).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub map5: f64,
    pub precision: f64,
    pub recall: f64,
    pub f_score: f64,
    pub pairs: Vec<PairError>,
    pub config: EvalConfigEcho,
}

impl EvalReport {
    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("report serializes") + "\n"
    }

    /// One-line human summary.
    pub fn summary(&self) -> String {
        format!(
            "pairs {} map5 {:.2} precision {:.2} recall {:.2} f_score {:.2}",
            self.pairs.len(),
            self.map5,
            self.precision,
            self.recall,
            self.f_score
        )
    }
}

fn evaluate_one(
    record: &DatasetRecord,
    predictor: &dyn Predictor,
    options: &EvalOptions,
) -> Result<(PairError, ClassCounts), PipelineError> {
    let corrs = record.normalized();
    let pred = predictor.predict(record, &corrs)?;
    let counts = ClassCounts::from_masks(&pred.inliers, &record.labels);

    let (mut essential, mut support) = (pred.essential, pred.inliers.clone());
    if let Some(cfg) = &options.ransac_post {
        let positive = corrs.subset(&pred.inliers);
        if positive.len() >= 8 {
            let r = ransac_essential(&positive, &pair_ransac(cfg, &record.pair_id))?;
            essential = r.essential;
            let mut it = r.inliers.into_iter();
            support = pred.inliers.iter().map(|&p| p && it.next().unwrap_or(false)).collect();
        }
    }
    let mask = support.iter().any(|&s| s).then_some(support.as_slice());
    let gt = record.pose()?;
    let (err_r_deg, err_t_deg) = match decompose_essential(&essential, &corrs, mask) {
        Ok(pose) => pose_angular_errors(&gt, &pose),
        Err(_) => (DECOMPOSITION_FAILURE_DEG, DECOMPOSITION_FAILURE_DEG),
    };
    Ok((
        PairError {
            pair_id: record.pair_id.clone(),
            err_r_deg,
            err_t_deg,
        },
        counts,
    ))
}

/// Scores `predictor` on every record. Records are processed in parallel
/// and merged in dataset order; every number depends only on the records'
/// contents, not on their order.
pub fn evaluate(
    records: &[DatasetRecord],
    predictor: &dyn Predictor,
    options: &EvalOptions,
) -> Result<EvalReport, PipelineError> {
    if records.is_empty() {
        return Err(PipelineError::EmptyDataset);
    }
    if let Some(cfg) = &options.ransac_post {
        cfg.validate()?;
    }
    let results: Vec<_> = records
        .par_iter()
        .map(|r| evaluate_one(r, predictor, options))
        .collect::<Result<_, _>>()?;
    let counts = results.iter().fold(ClassCounts::default(), |acc, (_, c)| acc.merge(*c));
    let errors: Vec<f64> = results.iter().map(|(p, _)| p.err_r_deg.max(p.err_t_deg)).collect();
    Ok(EvalReport {
        map5: map5(&errors),
        precision: counts.precision(),
        recall: counts.recall(),
        f_score: counts.f_score(),
        pairs: results.into_iter().map(|(p, _)| p).collect(),
        config: EvalConfigEcho {
            predictor: predictor.name().to_string(),
            ransac_post: options.ransac_post.is_some(),
            ransac_iterations: options.ransac_post.map(|c| c.iterations),
        },
    })
}
