use std::path::Path;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::evaluate::{evaluate, EvalOptions, NetPredictor};
use super::PipelineError;
use crate::datagen::DatasetRecord;
use crate::diffcore::{Adam, AdamConfig, BnMode, DiffError};
use crate::fnnet::{write_checkpoint, FnNet, FnNetConfig, FnNetError};
use crate::geometry::{CorrespondenceSet, EssentialMatrix};

/// Network settings plus optimizer settings. The JSON form is a flat
/// object: the network's fields, optionally with `learning_rate` and
/// `seed`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TrainConfig {
    pub net: FnNetConfig,
    pub learning_rate: f64,
    /// Seeds both the initial weights and the epoch shuffles.
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            net: FnNetConfig::default(),
            learning_rate: AdamConfig::default().learning_rate,
            seed: 0,
        }
    }
}

impl TrainConfig {
    pub fn from_json(text: &str) -> Result<Self, PipelineError> {
        let invalid = |m: String| PipelineError::InvalidConfig(m);
        let value: serde_json::Value = serde_json::from_str(text).map_err(|e| invalid(e.to_string()))?;
        let serde_json::Value::Object(mut map) = value else {
            return Err(invalid("config must be a JSON object".into()));
        };
        let mut cfg = Self::default();
        if let Some(v) = map.remove("learning_rate") {
            cfg.learning_rate = v
                .as_f64()
                .filter(|lr| *lr > 0.0 && lr.is_finite())
                .ok_or_else(|| invalid("learning_rate must be a positive number".into()))?;
        }
        if let Some(v) = map.remove("seed") {
            cfg.seed = v.as_u64().ok_or_else(|| invalid("seed must be a nonnegative integer".into()))?;
        }
        cfg.net = serde_json::from_value(serde_json::Value::Object(map)).map_err(|e| invalid(e.to_string()))?;
        cfg.net.validate().map_err(|e| invalid(e.to_string()))?;
        Ok(cfg)
    }
}

/// Summary of one training epoch.
#[derive(Debug, Clone, PartialEq)]
pub struct EpochLog {
    /// 1-based.
    pub epoch: usize,
    pub mean_cls: f64,
    /// Mean over records with a non-degenerate estimate; 0 when there are
    /// none.
    pub mean_ess: f64,
    pub val_f_score: f64,
    pub val_map5: f64,
}

impl EpochLog {
    pub fn line(&self) -> String {
        format!(
            "epoch {} l_cls {:.6} l_ess {:.6} val_f_score {:.4} val_map5 {:.4}",
            self.epoch, self.mean_cls, self.mean_ess, self.val_f_score, self.val_map5
        )
    }
}

/// Overflow or NaN anywhere in the step, as opposed to a contract error.
fn is_numerical(e: &FnNetError) -> bool {
    matches!(
        e,
        FnNetError::Diff(DiffError::NonFinite { .. } | DiffError::NumericalGradient { .. })
    )
}

struct Sample<'a> {
    record: &'a DatasetRecord,
    corrs: CorrespondenceSet,
    essential: EssentialMatrix,
}

/// Per-record Adam training. After every epoch the model is scored on
/// `val` and written to `checkpoint`; `on_epoch` sees each log entry as it
/// is produced. A non-finite loss or gradient stops training with an
/// error, leaving the previous epoch's checkpoint in place.
pub fn train(
    train_set: &[DatasetRecord],
    val_set: &[DatasetRecord],
    cfg: &TrainConfig,
    epochs: usize,
    checkpoint: &Path,
    mut on_epoch: impl FnMut(&EpochLog),
) -> Result<(FnNet, Vec<EpochLog>), PipelineError> {
    if train_set.is_empty() || val_set.is_empty() {
        return Err(PipelineError::EmptyDataset);
    }
    let samples = train_set
        .iter()
        .map(|record| {
            Ok(Sample {
                record,
                corrs: record.normalized(),
                essential: record.essential()?,
            })
        })
        .collect::<Result<Vec<_>, PipelineError>>()?;

    let mut net = FnNet::new(cfg.net, cfg.seed)?;
    let mut adam = Adam::new(AdamConfig {
        learning_rate: cfg.learning_rate,
        ..AdamConfig::default()
    });
    let mut order: Vec<usize> = (0..samples.len()).collect();
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut logs = Vec::with_capacity(epochs);

    for epoch in 0..epochs {
        order.shuffle(&mut rng);
        let alpha = net.config().alpha(epoch);
        let (mut sum_cls, mut sum_ess, mut n_ess) = (0.0, 0.0, 0usize);
        for &i in &order {
            let s = &samples[i];
            let non_finite = || PipelineError::NonFiniteLoss {
                epoch: epoch + 1,
                pair_id: s.record.pair_id.clone(),
            };
            let step = net.forward(&s.corrs, BnMode::Train).and_then(|mut fwd| {
                let terms = net.loss(&mut fwd, &s.record.labels, &s.essential, alpha)?;
                Ok((fwd, terms))
            });
            let (fwd, terms) = step.map_err(|e| if is_numerical(&e) { non_finite() } else { e.into() })?;
            if !fwd.graph.value(terms.total).data()[0].is_finite() {
                return Err(non_finite());
            }
            net.weights.params.zero_grad();
            if let Err(e) = fwd.graph.backward(terms.total, &mut net.weights.params) {
                let e = FnNetError::from(e);
                return Err(if is_numerical(&e) { non_finite() } else { e.into() });
            }
            adam.step(&mut net.weights.params);
            net.apply_bn_updates(fwd.bn_updates);
            sum_cls += terms.cls;
            if let Some(e) = terms.ess {
                sum_ess += e;
                n_ess += 1;
            }
        }
        let report = evaluate(val_set, &NetPredictor(&net), &EvalOptions::default())?;
        let log = EpochLog {
            epoch: epoch + 1,
            mean_cls: sum_cls / samples.len() as f64,
            mean_ess: if n_ess > 0 { sum_ess / n_ess as f64 } else { 0.0 },
            val_f_score: report.f_score,
            val_map5: report.map5,
        };
        write_checkpoint(&net, epoch + 1, checkpoint)?;
        on_epoch(&log);
        logs.push(log);
    }
    Ok((net, logs))
}
