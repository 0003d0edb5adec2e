//! Graph nodes whose values and gradients are computed outside the tape.

use crate::diffcore::{CustomOp, Tensor};
use crate::geometry::{eig_backward, gram_to_weight_gradient, CorrespondenceSet, SymEigen};

/// Weighted eight-point solve as a graph node: maps the `1×N` weight row
/// to the unit essential vector (9 entries, row-major).
pub(crate) struct EightPointOp {
    pub corrs: CorrespondenceSet,
    pub eigen: SymEigen,
}

impl CustomOp for EightPointOp {
    fn name(&self) -> &'static str {
        "weighted_eight_point"
    }

    fn backward(&self, inputs: &[&Tensor], _: &Tensor, grad: &Tensor) -> Vec<Option<Tensor>> {
        let weights = inputs[0];
        // the eigengap was checked when the node was recorded
        let grad_gram = eig_backward(&self.eigen, grad.data()).expect("eigengap checked at forward");
        let gw = gram_to_weight_gradient(&self.corrs, weights.data(), &grad_gram);
        vec![Some(Tensor::new(weights.shape().to_vec(), gw).expect("finite gradient"))]
    }
}

/// Numerically stable `log(1 + exp(x))`.
fn softplus(x: f64) -> f64 {
    x.max(0.0) + (-x.abs()).exp().ln_1p()
}

/// Per-class weights `1 / (k · n_c)` with `k` the number of classes
/// present, so each present class contributes equally and the total weight
/// is 1.
pub(crate) fn class_weights(labels: &[bool]) -> (f64, f64) {
    let pos = labels.iter().filter(|&&l| l).count();
    let neg = labels.len() - pos;
    let k = usize::from(pos > 0) + usize::from(neg > 0);
    let w = |n: usize| if n == 0 { 0.0 } else { 1.0 / (k * n) as f64 };
    (w(pos), w(neg))
}

/// Class-balanced binary cross-entropy on logits.
pub(crate) fn balanced_bce(logits: &[f64], labels: &[bool]) -> f64 {
    let (wp, wn) = class_weights(labels);
    logits
        .iter()
        .zip(labels)
        .map(|(&z, &y)| if y { wp * softplus(-z) } else { wn * softplus(z) })
        .sum()
}

pub(crate) struct BalancedBceOp {
    pub labels: Vec<bool>,
}

impl CustomOp for BalancedBceOp {
    fn name(&self) -> &'static str {
        "balanced_bce"
    }

    fn backward(&self, inputs: &[&Tensor], _: &Tensor, grad: &Tensor) -> Vec<Option<Tensor>> {
        let logits = inputs[0];
        let (wp, wn) = class_weights(&self.labels);
        let g = grad.data()[0];
        let data = logits
            .data()
            .iter()
            .zip(&self.labels)
            .map(|(&z, &y)| {
                let p = crate::diffcore::sigmoid(z);
                g * if y { wp * (p - 1.0) } else { wn * p }
            })
            .collect();
        vec![Some(Tensor::new(logits.shape().to_vec(), data).expect("finite gradient"))]
    }
}
