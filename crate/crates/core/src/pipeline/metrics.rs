/// Error assigned to both angles when no pose can be recovered.
pub const DECOMPOSITION_FAILURE_DEG: f64 = 180.0;

/// Mean over the thresholds 1°, …, 5° of the fraction of pairs whose error
/// (the larger of the rotation and translation errors) is below the
/// threshold, as a percentage. An empty list scores 0.
pub fn map5(pair_errors: &[f64]) -> f64 {
    if pair_errors.is_empty() {
        return 0.0;
    }
    let n = pair_errors.len() as f64;
    let acc: f64 = (1..=5)
        .map(|t| pair_errors.iter().filter(|&&e| e < t as f64).count() as f64 / n)
        .sum();
    100.0 * acc / 5.0
}

/// Confusion counts of predicted against true inliers, summed over every
/// correspondence of a dataset (micro-averaging).
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct ClassCounts {
    pub tp: usize,
    pub fp: usize,
    pub fneg: usize,
}

impl ClassCounts {
    pub fn from_masks(predicted: &[bool], truth: &[bool]) -> Self {
        assert_eq!(predicted.len(), truth.len(), "one prediction per label");
        let mut c = Self::default();
        for (&p, &t) in predicted.iter().zip(truth) {
            match (p, t) {
                (true, true) => c.tp += 1,
                (true, false) => c.fp += 1,
                (false, true) => c.fneg += 1,
                (false, false) => {}
            }
        }
        c
    }

    pub fn merge(self, o: Self) -> Self {
        Self {
            tp: self.tp + o.tp,
            fp: self.fp + o.fp,
            fneg: self.fneg + o.fneg,
        }
    }

    /// Percentage; 0 when nothing was predicted positive.
    pub fn precision(&self) -> f64 {
        ratio(self.tp, self.tp + self.fp)
    }

    /// Percentage; 0 when there are no true inliers.
    pub fn recall(&self) -> f64 {
        ratio(self.tp, self.tp + self.fneg)
    }

    /// `2PR / (P + R)` in percent, 0 when `P + R = 0`.
    pub fn f_score(&self) -> f64 {
        let (p, r) = (self.precision(), self.recall());
        if p + r > 0.0 {
            2.0 * p * r / (p + r)
        } else {
            0.0
        }
    }
}

fn ratio(num: usize, den: usize) -> f64 {
    if den == 0 {
        0.0
    } else {
        100.0 * num as f64 / den as f64
    }
}
