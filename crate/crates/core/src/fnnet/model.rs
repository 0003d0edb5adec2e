use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::layers::{Ctx, DiffPool, DiffUnpool, FnBlock, Linear, PointCnBlock, Weights};
use super::ops::{balanced_bce, BalancedBceOp, EightPointOp};
use super::{FnNetConfig, FnNetError};
use crate::diffcore::{BnMode, Graph, RunningStats, Tensor, Var};
use crate::geometry::{weighted_eight_point_solve, CorrespondenceSet, EssentialMatrix};

/// Minimum number of correspondences the network accepts.
pub const MIN_CORRESPONDENCES: usize = 8;

/// Per-record prediction.
#[derive(Debug, Clone, PartialEq)]
pub struct PredictionOutput {
    pub logits: Vec<f64>,
    /// `relu(tanh(logits))`, in `[0, 1)`.
    pub weights: Vec<f64>,
    pub essential: EssentialMatrix,
    /// True when fewer than eight weights were positive (or the weighted
    /// system was rank deficient) and `essential` comes from uniform
    /// weights instead.
    pub degenerate: bool,
}

/// A recorded forward pass, ready for a loss and a backward sweep.
pub struct Forward {
    pub graph: Graph,
    pub logits: Var,
    pub weights: Var,
    /// Unit essential vector node; `None` for degenerate predictions.
    pub essential: Option<Var>,
    pub output: PredictionOutput,
    /// Batch-norm running statistics produced in train mode.
    pub bn_updates: Vec<(String, RunningStats)>,
}

/// Loss node and its two terms.
#[derive(Debug, Clone, Copy)]
pub struct LossTerms {
    pub total: Var,
    pub cls: f64,
    /// `None` when the essential term was skipped (degenerate prediction).
    pub ess: Option<f64>,
}

#[derive(Debug, Clone)]
enum ClusterBlock {
    Filter(FnBlock),
    /// Ablation: two plain residual blocks in place of a filtering block.
    Plain(PointCnBlock, PointCnBlock),
}

/// The filtering network: weights plus the layer layout that addresses
/// them.
#[derive(Debug, Clone)]
pub struct FnNet {
    config: FnNetConfig,
    pub weights: Weights,
    lift: Linear,
    pre: Vec<PointCnBlock>,
    pool: DiffPool,
    cluster: Vec<ClusterBlock>,
    unpool: DiffUnpool,
    merge: Linear,
    post: Vec<PointCnBlock>,
    head: Linear,
}

impl FnNet {
    /// Randomly initialized model; `seed` fixes every initial weight.
    pub fn new(config: FnNetConfig, seed: u64) -> Result<Self, FnNetError> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut w = Weights::default();
        let c = config.channels;
        let m = config.n_clusters;
        let lift = Linear::new(&mut w, &mut rng, "lift", 4, c);
        let pre = (0..config.n_blocks_pre)
            .map(|i| PointCnBlock::new(&mut w, &mut rng, &format!("pre{i}"), c))
            .collect();
        let pool = DiffPool::new(&mut w, &mut rng, "pool", c, m);
        let cluster = (0..config.n_fn_blocks)
            .map(|i| {
                let name = format!("cluster{i}");
                if config.filter_noise {
                    ClusterBlock::Filter(FnBlock::new(&mut w, &mut rng, &name, c, config.threshold_kind))
                } else {
                    ClusterBlock::Plain(
                        PointCnBlock::new(&mut w, &mut rng, &format!("{name}.a"), c),
                        PointCnBlock::new(&mut w, &mut rng, &format!("{name}.b"), c),
                    )
                }
            })
            .collect();
        let unpool = DiffUnpool::new(&mut w, &mut rng, "unpool", c, m);
        let merge = Linear::new(&mut w, &mut rng, "merge", 2 * c, c);
        let post = (0..config.n_blocks_post)
            .map(|i| PointCnBlock::new(&mut w, &mut rng, &format!("post{i}"), c))
            .collect();
        let head = Linear::new(&mut w, &mut rng, "head", c, 1);
        w.params.get_mut(head.bias).value.data_mut().fill(0.0);
        Ok(Self {
            config,
            weights: w,
            lift,
            pre,
            pool,
            cluster,
            unpool,
            merge,
            post,
            head,
        })
    }

    pub fn config(&self) -> &FnNetConfig {
        &self.config
    }

    /// Records a forward pass on normalized correspondences.
    pub fn forward(&self, corrs: &CorrespondenceSet, mode: BnMode) -> Result<Forward, FnNetError> {
        let n = corrs.len();
        if n < MIN_CORRESPONDENCES {
            return Err(FnNetError::TooFewCorrespondences(n));
        }
        let mut ctx = Ctx::new(&self.weights, mode);
        let input = Tensor::new(vec![4, n], (0..4).flat_map(|r| corrs.points.iter().map(move |p| p[r])).collect())?;
        let x = ctx.graph.constant(input);

        let mut f = self.lift.apply(&mut ctx, x)?;
        for block in &self.pre {
            f = block.apply(&mut ctx, f)?;
        }
        let mut clusters = self.pool.apply(&mut ctx, f)?;
        for block in &self.cluster {
            clusters = match block {
                ClusterBlock::Filter(b) => b.apply(&mut ctx, clusters)?,
                ClusterBlock::Plain(a, b) => {
                    let h = a.apply(&mut ctx, clusters)?;
                    b.apply(&mut ctx, h)?
                }
            };
        }
        let unpooled = self.unpool.apply(&mut ctx, f, clusters)?;
        let joined = ctx.graph.concat_rows(f, unpooled)?;
        let mut g = self.merge.apply(&mut ctx, joined)?;
        for block in &self.post {
            g = block.apply(&mut ctx, g)?;
        }
        let logits = self.head.apply(&mut ctx, g)?;
        let t = ctx.graph.tanh(logits);
        let weights = ctx.graph.relu(t);

        let Ctx { mut graph, updates, .. } = ctx;
        let logit_vals = graph.value(logits).data().to_vec();
        let weight_vals = graph.value(weights).data().to_vec();

        let (essential, essential_var, degenerate) = match weighted_eight_point_solve(corrs, &weight_vals) {
            Ok(sol) => {
                let out = Tensor::new(vec![9], sol.vector.to_vec())?;
                let op = EightPointOp {
                    corrs: corrs.clone(),
                    eigen: sol.eigen,
                };
                let var = graph.custom(&[weights], out, Box::new(op))?;
                (sol.essential, Some(var), false)
            }
            Err(_) => {
                let uniform = vec![1.0; n];
                let sol = weighted_eight_point_solve(corrs, &uniform)?;
                (sol.essential, None, true)
            }
        };
        Ok(Forward {
            graph,
            logits,
            weights,
            essential: essential_var,
            output: PredictionOutput {
                logits: logit_vals,
                weights: weight_vals,
                essential,
                degenerate,
            },
            bn_updates: updates,
        })
    }

    /// Eval-mode prediction; safe to call concurrently.
    pub fn predict(&self, corrs: &CorrespondenceSet) -> Result<PredictionOutput, FnNetError> {
        Ok(self.forward(corrs, BnMode::Eval)?.output)
    }

    /// Adds `L = L_cls + alpha · L_ess` to the recorded pass.
    ///
    /// `L_cls` is class-balanced cross-entropy on the logits and
    /// `L_ess = min(‖Ê − E‖, ‖Ê + E‖)² = 2 − 2|ê·e|` for unit-norm `Ê`, `E`.
    /// Degenerate predictions contribute `L_cls` only.
    pub fn loss(
        &self,
        fwd: &mut Forward,
        labels: &[bool],
        e_gt: &EssentialMatrix,
        alpha: f64,
    ) -> Result<LossTerms, FnNetError> {
        let logits = &fwd.output.logits;
        if labels.len() != logits.len() {
            return Err(FnNetError::LabelCount {
                labels: labels.len(),
                points: logits.len(),
            });
        }
        let graph = &mut fwd.graph;
        let cls = balanced_bce(logits, labels);
        let cls_var = graph.custom(
            &[fwd.logits],
            Tensor::scalar(cls)?,
            Box::new(BalancedBceOp {
                labels: labels.to_vec(),
            }),
        )?;
        let Some(e_var) = fwd.essential else {
            return Ok(LossTerms {
                total: cls_var,
                cls,
                ess: None,
            });
        };
        let gt = graph.constant(Tensor::new(vec![9], e_gt.to_vector().to_vec())?);
        let prod = graph.mul(e_var, gt)?;
        let dot = graph.sum(prod);
        let abs_dot = graph.abs(dot);
        let neg = graph.scale(abs_dot, -2.0);
        let two = graph.constant(Tensor::scalar(2.0)?);
        let ess_var = graph.add(two, neg)?;
        let ess = graph.value(ess_var).data()[0];
        let weighted = graph.scale(ess_var, alpha);
        let total = graph.add(cls_var, weighted)?;
        Ok(LossTerms {
            total,
            cls,
            ess: Some(ess),
        })
    }

    /// Folds train-mode batch-norm statistics into the model.
    pub fn apply_bn_updates(&mut self, updates: Vec<(String, RunningStats)>) {
        for (name, stats) in updates {
            self.weights.stats.insert(name, stats);
        }
    }

    /// Parameter id of the output layer's bias.
    pub fn head_bias(&self) -> crate::diffcore::ParamId {
        self.head.bias
    }
}
