//! Network building blocks. Every layer holds only parameter ids and
//! batch-norm statistic names; values live in [`Weights`].

use std::collections::BTreeMap;

use rand::Rng;
use rand_chacha::ChaCha8Rng;

use crate::diffcore::{BnMode, Graph, ParamId, ParamStore, Result, RunningStats, SoftThresholdKind, Tensor, Var};

/// Trainable parameters plus batch-norm running statistics.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct Weights {
    pub params: ParamStore,
    pub stats: BTreeMap<String, RunningStats>,
}

/// Forward-pass state: the tape, read access to the weights, and the
/// running-statistic updates produced in train mode.
pub struct Ctx<'a> {
    pub graph: Graph,
    pub weights: &'a Weights,
    pub mode: BnMode,
    pub updates: Vec<(String, RunningStats)>,
}

impl<'a> Ctx<'a> {
    pub fn new(weights: &'a Weights, mode: BnMode) -> Self {
        Self {
            graph: Graph::new(),
            weights,
            mode,
            updates: Vec::new(),
        }
    }

    fn param(&mut self, id: ParamId) -> Var {
        self.graph.param(&self.weights.params, id)
    }
}

fn uniform(rng: &mut ChaCha8Rng, shape: &[usize], bound: f64) -> Tensor {
    let n = shape.iter().product();
    let data = (0..n).map(|_| rng.random_range(-bound..=bound)).collect();
    Tensor::new(shape.to_vec(), data).expect("finite init")
}

/// Shared per-point linear map (a 1×1 convolution).
#[derive(Debug, Clone)]
pub struct Linear {
    pub weight: ParamId,
    pub bias: ParamId,
}

impl Linear {
    /// Weights and bias uniform in `±1/sqrt(fan_in)`.
    pub fn new(w: &mut Weights, rng: &mut ChaCha8Rng, name: &str, fan_in: usize, fan_out: usize) -> Self {
        let bound = 1.0 / (fan_in as f64).sqrt();
        let weight = w.params.add(format!("{name}.weight"), uniform(rng, &[fan_out, fan_in], bound));
        let bias = w.params.add(format!("{name}.bias"), uniform(rng, &[fan_out], bound));
        Self { weight, bias }
    }

    pub fn apply(&self, ctx: &mut Ctx, x: Var) -> Result<Var> {
        let (w, b) = (ctx.param(self.weight), ctx.param(self.bias));
        ctx.graph.linear_map(x, w, b)
    }
}

/// Batch norm whose samples run along `batch_axis`.
#[derive(Debug, Clone)]
pub struct BatchNorm {
    pub name: String,
    pub gamma: ParamId,
    pub beta: ParamId,
    pub batch_axis: usize,
}

impl BatchNorm {
    pub fn new(w: &mut Weights, name: &str, features: usize, batch_axis: usize) -> Self {
        let gamma = w.params.add(format!("{name}.gamma"), Tensor::filled(&[features], 1.0));
        let beta = w.params.add(format!("{name}.beta"), Tensor::zeros(&[features]));
        w.stats.insert(name.to_string(), RunningStats::new(features));
        Self {
            name: name.to_string(),
            gamma,
            beta,
            batch_axis,
        }
    }

    pub fn apply(&self, ctx: &mut Ctx, x: Var) -> Result<Var> {
        let (gamma, beta) = (ctx.param(self.gamma), ctx.param(self.beta));
        let stats = &ctx.weights.stats[&self.name];
        let (y, update) = ctx.graph.batch_norm(x, gamma, beta, stats, self.batch_axis, ctx.mode)?;
        if let Some(u) = update {
            ctx.updates.push((self.name.clone(), u));
        }
        Ok(y)
    }
}

/// Residual block `f + B2(B1(f))` with `B = ReLU ∘ BN ∘ CN ∘ linear`.
#[derive(Debug, Clone)]
pub struct PointCnBlock {
    pub conv1: Linear,
    pub bn1: BatchNorm,
    pub conv2: Linear,
    pub bn2: BatchNorm,
}

impl PointCnBlock {
    pub fn new(w: &mut Weights, rng: &mut ChaCha8Rng, name: &str, channels: usize) -> Self {
        Self {
            conv1: Linear::new(w, rng, &format!("{name}.conv1"), channels, channels),
            bn1: BatchNorm::new(w, &format!("{name}.bn1"), channels, 1),
            conv2: Linear::new(w, rng, &format!("{name}.conv2"), channels, channels),
            bn2: BatchNorm::new(w, &format!("{name}.bn2"), channels, 1),
        }
    }

    pub fn apply(&self, ctx: &mut Ctx, f: Var) -> Result<Var> {
        let mut h = f;
        for (conv, bn) in [(&self.conv1, &self.bn1), (&self.conv2, &self.bn2)] {
            h = conv.apply(ctx, h)?;
            h = ctx.graph.context_normalize(h)?;
            h = bn.apply(ctx, h)?;
            h = ctx.graph.relu(h);
        }
        ctx.graph.add(f, h)
    }
}

/// Intermediate values of a filtering block, kept for inspection.
#[derive(Debug, Clone, Copy)]
pub struct FnBlockTrace {
    /// Features after the opening PointCN block (`C×N`).
    pub features: Var,
    /// Channel descriptor: mean absolute feature (`C×1`).
    pub descriptor: Var,
    /// Per-channel thresholds (`C×1`).
    pub thresholds: Var,
    /// Features after soft thresholding.
    pub filtered: Var,
    pub output: Var,
}

/// PointCN block followed by channel-adaptive soft thresholding and a
/// closing PointCN block.
///
/// The threshold of channel `c` is `sigmoid(λ_c) · mean_n |g[c, n]|` with
/// `λ = FC2(ReLU(BN(FC1(mean |g|))))`, so it is always nonnegative and
/// never exceeds the channel's mean magnitude.
#[derive(Debug, Clone)]
pub struct FnBlock {
    pub pre: PointCnBlock,
    pub fc1: Linear,
    pub bn: BatchNorm,
    pub fc2: Linear,
    pub post: PointCnBlock,
    pub kind: SoftThresholdKind,
}

impl FnBlock {
    pub fn new(w: &mut Weights, rng: &mut ChaCha8Rng, name: &str, channels: usize, kind: SoftThresholdKind) -> Self {
        Self {
            pre: PointCnBlock::new(w, rng, &format!("{name}.pre"), channels),
            fc1: Linear::new(w, rng, &format!("{name}.fc1"), channels, channels),
            // a single descriptor per pass: the batch axis has length 1
            bn: BatchNorm::new(w, &format!("{name}.bn"), channels, 1),
            fc2: Linear::new(w, rng, &format!("{name}.fc2"), channels, channels),
            post: PointCnBlock::new(w, rng, &format!("{name}.post"), channels),
            kind,
        }
    }

    pub fn trace(&self, ctx: &mut Ctx, f: Var) -> Result<FnBlockTrace> {
        let g = self.pre.apply(ctx, f)?;
        let magnitude = ctx.graph.abs(g);
        let descriptor = ctx.graph.mean_axis(magnitude, 1)?;
        let mut scale = self.fc1.apply(ctx, descriptor)?;
        scale = self.bn.apply(ctx, scale)?;
        scale = ctx.graph.relu(scale);
        scale = self.fc2.apply(ctx, scale)?;
        let gate = ctx.graph.sigmoid(scale);
        let thresholds = ctx.graph.mul(gate, descriptor)?;
        let filtered = ctx.graph.soft_threshold(g, thresholds, self.kind)?;
        let output = self.post.apply(ctx, filtered)?;
        Ok(FnBlockTrace {
            features: g,
            descriptor,
            thresholds,
            filtered,
            output,
        })
    }

    pub fn apply(&self, ctx: &mut Ctx, f: Var) -> Result<Var> {
        Ok(self.trace(ctx, f)?.output)
    }
}

/// Soft assignment of `N` points to `M` clusters: `S = softmax_N(A f)`,
/// `pooled = f Sᵀ` (`C×M`). Invariant to the order of the points.
#[derive(Debug, Clone)]
pub struct DiffPool {
    pub embed: Linear,
}

impl DiffPool {
    pub fn new(w: &mut Weights, rng: &mut ChaCha8Rng, name: &str, channels: usize, clusters: usize) -> Self {
        Self {
            embed: Linear::new(w, rng, &format!("{name}.embed"), channels, clusters),
        }
    }

    pub fn apply(&self, ctx: &mut Ctx, f: Var) -> Result<Var> {
        let logits = self.embed.apply(ctx, f)?;
        let assign = ctx.graph.softmax_axis(logits, 1)?;
        ctx.graph.matmul_nt(f, assign)
    }
}

/// Spreads cluster features back to points: `T = softmax_M(U f_orig)`,
/// `out = f_clustered T` (`C×N`).
#[derive(Debug, Clone)]
pub struct DiffUnpool {
    pub embed: Linear,
}

impl DiffUnpool {
    pub fn new(w: &mut Weights, rng: &mut ChaCha8Rng, name: &str, channels: usize, clusters: usize) -> Self {
        Self {
            embed: Linear::new(w, rng, &format!("{name}.embed"), channels, clusters),
        }
    }

    pub fn apply(&self, ctx: &mut Ctx, f_orig: Var, f_clustered: Var) -> Result<Var> {
        let logits = self.embed.apply(ctx, f_orig)?;
        let assign = ctx.graph.softmax_axis(logits, 0)?;
        ctx.graph.matmul(f_clustered, assign)
    }
}
