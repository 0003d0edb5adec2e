use serde::{Deserialize, Serialize};

use super::error::{shape_err, DiffError, Result};
use super::param::{ParamId, ParamStore};
use super::tensor::Tensor;

pub const NORM_EPS: f64 = 1e-5;
pub const BN_MOMENTUM: f64 = 0.9;

/// Handle to a node of a [`Graph`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var(usize);

/// Shape of the shrinkage applied by [`Graph::soft_threshold`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize, Default)]
#[serde(rename_all = "lowercase")]
pub enum SoftThresholdKind {
    /// `sign(x) * max(|x| - t, 0)`
    #[default]
    Linear,
    /// `sign(x) * u * (1 + u)` with `u = max(|x| - t, 0)`
    Quadratic,
}

/// Scalar soft threshold.
pub fn soft_threshold_value(x: f64, t: f64, kind: SoftThresholdKind) -> f64 {
    let u = (x.abs() - t).max(0.0);
    let mag = match kind {
        SoftThresholdKind::Linear => u,
        SoftThresholdKind::Quadratic => u * (1.0 + u),
    };
    if x < 0.0 {
        -mag
    } else {
        mag
    }
}

/// Derivative of the magnitude with respect to `u`; zero inside the dead zone.
fn soft_threshold_slope(x: f64, t: f64, kind: SoftThresholdKind) -> f64 {
    let u = x.abs() - t;
    if u <= 0.0 {
        return 0.0;
    }
    match kind {
        SoftThresholdKind::Linear => 1.0,
        SoftThresholdKind::Quadratic => 1.0 + 2.0 * u,
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum BnMode {
    Train,
    Eval,
}

/// Per-feature running mean and (biased) variance of a batch-norm layer.
#[derive(Debug, Clone, PartialEq)]
pub struct RunningStats {
    pub mean: Vec<f64>,
    pub var: Vec<f64>,
}

impl RunningStats {
    pub fn new(features: usize) -> Self {
        Self {
            mean: vec![0.0; features],
            var: vec![1.0; features],
        }
    }

    pub fn len(&self) -> usize {
        self.mean.len()
    }

    pub fn is_empty(&self) -> bool {
        self.mean.is_empty()
    }
}

/// Vector-Jacobian product for an operation computed outside the graph.
pub trait CustomOp {
    fn name(&self) -> &'static str;

    /// Returns one gradient per input (`None` when the input is not
    /// differentiable), given the upstream gradient of the output.
    fn backward(&self, inputs: &[&Tensor], output: &Tensor, grad: &Tensor) -> Vec<Option<Tensor>>;
}

enum Op {
    Leaf,
    Param(ParamId),
    LinearMap { x: Var, w: Var, b: Var },
    MatMul { a: Var, b: Var },
    MatMulNT { a: Var, b: Var },
    Add(Var, Var),
    Mul(Var, Var),
    Scale(Var, f64),
    Sum(Var),
    ConcatRows(Var, Var),
    Transpose(Var),
    Reshape(Var),
    Normalize { x: Var, axis: usize, inv_std: Vec<f64> },
    FixedAffine { x: Var, axis: usize, scale: Vec<f64> },
    Affine { x: Var, gamma: Var, beta: Var, axis: usize },
    Relu(Var),
    Tanh(Var),
    Sigmoid(Var),
    Abs(Var),
    MeanAxis { x: Var, axis: usize },
    SoftmaxAxis { x: Var, axis: usize },
    SoftThreshold { x: Var, t: Var, kind: SoftThresholdKind },
    Custom { inputs: Vec<Var>, op: Box<dyn CustomOp> },
}

impl Op {
    fn name(&self) -> &'static str {
        match self {
            Op::Leaf => "leaf",
            Op::Param(_) => "param",
            Op::LinearMap { .. } => "linear_map",
            Op::MatMul { .. } => "matmul",
            Op::MatMulNT { .. } => "matmul_nt",
            Op::Add(..) => "add",
            Op::Mul(..) => "mul",
            Op::Scale(..) => "scale",
            Op::Sum(_) => "sum",
            Op::ConcatRows(..) => "concat_rows",
            Op::Transpose(_) => "transpose",
            Op::Reshape(_) => "reshape",
            Op::Normalize { .. } => "normalize",
            Op::FixedAffine { .. } => "batch_norm_eval",
            Op::Affine { .. } => "affine",
            Op::Relu(_) => "relu",
            Op::Tanh(_) => "tanh",
            Op::Sigmoid(_) => "sigmoid",
            Op::Abs(_) => "abs",
            Op::MeanAxis { .. } => "mean_axis",
            Op::SoftmaxAxis { .. } => "softmax_axis",
            Op::SoftThreshold { .. } => "soft_threshold",
            Op::Custom { op, .. } => op.name(),
        }
    }

    fn inputs(&self) -> Vec<Var> {
        match self {
            Op::Leaf | Op::Param(_) => vec![],
            Op::LinearMap { x, w, b } => vec![*x, *w, *b],
            Op::MatMul { a, b } | Op::MatMulNT { a, b } => vec![*a, *b],
            Op::Add(a, b) | Op::Mul(a, b) | Op::ConcatRows(a, b) => vec![*a, *b],
            Op::Scale(a, _)
            | Op::Sum(a)
            | Op::Transpose(a)
            | Op::Reshape(a)
            | Op::Relu(a)
            | Op::Tanh(a)
            | Op::Sigmoid(a)
            | Op::Abs(a) => vec![*a],
            Op::Normalize { x, .. } | Op::FixedAffine { x, .. } => vec![*x],
            Op::MeanAxis { x, .. } | Op::SoftmaxAxis { x, .. } => vec![*x],
            Op::Affine { x, gamma, beta, .. } => vec![*x, *gamma, *beta],
            Op::SoftThreshold { x, t, .. } => vec![*x, *t],
            Op::Custom { inputs, .. } => inputs.clone(),
        }
    }
}

struct Node {
    value: Tensor,
    op: Op,
    needs_grad: bool,
}

/// Gradients of one backward pass, indexed by node.
pub struct Gradients {
    grads: Vec<Option<Tensor>>,
}

impl Gradients {
    pub fn get(&self, v: Var) -> Option<&Tensor> {
        self.grads[v.0].as_ref()
    }
}

/// Walks the elements of one group of a 2-d tensor: the entries that share
/// an index on the non-reduced axis.
#[derive(Clone, Copy)]
struct Groups {
    count: usize,
    len: usize,
    group_stride: usize,
    elem_stride: usize,
}

impl Groups {
    fn new(rows: usize, cols: usize, axis: usize) -> Self {
        if axis == 1 {
            Self {
                count: rows,
                len: cols,
                group_stride: cols,
                elem_stride: 1,
            }
        } else {
            Self {
                count: cols,
                len: rows,
                group_stride: 1,
                elem_stride: cols,
            }
        }
    }

    #[inline]
    fn idx(&self, g: usize, i: usize) -> usize {
        g * self.group_stride + i * self.elem_stride
    }

    /// `Σ_i f(i)` over the members of group `g`, with eight interleaved
    /// accumulators so long reductions pipeline; the order is fixed.
    #[inline]
    fn sum(&self, g: usize, f: impl Fn(usize) -> f64) -> f64 {
        let mut acc = [0.0; 8];
        let full = self.len / 8 * 8;
        for i in (0..full).step_by(8) {
            for (j, a) in acc.iter_mut().enumerate() {
                *a += f(self.idx(g, i + j));
            }
        }
        let tail: f64 = (full..self.len).map(|i| f(self.idx(g, i))).sum();
        acc.iter().sum::<f64>() + tail
    }
}

/// Tape of a single forward computation. Nodes are appended in evaluation
/// order, so a reverse sweep visits every consumer before its producers.
#[derive(Default)]
pub struct Graph {
    nodes: Vec<Node>,
}

impl Graph {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    fn push(&mut self, value: Tensor, op: Op) -> Var {
        let needs_grad = op.inputs().iter().any(|i| self.nodes[i.0].needs_grad);
        self.nodes.push(Node {
            value,
            op,
            needs_grad,
        });
        Var(self.nodes.len() - 1)
    }

    /// Input that takes no gradient.
    pub fn constant(&mut self, t: Tensor) -> Var {
        self.nodes.push(Node {
            value: t,
            op: Op::Leaf,
            needs_grad: false,
        });
        Var(self.nodes.len() - 1)
    }

    /// Input whose gradient is reported by [`Graph::backward`].
    pub fn variable(&mut self, t: Tensor) -> Var {
        self.nodes.push(Node {
            value: t,
            op: Op::Leaf,
            needs_grad: true,
        });
        Var(self.nodes.len() - 1)
    }

    /// Brings a parameter into the graph. Its gradient is accumulated into
    /// the store on backward.
    pub fn param(&mut self, store: &ParamStore, id: ParamId) -> Var {
        self.nodes.push(Node {
            value: store.value(id).clone(),
            op: Op::Param(id),
            needs_grad: true,
        });
        Var(self.nodes.len() - 1)
    }

    fn dims2(&self, v: Var, op: &'static str) -> Result<(usize, usize)> {
        let t = self.value(v);
        match t.shape().len() {
            1 => Ok((t.shape()[0], 1)),
            2 => Ok((t.shape()[0], t.shape()[1])),
            _ => Err(shape_err(op, "a 1-d or 2-d tensor", format!("{:?}", t.shape()))),
        }
    }

    /// `out[c, n] = sum_k w[c, k] * x[k, n] + b[c]`
    pub fn linear_map(&mut self, x: Var, w: Var, b: Var) -> Result<Var> {
        let (cin, n) = self.dims2(x, "linear_map")?;
        let (cout, wk) = self.dims2(w, "linear_map")?;
        if wk != cin {
            return Err(shape_err("linear_map", format!("weight with {cin} columns"), wk));
        }
        if self.value(b).len() != cout {
            return Err(shape_err("linear_map", format!("bias of length {cout}"), self.value(b).len()));
        }
        let (xv, wv, bv) = (self.value(x).data(), self.value(w).data(), self.value(b).data());
        let mut out = Vec::with_capacity(cout * n);
        for &bc in bv {
            out.extend(std::iter::repeat_n(bc, n));
        }
        gemm_acc(wv, View::normal(cin), xv, View::normal(n), &mut out, cout, cin, n);
        Ok(self.push(Tensor::raw(vec![cout, n], out), Op::LinearMap { x, w, b }))
    }

    /// Matrix product `a (m×k) · b (k×n)`.
    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (m, k) = self.dims2(a, "matmul")?;
        let (kb, n) = self.dims2(b, "matmul")?;
        if k != kb {
            return Err(shape_err("matmul", format!("{k} rows on the right"), kb));
        }
        let out = matmul_kernel(self.value(a).data(), self.value(b).data(), m, k, n);
        Ok(self.push(Tensor::raw(vec![m, n], out), Op::MatMul { a, b }))
    }

    /// Matrix product with the right operand transposed: `a (m×k) · bᵀ` for
    /// `b` of shape `n×k`.
    pub fn matmul_nt(&mut self, a: Var, b: Var) -> Result<Var> {
        let (m, k) = self.dims2(a, "matmul_nt")?;
        let (n, kb) = self.dims2(b, "matmul_nt")?;
        if k != kb {
            return Err(shape_err("matmul_nt", format!("{k} columns on the right"), kb));
        }
        let out = matmul_nt_kernel(self.value(a).data(), self.value(b).data(), m, k, n);
        Ok(self.push(Tensor::raw(vec![m, n], out), Op::MatMulNT { a, b }))
    }

    fn same_shape(&self, a: Var, b: Var, op: &'static str) -> Result<()> {
        let (sa, sb) = (self.value(a).shape(), self.value(b).shape());
        if self.value(a).len() != self.value(b).len() {
            return Err(shape_err(op, format!("{sa:?}"), format!("{sb:?}")));
        }
        Ok(())
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape(a, b, "add")?;
        let mut out = self.value(a).clone();
        out.add_assign(self.value(b));
        Ok(self.push(out, Op::Add(a, b)))
    }

    /// Elementwise product.
    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape(a, b, "mul")?;
        let data = self
            .value(a)
            .data()
            .iter()
            .zip(self.value(b).data())
            .map(|(x, y)| x * y)
            .collect();
        let shape = self.value(a).shape().to_vec();
        Ok(self.push(Tensor::raw(shape, data), Op::Mul(a, b)))
    }

    pub fn scale(&mut self, a: Var, s: f64) -> Var {
        let out = self.value(a).map(|v| v * s);
        self.push(out, Op::Scale(a, s))
    }

    pub fn sum(&mut self, a: Var) -> Var {
        let s = self.value(a).data().iter().sum();
        self.push(Tensor::raw(vec![1], vec![s]), Op::Sum(a))
    }

    /// Stacks `a (r1×n)` above `b (r2×n)`.
    pub fn concat_rows(&mut self, a: Var, b: Var) -> Result<Var> {
        let (ra, na) = self.dims2(a, "concat_rows")?;
        let (rb, nb) = self.dims2(b, "concat_rows")?;
        if na != nb {
            return Err(shape_err("concat_rows", na, nb));
        }
        let mut data = self.value(a).data().to_vec();
        data.extend_from_slice(self.value(b).data());
        Ok(self.push(Tensor::raw(vec![ra + rb, na], data), Op::ConcatRows(a, b)))
    }

    pub fn transpose(&mut self, a: Var) -> Result<Var> {
        self.dims2(a, "transpose")?;
        let out = self.value(a).transpose();
        Ok(self.push(out, Op::Transpose(a)))
    }

    pub fn reshape(&mut self, a: Var, shape: Vec<usize>) -> Result<Var> {
        let out = self.value(a).reshape(shape)?;
        Ok(self.push(out, Op::Reshape(a)))
    }

    fn check_axis(&self, x: Var, axis: usize) -> Result<(usize, usize)> {
        let (r, c) = self.dims2(x, "axis")?;
        if axis > 1 {
            return Err(DiffError::BadAxis { axis, rank: 2 });
        }
        Ok((r, c))
    }

    fn normalize_groups(&self, x: Var, axis: usize) -> (Tensor, Vec<f64>) {
        let t = self.value(x);
        let g = Groups::new(t.rows(), t.cols(), axis);
        let xv = t.data();
        let mut out = vec![0.0; xv.len()];
        let mut inv_std = Vec::with_capacity(g.count);
        for gi in 0..g.count {
            let mean = g.sum(gi, |k| xv[k]) / g.len as f64;
            let var = g.sum(gi, |k| (xv[k] - mean) * (xv[k] - mean)) / g.len as f64;
            let inv = 1.0 / (var + NORM_EPS).sqrt();
            for i in 0..g.len {
                let k = g.idx(gi, i);
                out[k] = (xv[k] - mean) * inv;
            }
            inv_std.push(inv);
        }
        (Tensor::raw(t.shape().to_vec(), out), inv_std)
    }

    /// Per-channel normalization across the point axis of a `C×N` map:
    /// `(f - mean) / sqrt(var + eps)`.
    pub fn context_normalize(&mut self, f: Var) -> Result<Var> {
        let (_, n) = self.dims2(f, "context_normalize")?;
        if n < 2 {
            return Err(DiffError::DegenerateContext(n));
        }
        let (out, inv_std) = self.normalize_groups(f, 1);
        Ok(self.push(out, Op::Normalize { x: f, axis: 1, inv_std }))
    }

    /// Batch normalization of a 2-d tensor whose samples run along
    /// `batch_axis`; `gamma`, `beta` and `stats` are indexed by the other axis.
    ///
    /// Train mode normalizes with batch statistics and returns the updated
    /// running statistics. A single-sample batch has no spread to measure,
    /// so it is normalized with the running statistics and folded into them
    /// as a streaming estimate. Eval mode uses the running statistics and
    /// returns no update.
    pub fn batch_norm(
        &mut self,
        x: Var,
        gamma: Var,
        beta: Var,
        stats: &RunningStats,
        batch_axis: usize,
        mode: BnMode,
    ) -> Result<(Var, Option<RunningStats>)> {
        let (r, c) = self.check_axis(x, batch_axis)?;
        let (batch, features) = if batch_axis == 0 { (r, c) } else { (c, r) };
        if batch == 0 {
            return Err(DiffError::EmptyBatch);
        }
        for (p, name) in [(gamma, "gamma"), (beta, "beta")] {
            if self.value(p).len() != features {
                return Err(shape_err("batch_norm", format!("{features} {name} entries"), self.value(p).len()));
            }
        }
        if stats.len() != features {
            return Err(shape_err("batch_norm", format!("{features} running stats"), stats.len()));
        }

        let (normalized, update) = if mode == BnMode::Train && batch > 1 {
            let t = self.value(x);
            let g = Groups::new(r, c, batch_axis);
            let mut mean = Vec::with_capacity(features);
            let mut var = Vec::with_capacity(features);
            for gi in 0..g.count {
                let xv = t.data();
                let m = g.sum(gi, |k| xv[k]) / g.len as f64;
                let v = g.sum(gi, |k| (xv[k] - m) * (xv[k] - m)) / g.len as f64;
                mean.push(m);
                var.push(v);
            }
            let (out, inv_std) = self.normalize_groups(x, batch_axis);
            let n = self.push(out, Op::Normalize { x, axis: batch_axis, inv_std });
            let update = RunningStats {
                mean: stats
                    .mean
                    .iter()
                    .zip(&mean)
                    .map(|(o, b)| BN_MOMENTUM * o + (1.0 - BN_MOMENTUM) * b)
                    .collect(),
                var: stats
                    .var
                    .iter()
                    .zip(&var)
                    .map(|(o, b)| BN_MOMENTUM * o + (1.0 - BN_MOMENTUM) * b)
                    .collect(),
            };
            (n, Some(update))
        } else {
            let t = self.value(x);
            let g = Groups::new(r, c, batch_axis);
            let scale: Vec<f64> = stats.var.iter().map(|v| 1.0 / (v + NORM_EPS).sqrt()).collect();
            let mut out = vec![0.0; t.len()];
            for gi in 0..g.count {
                for i in 0..g.len {
                    let k = g.idx(gi, i);
                    out[k] = (t.data()[k] - stats.mean[gi]) * scale[gi];
                }
            }
            let update = (mode == BnMode::Train).then(|| {
                // batch == 1: streaming update around the previous running mean
                let sample: Vec<f64> = (0..g.count).map(|gi| t.data()[g.idx(gi, 0)]).collect();
                RunningStats {
                    mean: stats
                        .mean
                        .iter()
                        .zip(&sample)
                        .map(|(o, s)| BN_MOMENTUM * o + (1.0 - BN_MOMENTUM) * s)
                        .collect(),
                    var: stats
                        .var
                        .iter()
                        .zip(stats.mean.iter().zip(&sample))
                        .map(|(o, (m, s))| BN_MOMENTUM * o + (1.0 - BN_MOMENTUM) * (s - m).powi(2))
                        .collect(),
                }
            });
            let shape = t.shape().to_vec();
            let n = self.push(
                Tensor::raw(shape, out),
                Op::FixedAffine { x, axis: batch_axis, scale },
            );
            (n, update)
        };

        let t = self.value(normalized);
        let g = Groups::new(r, c, batch_axis);
        let (gv, bv) = (self.value(gamma).data(), self.value(beta).data());
        let mut out = vec![0.0; t.len()];
        for gi in 0..g.count {
            for i in 0..g.len {
                let k = g.idx(gi, i);
                out[k] = t.data()[k] * gv[gi] + bv[gi];
            }
        }
        let shape = t.shape().to_vec();
        let y = self.push(
            Tensor::raw(shape, out),
            Op::Affine { x: normalized, gamma, beta, axis: batch_axis },
        );
        Ok((y, update))
    }

    pub fn relu(&mut self, a: Var) -> Var {
        let out = self.value(a).map(|v| v.max(0.0));
        self.push(out, Op::Relu(a))
    }

    pub fn tanh(&mut self, a: Var) -> Var {
        let out = self.value(a).map(f64::tanh);
        self.push(out, Op::Tanh(a))
    }

    pub fn sigmoid(&mut self, a: Var) -> Var {
        let out = self.value(a).map(sigmoid);
        self.push(out, Op::Sigmoid(a))
    }

    pub fn abs(&mut self, a: Var) -> Var {
        let out = self.value(a).map(f64::abs);
        self.push(out, Op::Abs(a))
    }

    /// Mean along `axis`, keeping the reduced axis with length 1.
    pub fn mean_axis(&mut self, x: Var, axis: usize) -> Result<Var> {
        let (r, c) = self.check_axis(x, axis)?;
        let g = Groups::new(r, c, axis);
        if g.len == 0 {
            return Err(DiffError::EmptyAxis { op: "mean_axis" });
        }
        let xv = self.value(x).data();
        let out: Vec<f64> = (0..g.count)
            .map(|gi| (0..g.len).map(|i| xv[g.idx(gi, i)]).sum::<f64>() / g.len as f64)
            .collect();
        let shape = if axis == 1 { vec![r, 1] } else { vec![1, c] };
        Ok(self.push(Tensor::raw(shape, out), Op::MeanAxis { x, axis }))
    }

    /// Softmax along `axis`.
    pub fn softmax_axis(&mut self, x: Var, axis: usize) -> Result<Var> {
        let (r, c) = self.check_axis(x, axis)?;
        let g = Groups::new(r, c, axis);
        if g.len == 0 {
            return Err(DiffError::EmptyAxis { op: "softmax_axis" });
        }
        let xv = self.value(x).data();
        let mut out = vec![0.0; xv.len()];
        for gi in 0..g.count {
            let max = (0..g.len).map(|i| xv[g.idx(gi, i)]).fold(f64::NEG_INFINITY, f64::max);
            let mut total = 0.0;
            for i in 0..g.len {
                let k = g.idx(gi, i);
                out[k] = (xv[k] - max).exp();
                total += out[k];
            }
            for i in 0..g.len {
                out[g.idx(gi, i)] /= total;
            }
        }
        let shape = self.value(x).shape().to_vec();
        Ok(self.push(Tensor::raw(shape, out), Op::SoftmaxAxis { x, axis }))
    }

    /// Channel-wise soft threshold of a `C×N` map with thresholds `t` (`C`
    /// entries, any 1-d or `C×1` shape).
    pub fn soft_threshold(&mut self, x: Var, t: Var, kind: SoftThresholdKind) -> Result<Var> {
        let (c, n) = self.dims2(x, "soft_threshold")?;
        let tv = self.value(t).data();
        if tv.len() != c {
            return Err(shape_err("soft_threshold", format!("{c} thresholds"), tv.len()));
        }
        if let Some(&neg) = tv.iter().find(|&&v| v < 0.0) {
            return Err(DiffError::NegativeThreshold(neg));
        }
        let xv = self.value(x).data();
        let mut out = vec![0.0; xv.len()];
        for ch in 0..c {
            for i in 0..n {
                out[ch * n + i] = soft_threshold_value(xv[ch * n + i], tv[ch], kind);
            }
        }
        let shape = self.value(x).shape().to_vec();
        Ok(self.push(Tensor::raw(shape, out), Op::SoftThreshold { x, t, kind }))
    }

    /// Records an externally computed result along with its backward rule.
    pub fn custom(&mut self, inputs: &[Var], output: Tensor, op: Box<dyn CustomOp>) -> Result<Var> {
        if !output.is_finite() {
            return Err(DiffError::NonFinite { op: op.name() });
        }
        Ok(self.push(output, Op::Custom { inputs: inputs.to_vec(), op }))
    }

    /// Reverse sweep from a scalar `loss`. Parameter gradients are added to
    /// the store (so repeated calls accumulate); gradients of every node are
    /// returned.
    pub fn backward(&self, loss: Var, store: &mut ParamStore) -> Result<Gradients> {
        let lv = self.value(loss);
        if !lv.is_scalar() {
            return Err(DiffError::NonScalarLoss(lv.shape().to_vec()));
        }
        if !lv.is_finite() {
            return Err(DiffError::NonFinite { op: "backward" });
        }
        let mut grads: Vec<Option<Tensor>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[loss.0] = Some(Tensor::raw(lv.shape().to_vec(), vec![1.0]));

        for i in (0..=loss.0).rev() {
            let node = &self.nodes[i];
            if !node.needs_grad {
                continue;
            }
            let Some(g) = grads[i].take() else { continue };
            let contributions = self.node_backward(node, &g);
            for (input, contrib) in node.op.inputs().into_iter().zip(contributions) {
                let Some(contrib) = contrib else { continue };
                if !self.nodes[input.0].needs_grad {
                    continue;
                }
                if !contrib.is_finite() {
                    return Err(DiffError::NumericalGradient { op: node.op.name() });
                }
                match &mut grads[input.0] {
                    Some(acc) => acc.add_assign(&contrib),
                    slot @ None => *slot = Some(contrib),
                }
            }
            grads[i] = Some(g);
        }

        for (node, g) in self.nodes.iter().zip(&grads) {
            if let (Op::Param(id), Some(g)) = (&node.op, g) {
                store.get_mut(*id).grad.add_assign(g);
            }
        }
        Ok(Gradients { grads })
    }

    fn node_backward(&self, node: &Node, g: &Tensor) -> Vec<Option<Tensor>> {
        let gv = g.data();
        let val = |v: &Var| &self.nodes[v.0].value;
        let needs = |v: &Var| self.nodes[v.0].needs_grad;
        let shaped = |like: &Tensor, data: Vec<f64>| Tensor::raw(like.shape().to_vec(), data);
        match &node.op {
            Op::Leaf | Op::Param(_) => vec![],
            Op::LinearMap { x, w, b } => {
                let (xt, wt) = (val(x), val(w));
                let (cin, n) = (xt.rows(), xt.cols());
                let cout = wt.rows();
                // dx = Wᵀ g, dW = g xᵀ
                let dx = needs(x).then(|| shaped(xt, matmul_tn_kernel(wt.data(), gv, cin, cout, n)));
                let dw = needs(w).then(|| shaped(wt, matmul_nt_kernel(gv, xt.data(), cout, n, cin)));
                let db = needs(b).then(|| {
                    let db = (0..cout).map(|c| lane_sum(&gv[c * n..(c + 1) * n])).collect();
                    shaped(val(b), db)
                });
                vec![dx, dw, db]
            }
            Op::MatMul { a, b } => {
                let (at, bt) = (val(a), val(b));
                let (m, k, n) = (at.rows(), at.cols(), bt.cols());
                // dA = g · Bᵀ, dB = Aᵀ · g
                let da = needs(a).then(|| shaped(at, matmul_nt_kernel(gv, bt.data(), m, n, k)));
                let db = needs(b).then(|| shaped(bt, matmul_tn_kernel(at.data(), gv, k, m, n)));
                vec![da, db]
            }
            Op::MatMulNT { a, b } => {
                let (at, bt) = (val(a), val(b));
                let (m, k, n) = (at.rows(), at.cols(), bt.rows());
                // out = A Bᵀ: dA = g · B, dB = gᵀ · A
                let da = needs(a).then(|| shaped(at, matmul_kernel(gv, bt.data(), m, n, k)));
                let db = needs(b).then(|| shaped(bt, matmul_tn_kernel(gv, at.data(), n, m, k)));
                vec![da, db]
            }
            Op::Add(_, _) => vec![Some(g.clone()), Some(g.clone())],
            Op::Mul(a, b) => {
                let (at, bt) = (val(a), val(b));
                let da = gv.iter().zip(bt.data()).map(|(g, y)| g * y).collect();
                let db = gv.iter().zip(at.data()).map(|(g, x)| g * x).collect();
                vec![Some(shaped(at, da)), Some(shaped(bt, db))]
            }
            Op::Scale(a, s) => vec![Some(shaped(val(a), gv.iter().map(|g| g * s).collect()))],
            Op::Sum(a) => vec![Some(Tensor::filled(val(a).shape(), gv[0]))],
            Op::ConcatRows(a, b) => {
                let split = val(a).len();
                vec![
                    Some(shaped(val(a), gv[..split].to_vec())),
                    Some(shaped(val(b), gv[split..].to_vec())),
                ]
            }
            Op::Transpose(a) => vec![Some(shaped(val(a), g.transpose().into_data()))],
            Op::Reshape(a) => vec![Some(shaped(val(a), gv.to_vec()))],
            Op::Normalize { axis, inv_std, .. } => {
                let y = &node.value;
                let grp = Groups::new(y.rows(), y.cols(), *axis);
                let yv = y.data();
                let mut dx = vec![0.0; yv.len()];
                for gi in 0..grp.count {
                    let len = grp.len as f64;
                    let mg = grp.sum(gi, |k| gv[k]) / len;
                    let mgy = grp.sum(gi, |k| gv[k] * yv[k]) / len;
                    for i in 0..grp.len {
                        let k = grp.idx(gi, i);
                        dx[k] = inv_std[gi] * (gv[k] - mg - yv[k] * mgy);
                    }
                }
                vec![Some(shaped(y, dx))]
            }
            Op::FixedAffine { axis, scale, .. } => {
                let y = &node.value;
                let grp = Groups::new(y.rows(), y.cols(), *axis);
                let mut dx = vec![0.0; gv.len()];
                for gi in 0..grp.count {
                    for i in 0..grp.len {
                        let k = grp.idx(gi, i);
                        dx[k] = gv[k] * scale[gi];
                    }
                }
                vec![Some(shaped(y, dx))]
            }
            Op::Affine { x, gamma, beta, axis } => {
                let xt = val(x);
                let grp = Groups::new(xt.rows(), xt.cols(), *axis);
                let gam = val(gamma).data();
                let mut dx = vec![0.0; gv.len()];
                let mut dgam = vec![0.0; grp.count];
                let mut dbeta = vec![0.0; grp.count];
                let xv = xt.data();
                for gi in 0..grp.count {
                    for i in 0..grp.len {
                        let k = grp.idx(gi, i);
                        dx[k] = gv[k] * gam[gi];
                    }
                    dgam[gi] = grp.sum(gi, |k| gv[k] * xv[k]);
                    dbeta[gi] = grp.sum(gi, |k| gv[k]);
                }
                vec![
                    Some(shaped(xt, dx)),
                    Some(shaped(val(gamma), dgam)),
                    Some(shaped(val(beta), dbeta)),
                ]
            }
            Op::Relu(a) => {
                let d = gv
                    .iter()
                    .zip(val(a).data())
                    .map(|(g, &x)| if x > 0.0 { *g } else { 0.0 })
                    .collect();
                vec![Some(shaped(val(a), d))]
            }
            Op::Tanh(a) => {
                let d = gv.iter().zip(node.value.data()).map(|(g, y)| g * (1.0 - y * y)).collect();
                vec![Some(shaped(val(a), d))]
            }
            Op::Sigmoid(a) => {
                let d = gv.iter().zip(node.value.data()).map(|(g, y)| g * y * (1.0 - y)).collect();
                vec![Some(shaped(val(a), d))]
            }
            Op::Abs(a) => {
                let d = gv
                    .iter()
                    .zip(val(a).data())
                    .map(|(g, &x)| {
                        if x > 0.0 {
                            *g
                        } else if x < 0.0 {
                            -g
                        } else {
                            0.0
                        }
                    })
                    .collect();
                vec![Some(shaped(val(a), d))]
            }
            Op::MeanAxis { x, axis } => {
                let xt = val(x);
                let grp = Groups::new(xt.rows(), xt.cols(), *axis);
                let mut dx = vec![0.0; xt.len()];
                for gi in 0..grp.count {
                    let share = gv[gi] / grp.len as f64;
                    for i in 0..grp.len {
                        dx[grp.idx(gi, i)] = share;
                    }
                }
                vec![Some(shaped(xt, dx))]
            }
            Op::SoftmaxAxis { axis, .. } => {
                let y = &node.value;
                let grp = Groups::new(y.rows(), y.cols(), *axis);
                let yv = y.data();
                let mut dx = vec![0.0; yv.len()];
                for gi in 0..grp.count {
                    let inner: f64 = (0..grp.len)
                        .map(|i| {
                            let k = grp.idx(gi, i);
                            gv[k] * yv[k]
                        })
                        .sum();
                    for i in 0..grp.len {
                        let k = grp.idx(gi, i);
                        dx[k] = yv[k] * (gv[k] - inner);
                    }
                }
                vec![Some(shaped(y, dx))]
            }
            Op::SoftThreshold { x, t, kind } => {
                let (xt, tt) = (val(x), val(t));
                let (c, n) = (xt.rows(), xt.cols());
                let mut dx = vec![0.0; xt.len()];
                let mut dt = vec![0.0; c];
                for ch in 0..c {
                    let th = tt.data()[ch];
                    for i in 0..n {
                        let k = ch * n + i;
                        let xv = xt.data()[k];
                        let slope = soft_threshold_slope(xv, th, *kind);
                        dx[k] = gv[k] * slope;
                        dt[ch] -= gv[k] * slope * xv.signum();
                    }
                }
                vec![Some(shaped(xt, dx)), Some(shaped(tt, dt))]
            }
            Op::Custom { inputs, op } => {
                let ins: Vec<&Tensor> = inputs.iter().map(val).collect();
                op.backward(&ins, &node.value, g)
            }
        }
    }
}

pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

#[inline]
/// Sum with eight interleaved accumulators, which lets the compiler
/// vectorize the loop; the summation order is fixed.
fn lane_sum(a: &[f64]) -> f64 {
    let mut acc = [0.0; 8];
    let chunks = a.chunks_exact(8);
    let tail: f64 = chunks.remainder().iter().sum();
    for c in chunks {
        for i in 0..8 {
            acc[i] += c[i];
        }
    }
    acc.iter().sum::<f64>() + tail
}

/// Strides of a row-major `rows×cols` matrix, optionally read transposed.
#[derive(Clone, Copy)]
struct View {
    row: isize,
    col: isize,
}

impl View {
    fn normal(cols: usize) -> Self {
        Self { row: cols as isize, col: 1 }
    }

    /// The transpose of a row-major matrix with `cols` columns.
    fn transposed(cols: usize) -> Self {
        Self { row: 1, col: cols as isize }
    }
}

/// `out += A (m×k) · B (k×n)` for row-major `out`, with `A` and `B` read
/// through the given views.
fn gemm_acc(a: &[f64], av: View, b: &[f64], bv: View, out: &mut [f64], m: usize, k: usize, n: usize) {
    assert!(a.len() >= m * k && b.len() >= k * n && out.len() == m * n);
    if m == 0 || n == 0 || k == 0 {
        return;
    }
    // SAFETY: every index reached through the views is below m·k (for `a`)
    // or k·n (for `b`), which the assertion bounds; `out` is a distinct
    // mutable borrow of exactly m×n elements, so nothing aliases it.
    unsafe {
        matrixmultiply::dgemm(
            m,
            k,
            n,
            1.0,
            a.as_ptr(),
            av.row,
            av.col,
            b.as_ptr(),
            bv.row,
            bv.col,
            1.0,
            out.as_mut_ptr(),
            n as isize,
            1,
        );
    }
}

/// `a (m×k) · b (k×n)`.
fn matmul_kernel(a: &[f64], b: &[f64], m: usize, k: usize, n: usize) -> Vec<f64> {
    let mut out = vec![0.0; m * n];
    gemm_acc(a, View::normal(k), b, View::normal(n), &mut out, m, k, n);
    out
}

/// `a (m×k) · bᵀ` for `b` of shape `n×k`.
fn matmul_nt_kernel(a: &[f64], b: &[f64], m: usize, k: usize, n: usize) -> Vec<f64> {
    let mut out = vec![0.0; m * n];
    gemm_acc(a, View::normal(k), b, View::transposed(k), &mut out, m, k, n);
    out
}

/// `aᵀ · b` for `a` of shape `k×m` and `b` of shape `k×n`.
fn matmul_tn_kernel(a: &[f64], b: &[f64], m: usize, k: usize, n: usize) -> Vec<f64> {
    let mut out = vec![0.0; m * n];
    gemm_acc(a, View::transposed(m), b, View::normal(n), &mut out, m, k, n);
    out
}
