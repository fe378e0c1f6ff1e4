//! Reverse-mode differentiation over a linear tape.
//!
//! Every forward operation appends a node holding its value and the record
//! needed to push gradients back to its parents. Node values are checked for
//! NaN/Inf as they are produced.

use super::array::{axis_split, gemm_nn, gemm_nt, gemm_tn, Tensor};
use super::rng::Rng;
use crate::error::{Error, Result};

/// Handle to a node on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Lower clamp bound for probabilities fed to binary cross-entropy.
pub const PROB_EPS: f64 = 1e-7;

#[derive(Debug)]
enum Op {
    Leaf,
    MatMul(Var, Var),
    MatMulNT(Var, Var),
    Linear { x: Var, w: Var, b: Option<Var> },
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Div(Var, Var),
    AddRow(Var, Var),
    Scale(Var, f64),
    AddScalar(Var),
    Relu(Var),
    Sigmoid(Var),
    Abs(Var),
    Maximum(Var, Var),
    Minimum(Var, Var),
    Softmax { x: Var, outer: usize, n: usize, inner: usize },
    LayerNorm { x: Var, gain: Var, bias: Var, xhat: Vec<f64>, inv_std: Vec<f64> },
    CrossEntropyRows { logits: Var, targets: Vec<f64>, weights: Vec<f64>, probs: Vec<f64> },
    BceRows { p: Var, targets: Vec<f64>, weights: Vec<f64> },
    Concat { parts: Vec<Var>, outer: usize, inner: usize, extents: Vec<usize> },
    Slice { x: Var, outer: usize, n: usize, inner: usize, start: usize, len: usize },
    GatherRows { x: Var, idx: Vec<usize> },
    Reshape(Var),
    Transpose(Var),
    Sum(Var),
    WeightedSum { x: Var, weights: Vec<f64> },
    Dropout { x: Var, mask: Vec<f64> },
}

struct Node {
    value: Tensor,
    op: Op,
    requires_grad: bool,
}

/// A differentiation graph. Confined to one thread; build one per sample or batch.
#[derive(Default)]
pub struct Tape {
    nodes: Vec<Node>,
    leaf_grads: Vec<Option<Vec<f64>>>,
}

impl std::fmt::Debug for Tape {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("Tape").field("nodes", &self.nodes.len()).finish()
    }
}

impl Tape {
    pub fn new() -> Self {
        Tape::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, value: Tensor, op: Op, requires_grad: bool, name: &'static str) -> Result<Var> {
        if !value.is_finite() {
            return Err(Error::NonFinite { op: name });
        }
        self.nodes.push(Node { value, op, requires_grad });
        Ok(Var(self.nodes.len() - 1))
    }

    fn rg(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    /// Adds an input tensor. Gradients are accumulated for it only when
    /// `requires_grad` is set.
    pub fn leaf(&mut self, value: Tensor, requires_grad: bool) -> Result<Var> {
        self.push(value, Op::Leaf, requires_grad, "leaf")
    }

    pub fn constant(&mut self, value: Tensor) -> Result<Var> {
        self.leaf(value, false)
    }

    pub fn variable(&mut self, value: Tensor) -> Result<Var> {
        self.leaf(value, true)
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.rg(v)
    }

    fn dims2(&self, v: Var, op: &'static str) -> Result<(usize, usize)> {
        match self.shape(v) {
            [m, n] => Ok((*m, *n)),
            s => Err(Error::shape(op, format!("expected 2-D operand, got {:?}", s))),
        }
    }

    fn same_shape(&self, a: Var, b: Var, op: &'static str) -> Result<()> {
        if self.shape(a) != self.shape(b) {
            return Err(Error::shape(op, format!("{:?} vs {:?}", self.shape(a), self.shape(b))));
        }
        Ok(())
    }

    /// `a[m,k] · b[k,n]`
    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (m, k) = self.dims2(a, "matmul")?;
        let (k2, n) = self.dims2(b, "matmul")?;
        if k != k2 {
            return Err(Error::shape("matmul", format!("[{m},{k}] x [{k2},{n}]")));
        }
        let mut out = vec![0.0; m * n];
        gemm_nn(self.value(a).data(), self.value(b).data(), &mut out, m, k, n);
        let rg = self.rg(a) || self.rg(b);
        self.push(Tensor::new(&[m, n], out)?, Op::MatMul(a, b), rg, "matmul")
    }

    /// `a[m,k] · b[n,k]ᵀ`
    pub fn matmul_nt(&mut self, a: Var, b: Var) -> Result<Var> {
        let (m, k) = self.dims2(a, "matmul_nt")?;
        let (n, k2) = self.dims2(b, "matmul_nt")?;
        if k != k2 {
            return Err(Error::shape("matmul_nt", format!("[{m},{k}] x [{n},{k2}]^T")));
        }
        let mut out = vec![0.0; m * n];
        gemm_nt(self.value(a).data(), self.value(b).data(), &mut out, m, k, n);
        let rg = self.rg(a) || self.rg(b);
        self.push(Tensor::new(&[m, n], out)?, Op::MatMulNT(a, b), rg, "matmul_nt")
    }

    /// Affine map on rows: `x[n,in] · w[out,in]ᵀ + b[out]`.
    pub fn linear(&mut self, x: Var, w: Var, b: Option<Var>) -> Result<Var> {
        let (n, din) = self.dims2(x, "linear")?;
        let (dout, din2) = self.dims2(w, "linear")?;
        if din != din2 {
            return Err(Error::shape("linear", format!("input width {din} vs weight [{dout},{din2}]")));
        }
        let mut out = vec![0.0; n * dout];
        if let Some(b) = b {
            let bias = self.value(b);
            if bias.len() != dout {
                return Err(Error::shape("linear", format!("bias length {} vs {dout}", bias.len())));
            }
            for row in out.chunks_mut(dout) {
                row.copy_from_slice(bias.data());
            }
        }
        gemm_nt(self.value(x).data(), self.value(w).data(), &mut out, n, din, dout);
        let rg = self.rg(x) || self.rg(w) || b.is_some_and(|b| self.rg(b));
        self.push(Tensor::new(&[n, dout], out)?, Op::Linear { x, w, b }, rg, "linear")
    }

    fn zip_with(&mut self, a: Var, b: Var, op: Op, name: &'static str, f: impl Fn(f64, f64) -> f64) -> Result<Var> {
        self.same_shape(a, b, name)?;
        let va = self.value(a);
        let vb = self.value(b);
        let data = va.data().iter().zip(vb.data()).map(|(x, y)| f(*x, *y)).collect();
        let t = Tensor::new(va.shape(), data)?;
        let rg = self.rg(a) || self.rg(b);
        self.push(t, op, rg, name)
    }

    fn map(&mut self, x: Var, op: Op, name: &'static str, f: impl Fn(f64) -> f64) -> Result<Var> {
        let vx = self.value(x);
        let t = Tensor::new(vx.shape(), vx.data().iter().map(|v| f(*v)).collect())?;
        let rg = self.rg(x);
        self.push(t, op, rg, name)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.zip_with(a, b, Op::Add(a, b), "add", |x, y| x + y)
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.zip_with(a, b, Op::Sub(a, b), "sub", |x, y| x - y)
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.zip_with(a, b, Op::Mul(a, b), "mul", |x, y| x * y)
    }

    pub fn div(&mut self, a: Var, b: Var) -> Result<Var> {
        self.zip_with(a, b, Op::Div(a, b), "div", |x, y| x / y)
    }

    pub fn maximum(&mut self, a: Var, b: Var) -> Result<Var> {
        self.zip_with(a, b, Op::Maximum(a, b), "maximum", f64::max)
    }

    pub fn minimum(&mut self, a: Var, b: Var) -> Result<Var> {
        self.zip_with(a, b, Op::Minimum(a, b), "minimum", f64::min)
    }

    /// Adds vector `row[n]` to every row of `x[.., n]`.
    pub fn add_row(&mut self, x: Var, row: Var) -> Result<Var> {
        let n = self.value(x).cols();
        if self.value(row).len() != n {
            return Err(Error::shape("add_row", format!("row length {} vs width {n}", self.value(row).len())));
        }
        let r = self.value(row).data().to_vec();
        let vx = self.value(x);
        let data = vx.data().chunks(n).flat_map(|c| c.iter().zip(&r).map(|(a, b)| a + b)).collect();
        let t = Tensor::new(vx.shape(), data)?;
        let rg = self.rg(x) || self.rg(row);
        self.push(t, Op::AddRow(x, row), rg, "add_row")
    }

    pub fn scale(&mut self, x: Var, c: f64) -> Result<Var> {
        self.map(x, Op::Scale(x, c), "scale", |v| c * v)
    }

    pub fn add_scalar(&mut self, x: Var, c: f64) -> Result<Var> {
        self.map(x, Op::AddScalar(x), "add_scalar", |v| v + c)
    }

    pub fn relu(&mut self, x: Var) -> Result<Var> {
        self.map(x, Op::Relu(x), "relu", |v| v.max(0.0))
    }

    pub fn sigmoid(&mut self, x: Var) -> Result<Var> {
        self.map(x, Op::Sigmoid(x), "sigmoid", sigmoid)
    }

    pub fn abs(&mut self, x: Var) -> Result<Var> {
        self.map(x, Op::Abs(x), "abs", f64::abs)
    }

    /// Numerically stable softmax along `axis`.
    pub fn softmax(&mut self, x: Var, axis: usize) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        if axis >= shape.len() {
            return Err(Error::shape("softmax", format!("axis {axis} out of range for {:?}", shape)));
        }
        let (outer, n, inner) = axis_split(&shape, axis);
        let src = self.value(x).data();
        let mut out = vec![0.0; src.len()];
        for o in 0..outer {
            for i in 0..inner {
                let idx = |j: usize| (o * n + j) * inner + i;
                let max = (0..n).map(|j| src[idx(j)]).fold(f64::NEG_INFINITY, f64::max);
                let mut z = 0.0;
                for j in 0..n {
                    let e = (src[idx(j)] - max).exp();
                    out[idx(j)] = e;
                    z += e;
                }
                for j in 0..n {
                    out[idx(j)] /= z;
                }
            }
        }
        let rg = self.rg(x);
        self.push(Tensor::new(&shape, out)?, Op::Softmax { x, outer, n, inner }, rg, "softmax")
    }

    /// Normalizes each vector along the last axis, then applies `gain`/`bias`.
    pub fn layer_norm(&mut self, x: Var, gain: Var, bias: Var, eps: f64) -> Result<Var> {
        let d = self.value(x).cols();
        if self.value(gain).len() != d || self.value(bias).len() != d {
            return Err(Error::shape(
                "layer_norm",
                format!("width {d} vs gain {} / bias {}", self.value(gain).len(), self.value(bias).len()),
            ));
        }
        let g = self.value(gain).data().to_vec();
        let b = self.value(bias).data().to_vec();
        let vx = self.value(x);
        let shape = vx.shape().to_vec();
        let rows = vx.len() / d.max(1);
        let mut xhat = vec![0.0; vx.len()];
        let mut inv_std = vec![0.0; rows];
        let mut out = vec![0.0; vx.len()];
        for r in 0..rows {
            let src = &vx.data()[r * d..(r + 1) * d];
            let mean = src.iter().sum::<f64>() / d as f64;
            let var = src.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / d as f64;
            let inv = 1.0 / (var + eps).sqrt();
            inv_std[r] = inv;
            for j in 0..d {
                let h = (src[j] - mean) * inv;
                xhat[r * d + j] = h;
                out[r * d + j] = g[j] * h + b[j];
            }
        }
        let rg = self.rg(x) || self.rg(gain) || self.rg(bias);
        self.push(Tensor::new(&shape, out)?, Op::LayerNorm { x, gain, bias, xhat, inv_std }, rg, "layer_norm")
    }

    /// Weighted row cross-entropy: `Σ_i w_i · (−Σ_k t_ik log softmax(z_i)_k)`.
    ///
    /// Rows with non-zero weight must carry a target distribution summing to 1
    /// (within 1e-9); zero-weight rows are ignored entirely.
    pub fn cross_entropy_rows(&mut self, logits: Var, targets: &Tensor, weights: &[f64]) -> Result<Var> {
        let (n, k) = self.dims2(logits, "cross_entropy")?;
        if targets.shape() != [n, k] || weights.len() != n {
            return Err(Error::shape(
                "cross_entropy",
                format!("logits [{n},{k}], targets {:?}, weights {}", targets.shape(), weights.len()),
            ));
        }
        let z = self.value(logits).data();
        let t = targets.data();
        let mut probs = vec![0.0; n * k];
        let mut loss = 0.0;
        for i in 0..n {
            if weights[i] == 0.0 {
                continue;
            }
            let trow = &t[i * k..(i + 1) * k];
            let tsum: f64 = trow.iter().sum();
            if (tsum - 1.0).abs() > 1e-9 || trow.iter().any(|v| *v < 0.0) {
                return Err(Error::InvalidArgument(format!(
                    "cross-entropy target row {i} is not a probability vector (sum {tsum})"
                )));
            }
            let zrow = &z[i * k..(i + 1) * k];
            let max = zrow.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let lse = max + zrow.iter().map(|v| (v - max).exp()).sum::<f64>().ln();
            let mut row_loss = 0.0;
            for j in 0..k {
                let logp = zrow[j] - lse;
                probs[i * k + j] = logp.exp();
                if trow[j] != 0.0 {
                    row_loss -= trow[j] * logp;
                }
            }
            loss += weights[i] * row_loss;
        }
        let op = Op::CrossEntropyRows {
            logits,
            targets: t.to_vec(),
            weights: weights.to_vec(),
            probs,
        };
        let rg = self.rg(logits);
        self.push(Tensor::scalar(loss), op, rg, "cross_entropy")
    }

    /// Cross-entropy of one logit vector `[K]` against a probability vector `[K]`.
    pub fn cross_entropy(&mut self, logits: Var, target: &[f64]) -> Result<Var> {
        let k = self.value(logits).len();
        let row = self.reshape(logits, &[1, k])?;
        self.cross_entropy_rows(row, &Tensor::new(&[1, k], target.to_vec())?, &[1.0])
    }

    /// Weighted binary cross-entropy `Σ_i w_i · (−t_i log p_i − (1−t_i) log(1−p_i))`
    /// with `p` clamped to `[PROB_EPS, 1 − PROB_EPS]`.
    pub fn bce_rows(&mut self, p: Var, targets: &[f64], weights: &[f64]) -> Result<Var> {
        let n = self.value(p).len();
        if targets.len() != n || weights.len() != n {
            return Err(Error::shape("bce", format!("{n} probabilities, {} targets, {} weights", targets.len(), weights.len())));
        }
        let pv = self.value(p).data();
        let mut loss = 0.0;
        for i in 0..n {
            if weights[i] == 0.0 {
                continue;
            }
            let pc = pv[i].clamp(PROB_EPS, 1.0 - PROB_EPS);
            let t = targets[i];
            loss += weights[i] * (-t * pc.ln() - (1.0 - t) * (1.0 - pc).ln());
        }
        let op = Op::BceRows { p, targets: targets.to_vec(), weights: weights.to_vec() };
        let rg = self.rg(p);
        self.push(Tensor::scalar(loss), op, rg, "bce")
    }

    /// Two-outcome cross-entropy for a single probability.
    pub fn binary_cross_entropy(&mut self, p: Var, target: f64) -> Result<Var> {
        self.bce_rows(p, &[target], &[1.0])
    }

    pub fn concat(&mut self, parts: &[Var], axis: usize) -> Result<Var> {
        let first = parts.first().ok_or_else(|| Error::shape("concat", "no inputs"))?;
        let base = self.shape(*first).to_vec();
        if axis >= base.len() {
            return Err(Error::shape("concat", format!("axis {axis} out of range for {:?}", base)));
        }
        let mut extents = Vec::with_capacity(parts.len());
        for p in parts {
            let s = self.shape(*p);
            let compatible = s.len() == base.len()
                && s.iter().zip(&base).enumerate().all(|(i, (a, b))| i == axis || a == b);
            if !compatible {
                return Err(Error::shape("concat", format!("{:?} vs {:?} along axis {axis}", s, base)));
            }
            extents.push(s[axis]);
        }
        let (outer, _, inner) = axis_split(&base, axis);
        let total: usize = extents.iter().sum();
        let mut out = Vec::with_capacity(outer * total * inner);
        for o in 0..outer {
            for (p, &e) in parts.iter().zip(&extents) {
                let src = self.value(*p).data();
                out.extend_from_slice(&src[o * e * inner..(o + 1) * e * inner]);
            }
        }
        let mut shape = base;
        shape[axis] = total;
        let rg = parts.iter().any(|p| self.rg(*p));
        let op = Op::Concat { parts: parts.to_vec(), outer, inner, extents };
        self.push(Tensor::new(&shape, out)?, op, rg, "concat")
    }

    /// Contiguous range `[start, start+len)` along `axis`.
    pub fn slice(&mut self, x: Var, axis: usize, start: usize, len: usize) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        if axis >= shape.len() || start + len > shape[axis] {
            return Err(Error::shape("slice", format!("[{start}, {}) on axis {axis} of {:?}", start + len, shape)));
        }
        let (outer, n, inner) = axis_split(&shape, axis);
        let src = self.value(x).data();
        let mut out = Vec::with_capacity(outer * len * inner);
        for o in 0..outer {
            out.extend_from_slice(&src[(o * n + start) * inner..(o * n + start + len) * inner]);
        }
        let mut s = shape;
        s[axis] = len;
        let rg = self.rg(x);
        self.push(Tensor::new(&s, out)?, Op::Slice { x, outer, n, inner, start, len }, rg, "slice")
    }

    /// Rows of a 2-D table selected by index (embedding lookup).
    pub fn gather_rows(&mut self, x: Var, idx: &[usize]) -> Result<Var> {
        let (rows, cols) = self.dims2(x, "gather_rows")?;
        if let Some(bad) = idx.iter().find(|i| **i >= rows) {
            return Err(Error::shape("gather_rows", format!("index {bad} out of {rows} rows")));
        }
        let src = self.value(x).data();
        let mut out = Vec::with_capacity(idx.len() * cols);
        for &i in idx {
            out.extend_from_slice(&src[i * cols..(i + 1) * cols]);
        }
        let rg = self.rg(x);
        self.push(Tensor::new(&[idx.len(), cols], out)?, Op::GatherRows { x, idx: idx.to_vec() }, rg, "gather_rows")
    }

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Result<Var> {
        let t = self.value(x).clone().reshaped(shape)?;
        let rg = self.rg(x);
        self.push(t, Op::Reshape(x), rg, "reshape")
    }

    pub fn transpose(&mut self, x: Var) -> Result<Var> {
        let t = self.value(x).transposed()?;
        let rg = self.rg(x);
        self.push(t, Op::Transpose(x), rg, "transpose")
    }

    pub fn sum(&mut self, x: Var) -> Result<Var> {
        let s = self.value(x).data().iter().sum();
        let rg = self.rg(x);
        self.push(Tensor::scalar(s), Op::Sum(x), rg, "sum")
    }

    pub fn mean(&mut self, x: Var) -> Result<Var> {
        let n = self.value(x).len();
        if n == 0 {
            return Err(Error::shape("mean", "empty tensor"));
        }
        let w = vec![1.0 / n as f64; n];
        self.weighted_sum(x, &w)
    }

    /// `Σ_i w_i x_i` over all elements, returning a scalar.
    pub fn weighted_sum(&mut self, x: Var, weights: &[f64]) -> Result<Var> {
        let vx = self.value(x);
        if weights.len() != vx.len() {
            return Err(Error::shape("weighted_sum", format!("{} weights for {} values", weights.len(), vx.len())));
        }
        let s = vx.data().iter().zip(weights).map(|(a, b)| a * b).sum();
        let rg = self.rg(x);
        self.push(Tensor::scalar(s), Op::WeightedSum { x, weights: weights.to_vec() }, rg, "weighted_sum")
    }

    /// Inverted dropout: survivors are scaled by `1/(1−rate)`. Identity when
    /// `rng` is `None` (evaluation mode) or `rate == 0`.
    pub fn dropout(&mut self, x: Var, rate: f64, rng: Option<&mut Rng>) -> Result<Var> {
        if !(0.0..1.0).contains(&rate) {
            return Err(Error::InvalidArgument(format!("dropout rate {rate} outside [0, 1)")));
        }
        let rng = match rng {
            Some(r) if rate > 0.0 => r,
            _ => return Ok(x),
        };
        let keep = 1.0 / (1.0 - rate);
        let n = self.value(x).len();
        let mask: Vec<f64> = (0..n).map(|_| if rng.uniform() < rate { 0.0 } else { keep }).collect();
        let vx = self.value(x);
        let t = Tensor::new(vx.shape(), vx.data().iter().zip(&mask).map(|(a, m)| a * m).collect())?;
        let rg = self.rg(x);
        self.push(t, Op::Dropout { x, mask }, rg, "dropout")
    }

    /// Accumulated gradient of a leaf after [`Tape::backward`].
    pub fn grad(&self, v: Var) -> Option<&[f64]> {
        self.leaf_grads.get(v.0).and_then(|g| g.as_deref())
    }

    pub fn zero_grads(&mut self) {
        self.leaf_grads.clear();
    }

    /// Back-propagates from a scalar `loss`, adding into every reachable leaf
    /// that requires a gradient. Repeated calls accumulate.
    pub fn backward(&mut self, loss: Var) -> Result<()> {
        if self.value(loss).len() != 1 {
            return Err(Error::shape("backward", format!("loss must be scalar, got {:?}", self.shape(loss))));
        }
        if self.leaf_grads.len() < self.nodes.len() {
            self.leaf_grads.resize(self.nodes.len(), None);
        }
        let mut g: Vec<Option<Vec<f64>>> = vec![None; loss.0 + 1];
        g[loss.0] = Some(vec![1.0]);
        for i in (0..=loss.0).rev() {
            let Some(gi) = g[i].take() else { continue };
            let node = &self.nodes[i];
            if !node.requires_grad {
                continue;
            }
            let nodes = &self.nodes;
            let val = |v: Var| nodes[v.0].value.data();
            let mut acc = |v: Var, f: &mut dyn FnMut(&mut [f64])| {
                if !nodes[v.0].requires_grad {
                    return;
                }
                let slot = g[v.0].get_or_insert_with(|| vec![0.0; nodes[v.0].value.len()]);
                f(slot);
            };
            match &node.op {
                Op::Leaf => {
                    let slot = self.leaf_grads[i].get_or_insert_with(|| vec![0.0; gi.len()]);
                    add_into(slot, &gi);
                }
                Op::MatMul(a, b) => {
                    let (m, k) = dims(&nodes[a.0].value);
                    let n = nodes[b.0].value.cols();
                    acc(*a, &mut |s| gemm_nt(&gi, val(*b), s, m, n, k));
                    acc(*b, &mut |s| gemm_tn(val(*a), &gi, s, m, k, n));
                }
                Op::MatMulNT(a, b) => {
                    let (m, k) = dims(&nodes[a.0].value);
                    let n = nodes[b.0].value.rows();
                    acc(*a, &mut |s| gemm_nn(&gi, val(*b), s, m, n, k));
                    acc(*b, &mut |s| gemm_tn(&gi, val(*a), s, m, n, k));
                }
                Op::Linear { x, w, b } => {
                    let (n, din) = dims(&nodes[x.0].value);
                    let dout = nodes[w.0].value.rows();
                    acc(*x, &mut |s| gemm_nn(&gi, val(*w), s, n, dout, din));
                    acc(*w, &mut |s| gemm_tn(&gi, val(*x), s, n, dout, din));
                    if let Some(b) = b {
                        acc(*b, &mut |s| {
                            for row in gi.chunks(dout) {
                                add_into(s, row);
                            }
                        });
                    }
                }
                Op::Add(a, b) => {
                    acc(*a, &mut |s| add_into(s, &gi));
                    acc(*b, &mut |s| add_into(s, &gi));
                }
                Op::Sub(a, b) => {
                    acc(*a, &mut |s| add_into(s, &gi));
                    acc(*b, &mut |s| s.iter_mut().zip(&gi).for_each(|(d, g)| *d -= g));
                }
                Op::Mul(a, b) => {
                    acc(*a, &mut |s| zip3(s, &gi, val(*b), |g, y| g * y));
                    acc(*b, &mut |s| zip3(s, &gi, val(*a), |g, x| g * x));
                }
                Op::Div(a, b) => {
                    let (va, vb) = (val(*a), val(*b));
                    acc(*a, &mut |s| zip3(s, &gi, vb, |g, y| g / y));
                    acc(*b, &mut |s| {
                        for j in 0..s.len() {
                            s[j] -= gi[j] * va[j] / (vb[j] * vb[j]);
                        }
                    });
                }
                Op::AddRow(x, row) => {
                    let n = nodes[row.0].value.len();
                    acc(*x, &mut |s| add_into(s, &gi));
                    acc(*row, &mut |s| {
                        for chunk in gi.chunks(n) {
                            add_into(s, chunk);
                        }
                    });
                }
                Op::Scale(x, c) => acc(*x, &mut |s| s.iter_mut().zip(&gi).for_each(|(d, g)| *d += c * g)),
                Op::AddScalar(x) => acc(*x, &mut |s| add_into(s, &gi)),
                Op::Relu(x) => acc(*x, &mut |s| zip3(s, &gi, val(*x), |g, v| if v > 0.0 { g } else { 0.0 })),
                Op::Sigmoid(x) => {
                    let y = node.value.data();
                    acc(*x, &mut |s| zip3(s, &gi, y, |g, y| g * y * (1.0 - y)));
                }
                Op::Abs(x) => acc(*x, &mut |s| zip3(s, &gi, val(*x), |g, v| g * v.signum() * (v != 0.0) as u8 as f64)),
                Op::Maximum(a, b) | Op::Minimum(a, b) => {
                    // Ties send the gradient to the first operand.
                    let is_max = matches!(node.op, Op::Maximum(..));
                    let (va, vb) = (val(*a), val(*b));
                    let pick_a = |j: usize| if is_max { va[j] >= vb[j] } else { va[j] <= vb[j] };
                    acc(*a, &mut |s| (0..s.len()).for_each(|j| if pick_a(j) { s[j] += gi[j] }));
                    acc(*b, &mut |s| (0..s.len()).for_each(|j| if !pick_a(j) { s[j] += gi[j] }));
                }
                Op::Softmax { x, outer, n, inner } => {
                    let y = node.value.data();
                    let (outer, n, inner) = (*outer, *n, *inner);
                    acc(*x, &mut |s| {
                        for o in 0..outer {
                            for i in 0..inner {
                                let idx = |j: usize| (o * n + j) * inner + i;
                                let dot: f64 = (0..n).map(|j| gi[idx(j)] * y[idx(j)]).sum();
                                for j in 0..n {
                                    s[idx(j)] += y[idx(j)] * (gi[idx(j)] - dot);
                                }
                            }
                        }
                    });
                }
                Op::LayerNorm { x, gain, bias, xhat, inv_std } => {
                    let d = nodes[gain.0].value.len();
                    let gv = val(*gain);
                    acc(*gain, &mut |s| {
                        for (grow, hrow) in gi.chunks(d).zip(xhat.chunks(d)) {
                            for j in 0..d {
                                s[j] += grow[j] * hrow[j];
                            }
                        }
                    });
                    acc(*bias, &mut |s| {
                        for grow in gi.chunks(d) {
                            add_into(s, grow);
                        }
                    });
                    acc(*x, &mut |s| {
                        for (r, inv) in inv_std.iter().enumerate() {
                            let grow = &gi[r * d..(r + 1) * d];
                            let hrow = &xhat[r * d..(r + 1) * d];
                            let dh: Vec<f64> = grow.iter().zip(gv).map(|(g, w)| g * w).collect();
                            let sum_dh: f64 = dh.iter().sum();
                            let sum_dh_h: f64 = dh.iter().zip(hrow).map(|(a, b)| a * b).sum();
                            for j in 0..d {
                                s[r * d + j] += inv / d as f64 * (d as f64 * dh[j] - sum_dh - hrow[j] * sum_dh_h);
                            }
                        }
                    });
                }
                Op::CrossEntropyRows { logits, targets, weights, probs } => {
                    let k = nodes[logits.0].value.cols();
                    let g0 = gi[0];
                    acc(*logits, &mut |s| {
                        for (i, w) in weights.iter().enumerate() {
                            if *w == 0.0 {
                                continue;
                            }
                            let trow = &targets[i * k..(i + 1) * k];
                            let tsum: f64 = trow.iter().sum();
                            for j in 0..k {
                                s[i * k + j] += g0 * w * (probs[i * k + j] * tsum - trow[j]);
                            }
                        }
                    });
                }
                Op::BceRows { p, targets, weights } => {
                    let pv = val(*p);
                    let g0 = gi[0];
                    acc(*p, &mut |s| {
                        for i in 0..s.len() {
                            let pi = pv[i];
                            if weights[i] == 0.0 || pi < PROB_EPS || pi > 1.0 - PROB_EPS {
                                continue;
                            }
                            let t = targets[i];
                            s[i] += g0 * weights[i] * (-t / pi + (1.0 - t) / (1.0 - pi));
                        }
                    });
                }
                Op::Concat { parts, outer, inner, extents } => {
                    let total: usize = extents.iter().sum();
                    let mut offset = 0;
                    for (p, &e) in parts.iter().zip(extents) {
                        acc(*p, &mut |s| {
                            for o in 0..*outer {
                                let src = &gi[(o * total + offset) * inner..(o * total + offset + e) * inner];
                                add_into(&mut s[o * e * inner..(o + 1) * e * inner], src);
                            }
                        });
                        offset += e;
                    }
                }
                Op::Slice { x, outer, n, inner, start, len } => {
                    acc(*x, &mut |s| {
                        for o in 0..*outer {
                            let dst = &mut s[(o * n + start) * inner..(o * n + start + len) * inner];
                            add_into(dst, &gi[o * len * inner..(o + 1) * len * inner]);
                        }
                    });
                }
                Op::GatherRows { x, idx } => {
                    let cols = nodes[x.0].value.cols();
                    acc(*x, &mut |s| {
                        for (r, &i) in idx.iter().enumerate() {
                            add_into(&mut s[i * cols..(i + 1) * cols], &gi[r * cols..(r + 1) * cols]);
                        }
                    });
                }
                Op::Reshape(x) => acc(*x, &mut |s| add_into(s, &gi)),
                Op::Transpose(x) => {
                    let (m, n) = dims(&nodes[x.0].value);
                    acc(*x, &mut |s| {
                        for i in 0..m {
                            for j in 0..n {
                                s[i * n + j] += gi[j * m + i];
                            }
                        }
                    });
                }
                Op::Sum(x) => acc(*x, &mut |s| s.iter_mut().for_each(|d| *d += gi[0])),
                Op::WeightedSum { x, weights } => acc(*x, &mut |s| zip3(s, weights, weights, |w, _| gi[0] * w)),
                Op::Dropout { x, mask } => acc(*x, &mut |s| zip3(s, &gi, mask, |g, m| g * m)),
            }
        }
        Ok(())
    }
}

fn dims(t: &Tensor) -> (usize, usize) {
    (t.rows(), t.cols())
}

fn add_into(dst: &mut [f64], src: &[f64]) {
    dst.iter_mut().zip(src).for_each(|(d, s)| *d += s);
}

fn zip3(dst: &mut [f64], a: &[f64], b: &[f64], f: impl Fn(f64, f64) -> f64) {
    for ((d, x), y) in dst.iter_mut().zip(a).zip(b) {
        *d += f(*x, *y);
    }
}

pub fn sigmoid(v: f64) -> f64 {
    if v >= 0.0 {
        1.0 / (1.0 + (-v).exp())
    } else {
        let e = v.exp();
        e / (1.0 + e)
    }
}
