//! Reverse-mode differentiation over a linear record of primitive operations.
//!
//! Every operation appends one node holding its forward value and a local
//! gradient rule; operands always precede their consumers, so replaying the
//! node list backwards is a valid topological traversal.

use crate::error::{Error, Result};
use crate::numcore::Tensor;

/// Handle to a node in a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

/// A discrete choice made during a forward pass (a binarized mask, a top-k
/// selection). Such choices have no gradient; they can be recorded once and
/// replayed so that perturbed re-evaluations stay on the same smooth piece.
#[derive(Clone, Debug, PartialEq)]
pub enum Decision {
    Mask(Vec<bool>),
    Indices(Vec<usize>),
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub enum DecisionMode {
    #[default]
    Free,
    Record,
    Replay,
}

#[derive(Clone, Debug, Default)]
pub struct DecisionLog {
    mode: DecisionMode,
    entries: Vec<Decision>,
    cursor: usize,
}

impl DecisionLog {
    pub fn recording() -> Self {
        DecisionLog {
            mode: DecisionMode::Record,
            ..Default::default()
        }
    }

    /// A log that hands back previously recorded decisions in order.
    pub fn replay(mut recorded: DecisionLog) -> Self {
        recorded.mode = DecisionMode::Replay;
        recorded.cursor = 0;
        recorded
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    fn decide(&mut self, computed: Decision) -> Result<Decision> {
        match self.mode {
            DecisionMode::Free => Ok(computed),
            DecisionMode::Record => {
                self.entries.push(computed.clone());
                Ok(computed)
            }
            DecisionMode::Replay => {
                let d = self.entries.get(self.cursor).cloned().ok_or_else(|| {
                    Error::contract("decision replay exhausted: forward pass diverged")
                })?;
                self.cursor += 1;
                let same_kind = matches!(
                    (&d, &computed),
                    (Decision::Mask(a), Decision::Mask(b)) if a.len() == b.len()
                ) || matches!(
                    (&d, &computed),
                    (Decision::Indices(a), Decision::Indices(b)) if a.len() == b.len()
                );
                if !same_kind {
                    return Err(Error::contract(
                        "decision replay mismatch: forward pass diverged",
                    ));
                }
                Ok(d)
            }
        }
    }
}

#[derive(Clone, Debug)]
enum Op {
    Leaf,
    MatMul(Var, Var),
    MatMulNT(Var, Var),
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    AddRow(Var, Var),
    Scale(Var, f64),
    Relu(Var),
    Sigmoid(Var),
    Softmax {
        x: Var,
        n: usize,
        inner: usize,
    },
    LayerNorm {
        x: Var,
        gain: Var,
        bias: Var,
        xhat: Vec<f64>,
        inv_std: Vec<f64>,
    },
    SliceCols {
        x: Var,
        start: usize,
    },
    ConcatCols(Vec<Var>),
    GatherRows {
        x: Var,
        idx: Vec<usize>,
    },
    ConcatRows(Vec<Var>),
    Sum(Var),
    Mean(Var),
    FocalMean {
        x: Var,
        targets: Vec<f64>,
        alpha: f64,
        gamma: f64,
    },
    BceMean {
        x: Var,
        targets: Vec<f64>,
    },
    Dice {
        x: Var,
        targets: Vec<f64>,
    },
}

#[derive(Clone, Debug)]
struct Node {
    shape: Vec<usize>,
    value: Vec<f64>,
    op: Op,
    requires_grad: bool,
}

/// The differentiation record.
#[derive(Debug, Default)]
pub struct Graph {
    nodes: Vec<Node>,
    grads: Vec<Option<Vec<f64>>>,
    decisions: DecisionLog,
}

fn dim_err(op: &'static str, lhs: &[usize], rhs: &[usize]) -> Error {
    Error::Dimension {
        op,
        lhs: lhs.to_vec(),
        rhs: rhs.to_vec(),
    }
}

pub(crate) fn mm(a: &[f64], b: &[f64], m: usize, k: usize, n: usize) -> Vec<f64> {
    let mut c = vec![0.0; m * n];
    for i in 0..m {
        let crow = &mut c[i * n..(i + 1) * n];
        for p in 0..k {
            let aip = a[i * k + p];
            let brow = &b[p * n..(p + 1) * n];
            for (cv, bv) in crow.iter_mut().zip(brow) {
                *cv += aip * bv;
            }
        }
    }
    c
}

/// `a[m×k] · b[n×k]ᵀ`
pub(crate) fn mm_nt(a: &[f64], b: &[f64], m: usize, k: usize, n: usize) -> Vec<f64> {
    let mut c = vec![0.0; m * n];
    for i in 0..m {
        let arow = &a[i * k..(i + 1) * k];
        for j in 0..n {
            let brow = &b[j * k..(j + 1) * k];
            c[i * n + j] = arow.iter().zip(brow).map(|(x, y)| x * y).sum();
        }
    }
    c
}

/// `a[k×m]ᵀ · b[k×n]`
pub(crate) fn mm_tn(a: &[f64], b: &[f64], k: usize, m: usize, n: usize) -> Vec<f64> {
    let mut c = vec![0.0; m * n];
    for p in 0..k {
        let brow = &b[p * n..(p + 1) * n];
        for i in 0..m {
            let api = a[p * m + i];
            let crow = &mut c[i * n..(i + 1) * n];
            for (cv, bv) in crow.iter_mut().zip(brow) {
                *cv += api * bv;
            }
        }
    }
    c
}

fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// `ln(1 + e^x)` without overflow.
fn softplus(x: f64) -> f64 {
    if x > 0.0 {
        x + (-x).exp().ln_1p()
    } else {
        x.exp().ln_1p()
    }
}

/// Per-element sigmoid focal loss and its derivative with respect to the logit.
fn focal_term(x: f64, target: f64, alpha: f64, gamma: f64) -> (f64, f64) {
    let positive = target >= 0.5;
    let (sign, alpha_t) = if positive {
        (1.0, alpha)
    } else {
        (-1.0, 1.0 - alpha)
    };
    let z = sign * x;
    let pt = sigmoid(z);
    let log_pt = -softplus(-z);
    let one_minus = 1.0 - pt;
    let modulator = if gamma == 0.0 {
        1.0
    } else {
        one_minus.powf(gamma)
    };
    let loss = -alpha_t * modulator * log_pt;
    let dz = alpha_t * gamma * pt * modulator * log_pt - alpha_t * modulator * one_minus;
    (loss, sign * dz)
}

impl Graph {
    pub fn new() -> Self {
        Graph::default()
    }

    pub fn with_decisions(decisions: DecisionLog) -> Self {
        Graph {
            decisions,
            ..Default::default()
        }
    }

    pub fn take_decisions(&mut self) -> DecisionLog {
        std::mem::take(&mut self.decisions)
    }

    /// Routes a discrete choice through the decision log.
    pub fn decide(&mut self, computed: Decision) -> Result<Decision> {
        self.decisions.decide(computed)
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, shape: Vec<usize>, value: Vec<f64>, op: Op, requires_grad: bool) -> Var {
        debug_assert_eq!(shape.iter().product::<usize>(), value.len());
        self.nodes.push(Node {
            shape,
            value,
            op,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn rg(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    /// Records a tensor as a leaf; its `requires_grad` flag is kept.
    pub fn leaf(&mut self, t: &Tensor) -> Var {
        self.push(t.shape().to_vec(), t.data().to_vec(), Op::Leaf, t.requires_grad)
    }

    /// Records data that never receives a gradient.
    pub fn constant(&mut self, shape: Vec<usize>, data: Vec<f64>) -> Result<Var> {
        let t = Tensor::new(shape, data)?;
        Ok(self.leaf(&t))
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        &self.nodes[v.0].shape
    }

    pub fn data(&self, v: Var) -> &[f64] {
        &self.nodes[v.0].value
    }

    pub fn value(&self, v: Var) -> Tensor {
        let n = &self.nodes[v.0];
        Tensor::new(n.shape.clone(), n.value.clone()).expect("node shape is valid")
    }

    pub fn scalar_value(&self, v: Var) -> f64 {
        self.nodes[v.0].value[0]
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.rg(v)
    }

    fn dims2(&self, v: Var, op: &'static str) -> Result<(usize, usize)> {
        match self.shape(v) {
            [r, c] => Ok((*r, *c)),
            s => Err(dim_err(op, s, &[0, 0])),
        }
    }

    /// Standard matrix product `a[m×k] · b[k×n]`.
    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (m, k) = self.dims2(a, "matmul")?;
        let (k2, n) = self.dims2(b, "matmul")?;
        if k != k2 {
            return Err(dim_err("matmul", self.shape(a), self.shape(b)));
        }
        let c = mm(self.data(a), self.data(b), m, k, n);
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(vec![m, n], c, Op::MatMul(a, b), rg))
    }

    /// `a[m×k] · b[n×k]ᵀ`
    pub fn matmul_nt(&mut self, a: Var, b: Var) -> Result<Var> {
        let (m, k) = self.dims2(a, "matmul_nt")?;
        let (n, k2) = self.dims2(b, "matmul_nt")?;
        if k != k2 {
            return Err(dim_err("matmul_nt", self.shape(a), self.shape(b)));
        }
        let c = mm_nt(self.data(a), self.data(b), m, k, n);
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(vec![m, n], c, Op::MatMulNT(a, b), rg))
    }

    fn same_shape(&self, a: Var, b: Var, op: &'static str) -> Result<()> {
        if self.shape(a) != self.shape(b) {
            return Err(dim_err(op, self.shape(a), self.shape(b)));
        }
        Ok(())
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape(a, b, "add")?;
        let v = self.data(a).iter().zip(self.data(b)).map(|(x, y)| x + y).collect();
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(self.shape(a).to_vec(), v, Op::Add(a, b), rg))
    }

    /// `a + b`, or `a` unchanged when `b` is absent.
    pub fn add_opt(&mut self, a: Var, b: Option<Var>) -> Result<Var> {
        match b {
            Some(b) => self.add(a, b),
            None => Ok(a),
        }
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape(a, b, "sub")?;
        let v = self.data(a).iter().zip(self.data(b)).map(|(x, y)| x - y).collect();
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(self.shape(a).to_vec(), v, Op::Sub(a, b), rg))
    }

    /// Elementwise product.
    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape(a, b, "mul")?;
        let v = self.data(a).iter().zip(self.data(b)).map(|(x, y)| x * y).collect();
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(self.shape(a).to_vec(), v, Op::Mul(a, b), rg))
    }

    /// Adds the vector `b[n]` to every row of `a[...×n]`.
    pub fn add_row(&mut self, a: Var, b: Var) -> Result<Var> {
        let n = *self.shape(a).last().unwrap();
        if self.shape(b) != [n] {
            return Err(dim_err("add_row", self.shape(a), self.shape(b)));
        }
        let bias = self.data(b);
        let v = self
            .data(a)
            .chunks(n)
            .flat_map(|row| row.iter().zip(bias).map(|(x, y)| x + y))
            .collect();
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(self.shape(a).to_vec(), v, Op::AddRow(a, b), rg))
    }

    pub fn scale(&mut self, a: Var, s: f64) -> Var {
        let v = self.data(a).iter().map(|x| x * s).collect();
        let rg = self.rg(a);
        self.push(self.shape(a).to_vec(), v, Op::Scale(a, s), rg)
    }

    pub fn relu(&mut self, a: Var) -> Var {
        let v = self.data(a).iter().map(|&x| x.max(0.0)).collect();
        let rg = self.rg(a);
        self.push(self.shape(a).to_vec(), v, Op::Relu(a), rg)
    }

    pub fn sigmoid(&mut self, a: Var) -> Var {
        let v = self.data(a).iter().map(|&x| sigmoid(x)).collect();
        let rg = self.rg(a);
        self.push(self.shape(a).to_vec(), v, Op::Sigmoid(a), rg)
    }

    /// Softmax along `axis`, computed with max subtraction.
    pub fn softmax(&mut self, x: Var, axis: usize) -> Result<Var> {
        self.softmax_masked(x, axis, None)
    }

    /// Softmax along `axis` where entries with `mask == false` get zero
    /// weight. A slice whose mask is entirely false falls back to an
    /// unmasked softmax.
    pub fn softmax_masked(&mut self, x: Var, axis: usize, mask: Option<&[bool]>) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        if axis >= shape.len() {
            return Err(Error::contract(format!(
                "softmax axis {axis} out of range for {shape:?}"
            )));
        }
        let data = self.data(x);
        if let Some(m) = mask {
            if m.len() != data.len() {
                return Err(dim_err("softmax_masked", &shape, &[m.len()]));
            }
        }
        let n = shape[axis];
        let inner: usize = shape[axis + 1..].iter().product();
        let outer: usize = shape[..axis].iter().product();
        let mut out = vec![0.0; data.len()];
        for o in 0..outer {
            for i in 0..inner {
                let idx = |j: usize| (o * n + j) * inner + i;
                let all_blocked = mask.is_some_and(|m| (0..n).all(|j| !m[idx(j)]));
                let active = |j: usize| all_blocked || mask.map_or(true, |m| m[idx(j)]);
                let mut max = f64::NEG_INFINITY;
                for j in 0..n {
                    if active(j) {
                        max = max.max(data[idx(j)]);
                    }
                }
                let mut sum = 0.0;
                for j in 0..n {
                    if active(j) {
                        let e = (data[idx(j)] - max).exp();
                        out[idx(j)] = e;
                        sum += e;
                    }
                }
                for j in 0..n {
                    out[idx(j)] /= sum;
                }
            }
        }
        let rg = self.rg(x);
        Ok(self.push(shape, out, Op::Softmax { x, n, inner }, rg))
    }

    /// Normalizes each slice along the last axis to zero mean and unit
    /// population variance, then applies `gain ⊙ x̂ + bias`.
    pub fn layernorm(&mut self, x: Var, gain: Var, bias: Var, eps: f64) -> Result<Var> {
        let d = *self.shape(x).last().unwrap();
        if self.shape(gain) != [d] || self.shape(bias) != [d] {
            return Err(dim_err("layernorm", self.shape(x), self.shape(gain)));
        }
        let xv = self.data(x);
        let g = self.data(gain);
        let b = self.data(bias);
        let rows = xv.len() / d;
        let mut xhat = vec![0.0; xv.len()];
        let mut inv_std = vec![0.0; rows];
        let mut out = vec![0.0; xv.len()];
        for r in 0..rows {
            let row = &xv[r * d..(r + 1) * d];
            let mean = row.iter().sum::<f64>() / d as f64;
            let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / d as f64;
            let is = 1.0 / (var + eps).sqrt();
            inv_std[r] = is;
            for j in 0..d {
                let h = (row[j] - mean) * is;
                xhat[r * d + j] = h;
                out[r * d + j] = g[j] * h + b[j];
            }
        }
        let rg = self.rg(x) || self.rg(gain) || self.rg(bias);
        Ok(self.push(
            self.shape(x).to_vec(),
            out,
            Op::LayerNorm {
                x,
                gain,
                bias,
                xhat,
                inv_std,
            },
            rg,
        ))
    }

    pub fn slice_cols(&mut self, x: Var, start: usize, len: usize) -> Result<Var> {
        let (r, c) = self.dims2(x, "slice_cols")?;
        if start + len > c || len == 0 {
            return Err(dim_err("slice_cols", self.shape(x), &[start, len]));
        }
        let src = self.data(x);
        let v = (0..r)
            .flat_map(|i| src[i * c + start..i * c + start + len].iter().copied())
            .collect();
        let rg = self.rg(x);
        Ok(self.push(vec![r, len], v, Op::SliceCols { x, start }, rg))
    }

    pub fn concat_cols(&mut self, parts: &[Var]) -> Result<Var> {
        let r = self.dims2(parts[0], "concat_cols")?.0;
        let mut widths = Vec::with_capacity(parts.len());
        for &p in parts {
            let (pr, pc) = self.dims2(p, "concat_cols")?;
            if pr != r {
                return Err(dim_err("concat_cols", self.shape(parts[0]), self.shape(p)));
            }
            widths.push(pc);
        }
        let total: usize = widths.iter().sum();
        let mut v = Vec::with_capacity(r * total);
        for i in 0..r {
            for (&p, &w) in parts.iter().zip(&widths) {
                v.extend_from_slice(&self.data(p)[i * w..(i + 1) * w]);
            }
        }
        let rg = parts.iter().any(|&p| self.rg(p));
        Ok(self.push(vec![r, total], v, Op::ConcatCols(parts.to_vec()), rg))
    }

    /// Rows of `x` at `idx`, in that order (repeats allowed).
    pub fn gather_rows(&mut self, x: Var, idx: &[usize]) -> Result<Var> {
        let (r, c) = self.dims2(x, "gather_rows")?;
        if idx.is_empty() || idx.iter().any(|&i| i >= r) {
            return Err(Error::contract(format!(
                "gather_rows: indices {idx:?} invalid for {r} rows"
            )));
        }
        let src = self.data(x);
        let v = idx
            .iter()
            .flat_map(|&i| src[i * c..(i + 1) * c].iter().copied())
            .collect();
        let rg = self.rg(x);
        Ok(self.push(
            vec![idx.len(), c],
            v,
            Op::GatherRows {
                x,
                idx: idx.to_vec(),
            },
            rg,
        ))
    }

    pub fn concat_rows(&mut self, parts: &[Var]) -> Result<Var> {
        let c = self.dims2(parts[0], "concat_rows")?.1;
        let mut rows = 0;
        for &p in parts {
            let (pr, pc) = self.dims2(p, "concat_rows")?;
            if pc != c {
                return Err(dim_err("concat_rows", self.shape(parts[0]), self.shape(p)));
            }
            rows += pr;
        }
        let v = parts.iter().flat_map(|&p| self.data(p).iter().copied()).collect();
        let rg = parts.iter().any(|&p| self.rg(p));
        Ok(self.push(vec![rows, c], v, Op::ConcatRows(parts.to_vec()), rg))
    }

    pub fn sum(&mut self, x: Var) -> Var {
        let s = self.data(x).iter().sum();
        let rg = self.rg(x);
        self.push(vec![1], vec![s], Op::Sum(x), rg)
    }

    pub fn mean(&mut self, x: Var) -> Var {
        let d = self.data(x);
        let s = d.iter().sum::<f64>() / d.len() as f64;
        let rg = self.rg(x);
        self.push(vec![1], vec![s], Op::Mean(x), rg)
    }

    fn check_targets(&self, x: Var, targets: &[f64], op: &'static str) -> Result<()> {
        if self.data(x).len() != targets.len() {
            return Err(dim_err(op, self.shape(x), &[targets.len()]));
        }
        Ok(())
    }

    /// Mean α-balanced sigmoid focal loss over every element of `x`.
    pub fn focal_loss_mean(&mut self, x: Var, targets: &[f64], alpha: f64, gamma: f64) -> Result<Var> {
        self.check_targets(x, targets, "focal_loss")?;
        let d = self.data(x);
        let s: f64 = d
            .iter()
            .zip(targets)
            .map(|(&l, &t)| focal_term(l, t, alpha, gamma).0)
            .sum();
        let v = s / d.len() as f64;
        let rg = self.rg(x);
        Ok(self.push(
            vec![1],
            vec![v],
            Op::FocalMean {
                x,
                targets: targets.to_vec(),
                alpha,
                gamma,
            },
            rg,
        ))
    }

    /// Mean sigmoid cross-entropy.
    pub fn bce_mean(&mut self, x: Var, targets: &[f64]) -> Result<Var> {
        self.check_targets(x, targets, "bce")?;
        let d = self.data(x);
        let s: f64 = d.iter().zip(targets).map(|(&l, &t)| softplus(l) - t * l).sum();
        let v = s / d.len() as f64;
        let rg = self.rg(x);
        Ok(self.push(
            vec![1],
            vec![v],
            Op::BceMean {
                x,
                targets: targets.to_vec(),
            },
            rg,
        ))
    }

    /// `1 − (2Σpg + 1)/(Σp + Σg + 1)` with `p = sigmoid(x)`.
    pub fn dice_loss(&mut self, x: Var, targets: &[f64]) -> Result<Var> {
        self.check_targets(x, targets, "dice")?;
        let (num, den) = dice_sums(self.data(x), targets);
        let rg = self.rg(x);
        Ok(self.push(
            vec![1],
            vec![1.0 - num / den],
            Op::Dice {
                x,
                targets: targets.to_vec(),
            },
            rg,
        ))
    }

    /// Replays the record backward from a scalar `loss`. Gradients
    /// accumulate additively over every use of a node.
    pub fn backward(&mut self, loss: Var) -> Result<()> {
        if self.nodes[loss.0].value.len() != 1 {
            return Err(Error::contract(format!(
                "backward requires a scalar loss, got shape {:?}",
                self.nodes[loss.0].shape
            )));
        }
        let mut grads: Vec<Option<Vec<f64>>> = vec![None; self.nodes.len()];
        if self.nodes[loss.0].requires_grad {
            grads[loss.0] = Some(vec![1.0]);
        }
        for i in (0..=loss.0).rev() {
            let Some(g) = grads[i].take() else { continue };
            if !self.nodes[i].requires_grad {
                continue;
            }
            self.propagate(i, &g, &mut grads);
            grads[i] = Some(g);
        }
        for (i, node) in self.nodes.iter().enumerate() {
            if node.requires_grad && grads[i].is_none() {
                grads[i] = Some(vec![0.0; node.value.len()]);
            }
        }
        self.grads = grads;
        Ok(())
    }

    /// Gradient of the last `backward` loss with respect to `v`.
    pub fn grad(&self, v: Var) -> Option<&[f64]> {
        self.grads.get(v.0).and_then(|g| g.as_deref())
    }

    fn propagate(&self, i: usize, g: &[f64], grads: &mut [Option<Vec<f64>>]) {
        let node = &self.nodes[i];
        let nodes = &self.nodes;
        let mut acc = |v: Var, f: &mut dyn FnMut(&mut [f64])| {
            if !nodes[v.0].requires_grad {
                return;
            }
            let slot = grads[v.0].get_or_insert_with(|| vec![0.0; nodes[v.0].value.len()]);
            f(slot);
        };
        let add_into = |dst: &mut [f64], src: &[f64]| {
            dst.iter_mut().zip(src).for_each(|(d, s)| *d += s);
        };
        match &node.op {
            Op::Leaf => {}
            Op::MatMul(a, b) => {
                let (m, k) = (nodes[a.0].shape[0], nodes[a.0].shape[1]);
                let n = nodes[b.0].shape[1];
                if nodes[a.0].requires_grad {
                    let da = mm_nt(g, &nodes[b.0].value, m, n, k);
                    acc(*a, &mut |d| add_into(d, &da));
                }
                if nodes[b.0].requires_grad {
                    let db = mm_tn(&nodes[a.0].value, g, m, k, n);
                    acc(*b, &mut |d| add_into(d, &db));
                }
            }
            Op::MatMulNT(a, b) => {
                let (m, k) = (nodes[a.0].shape[0], nodes[a.0].shape[1]);
                let n = nodes[b.0].shape[0];
                if nodes[a.0].requires_grad {
                    let da = mm(g, &nodes[b.0].value, m, n, k);
                    acc(*a, &mut |d| add_into(d, &da));
                }
                if nodes[b.0].requires_grad {
                    let db = mm_tn(g, &nodes[a.0].value, m, n, k);
                    acc(*b, &mut |d| add_into(d, &db));
                }
            }
            Op::Add(a, b) => {
                acc(*a, &mut |d| add_into(d, g));
                acc(*b, &mut |d| add_into(d, g));
            }
            Op::Sub(a, b) => {
                acc(*a, &mut |d| add_into(d, g));
                acc(*b, &mut |d| d.iter_mut().zip(g).for_each(|(d, s)| *d -= s));
            }
            Op::Mul(a, b) => {
                let (av, bv) = (&nodes[a.0].value, &nodes[b.0].value);
                acc(*a, &mut |d| {
                    for j in 0..d.len() {
                        d[j] += g[j] * bv[j];
                    }
                });
                acc(*b, &mut |d| {
                    for j in 0..d.len() {
                        d[j] += g[j] * av[j];
                    }
                });
            }
            Op::AddRow(a, b) => {
                acc(*a, &mut |d| add_into(d, g));
                acc(*b, &mut |d| {
                    let n = d.len();
                    for row in g.chunks(n) {
                        add_into(d, row);
                    }
                });
            }
            Op::Scale(a, s) => {
                acc(*a, &mut |d| d.iter_mut().zip(g).for_each(|(d, v)| *d += s * v));
            }
            Op::Relu(a) => {
                let av = &nodes[a.0].value;
                acc(*a, &mut |d| {
                    for j in 0..d.len() {
                        if av[j] > 0.0 {
                            d[j] += g[j];
                        }
                    }
                });
            }
            Op::Sigmoid(a) => {
                let y = &node.value;
                acc(*a, &mut |d| {
                    for j in 0..d.len() {
                        d[j] += g[j] * y[j] * (1.0 - y[j]);
                    }
                });
            }
            Op::Softmax { x, n, inner } => {
                let (n, inner) = (*n, *inner);
                let y = &node.value;
                let outer = y.len() / (n * inner);
                acc(*x, &mut |d| {
                    for o in 0..outer {
                        for i in 0..inner {
                            let idx = |j: usize| (o * n + j) * inner + i;
                            let dot: f64 = (0..n).map(|j| y[idx(j)] * g[idx(j)]).sum();
                            for j in 0..n {
                                d[idx(j)] += y[idx(j)] * (g[idx(j)] - dot);
                            }
                        }
                    }
                });
            }
            Op::LayerNorm {
                x,
                gain,
                bias,
                xhat,
                inv_std,
            } => {
                let dim = nodes[gain.0].value.len();
                let gv = &nodes[gain.0].value;
                acc(*gain, &mut |d| {
                    for (r, row) in g.chunks(dim).enumerate() {
                        for j in 0..dim {
                            d[j] += row[j] * xhat[r * dim + j];
                        }
                    }
                });
                acc(*bias, &mut |d| {
                    for row in g.chunks(dim) {
                        add_into(d, row);
                    }
                });
                acc(*x, &mut |d| {
                    for (r, row) in g.chunks(dim).enumerate() {
                        let h = &xhat[r * dim..(r + 1) * dim];
                        let mut mean_dh = 0.0;
                        let mut mean_dh_h = 0.0;
                        for j in 0..dim {
                            let dh = row[j] * gv[j];
                            mean_dh += dh;
                            mean_dh_h += dh * h[j];
                        }
                        mean_dh /= dim as f64;
                        mean_dh_h /= dim as f64;
                        for j in 0..dim {
                            let dh = row[j] * gv[j];
                            d[r * dim + j] += inv_std[r] * (dh - mean_dh - h[j] * mean_dh_h);
                        }
                    }
                });
            }
            Op::SliceCols { x, start } => {
                let c = nodes[x.0].shape[1];
                let len = node.shape[1];
                acc(*x, &mut |d| {
                    for (r, row) in g.chunks(len).enumerate() {
                        add_into(&mut d[r * c + start..r * c + start + len], row);
                    }
                });
            }
            Op::ConcatCols(parts) => {
                let total = node.shape[1];
                let mut offset = 0;
                for p in parts {
                    let w = nodes[p.0].shape[1];
                    acc(*p, &mut |d| {
                        for (r, row) in g.chunks(total).enumerate() {
                            add_into(&mut d[r * w..(r + 1) * w], &row[offset..offset + w]);
                        }
                    });
                    offset += w;
                }
            }
            Op::GatherRows { x, idx } => {
                let c = node.shape[1];
                acc(*x, &mut |d| {
                    for (r, &src) in idx.iter().enumerate() {
                        add_into(&mut d[src * c..(src + 1) * c], &g[r * c..(r + 1) * c]);
                    }
                });
            }
            Op::ConcatRows(parts) => {
                let mut offset = 0;
                for p in parts {
                    let len = nodes[p.0].value.len();
                    acc(*p, &mut |d| add_into(d, &g[offset..offset + len]));
                    offset += len;
                }
            }
            Op::Sum(x) => {
                acc(*x, &mut |d| d.iter_mut().for_each(|v| *v += g[0]));
            }
            Op::Mean(x) => {
                let s = g[0] / nodes[x.0].value.len() as f64;
                acc(*x, &mut |d| d.iter_mut().for_each(|v| *v += s));
            }
            Op::FocalMean {
                x,
                targets,
                alpha,
                gamma,
            } => {
                let xv = &nodes[x.0].value;
                let s = g[0] / xv.len() as f64;
                acc(*x, &mut |d| {
                    for j in 0..d.len() {
                        d[j] += s * focal_term(xv[j], targets[j], *alpha, *gamma).1;
                    }
                });
            }
            Op::BceMean { x, targets } => {
                let xv = &nodes[x.0].value;
                let s = g[0] / xv.len() as f64;
                acc(*x, &mut |d| {
                    for j in 0..d.len() {
                        d[j] += s * (sigmoid(xv[j]) - targets[j]);
                    }
                });
            }
            Op::Dice { x, targets } => {
                let xv = &nodes[x.0].value;
                let (num, den) = dice_sums(xv, targets);
                acc(*x, &mut |d| {
                    for j in 0..d.len() {
                        let p = sigmoid(xv[j]);
                        let dp = -(2.0 * targets[j] * den - num) / (den * den);
                        d[j] += g[0] * dp * p * (1.0 - p);
                    }
                });
            }
        }
    }
}

fn dice_sums(logits: &[f64], targets: &[f64]) -> (f64, f64) {
    let mut inter = 0.0;
    let mut sp = 0.0;
    let mut sg = 0.0;
    for (&l, &t) in logits.iter().zip(targets) {
        let p = sigmoid(l);
        inter += p * t;
        sp += p;
        sg += t;
    }
    (2.0 * inter + 1.0, sp + sg + 1.0)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn t(rows: &[Vec<f64>]) -> Tensor {
        Tensor::from_rows(rows).unwrap()
    }

    #[test]
    fn matmul_known_product() {
        let mut g = Graph::new();
        let a = g.leaf(&t(&[vec![1.0, 2.0], vec![3.0, 4.0]]));
        let b = g.leaf(&t(&[vec![5.0, 6.0], vec![7.0, 8.0]]));
        let c = g.matmul(a, b).unwrap();
        assert_eq!(g.data(c), &[19.0, 22.0, 43.0, 50.0]);
    }

    #[test]
    fn matmul_identity() {
        let mut g = Graph::new();
        let a = t(&[vec![1.5, -2.0, 0.25], vec![3.0, 4.0, 7.0]]);
        let av = g.leaf(&a);
        let id = g.leaf(&Tensor::identity(3));
        let c = g.matmul(av, id).unwrap();
        assert_eq!(g.data(c), a.data());
    }

    #[test]
    fn matmul_shape_error_names_both_shapes() {
        let mut g = Graph::new();
        let a = g.leaf(&Tensor::zeros(vec![2, 3]));
        let b = g.leaf(&Tensor::zeros(vec![2, 3]));
        let err = g.matmul(a, b).unwrap_err();
        let msg = err.to_string();
        assert!(msg.contains("[2, 3]"), "{msg}");
        assert!(matches!(err, Error::Dimension { .. }));
    }

    #[test]
    fn softmax_cases() {
        let mut g = Graph::new();
        let x = g.constant(vec![4], vec![0.7; 4]).unwrap();
        let y = g.softmax(x, 0).unwrap();
        for v in g.data(y) {
            assert!((v - 0.25).abs() < 1e-15);
        }
        let x = g.constant(vec![2], vec![0.0, 2f64.ln()]).unwrap();
        let y = g.softmax(x, 0).unwrap();
        assert!((g.data(y)[0] - 1.0 / 3.0).abs() < 1e-15);
        assert!((g.data(y)[1] - 2.0 / 3.0).abs() < 1e-15);
    }

    #[test]
    fn softmax_masked_all_false_row_falls_back() {
        let mut g = Graph::new();
        let x = g.constant(vec![2, 2], vec![0.0, 2f64.ln(), 1.0, 5.0]).unwrap();
        let y = g
            .softmax_masked(x, 1, Some(&[false, false, true, false]))
            .unwrap();
        let d = g.data(y);
        assert!((d[0] - 1.0 / 3.0).abs() < 1e-15);
        assert_eq!(&d[2..], &[1.0, 0.0]);
    }

    #[test]
    fn softmax_axis_zero_of_matrix() {
        let mut g = Graph::new();
        let x = g.constant(vec![2, 3], vec![1.0, 2.0, 3.0, 1.0, 0.0, 3.0]).unwrap();
        let y = g.softmax(x, 0).unwrap();
        let d = g.data(y).to_vec();
        assert!((d[0] - 0.5).abs() < 1e-15);
        assert!((d[0] + d[3] - 1.0).abs() < 1e-15);
        assert!((d[1] + d[4] - 1.0).abs() < 1e-15);
    }

    #[test]
    fn layernorm_cases() {
        let mut g = Graph::new();
        let one = g.constant(vec![2], vec![1.0, 1.0]).unwrap();
        let zero = g.constant(vec![2], vec![0.0, 0.0]).unwrap();
        let x = g.constant(vec![1, 2], vec![3.0, 3.0]).unwrap();
        let y = g.layernorm(x, one, zero, 1e-5).unwrap();
        assert_eq!(g.data(y), &[0.0, 0.0]);

        let x = g.constant(vec![1, 2], vec![1.0, 3.0]).unwrap();
        let y = g.layernorm(x, one, zero, 1e-12).unwrap();
        assert!((g.data(y)[0] + 1.0).abs() < 1e-10);
        assert!((g.data(y)[1] - 1.0).abs() < 1e-10);

        let gain0 = g.constant(vec![2], vec![0.0, 0.0]).unwrap();
        let bias = g.constant(vec![2], vec![0.5, -2.0]).unwrap();
        let y = g.layernorm(x, gain0, bias, 1e-5).unwrap();
        assert_eq!(g.data(y), &[0.5, -2.0]);
    }

    #[test]
    fn backward_square() {
        let mut g = Graph::new();
        let x = g.leaf(&Tensor::scalar(3.0).with_grad());
        let y = g.mul(x, x).unwrap();
        g.backward(y).unwrap();
        assert_eq!(g.grad(x).unwrap(), &[6.0]);
    }

    #[test]
    fn backward_constant_loss_gives_zero_grads() {
        let mut g = Graph::new();
        let x = g.leaf(&Tensor::scalar(3.0).with_grad());
        let c = g.constant(vec![1], vec![4.0]).unwrap();
        g.backward(c).unwrap();
        assert_eq!(g.grad(x).unwrap(), &[0.0]);
    }

    #[test]
    fn backward_rejects_non_scalar() {
        let mut g = Graph::new();
        let x = g.leaf(&Tensor::zeros(vec![2]).with_grad());
        assert!(matches!(g.backward(x), Err(Error::Contract(_))));
    }

    #[test]
    fn focal_known_value() {
        let mut g = Graph::new();
        let x = g.constant(vec![1], vec![0.0]).unwrap();
        let l = g.focal_loss_mean(x, &[1.0], 0.25, 2.0).unwrap();
        let expected = 0.25 * 0.25 * 2f64.ln();
        assert!((g.scalar_value(l) - expected).abs() < 1e-15);
        assert!((g.scalar_value(l) - 0.04332).abs() < 1e-5);
    }

    #[test]
    fn decision_replay_returns_recorded_values() {
        let mut rec = Graph::with_decisions(DecisionLog::recording());
        rec.decide(Decision::Mask(vec![true, false])).unwrap();
        rec.decide(Decision::Indices(vec![3, 1])).unwrap();
        let log = rec.take_decisions();
        let mut rep = Graph::with_decisions(DecisionLog::replay(log));
        assert_eq!(
            rep.decide(Decision::Mask(vec![false, false])).unwrap(),
            Decision::Mask(vec![true, false])
        );
        assert_eq!(
            rep.decide(Decision::Indices(vec![0, 0])).unwrap(),
            Decision::Indices(vec![3, 1])
        );
        assert!(rep.decide(Decision::Mask(vec![true])).is_err());
    }
}
