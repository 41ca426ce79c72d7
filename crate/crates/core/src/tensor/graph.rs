use std::cell::Cell;

use super::kernels;
use super::Tensor;
use crate::error::{Error, Result};

/// Variance floor used by [`Graph::standardize`].
pub const STANDARDIZE_EPS: f64 = 1e-5;

thread_local! {
    static OFFDIAG_SIGN_FLIP: Cell<bool> = const { Cell::new(false) };
}

/// Deliberate-fault switches for the verification harness.
#[doc(hidden)]
pub mod fault {
    /// Flips the sign of the off-diagonal term in the forward value of
    /// [`super::Graph::cross_correlation_penalty`] while leaving its
    /// backward pass untouched. Thread-local.
    pub fn set_offdiag_sign_flip(on: bool) {
        super::OFFDIAG_SIGN_FLIP.with(|c| c.set(on));
    }
}

/// Handle to a node of a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug)]
enum Op {
    Leaf,
    MatMul(usize, usize),
    MatMulBt(usize, usize),
    Transpose(usize),
    Add(usize, usize),
    Sub(usize, usize),
    Mul(usize, usize),
    Div(usize, usize),
    Scale(usize, f64),
    AddScalar(usize),
    Relu(usize),
    Abs(usize),
    Sqrt(usize),
    Log(usize),
    Exp(usize),
    Square(usize),
    Softplus(usize),
    Sum(usize),
    Mean(usize),
    SumAxis(usize, usize),
    MeanAxis(usize, usize),
    VarAxis(usize, usize),
    L2NormAxis(usize, usize),
    Standardize {
        x: usize,
        inv_std: Vec<f64>,
        floored: Vec<bool>,
    },
    Softmax(usize, usize),
    LogSoftmax(usize, usize),
    Concat(Vec<usize>, usize),
    GatherRows(usize, Vec<usize>),
    Detach,
    CrossCorrelation {
        a: usize,
        b: usize,
        lambda: f64,
        corr: Vec<f64>,
    },
}

#[derive(Debug)]
struct Node {
    rows: usize,
    cols: usize,
    value: Vec<f64>,
    op: Op,
    requires_grad: bool,
}

/// Gradients produced by [`Graph::backward`], indexed by leaf.
#[derive(Debug)]
pub struct Gradients {
    grads: Vec<Option<Vec<f64>>>,
}

impl Gradients {
    /// Gradient of the loss with respect to a gradient-tracked leaf.
    /// `None` for constants, detached nodes and unreachable leaves.
    pub fn get(&self, var: Var) -> Option<&[f64]> {
        self.grads.get(var.0).and_then(|g| g.as_deref())
    }
}

/// An append-only tape of operations. Nodes are created in topological
/// order, so the tape is acyclic by construction.
#[derive(Debug, Default)]
pub struct Graph {
    nodes: Vec<Node>,
}

/// Element index of position `j` within lane `lane` when reducing along `axis`.
#[inline]
fn lane_index(axis: usize, cols: usize, lane: usize, j: usize) -> usize {
    if axis == 1 {
        lane * cols + j
    } else {
        j * cols + lane
    }
}

fn lanes(axis: usize, rows: usize, cols: usize) -> (usize, usize) {
    if axis == 1 {
        (rows, cols)
    } else {
        (cols, rows)
    }
}

fn broadcast_dims(op: &'static str, a: (usize, usize), b: (usize, usize)) -> Result<(usize, usize)> {
    let dim = |x: usize, y: usize| {
        if x == y || y == 1 {
            Some(x)
        } else if x == 1 {
            Some(y)
        } else {
            None
        }
    };
    match (dim(a.0, b.0), dim(a.1, b.1)) {
        (Some(r), Some(c)) => Ok((r, c)),
        _ => Err(Error::shape(op, &[a.0, a.1], &[b.0, b.1])),
    }
}

/// Sums a full `[rows, cols]` gradient down to a broadcast operand's shape.
fn reduce_to(full: Vec<f64>, rows: usize, cols: usize, tr: usize, tc: usize) -> Vec<f64> {
    if tr == rows && tc == cols {
        return full;
    }
    let mut out = vec![0.0; tr * tc];
    for i in 0..rows {
        let ti = if tr == 1 { 0 } else { i };
        for j in 0..cols {
            let tj = if tc == 1 { 0 } else { j };
            out[ti * tc + tj] += full[i * cols + j];
        }
    }
    out
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

    fn push(&mut self, rows: usize, cols: usize, value: Vec<f64>, op: Op, requires_grad: bool) -> Var {
        debug_assert_eq!(rows * cols, value.len());
        self.nodes.push(Node {
            rows,
            cols,
            value,
            op,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn node(&self, v: Var) -> &Node {
        &self.nodes[v.0]
    }

    fn rg(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    pub fn dims(&self, v: Var) -> (usize, usize) {
        let n = self.node(v);
        (n.rows, n.cols)
    }

    pub fn value(&self, v: Var) -> &[f64] {
        &self.node(v).value
    }

    /// The single value of a `[1, 1]` node.
    pub fn scalar(&self, v: Var) -> f64 {
        self.node(v).value[0]
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.rg(v)
    }

    pub fn to_tensor(&self, v: Var) -> Tensor {
        let n = self.node(v);
        Tensor::matrix(n.rows, n.cols, n.value.clone()).expect("graph nodes have consistent storage")
    }

    // ---------------------------------------------------------------
    // leaves

    /// Inserts a copy of `t`; gradient-tracked iff `t.requires_grad`.
    pub fn leaf(&mut self, t: &Tensor) -> Var {
        let (r, c) = t.dims();
        self.push(r, c, t.values().to_vec(), Op::Leaf, t.requires_grad)
    }

    /// Inserts a copy of `t` that never receives gradients.
    pub fn constant(&mut self, t: &Tensor) -> Var {
        let (r, c) = t.dims();
        self.push(r, c, t.values().to_vec(), Op::Leaf, false)
    }

    pub fn input(&mut self, rows: usize, cols: usize, values: Vec<f64>) -> Result<Var> {
        if rows == 0 || cols == 0 || rows * cols != values.len() {
            return Err(Error::shape("input", &[rows, cols], &[values.len()]));
        }
        Ok(self.push(rows, cols, values, Op::Leaf, false))
    }

    // ---------------------------------------------------------------
    // linear algebra

    /// `a[m,k] · b[k,n]`
    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (m, k) = self.dims(a);
        let (k2, n) = self.dims(b);
        if k != k2 {
            return Err(Error::shape("matmul", &[m, k], &[k2, n]));
        }
        let v = kernels::matmul(self.value(a), self.value(b), m, k, n);
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(m, n, v, Op::MatMul(a.0, b.0), rg))
    }

    /// `a[m,k] · b[n,k]^T`
    pub fn matmul_bt(&mut self, a: Var, b: Var) -> Result<Var> {
        let (m, k) = self.dims(a);
        let (n, k2) = self.dims(b);
        if k != k2 {
            return Err(Error::shape("matmul_bt", &[m, k], &[n, k2]));
        }
        let v = kernels::matmul_bt(self.value(a), self.value(b), m, k, n);
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(m, n, v, Op::MatMulBt(a.0, b.0), rg))
    }

    pub fn transpose(&mut self, a: Var) -> Var {
        let (r, c) = self.dims(a);
        let v = kernels::transpose(self.value(a), r, c);
        let rg = self.rg(a);
        self.push(c, r, v, Op::Transpose(a.0), rg)
    }

    // ---------------------------------------------------------------
    // elementwise binary ops; each operand dimension must match or be 1

    fn binary(&mut self, name: &'static str, a: Var, b: Var, f: impl Fn(f64, f64) -> f64) -> Result<(usize, usize, Vec<f64>)> {
        let (ar, ac) = self.dims(a);
        let (br, bc) = self.dims(b);
        let (r, c) = broadcast_dims(name, (ar, ac), (br, bc))?;
        let (av, bv) = (self.value(a), self.value(b));
        let out = if (ar, ac) == (br, bc) {
            av.iter().zip(bv).map(|(&x, &y)| f(x, y)).collect()
        } else {
            let mut out = Vec::with_capacity(r * c);
            for i in 0..r {
                let ia = if ar == 1 { 0 } else { i };
                let ib = if br == 1 { 0 } else { i };
                for j in 0..c {
                    let ja = if ac == 1 { 0 } else { j };
                    let jb = if bc == 1 { 0 } else { j };
                    out.push(f(av[ia * ac + ja], bv[ib * bc + jb]));
                }
            }
            out
        };
        Ok((r, c, out))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let (r, c, v) = self.binary("add", a, b, |x, y| x + y)?;
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(r, c, v, Op::Add(a.0, b.0), rg))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        let (r, c, v) = self.binary("sub", a, b, |x, y| x - y)?;
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(r, c, v, Op::Sub(a.0, b.0), rg))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (r, c, v) = self.binary("mul", a, b, |x, y| x * y)?;
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(r, c, v, Op::Mul(a.0, b.0), rg))
    }

    pub fn div(&mut self, a: Var, b: Var) -> Result<Var> {
        let (r, c, v) = self.binary("div", a, b, |x, y| x / y)?;
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(r, c, v, Op::Div(a.0, b.0), rg))
    }

    // ---------------------------------------------------------------
    // elementwise unary ops

    fn unary(&mut self, a: Var, op: Op, f: impl Fn(f64) -> f64) -> Var {
        let (r, c) = self.dims(a);
        let v = self.value(a).iter().map(|&x| f(x)).collect();
        let rg = self.rg(a);
        self.push(r, c, v, op, rg)
    }

    pub fn scale(&mut self, a: Var, s: f64) -> Var {
        self.unary(a, Op::Scale(a.0, s), |x| x * s)
    }

    pub fn neg(&mut self, a: Var) -> Var {
        self.scale(a, -1.0)
    }

    pub fn add_scalar(&mut self, a: Var, s: f64) -> Var {
        self.unary(a, Op::AddScalar(a.0), |x| x + s)
    }

    pub fn relu(&mut self, a: Var) -> Var {
        self.unary(a, Op::Relu(a.0), |x| if x > 0.0 { x } else { 0.0 })
    }

    pub fn abs(&mut self, a: Var) -> Var {
        self.unary(a, Op::Abs(a.0), f64::abs)
    }

    pub fn sqrt(&mut self, a: Var) -> Var {
        self.unary(a, Op::Sqrt(a.0), f64::sqrt)
    }

    pub fn log(&mut self, a: Var) -> Var {
        self.unary(a, Op::Log(a.0), f64::ln)
    }

    pub fn exp(&mut self, a: Var) -> Var {
        self.unary(a, Op::Exp(a.0), f64::exp)
    }

    pub fn square(&mut self, a: Var) -> Var {
        self.unary(a, Op::Square(a.0), |x| x * x)
    }

    /// `ln(1 + e^x)`, evaluated without overflow.
    pub fn softplus(&mut self, a: Var) -> Var {
        self.unary(a, Op::Softplus(a.0), |x| x.max(0.0) + (-x.abs()).exp().ln_1p())
    }

    /// Value-identical copy with no parents: gradients stop here.
    pub fn detach(&mut self, a: Var) -> Var {
        let (r, c) = self.dims(a);
        let v = self.value(a).to_vec();
        self.push(r, c, v, Op::Detach, false)
    }

    // ---------------------------------------------------------------
    // reductions

    pub fn sum(&mut self, a: Var) -> Var {
        let s = self.value(a).iter().sum();
        let rg = self.rg(a);
        self.push(1, 1, vec![s], Op::Sum(a.0), rg)
    }

    pub fn mean(&mut self, a: Var) -> Var {
        let v = self.value(a);
        let s = v.iter().sum::<f64>() / v.len() as f64;
        let rg = self.rg(a);
        self.push(1, 1, vec![s], Op::Mean(a.0), rg)
    }

    fn check_axis(axis: usize) -> Result<()> {
        if axis > 1 {
            return Err(Error::Contract(format!("axis must be 0 or 1, got {axis}")));
        }
        Ok(())
    }

    fn reduced_dims(&self, a: Var, axis: usize) -> (usize, usize) {
        let (r, c) = self.dims(a);
        if axis == 0 {
            (1, c)
        } else {
            (r, 1)
        }
    }

    fn lane_reduce(&self, a: Var, axis: usize, f: impl Fn(&mut dyn Iterator<Item = f64>, usize) -> f64) -> Vec<f64> {
        let (r, c) = self.dims(a);
        let (nl, len) = lanes(axis, r, c);
        let v = self.value(a);
        (0..nl)
            .map(|l| {
                let mut it = (0..len).map(|j| v[lane_index(axis, c, l, j)]);
                f(&mut it, len)
            })
            .collect()
    }

    /// Sum along `axis`, keeping the reduced dimension as 1.
    pub fn sum_axis(&mut self, a: Var, axis: usize) -> Result<Var> {
        Self::check_axis(axis)?;
        let out = self.lane_reduce(a, axis, |it, _| it.sum());
        let (r, c) = self.reduced_dims(a, axis);
        let rg = self.rg(a);
        Ok(self.push(r, c, out, Op::SumAxis(a.0, axis), rg))
    }

    pub fn mean_axis(&mut self, a: Var, axis: usize) -> Result<Var> {
        Self::check_axis(axis)?;
        let out = self.lane_reduce(a, axis, |it, n| it.sum::<f64>() / n as f64);
        let (r, c) = self.reduced_dims(a, axis);
        let rg = self.rg(a);
        Ok(self.push(r, c, out, Op::MeanAxis(a.0, axis), rg))
    }

    /// Biased (population) variance along `axis`.
    pub fn var_axis(&mut self, a: Var, axis: usize) -> Result<Var> {
        Self::check_axis(axis)?;
        let out = self.lane_reduce(a, axis, |it, n| {
            let xs: Vec<f64> = it.collect();
            let mu = xs.iter().sum::<f64>() / n as f64;
            xs.iter().map(|x| (x - mu) * (x - mu)).sum::<f64>() / n as f64
        });
        let (r, c) = self.reduced_dims(a, axis);
        let rg = self.rg(a);
        Ok(self.push(r, c, out, Op::VarAxis(a.0, axis), rg))
    }

    pub fn l2_norm_axis(&mut self, a: Var, axis: usize) -> Result<Var> {
        Self::check_axis(axis)?;
        let out = self.lane_reduce(a, axis, |it, _| it.map(|x| x * x).sum::<f64>().sqrt());
        let (r, c) = self.reduced_dims(a, axis);
        let rg = self.rg(a);
        Ok(self.push(r, c, out, Op::L2NormAxis(a.0, axis), rg))
    }

    // ---------------------------------------------------------------
    // normalization and softmax

    /// Per-column standardization over the batch (rows):
    /// `(x - mean) / sqrt(max(var, STANDARDIZE_EPS))` with biased variance.
    pub fn standardize(&mut self, a: Var) -> Var {
        let (r, c) = self.dims(a);
        let x = self.value(a);
        let n = r as f64;
        let mut mean = vec![0.0; c];
        for i in 0..r {
            for j in 0..c {
                mean[j] += x[i * c + j];
            }
        }
        mean.iter_mut().for_each(|m| *m /= n);
        let mut var = vec![0.0; c];
        for i in 0..r {
            for j in 0..c {
                let d = x[i * c + j] - mean[j];
                var[j] += d * d;
            }
        }
        let mut inv_std = Vec::with_capacity(c);
        let mut floored = Vec::with_capacity(c);
        for v in var {
            let v = v / n;
            floored.push(v <= STANDARDIZE_EPS);
            inv_std.push(1.0 / v.max(STANDARDIZE_EPS).sqrt());
        }
        let mut out = vec![0.0; r * c];
        for i in 0..r {
            for j in 0..c {
                out[i * c + j] = (x[i * c + j] - mean[j]) * inv_std[j];
            }
        }
        let rg = self.rg(a);
        self.push(r, c, out, Op::Standardize { x: a.0, inv_std, floored }, rg)
    }

    fn softmax_values(&self, a: Var, axis: usize, log: bool) -> Vec<f64> {
        let (r, c) = self.dims(a);
        let (nl, len) = lanes(axis, r, c);
        let x = self.value(a);
        let mut out = vec![0.0; r * c];
        for l in 0..nl {
            let mut mx = f64::NEG_INFINITY;
            for j in 0..len {
                mx = mx.max(x[lane_index(axis, c, l, j)]);
            }
            let mut s = 0.0;
            for j in 0..len {
                s += (x[lane_index(axis, c, l, j)] - mx).exp();
            }
            let lse = mx + s.ln();
            for j in 0..len {
                let k = lane_index(axis, c, l, j);
                out[k] = if log { x[k] - lse } else { (x[k] - lse).exp() };
            }
        }
        out
    }

    pub fn softmax(&mut self, a: Var, axis: usize) -> Result<Var> {
        Self::check_axis(axis)?;
        let out = self.softmax_values(a, axis, false);
        let (r, c) = self.dims(a);
        let rg = self.rg(a);
        Ok(self.push(r, c, out, Op::Softmax(a.0, axis), rg))
    }

    pub fn log_softmax(&mut self, a: Var, axis: usize) -> Result<Var> {
        Self::check_axis(axis)?;
        let out = self.softmax_values(a, axis, true);
        let (r, c) = self.dims(a);
        let rg = self.rg(a);
        Ok(self.push(r, c, out, Op::LogSoftmax(a.0, axis), rg))
    }

    // ---------------------------------------------------------------
    // structural ops

    pub fn concat(&mut self, parts: &[Var], axis: usize) -> Result<Var> {
        Self::check_axis(axis)?;
        let first = *parts.first().ok_or_else(|| Error::Contract("concat of zero tensors".into()))?;
        let (r0, c0) = self.dims(first);
        let mut rows = 0;
        let mut cols = 0;
        for &p in parts {
            let (r, c) = self.dims(p);
            if axis == 0 {
                if c != c0 {
                    return Err(Error::shape("concat", &[r0, c0], &[r, c]));
                }
                rows += r;
                cols = c0;
            } else {
                if r != r0 {
                    return Err(Error::shape("concat", &[r0, c0], &[r, c]));
                }
                cols += c;
                rows = r0;
            }
        }
        let mut out = Vec::with_capacity(rows * cols);
        if axis == 0 {
            for &p in parts {
                out.extend_from_slice(self.value(p));
            }
        } else {
            for i in 0..rows {
                for &p in parts {
                    let (_, c) = self.dims(p);
                    out.extend_from_slice(&self.value(p)[i * c..(i + 1) * c]);
                }
            }
        }
        let rg = parts.iter().any(|&p| self.rg(p));
        let ids = parts.iter().map(|p| p.0).collect();
        Ok(self.push(rows, cols, out, Op::Concat(ids, axis), rg))
    }

    /// Selects rows of `a` by index (repeats allowed).
    pub fn gather_rows(&mut self, a: Var, idx: &[usize]) -> Result<Var> {
        let (r, c) = self.dims(a);
        if idx.is_empty() {
            return Err(Error::Contract("gather_rows with no indices".into()));
        }
        if let Some(&bad) = idx.iter().find(|&&i| i >= r) {
            return Err(Error::Contract(format!("gather_rows index {bad} out of range for {r} rows")));
        }
        let out = kernels::gather_rows(self.value(a), c, idx);
        let rg = self.rg(a);
        Ok(self.push(idx.len(), c, out, Op::GatherRows(a.0, idx.to_vec()), rg))
    }

    /// `Σ_d (1 - C_dd)^2 + lambda · Σ_{d≠d'} C_dd'^2` with `C = aᵀb / N`,
    /// for batch-standardized `a`, `b` of shape `[N, D]`.
    pub fn cross_correlation_penalty(&mut self, a: Var, b: Var, lambda: f64) -> Result<Var> {
        let (n, d) = self.dims(a);
        if self.dims(b) != (n, d) {
            let (br, bc) = self.dims(b);
            return Err(Error::shape("cross_correlation_penalty", &[n, d], &[br, bc]));
        }
        let mut corr = kernels::matmul_at(self.value(a), self.value(b), n, d, d);
        corr.iter_mut().for_each(|x| *x /= n as f64);
        let flip = OFFDIAG_SIGN_FLIP.with(|c| c.get());
        let mut on = 0.0;
        let mut off = 0.0;
        for i in 0..d {
            for j in 0..d {
                let v = corr[i * d + j];
                if i == j {
                    on += (1.0 - v) * (1.0 - v);
                } else {
                    off += v * v;
                }
            }
        }
        let total = if flip { on - lambda * off } else { on + lambda * off };
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(
            1,
            1,
            vec![total],
            Op::CrossCorrelation {
                a: a.0,
                b: b.0,
                lambda,
                corr,
            },
            rg,
        ))
    }

    // ---------------------------------------------------------------
    // backward

    /// Reverse-mode sweep from a `[1, 1]` loss. Nodes are visited in
    /// reverse creation order; only nodes that received a gradient are
    /// expanded, so detached branches cost nothing.
    pub fn backward(&self, loss: Var) -> Result<Gradients> {
        let (r, c) = self.dims(loss);
        if (r, c) != (1, 1) {
            return Err(Error::Contract(format!("backward needs a scalar loss, got shape [{r}, {c}]")));
        }
        let mut grads: Vec<Option<Vec<f64>>> = vec![None; self.nodes.len()];
        if !self.rg(loss) {
            return Ok(Gradients { grads });
        }
        grads[loss.0] = Some(vec![1.0]);
        for i in (0..=loss.0).rev() {
            let node = &self.nodes[i];
            if !node.requires_grad || matches!(node.op, Op::Leaf) {
                continue;
            }
            let Some(g) = grads[i].take() else { continue };
            self.propagate(i, &g, &mut grads);
        }
        for (i, n) in self.nodes.iter().enumerate() {
            if !(matches!(n.op, Op::Leaf) && n.requires_grad) {
                grads[i] = None;
            }
        }
        Ok(Gradients { grads })
    }

    fn accumulate(&self, grads: &mut [Option<Vec<f64>>], target: usize, delta: Vec<f64>) {
        if !self.nodes[target].requires_grad {
            return;
        }
        match &mut grads[target] {
            Some(acc) => acc.iter_mut().zip(&delta).for_each(|(a, d)| *a += d),
            slot @ None => *slot = Some(delta),
        }
    }

    fn propagate(&self, i: usize, g: &[f64], grads: &mut [Option<Vec<f64>>]) {
        let node = &self.nodes[i];
        let (rows, cols) = (node.rows, node.cols);
        let y = &node.value;
        let dims = |k: usize| (self.nodes[k].rows, self.nodes[k].cols);
        let val = |k: usize| &self.nodes[k].value[..];
        let wants = |k: usize| self.nodes[k].requires_grad;

        // Expands an operand's value to the output shape (for broadcasts).
        let expand = |k: usize| -> Vec<f64> {
            let (r, c) = dims(k);
            if (r, c) == (rows, cols) {
                return val(k).to_vec();
            }
            let v = val(k);
            let mut out = Vec::with_capacity(rows * cols);
            for a in 0..rows {
                let ia = if r == 1 { 0 } else { a };
                for b in 0..cols {
                    let jb = if c == 1 { 0 } else { b };
                    out.push(v[ia * c + jb]);
                }
            }
            out
        };
        let reduce = |k: usize, full: Vec<f64>| {
            let (r, c) = dims(k);
            reduce_to(full, rows, cols, r, c)
        };

        match &node.op {
            Op::Leaf | Op::Detach => {}
            Op::MatMul(a, b) => {
                let (m, k) = dims(*a);
                let n = cols;
                if wants(*a) {
                    self.accumulate(grads, *a, kernels::matmul_bt(g, val(*b), m, n, k));
                }
                if wants(*b) {
                    self.accumulate(grads, *b, kernels::matmul_at(val(*a), g, m, k, n));
                }
            }
            Op::MatMulBt(a, b) => {
                let (m, k) = dims(*a);
                let n = cols;
                if wants(*a) {
                    self.accumulate(grads, *a, kernels::matmul(g, val(*b), m, n, k));
                }
                if wants(*b) {
                    self.accumulate(grads, *b, kernels::matmul_at(g, val(*a), m, n, k));
                }
            }
            Op::Transpose(a) => {
                self.accumulate(grads, *a, kernels::transpose(g, rows, cols));
            }
            Op::Add(a, b) => {
                if wants(*a) {
                    self.accumulate(grads, *a, reduce(*a, g.to_vec()));
                }
                if wants(*b) {
                    self.accumulate(grads, *b, reduce(*b, g.to_vec()));
                }
            }
            Op::Sub(a, b) => {
                if wants(*a) {
                    self.accumulate(grads, *a, reduce(*a, g.to_vec()));
                }
                if wants(*b) {
                    self.accumulate(grads, *b, reduce(*b, g.iter().map(|x| -x).collect()));
                }
            }
            Op::Mul(a, b) => {
                if wants(*a) {
                    let bv = expand(*b);
                    let full = g.iter().zip(&bv).map(|(g, b)| g * b).collect();
                    self.accumulate(grads, *a, reduce(*a, full));
                }
                if wants(*b) {
                    let av = expand(*a);
                    let full = g.iter().zip(&av).map(|(g, a)| g * a).collect();
                    self.accumulate(grads, *b, reduce(*b, full));
                }
            }
            Op::Div(a, b) => {
                let bv = expand(*b);
                if wants(*a) {
                    let full = g.iter().zip(&bv).map(|(g, b)| g / b).collect();
                    self.accumulate(grads, *a, reduce(*a, full));
                }
                if wants(*b) {
                    let full = g
                        .iter()
                        .zip(y)
                        .zip(&bv)
                        .map(|((g, q), b)| -g * q / b)
                        .collect();
                    self.accumulate(grads, *b, reduce(*b, full));
                }
            }
            Op::Scale(a, s) => {
                self.accumulate(grads, *a, g.iter().map(|x| x * s).collect());
            }
            Op::AddScalar(a) => self.accumulate(grads, *a, g.to_vec()),
            Op::Relu(a) => {
                let d = g.iter().zip(y).map(|(g, y)| if *y > 0.0 { *g } else { 0.0 }).collect();
                self.accumulate(grads, *a, d);
            }
            Op::Abs(a) => {
                let d = g
                    .iter()
                    .zip(val(*a))
                    .map(|(g, x)| if *x > 0.0 { *g } else if *x < 0.0 { -g } else { 0.0 })
                    .collect();
                self.accumulate(grads, *a, d);
            }
            Op::Sqrt(a) => {
                let d = g.iter().zip(y).map(|(g, y)| 0.5 * g / y).collect();
                self.accumulate(grads, *a, d);
            }
            Op::Log(a) => {
                let d = g.iter().zip(val(*a)).map(|(g, x)| g / x).collect();
                self.accumulate(grads, *a, d);
            }
            Op::Exp(a) => {
                let d = g.iter().zip(y).map(|(g, y)| g * y).collect();
                self.accumulate(grads, *a, d);
            }
            Op::Square(a) => {
                let d = g.iter().zip(val(*a)).map(|(g, x)| 2.0 * g * x).collect();
                self.accumulate(grads, *a, d);
            }
            Op::Softplus(a) => {
                let d = g
                    .iter()
                    .zip(val(*a))
                    .map(|(g, x)| {
                        let s = if *x >= 0.0 {
                            1.0 / (1.0 + (-x).exp())
                        } else {
                            let e = x.exp();
                            e / (1.0 + e)
                        };
                        g * s
                    })
                    .collect();
                self.accumulate(grads, *a, d);
            }
            Op::Sum(a) => {
                let n = val(*a).len();
                self.accumulate(grads, *a, vec![g[0]; n]);
            }
            Op::Mean(a) => {
                let n = val(*a).len();
                self.accumulate(grads, *a, vec![g[0] / n as f64; n]);
            }
            Op::SumAxis(a, axis) | Op::MeanAxis(a, axis) => {
                let (r, c) = dims(*a);
                let (nl, len) = lanes(*axis, r, c);
                let scale = if matches!(node.op, Op::MeanAxis(..)) { 1.0 / len as f64 } else { 1.0 };
                let mut d = vec![0.0; r * c];
                for l in 0..nl {
                    for j in 0..len {
                        d[lane_index(*axis, c, l, j)] = g[l] * scale;
                    }
                }
                self.accumulate(grads, *a, d);
            }
            Op::VarAxis(a, axis) => {
                let (r, c) = dims(*a);
                let (nl, len) = lanes(*axis, r, c);
                let x = val(*a);
                let mut d = vec![0.0; r * c];
                for l in 0..nl {
                    let mu = (0..len).map(|j| x[lane_index(*axis, c, l, j)]).sum::<f64>() / len as f64;
                    for j in 0..len {
                        let k = lane_index(*axis, c, l, j);
                        d[k] = g[l] * 2.0 * (x[k] - mu) / len as f64;
                    }
                }
                self.accumulate(grads, *a, d);
            }
            Op::L2NormAxis(a, axis) => {
                let (r, c) = dims(*a);
                let (nl, len) = lanes(*axis, r, c);
                let x = val(*a);
                let mut d = vec![0.0; r * c];
                for l in 0..nl {
                    if y[l] == 0.0 {
                        continue;
                    }
                    for j in 0..len {
                        let k = lane_index(*axis, c, l, j);
                        d[k] = g[l] * x[k] / y[l];
                    }
                }
                self.accumulate(grads, *a, d);
            }
            Op::Standardize { x, inv_std, floored } => {
                let n = rows as f64;
                let mut d = vec![0.0; rows * cols];
                for j in 0..cols {
                    let mut mg = 0.0;
                    let mut mgy = 0.0;
                    for i in 0..rows {
                        let k = i * cols + j;
                        mg += g[k];
                        mgy += g[k] * y[k];
                    }
                    mg /= n;
                    mgy /= n;
                    for i in 0..rows {
                        let k = i * cols + j;
                        let centered = g[k] - mg;
                        d[k] = if floored[j] {
                            centered * inv_std[j]
                        } else {
                            (centered - y[k] * mgy) * inv_std[j]
                        };
                    }
                }
                self.accumulate(grads, *x, d);
            }
            Op::Softmax(a, axis) => {
                let (nl, len) = lanes(*axis, rows, cols);
                let mut d = vec![0.0; rows * cols];
                for l in 0..nl {
                    let mut s = 0.0;
                    for j in 0..len {
                        let k = lane_index(*axis, cols, l, j);
                        s += g[k] * y[k];
                    }
                    for j in 0..len {
                        let k = lane_index(*axis, cols, l, j);
                        d[k] = y[k] * (g[k] - s);
                    }
                }
                self.accumulate(grads, *a, d);
            }
            Op::LogSoftmax(a, axis) => {
                let (nl, len) = lanes(*axis, rows, cols);
                let mut d = vec![0.0; rows * cols];
                for l in 0..nl {
                    let mut s = 0.0;
                    for j in 0..len {
                        s += g[lane_index(*axis, cols, l, j)];
                    }
                    for j in 0..len {
                        let k = lane_index(*axis, cols, l, j);
                        d[k] = g[k] - y[k].exp() * s;
                    }
                }
                self.accumulate(grads, *a, d);
            }
            Op::Concat(parts, axis) => {
                let mut offset = 0;
                for &p in parts {
                    let (r, c) = dims(p);
                    let d = if *axis == 0 {
                        let d = g[offset * cols..(offset + r) * cols].to_vec();
                        offset += r;
                        d
                    } else {
                        let mut d = Vec::with_capacity(r * c);
                        for i in 0..r {
                            d.extend_from_slice(&g[i * cols + offset..i * cols + offset + c]);
                        }
                        offset += c;
                        d
                    };
                    if wants(p) {
                        self.accumulate(grads, p, d);
                    }
                }
            }
            Op::GatherRows(a, idx) => {
                let (r, c) = dims(*a);
                let mut d = vec![0.0; r * c];
                for (out_row, &src) in idx.iter().enumerate() {
                    for j in 0..c {
                        d[src * c + j] += g[out_row * c + j];
                    }
                }
                self.accumulate(grads, *a, d);
            }
            Op::CrossCorrelation { a, b, lambda, corr } => {
                let (n, d) = dims(*a);
                let mut gc = vec![0.0; d * d];
                let scale = g[0] / n as f64;
                for p in 0..d {
                    for q in 0..d {
                        let v = corr[p * d + q];
                        gc[p * d + q] = scale * if p == q { -2.0 * (1.0 - v) } else { 2.0 * lambda * v };
                    }
                }
                if wants(*a) {
                    self.accumulate(grads, *a, kernels::matmul_bt(val(*b), &gc, n, d, d));
                }
                if wants(*b) {
                    self.accumulate(grads, *b, kernels::matmul(val(*a), &gc, n, d, d));
                }
            }
        }
    }
}
