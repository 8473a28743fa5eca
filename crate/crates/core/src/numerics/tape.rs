//! Tape-based reverse-mode automatic differentiation.
//!
//! Every operation evaluates eagerly and appends a node to the tape. A node
//! only takes part in the backward sweep when at least one of its inputs
//! needs a gradient, so tensors bound with [`Tape::constant`] are detached:
//! they always receive exactly zero gradient.
//!
//! ```
//! use prod_core::numerics::{Tape, Tensor};
//!
//! let mut tape = Tape::new();
//! let x = tape.param(&Tensor::vector(vec![1.0, 2.0, 3.0]).unwrap());
//! let y = tape.dot(x, x).unwrap();
//! tape.backward(y).unwrap();
//! assert_eq!(tape.grad(x).unwrap(), &[2.0, 4.0, 6.0]);
//! ```

use super::distribution::{Distribution, LOG_CLAMP};
use super::kernels;
use super::tensor::Tensor;
use crate::error::{Error, Result};

/// Handle to a node recorded on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug, Clone)]
enum Op {
    Leaf,
    MatMul(Var, Var),
    Add(Var, Var),
    Mul(Var, Var),
    AddRow(Var, Var),
    Tanh(Var),
    MeanRows(Var),
    Gather(Var, Vec<usize>),
    Dot(Var, Var),
    Stack(Vec<Var>),
    Scale(Var, f64),
    Sum(Var),
    WeightedSum(Vec<(Var, f64)>),
    SoftmaxTemp(Var, f64),
    Kl(Vec<f64>, Var),
    CrossEntropy(Var, usize),
}

#[derive(Debug, Clone)]
struct Node {
    rows: usize,
    cols: usize,
    shape: Vec<usize>,
    value: Vec<f64>,
    op: Op,
    needs_grad: bool,
}

/// Ordered record of operations. Inputs always precede outputs, so a single
/// reverse sweep visits every node exactly once.
#[derive(Debug, Default)]
pub struct Tape {
    nodes: Vec<Node>,
    grads: Vec<Option<Vec<f64>>>,
}

impl Tape {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, shape: Vec<usize>, value: Vec<f64>, op: Op, needs_grad: bool) -> Var {
        let (rows, cols) = match shape.as_slice() {
            [n] => (1, *n),
            [r, c] => (*r, *c),
            _ => unreachable!("tape nodes are 1-D or 2-D"),
        };
        debug_assert_eq!(rows * cols, value.len());
        self.nodes.push(Node {
            rows,
            cols,
            shape,
            value,
            op,
            needs_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn node(&self, v: Var) -> &Node {
        &self.nodes[v.0]
    }

    fn flat_shape(t: &Tensor) -> Vec<usize> {
        let (r, c) = t.dims2();
        if t.shape().len() == 1 {
            vec![c]
        } else {
            vec![r, c]
        }
    }

    /// Record a tensor as a leaf; it needs a gradient iff `t.requires_grad()`.
    pub fn leaf(&mut self, t: &Tensor) -> Var {
        self.push(Self::flat_shape(t), t.values().to_vec(), Op::Leaf, t.requires_grad())
    }

    /// Record a tensor as a trainable leaf regardless of its flag.
    pub fn param(&mut self, t: &Tensor) -> Var {
        self.push(Self::flat_shape(t), t.values().to_vec(), Op::Leaf, true)
    }

    /// Record a tensor as a detached leaf regardless of its flag.
    pub fn constant(&mut self, t: &Tensor) -> Var {
        self.push(Self::flat_shape(t), t.values().to_vec(), Op::Leaf, false)
    }

    pub fn value(&self, v: Var) -> &[f64] {
        &self.node(v).value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        &self.node(v).shape
    }

    pub fn scalar(&self, v: Var) -> f64 {
        self.node(v).value[0]
    }

    pub fn to_tensor(&self, v: Var) -> Tensor {
        let n = self.node(v);
        Tensor::new(n.shape.clone(), n.value.clone()).expect("tape values are finite")
    }

    pub fn needs_grad(&self, v: Var) -> bool {
        self.node(v).needs_grad
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (na, nb) = (self.node(a), self.node(b));
        if na.shape.len() != 2 || nb.shape.len() != 2 || na.cols != nb.rows {
            return Err(Error::Shape(format!("matmul of {:?} by {:?}", na.shape, nb.shape)));
        }
        let (m, k, n) = (na.rows, na.cols, nb.cols);
        let out = kernels::matmul(&na.value, &nb.value, m, k, n);
        let g = na.needs_grad || nb.needs_grad;
        Ok(self.push(vec![m, n], out, Op::MatMul(a, b), g))
    }

    fn same_shape(&self, a: Var, b: Var, what: &str) -> Result<()> {
        if self.node(a).shape != self.node(b).shape {
            return Err(Error::Shape(format!(
                "{what} of {:?} and {:?}",
                self.node(a).shape,
                self.node(b).shape
            )));
        }
        Ok(())
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape(a, b, "add")?;
        let (na, nb) = (self.node(a), self.node(b));
        let out = na.value.iter().zip(&nb.value).map(|(x, y)| x + y).collect();
        let g = na.needs_grad || nb.needs_grad;
        Ok(self.push(na.shape.clone(), out, Op::Add(a, b), g))
    }

    /// Elementwise product.
    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape(a, b, "mul")?;
        let (na, nb) = (self.node(a), self.node(b));
        let out = na.value.iter().zip(&nb.value).map(|(x, y)| x * y).collect();
        let g = na.needs_grad || nb.needs_grad;
        Ok(self.push(na.shape.clone(), out, Op::Mul(a, b), g))
    }

    /// Adds the row vector `row` to every row of `a`.
    pub fn add_row(&mut self, a: Var, row: Var) -> Result<Var> {
        let (na, nr) = (self.node(a), self.node(row));
        if nr.rows != 1 || nr.cols != na.cols {
            return Err(Error::Shape(format!(
                "row broadcast of {:?} onto {:?}",
                nr.shape, na.shape
            )));
        }
        let cols = na.cols;
        let out = na
            .value
            .iter()
            .enumerate()
            .map(|(i, x)| x + nr.value[i % cols])
            .collect();
        let g = na.needs_grad || nr.needs_grad;
        Ok(self.push(na.shape.clone(), out, Op::AddRow(a, row), g))
    }

    pub fn tanh(&mut self, a: Var) -> Var {
        let na = self.node(a);
        let out = na.value.iter().map(|x| x.tanh()).collect();
        let g = na.needs_grad;
        self.push(na.shape.clone(), out, Op::Tanh(a), g)
    }

    /// Mean over rows: `[m×n] → [1×n]`.
    pub fn mean_rows(&mut self, a: Var) -> Var {
        let na = self.node(a);
        let (m, n) = (na.rows, na.cols);
        let out = kernels::mean_rows(&na.value, m, n);
        let g = na.needs_grad;
        self.push(vec![1, n], out, Op::MeanRows(a), g)
    }

    /// Selects rows of a 2-D table, producing `[ids.len() × cols]`.
    pub fn gather_rows(&mut self, table: Var, ids: &[usize]) -> Result<Var> {
        let nt = self.node(table);
        if ids.is_empty() {
            return Err(Error::Shape("gather of zero rows".into()));
        }
        if let Some(&bad) = ids.iter().find(|&&i| i >= nt.rows) {
            return Err(Error::Shape(format!(
                "row {bad} out of range for table with {} rows",
                nt.rows
            )));
        }
        let c = nt.cols;
        let mut out = Vec::with_capacity(ids.len() * c);
        for &i in ids {
            out.extend_from_slice(&nt.value[i * c..(i + 1) * c]);
        }
        let g = nt.needs_grad;
        Ok(self.push(vec![ids.len(), c], out, Op::Gather(table, ids.to_vec()), g))
    }

    /// Inner product of two equally sized arrays, producing a scalar.
    pub fn dot(&mut self, a: Var, b: Var) -> Result<Var> {
        let (na, nb) = (self.node(a), self.node(b));
        if na.value.len() != nb.value.len() {
            return Err(Error::Shape(format!("dot of {:?} and {:?}", na.shape, nb.shape)));
        }
        let s = kernels::dot(&na.value, &nb.value);
        let g = na.needs_grad || nb.needs_grad;
        Ok(self.push(vec![1], vec![s], Op::Dot(a, b), g))
    }

    /// Collects scalars into a vector.
    pub fn stack(&mut self, scalars: &[Var]) -> Result<Var> {
        if scalars.is_empty() {
            return Err(Error::Shape("stack of zero scalars".into()));
        }
        let mut out = Vec::with_capacity(scalars.len());
        let mut g = false;
        for &s in scalars {
            let n = self.node(s);
            if n.value.len() != 1 {
                return Err(Error::Shape(format!("stack expects scalars, got {:?}", n.shape)));
            }
            out.push(n.value[0]);
            g |= n.needs_grad;
        }
        Ok(self.push(vec![scalars.len()], out, Op::Stack(scalars.to_vec()), g))
    }

    pub fn scale(&mut self, a: Var, c: f64) -> Var {
        let na = self.node(a);
        let out = na.value.iter().map(|x| x * c).collect();
        let g = na.needs_grad;
        self.push(na.shape.clone(), out, Op::Scale(a, c), g)
    }

    pub fn sum(&mut self, a: Var) -> Var {
        let na = self.node(a);
        let s = na.value.iter().sum();
        let g = na.needs_grad;
        self.push(vec![1], vec![s], Op::Sum(a), g)
    }

    /// `Σ wᵢ·xᵢ` over scalar terms, in the given order.
    pub fn weighted_sum(&mut self, terms: &[(Var, f64)]) -> Result<Var> {
        if terms.is_empty() {
            return Err(Error::Shape("weighted sum of zero terms".into()));
        }
        let mut s = 0.0;
        let mut g = false;
        for &(v, w) in terms {
            let n = self.node(v);
            if n.value.len() != 1 {
                return Err(Error::Shape(format!("weighted sum expects scalars, got {:?}", n.shape)));
            }
            s += w * n.value[0];
            g |= n.needs_grad;
        }
        Ok(self.push(vec![1], vec![s], Op::WeightedSum(terms.to_vec()), g))
    }

    /// `softmax(scores / tau)` with max subtraction.
    pub fn softmax_temp(&mut self, scores: Var, tau: f64) -> Result<Var> {
        check_tau(tau)?;
        let ns = self.node(scores);
        let probs = softmax_values(&ns.value, tau);
        let g = ns.needs_grad;
        Ok(self.push(ns.shape.clone(), probs, Op::SoftmaxTemp(scores, tau), g))
    }

    /// `Σ pᵢ (ln pᵢ − ln max(qᵢ, ε))` with `p` held constant.
    pub fn kl_divergence(&mut self, p: &Distribution, q: Var) -> Result<Var> {
        let nq = self.node(q);
        if nq.value.len() != p.support_size() {
            return Err(Error::Shape(format!(
                "KL support mismatch: {} vs {}",
                p.support_size(),
                nq.value.len()
            )));
        }
        let kl = kl_values(p.probs(), &nq.value);
        let g = nq.needs_grad;
        Ok(self.push(vec![1], vec![kl], Op::Kl(p.probs().to_vec(), q), g))
    }

    /// `−ln softmax(scores)[target]`, computed through log-sum-exp.
    pub fn cross_entropy(&mut self, scores: Var, target: usize) -> Result<Var> {
        let ns = self.node(scores);
        if target >= ns.value.len() {
            return Err(Error::Shape(format!(
                "target {target} out of range for {} scores",
                ns.value.len()
            )));
        }
        let loss = log_sum_exp(&ns.value) - ns.value[target];
        let g = ns.needs_grad;
        Ok(self.push(vec![1], vec![loss], Op::CrossEntropy(scores, target), g))
    }

    /// Current value of a distribution-valued node.
    pub fn distribution(&self, v: Var) -> Result<Distribution> {
        Distribution::new(self.node(v).value.clone())
    }

    /// Clears stored gradients so another backward pass starts from zero.
    pub fn zero_grad(&mut self) {
        self.grads.clear();
    }

    /// Gradient of the last backward pass with respect to `v`. `None` when
    /// `v` does not need a gradient or no backward pass has run.
    pub fn grad(&self, v: Var) -> Option<&[f64]> {
        self.grads.get(v.0).and_then(|g| g.as_deref())
    }

    /// Gradient with respect to `v`, zero-filled when `v` is unreachable.
    pub fn grad_or_zero(&self, v: Var) -> Vec<f64> {
        self.grad(v)
            .map(<[f64]>::to_vec)
            .unwrap_or_else(|| vec![0.0; self.node(v).value.len()])
    }

    /// Propagates `d loss / d node` to every node that needs a gradient.
    /// Gradients of earlier backward passes are discarded.
    pub fn backward(&mut self, loss: Var) -> Result<()> {
        let n = self.node(loss);
        if n.value.len() != 1 {
            return Err(Error::Contract(format!(
                "backward needs a scalar loss, got shape {:?}",
                n.shape
            )));
        }
        let mut grads: Vec<Option<Vec<f64>>> = vec![None; loss.0 + 1];
        if !n.needs_grad {
            self.grads = grads;
            return Ok(());
        }
        grads[loss.0] = Some(vec![1.0]);
        for idx in (0..=loss.0).rev() {
            let Some(g) = grads[idx].take() else {
                continue;
            };
            self.propagate(idx, &g, &mut grads);
            grads[idx] = Some(g);
        }
        for (i, slot) in grads.iter_mut().enumerate() {
            if !self.nodes[i].needs_grad {
                *slot = None;
            }
        }
        self.grads = grads;
        Ok(())
    }

    fn accumulate<'a>(&self, grads: &'a mut [Option<Vec<f64>>], v: Var) -> Option<&'a mut Vec<f64>> {
        let node = &self.nodes[v.0];
        if !node.needs_grad {
            return None;
        }
        Some(grads[v.0].get_or_insert_with(|| vec![0.0; node.value.len()]))
    }

    fn propagate(&self, idx: usize, g: &[f64], grads: &mut [Option<Vec<f64>>]) {
        let node = &self.nodes[idx];
        match &node.op {
            Op::Leaf => {}
            Op::MatMul(a, b) => {
                let (na, nb) = (self.node(*a), self.node(*b));
                let (m, k, n) = (na.rows, na.cols, nb.cols);
                if let Some(ga) = self.accumulate(grads, *a) {
                    // dA = dC · Bᵀ
                    for i in 0..m {
                        let grow = &g[i * n..(i + 1) * n];
                        for p in 0..k {
                            let brow = &nb.value[p * n..(p + 1) * n];
                            ga[i * k + p] += grow.iter().zip(brow).map(|(x, y)| x * y).sum::<f64>();
                        }
                    }
                }
                if let Some(gb) = self.accumulate(grads, *b) {
                    // dB = Aᵀ · dC
                    for i in 0..m {
                        let grow = &g[i * n..(i + 1) * n];
                        for p in 0..k {
                            let av = na.value[i * k + p];
                            if av == 0.0 {
                                continue;
                            }
                            for (o, x) in gb[p * n..(p + 1) * n].iter_mut().zip(grow) {
                                *o += av * x;
                            }
                        }
                    }
                }
            }
            Op::Add(a, b) => {
                for v in [*a, *b] {
                    if let Some(gv) = self.accumulate(grads, v) {
                        gv.iter_mut().zip(g).for_each(|(o, x)| *o += x);
                    }
                }
            }
            Op::Mul(a, b) => {
                let (va, vb) = (&self.node(*a).value, &self.node(*b).value);
                if let Some(ga) = self.accumulate(grads, *a) {
                    for i in 0..g.len() {
                        ga[i] += g[i] * vb[i];
                    }
                }
                if let Some(gb) = self.accumulate(grads, *b) {
                    for i in 0..g.len() {
                        gb[i] += g[i] * va[i];
                    }
                }
            }
            Op::AddRow(a, row) => {
                if let Some(ga) = self.accumulate(grads, *a) {
                    ga.iter_mut().zip(g).for_each(|(o, x)| *o += x);
                }
                let cols = node.cols;
                if let Some(gr) = self.accumulate(grads, *row) {
                    for (i, x) in g.iter().enumerate() {
                        gr[i % cols] += x;
                    }
                }
            }
            Op::Tanh(a) => {
                if let Some(ga) = self.accumulate(grads, *a) {
                    for ((o, x), y) in ga.iter_mut().zip(g).zip(&node.value) {
                        *o += x * (1.0 - y * y);
                    }
                }
            }
            Op::MeanRows(a) => {
                let na = self.node(*a);
                let (m, n) = (na.rows, na.cols);
                let inv = 1.0 / m as f64;
                if let Some(ga) = self.accumulate(grads, *a) {
                    for r in 0..m {
                        for (o, x) in ga[r * n..(r + 1) * n].iter_mut().zip(g) {
                            *o += x * inv;
                        }
                    }
                }
            }
            Op::Gather(table, ids) => {
                let c = node.cols;
                if let Some(gt) = self.accumulate(grads, *table) {
                    for (r, &id) in ids.iter().enumerate() {
                        for (o, x) in gt[id * c..(id + 1) * c].iter_mut().zip(&g[r * c..(r + 1) * c]) {
                            *o += x;
                        }
                    }
                }
            }
            Op::Dot(a, b) => {
                let (va, vb) = (&self.node(*a).value, &self.node(*b).value);
                let s = g[0];
                if let Some(ga) = self.accumulate(grads, *a) {
                    ga.iter_mut().zip(vb).for_each(|(o, y)| *o += s * y);
                }
                if let Some(gb) = self.accumulate(grads, *b) {
                    gb.iter_mut().zip(va).for_each(|(o, x)| *o += s * x);
                }
            }
            Op::Stack(scalars) => {
                for (i, &s) in scalars.iter().enumerate() {
                    if let Some(gs) = self.accumulate(grads, s) {
                        gs[0] += g[i];
                    }
                }
            }
            Op::Scale(a, c) => {
                if let Some(ga) = self.accumulate(grads, *a) {
                    ga.iter_mut().zip(g).for_each(|(o, x)| *o += c * x);
                }
            }
            Op::Sum(a) => {
                if let Some(ga) = self.accumulate(grads, *a) {
                    ga.iter_mut().for_each(|o| *o += g[0]);
                }
            }
            Op::WeightedSum(terms) => {
                for &(v, w) in terms {
                    if let Some(gv) = self.accumulate(grads, v) {
                        gv[0] += w * g[0];
                    }
                }
            }
            Op::SoftmaxTemp(a, tau) => {
                let y = &node.value;
                let inner: f64 = g.iter().zip(y).map(|(x, p)| x * p).sum();
                if let Some(ga) = self.accumulate(grads, *a) {
                    for i in 0..y.len() {
                        ga[i] += y[i] / tau * (g[i] - inner);
                    }
                }
            }
            Op::Kl(p, q) => {
                let vq = &self.node(*q).value;
                if let Some(gq) = self.accumulate(grads, *q) {
                    for i in 0..p.len() {
                        if vq[i] > LOG_CLAMP {
                            gq[i] -= g[0] * p[i] / vq[i];
                        }
                    }
                }
            }
            Op::CrossEntropy(a, target) => {
                let va = &self.node(*a).value;
                let probs = softmax_values(va, 1.0);
                if let Some(ga) = self.accumulate(grads, *a) {
                    for i in 0..probs.len() {
                        let indicator = if i == *target { 1.0 } else { 0.0 };
                        ga[i] += g[0] * (probs[i] - indicator);
                    }
                }
            }
        }
    }
}

pub(crate) fn check_tau(tau: f64) -> Result<()> {
    if !(tau > 0.0) || !tau.is_finite() {
        return Err(Error::Parameter(format!("temperature must be positive, got {tau}")));
    }
    Ok(())
}

pub(crate) fn softmax_values(scores: &[f64], tau: f64) -> Vec<f64> {
    let max = scores.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let exps: Vec<f64> = scores.iter().map(|s| ((s - max) / tau).exp()).collect();
    let z: f64 = exps.iter().sum();
    exps.into_iter().map(|e| e / z).collect()
}

pub(crate) fn log_sum_exp(scores: &[f64]) -> f64 {
    let max = scores.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    max + scores.iter().map(|s| (s - max).exp()).sum::<f64>().ln()
}

pub(crate) fn kl_values(p: &[f64], q: &[f64]) -> f64 {
    p.iter()
        .zip(q)
        .filter(|(&pi, _)| pi > 0.0)
        .map(|(&pi, &qi)| pi * (pi.ln() - qi.max(LOG_CLAMP).ln()))
        .sum()
}
