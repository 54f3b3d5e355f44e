//! Reverse-mode tape.
//!
//! Operations append nodes in evaluation order, so the node vector is already
//! a topological order and `backward` is a single reverse sweep.

use super::matrix::{dot, Matrix};
use crate::error::{Error, Result};

/// Handle to a node on a [`Tape`].
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
    AddRow(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Div(Var, Var),
    Scale(Var, f64),
    AddScalar(Var),
    Relu(Var),
    Sigmoid(Var),
    Exp(Var),
    Log(Var),
    ClampMin(Var, f64),
    Sum(Var),
    Mean(Var),
    SumCols(Var),
    SoftmaxCrossEntropy {
        logits: Var,
        targets: Vec<usize>,
        probs: Matrix,
    },
    LogSoftmax(Var),
    BceWithLogits {
        logits: Var,
        target: Matrix,
    },
    Reparam {
        mu: Var,
        sigma: Var,
        eps: Matrix,
    },
    SquaredError(Var, Var),
    ConcatCols(Vec<Var>),
    SliceCols(Var, usize),
    Transpose(Var),
}

/// A recorded value together with its accumulated gradient.
#[derive(Debug, Clone)]
pub struct Value {
    pub data: Matrix,
    pub grad: Matrix,
    op: Op,
}

#[derive(Debug, Default)]
pub struct Tape {
    nodes: Vec<Value>,
}

fn same_shape(op: &'static str, a: &Matrix, b: &Matrix) -> Result<()> {
    if a.shape() != b.shape() {
        return Err(Error::shape(op, format!("{:?} vs {:?}", a.shape(), b.shape())));
    }
    Ok(())
}

fn zip_map(a: &Matrix, b: &Matrix, f: impl Fn(f64, f64) -> f64) -> Matrix {
    let data = a.as_slice().iter().zip(b.as_slice()).map(|(&x, &y)| f(x, y)).collect();
    Matrix::from_vec(a.rows(), a.cols(), data).expect("shapes checked")
}

#[inline]
fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

#[inline]
fn softplus(x: f64) -> f64 {
    x.max(0.0) + (-x.abs()).exp().ln_1p()
}

fn row_softmax(row: &[f64]) -> (Vec<f64>, f64) {
    let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let exps: Vec<f64> = row.iter().map(|v| (v - max).exp()).collect();
    let total: f64 = exps.iter().sum();
    let lse = max + total.ln();
    (exps.into_iter().map(|e| e / total).collect(), lse)
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

    fn push(&mut self, data: Matrix, op: Op) -> Var {
        let grad = Matrix::zeros(data.rows(), data.cols());
        self.nodes.push(Value { data, grad, op });
        Var(self.nodes.len() - 1)
    }

    /// Records an input or parameter.
    pub fn leaf(&mut self, data: Matrix) -> Var {
        self.push(data, Op::Leaf)
    }

    pub fn value(&self, v: Var) -> &Matrix {
        &self.nodes[v.0].data
    }

    pub fn grad(&self, v: Var) -> &Matrix {
        &self.nodes[v.0].grad
    }

    pub fn node(&self, v: Var) -> &Value {
        &self.nodes[v.0]
    }

    pub fn zero_grads(&mut self) {
        for n in &mut self.nodes {
            n.grad.fill(0.0);
        }
    }

    /// Smallest |pre-activation| seen by any ReLU on this tape, or `None` if
    /// there are no ReLUs. Finite-difference checks use this to stay away
    /// from kinks.
    pub fn relu_margin(&self) -> Option<f64> {
        self.nodes
            .iter()
            .filter_map(|n| match n.op {
                Op::Relu(a) => Some(
                    self.nodes[a.0]
                        .data
                        .as_slice()
                        .iter()
                        .fold(f64::INFINITY, |m, v| m.min(v.abs())),
                ),
                _ => None,
            })
            .reduce(f64::min)
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = self.value(a).matmul(self.value(b))?;
        Ok(self.push(out, Op::MatMul(a, b)))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        same_shape("add", self.value(a), self.value(b))?;
        let out = zip_map(self.value(a), self.value(b), |x, y| x + y);
        Ok(self.push(out, Op::Add(a, b)))
    }

    /// Adds a `1 x n` row to every row of `a`.
    pub fn add_row(&mut self, a: Var, row: Var) -> Result<Var> {
        let (av, rv) = (self.value(a), self.value(row));
        if rv.rows() != 1 || rv.cols() != av.cols() {
            return Err(Error::shape(
                "add_row",
                format!("{:?} plus row {:?}", av.shape(), rv.shape()),
            ));
        }
        let mut out = av.clone();
        for r in 0..out.rows() {
            for (o, b) in out.row_mut(r).iter_mut().zip(rv.as_slice()) {
                *o += b;
            }
        }
        Ok(self.push(out, Op::AddRow(a, row)))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        same_shape("sub", self.value(a), self.value(b))?;
        let out = zip_map(self.value(a), self.value(b), |x, y| x - y);
        Ok(self.push(out, Op::Sub(a, b)))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        same_shape("mul", self.value(a), self.value(b))?;
        let out = zip_map(self.value(a), self.value(b), |x, y| x * y);
        Ok(self.push(out, Op::Mul(a, b)))
    }

    pub fn div(&mut self, a: Var, b: Var) -> Result<Var> {
        same_shape("div", self.value(a), self.value(b))?;
        let out = zip_map(self.value(a), self.value(b), |x, y| x / y);
        Ok(self.push(out, Op::Div(a, b)))
    }

    pub fn scale(&mut self, a: Var, c: f64) -> Var {
        let out = self.value(a).map(|v| v * c);
        self.push(out, Op::Scale(a, c))
    }

    pub fn add_scalar(&mut self, a: Var, c: f64) -> Var {
        let out = self.value(a).map(|v| v + c);
        self.push(out, Op::AddScalar(a))
    }

    pub fn relu(&mut self, a: Var) -> Var {
        let out = self.value(a).map(|v| v.max(0.0));
        self.push(out, Op::Relu(a))
    }

    pub fn sigmoid(&mut self, a: Var) -> Var {
        let out = self.value(a).map(sigmoid);
        self.push(out, Op::Sigmoid(a))
    }

    pub fn exp(&mut self, a: Var) -> Var {
        let out = self.value(a).map(f64::exp);
        self.push(out, Op::Exp(a))
    }

    pub fn log(&mut self, a: Var) -> Var {
        let out = self.value(a).map(f64::ln);
        self.push(out, Op::Log(a))
    }

    /// `max(a, floor)` elementwise; gradient passes where `a > floor`.
    pub fn clamp_min(&mut self, a: Var, floor: f64) -> Var {
        let out = self.value(a).map(|v| v.max(floor));
        self.push(out, Op::ClampMin(a, floor))
    }

    pub fn sum(&mut self, a: Var) -> Var {
        let out = Matrix::scalar(self.value(a).sum());
        self.push(out, Op::Sum(a))
    }

    pub fn mean(&mut self, a: Var) -> Var {
        let m = self.value(a);
        let out = Matrix::scalar(m.sum() / m.len() as f64);
        self.push(out, Op::Mean(a))
    }

    /// Per-row sums, `n x m -> n x 1`.
    pub fn sum_cols(&mut self, a: Var) -> Var {
        let m = self.value(a);
        let data = (0..m.rows()).map(|r| m.row(r).iter().sum()).collect();
        let out = Matrix::from_vec(m.rows(), 1, data).expect("n x 1");
        self.push(out, Op::SumCols(a))
    }

    /// Mean over rows of `-log softmax(logits)[target]`.
    pub fn softmax_cross_entropy(&mut self, logits: Var, targets: &[usize]) -> Result<Var> {
        let l = self.value(logits);
        if targets.len() != l.rows() || l.rows() == 0 {
            return Err(Error::shape(
                "softmax_cross_entropy",
                format!("{} targets for {} rows", targets.len(), l.rows()),
            ));
        }
        let mut probs = Matrix::zeros(l.rows(), l.cols());
        let mut loss = 0.0;
        for (r, &t) in targets.iter().enumerate() {
            if t >= l.cols() {
                return Err(Error::shape(
                    "softmax_cross_entropy",
                    format!("target {t} outside {} classes", l.cols()),
                ));
            }
            let row = l.row(r);
            let (p, lse) = row_softmax(row);
            loss += lse - row[t];
            probs.row_mut(r).copy_from_slice(&p);
        }
        let out = Matrix::scalar(loss / targets.len() as f64);
        Ok(self.push(
            out,
            Op::SoftmaxCrossEntropy {
                logits,
                targets: targets.to_vec(),
                probs,
            },
        ))
    }

    /// Row-wise log-softmax.
    pub fn log_softmax(&mut self, a: Var) -> Var {
        let m = self.value(a);
        let mut out = m.clone();
        for r in 0..m.rows() {
            let (_, lse) = row_softmax(m.row(r));
            out.row_mut(r).iter_mut().for_each(|v| *v -= lse);
        }
        self.push(out, Op::LogSoftmax(a))
    }

    /// Summed Bernoulli negative log-likelihood of `target` under
    /// `sigmoid(logits)`, computed stably from the logits.
    pub fn bce_with_logits(&mut self, logits: Var, target: &Matrix) -> Result<Var> {
        same_shape("bce_with_logits", self.value(logits), target)?;
        let loss: f64 = self
            .value(logits)
            .as_slice()
            .iter()
            .zip(target.as_slice())
            .map(|(&l, &t)| softplus(l) - t * l)
            .sum();
        Ok(self.push(
            Matrix::scalar(loss),
            Op::BceWithLogits {
                logits,
                target: target.clone(),
            },
        ))
    }

    /// `mu + sigma * eps` with externally drawn `eps`.
    pub fn reparam(&mut self, mu: Var, sigma: Var, eps: &Matrix) -> Result<Var> {
        same_shape("reparam", self.value(mu), self.value(sigma))?;
        same_shape("reparam", self.value(mu), eps)?;
        let mut out = zip_map(self.value(sigma), eps, |s, e| s * e);
        out.add_assign(self.value(mu));
        Ok(self.push(
            out,
            Op::Reparam {
                mu,
                sigma,
                eps: eps.clone(),
            },
        ))
    }

    /// `sum((a - b)^2)`.
    pub fn squared_error(&mut self, a: Var, b: Var) -> Result<Var> {
        same_shape("squared_error", self.value(a), self.value(b))?;
        let s = self
            .value(a)
            .as_slice()
            .iter()
            .zip(self.value(b).as_slice())
            .map(|(x, y)| (x - y) * (x - y))
            .sum();
        Ok(self.push(Matrix::scalar(s), Op::SquaredError(a, b)))
    }

    pub fn concat_cols(&mut self, parts: &[Var]) -> Result<Var> {
        let rows = match parts.first() {
            Some(&p) => self.value(p).rows(),
            None => return Err(Error::shape("concat_cols", "no operands")),
        };
        let mut cols = 0;
        for &p in parts {
            let m = self.value(p);
            if m.rows() != rows {
                return Err(Error::shape("concat_cols", format!("{} rows vs {rows}", m.rows())));
            }
            cols += m.cols();
        }
        let mut out = Matrix::zeros(rows, cols);
        for r in 0..rows {
            let mut off = 0;
            for &p in parts {
                let src = self.value(p).row(r);
                out.row_mut(r)[off..off + src.len()].copy_from_slice(src);
                off += src.len();
            }
        }
        Ok(self.push(out, Op::ConcatCols(parts.to_vec())))
    }

    pub fn slice_cols(&mut self, a: Var, start: usize, len: usize) -> Result<Var> {
        let m = self.value(a);
        if start + len > m.cols() {
            return Err(Error::shape(
                "slice_cols",
                format!("columns {start}..{} of {}", start + len, m.cols()),
            ));
        }
        let mut out = Matrix::zeros(m.rows(), len);
        for r in 0..m.rows() {
            out.row_mut(r).copy_from_slice(&m.row(r)[start..start + len]);
        }
        Ok(self.push(out, Op::SliceCols(a, start)))
    }

    pub fn transpose(&mut self, a: Var) -> Var {
        let out = self.value(a).transpose();
        self.push(out, Op::Transpose(a))
    }

    fn accumulate(&mut self, v: Var, g: &Matrix) {
        self.nodes[v.0].grad.add_assign(g);
    }

    /// Accumulates d(out)/d(node) into every node reachable from `out`,
    /// which must be a `1 x 1` value.
    pub fn backward(&mut self, out: Var) -> Result<()> {
        if self.value(out).shape() != (1, 1) {
            return Err(Error::shape(
                "backward",
                format!("output must be scalar, got {:?}", self.value(out).shape()),
            ));
        }
        self.nodes[out.0].grad.as_mut_slice()[0] += 1.0;
        for i in (0..=out.0).rev() {
            if matches!(self.nodes[i].op, Op::Leaf) || self.nodes[i].grad.as_slice().iter().all(|&x| x == 0.0) {
                continue;
            }
            // parents always precede node i, so it can be detached while they update
            let g = std::mem::replace(&mut self.nodes[i].grad, Matrix::zeros(0, 0));
            let op = std::mem::replace(&mut self.nodes[i].op, Op::Leaf);
            let res = self.propagate(i, &op, &g);
            self.nodes[i].op = op;
            self.nodes[i].grad = g;
            res?;
        }
        Ok(())
    }

    fn propagate(&mut self, i: usize, op: &Op, g: &Matrix) -> Result<()> {
        match op {
            Op::Leaf => {}
            Op::MatMul(a, b) => {
                let ga = g.matmul_t(self.value(*b))?;
                let gb = self.value(*a).t_matmul(g)?;
                self.accumulate(*a, &ga);
                self.accumulate(*b, &gb);
            }
            Op::Add(a, b) => {
                self.accumulate(*a, g);
                self.accumulate(*b, g);
            }
            Op::AddRow(a, row) => {
                self.accumulate(*a, g);
                let mut gr = Matrix::zeros(1, g.cols());
                for r in 0..g.rows() {
                    for (o, v) in gr.as_mut_slice().iter_mut().zip(g.row(r)) {
                        *o += v;
                    }
                }
                self.accumulate(*row, &gr);
            }
            Op::Sub(a, b) => {
                self.accumulate(*a, g);
                let neg = g.map(|v| -v);
                self.accumulate(*b, &neg);
            }
            Op::Mul(a, b) => {
                let ga = zip_map(g, self.value(*b), |x, y| x * y);
                let gb = zip_map(g, self.value(*a), |x, y| x * y);
                self.accumulate(*a, &ga);
                self.accumulate(*b, &gb);
            }
            Op::Div(a, b) => {
                let bv = self.value(*b);
                let ga = zip_map(g, bv, |x, y| x / y);
                let out = &self.nodes[i].data;
                let gb = zip_map(&zip_map(g, out, |x, q| x * q), bv, |xq, y| -xq / y);
                self.accumulate(*a, &ga);
                self.accumulate(*b, &gb);
            }
            Op::Scale(a, c) => {
                let ga = g.map(|v| v * c);
                self.accumulate(*a, &ga);
            }
            Op::AddScalar(a) => self.accumulate(*a, g),
            Op::Relu(a) => {
                let ga = zip_map(g, self.value(*a), |x, v| if v > 0.0 { x } else { 0.0 });
                self.accumulate(*a, &ga);
            }
            Op::Sigmoid(a) => {
                let ga = zip_map(g, &self.nodes[i].data, |x, s| x * s * (1.0 - s));
                self.accumulate(*a, &ga);
            }
            Op::Exp(a) => {
                let ga = zip_map(g, &self.nodes[i].data, |x, e| x * e);
                self.accumulate(*a, &ga);
            }
            Op::Log(a) => {
                let ga = zip_map(g, self.value(*a), |x, v| x / v);
                self.accumulate(*a, &ga);
            }
            Op::ClampMin(a, floor) => {
                let ga = zip_map(g, self.value(*a), |x, v| if v > *floor { x } else { 0.0 });
                self.accumulate(*a, &ga);
            }
            Op::Sum(a) => {
                let (r, c) = self.value(*a).shape();
                self.accumulate(*a, &Matrix::filled(r, c, g.item()));
            }
            Op::Mean(a) => {
                let (r, c) = self.value(*a).shape();
                let n = (r * c) as f64;
                self.accumulate(*a, &Matrix::filled(r, c, g.item() / n));
            }
            Op::SumCols(a) => {
                let (r, c) = self.value(*a).shape();
                let mut ga = Matrix::zeros(r, c);
                for row in 0..r {
                    let gv = g.get(row, 0);
                    ga.row_mut(row).iter_mut().for_each(|v| *v = gv);
                }
                self.accumulate(*a, &ga);
            }
            Op::SoftmaxCrossEntropy { logits, targets, probs } => {
                let scale = g.item() / targets.len() as f64;
                let mut ga = probs.clone();
                for (r, &t) in targets.iter().enumerate() {
                    let row = ga.row_mut(r);
                    row[t] -= 1.0;
                    row.iter_mut().for_each(|v| *v *= scale);
                }
                self.accumulate(*logits, &ga);
            }
            Op::LogSoftmax(a) => {
                let out = &self.nodes[i].data;
                let mut ga = g.clone();
                for r in 0..g.rows() {
                    let gsum: f64 = g.row(r).iter().sum();
                    for (o, &lp) in ga.row_mut(r).iter_mut().zip(out.row(r)) {
                        *o -= lp.exp() * gsum;
                    }
                }
                self.accumulate(*a, &ga);
            }
            Op::BceWithLogits { logits, target } => {
                let gs = g.item();
                let ga = zip_map(self.value(*logits), target, |l, t| gs * (sigmoid(l) - t));
                self.accumulate(*logits, &ga);
            }
            Op::Reparam { mu, sigma, eps } => {
                self.accumulate(*mu, g);
                let gs = zip_map(g, eps, |x, e| x * e);
                self.accumulate(*sigma, &gs);
            }
            Op::SquaredError(a, b) => {
                let gs = g.item();
                let ga = zip_map(self.value(*a), self.value(*b), |x, y| 2.0 * gs * (x - y));
                let gb = ga.map(|v| -v);
                self.accumulate(*a, &ga);
                self.accumulate(*b, &gb);
            }
            Op::ConcatCols(parts) => {
                let mut off = 0;
                for &p in parts {
                    let c = self.value(p).cols();
                    let mut gp = Matrix::zeros(g.rows(), c);
                    for r in 0..g.rows() {
                        gp.row_mut(r).copy_from_slice(&g.row(r)[off..off + c]);
                    }
                    self.accumulate(p, &gp);
                    off += c;
                }
            }
            Op::SliceCols(a, start) => {
                let (r, c) = self.value(*a).shape();
                let mut ga = Matrix::zeros(r, c);
                for row in 0..r {
                    ga.row_mut(row)[*start..*start + g.cols()].copy_from_slice(g.row(row));
                }
                self.accumulate(*a, &ga);
            }
            Op::Transpose(a) => {
                let ga = g.transpose();
                self.accumulate(*a, &ga);
            }
        }
        Ok(())
    }
}

/// Row-wise dot products of two equally shaped matrices, as plain values.
pub fn row_dots(a: &Matrix, b: &Matrix) -> Vec<f64> {
    (0..a.rows()).map(|r| dot(a.row(r), b.row(r))).collect()
}
