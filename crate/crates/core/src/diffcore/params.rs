use rand::Rng;

use super::matrix::Matrix;
use super::tape::{Tape, Var};
use crate::error::{Error, Result};
use crate::rng::SimRng;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct ParamId(usize);

/// Ordered, named collection of trainable arrays.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct ParamSet {
    names: Vec<String>,
    values: Vec<Matrix>,
}

/// Tape handles for every entry of a [`ParamSet`], in the same order.
#[derive(Debug, Clone)]
pub struct Bound(Vec<Var>);

impl Bound {
    pub fn var(&self, id: ParamId) -> Var {
        self.0[id.0]
    }
}

impl ParamSet {
    pub fn new() -> Self {
        ParamSet::default()
    }

    pub fn insert(&mut self, name: impl Into<String>, value: Matrix) -> ParamId {
        self.names.push(name.into());
        self.values.push(value);
        ParamId(self.values.len() - 1)
    }

    pub fn find(&self, name: &str) -> Option<ParamId> {
        self.names.iter().position(|n| n == name).map(ParamId)
    }

    pub fn require(&self, name: &str) -> Result<ParamId> {
        self.find(name)
            .ok_or_else(|| Error::Snapshot(format!("missing array '{name}'")))
    }

    pub fn get(&self, id: ParamId) -> &Matrix {
        &self.values[id.0]
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Matrix {
        &mut self.values[id.0]
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn names(&self) -> &[String] {
        &self.names
    }

    pub fn values(&self) -> &[Matrix] {
        &self.values
    }

    pub fn values_mut(&mut self) -> &mut [Matrix] {
        &mut self.values
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Matrix)> {
        self.names.iter().map(String::as_str).zip(&self.values)
    }

    pub fn scalar_count(&self) -> usize {
        self.values.iter().map(Matrix::len).sum()
    }

    pub fn bind(&self, tape: &mut Tape) -> Bound {
        Bound(self.values.iter().map(|v| tape.leaf(v.clone())).collect())
    }

    pub fn grads(&self, tape: &Tape, bound: &Bound) -> Vec<Matrix> {
        bound.0.iter().map(|&v| tape.grad(v).clone()).collect()
    }

    pub fn all_finite(&self) -> bool {
        self.values.iter().all(Matrix::all_finite)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Init {
    /// Uniform with variance `2 / fan_in`, for ReLU layers.
    He,
    /// Uniform with variance `2 / (fan_in + fan_out)`.
    Xavier,
    Zero,
}

/// Fully connected layer `x W + b` with `W: in x out`, `b: 1 x out`.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Dense {
    pub w: ParamId,
    pub b: ParamId,
}

impl Dense {
    pub fn new(
        params: &mut ParamSet,
        name: &str,
        fan_in: usize,
        fan_out: usize,
        init: Init,
        rng: &mut SimRng,
    ) -> Dense {
        let limit = match init {
            Init::He => (6.0 / fan_in.max(1) as f64).sqrt(),
            Init::Xavier => (6.0 / (fan_in + fan_out).max(1) as f64).sqrt(),
            Init::Zero => 0.0,
        };
        let data = (0..fan_in * fan_out)
            .map(|_| {
                if limit == 0.0 {
                    0.0
                } else {
                    rng.random_range(-limit..limit)
                }
            })
            .collect();
        let w = params.insert(
            format!("{name}.w"),
            Matrix::from_vec(fan_in, fan_out, data).expect("sized"),
        );
        let b = params.insert(format!("{name}.b"), Matrix::zeros(1, fan_out));
        Dense { w, b }
    }

    /// Re-attaches to a layer stored under `name`, checking shape agreement.
    pub fn lookup(params: &ParamSet, name: &str) -> Result<Dense> {
        let w = params.require(&format!("{name}.w"))?;
        let b = params.require(&format!("{name}.b"))?;
        let (wm, bm) = (params.get(w), params.get(b));
        if bm.rows() != 1 || bm.cols() != wm.cols() {
            return Err(Error::Snapshot(format!(
                "layer '{name}': weight {:?} inconsistent with bias {:?}",
                wm.shape(),
                bm.shape()
            )));
        }
        Ok(Dense { w, b })
    }

    pub fn fan_in(&self, params: &ParamSet) -> usize {
        params.get(self.w).rows()
    }

    pub fn fan_out(&self, params: &ParamSet) -> usize {
        params.get(self.w).cols()
    }

    pub fn forward(&self, tape: &mut Tape, bound: &Bound, x: Var) -> Result<Var> {
        let xw = tape.matmul(x, bound.var(self.w))?;
        tape.add_row(xw, bound.var(self.b))
    }

    /// Tape-free evaluation for a single input row.
    pub fn apply(&self, params: &ParamSet, x: &[f64]) -> Vec<f64> {
        let w = params.get(self.w);
        let mut out = params.get(self.b).as_slice().to_vec();
        for (k, &a) in x.iter().enumerate() {
            if a != 0.0 {
                for (o, &wv) in out.iter_mut().zip(w.row(k)) {
                    *o += a * wv;
                }
            }
        }
        out
    }
}
