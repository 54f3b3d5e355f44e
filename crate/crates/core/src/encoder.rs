//! Semantic encoder: image -> predicted attribute vector in `(0, 1)^d`.
//!
//! A dense ReLU network with a sigmoid head, trained against the SKB with a
//! weighted sum of an attribute regression term and a class-level softmax
//! term over attribute-vector inner products.

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use crate::dataset::{ImageTensor, LabeledSample};
use crate::diffcore::{AdamConfig, AdamState, Bound, Dense, Init, Matrix, ParamSet, Tape, Var};
use crate::error::{Error, Result};
use crate::rng::{derive_seed, rng_from_seed};
use crate::skb::AttributeMatrix;

const STREAM_INIT: u64 = 11;
const STREAM_SHUFFLE: u64 = 12;

/// Predicted attributes of one image.
#[derive(Debug, Clone, PartialEq)]
pub struct SemanticFeature(pub Vec<f64>);

impl SemanticFeature {
    pub fn as_slice(&self) -> &[f64] {
        &self.0
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EncoderLossWeights {
    pub lambda1: f64,
    pub lambda2: f64,
}

impl Default for EncoderLossWeights {
    fn default() -> Self {
        EncoderLossWeights {
            lambda1: 1.0,
            lambda2: 0.1,
        }
    }
}

impl EncoderLossWeights {
    pub fn validate(&self) -> Result<()> {
        if self.lambda1 >= 0.0 && self.lambda2 >= 0.0 {
            Ok(())
        } else {
            Err(Error::Invalid(format!(
                "loss weights must be nonnegative, got {} and {}",
                self.lambda1, self.lambda2
            )))
        }
    }
}

/// How the class-level term of the encoder loss is formed.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ClassTerm {
    /// Cross-entropy of the softmax over all SKB classes of `<s_i, k_m>`.
    #[default]
    SoftmaxOverClasses,
    /// `+ log(exp<s_i,k_{m_i}> / sum_j exp<s_j,k_{m_j}>)` averaged over the
    /// batch, i.e. normalized over batch members rather than classes.
    /// Kept for comparison only: minimizing it pushes the true-class score
    /// down.
    LiteralBatchNormalized,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct EncoderConfig {
    pub hidden: usize,
    pub epochs: usize,
    pub batch_size: usize,
    pub adam: AdamConfig,
    pub weights: EncoderLossWeights,
    pub class_term: ClassTerm,
}

impl Default for EncoderConfig {
    fn default() -> Self {
        EncoderConfig {
            hidden: 256,
            epochs: 20,
            batch_size: 32,
            adam: AdamConfig::default(),
            weights: EncoderLossWeights::default(),
            class_term: ClassTerm::default(),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Encoder {
    params: ParamSet,
    l1: Dense,
    l2: Dense,
    out: Dense,
}

impl Encoder {
    pub fn new(input: usize, hidden: usize, attributes: usize, seed: u64) -> Encoder {
        let mut rng = rng_from_seed(seed);
        let mut params = ParamSet::new();
        let l1 = Dense::new(&mut params, "enc.l1", input, hidden, Init::He, &mut rng);
        let l2 = Dense::new(&mut params, "enc.l2", hidden, hidden, Init::He, &mut rng);
        let out = Dense::new(&mut params, "enc.out", hidden, attributes, Init::Xavier, &mut rng);
        Encoder { params, l1, l2, out }
    }

    pub fn from_params(params: ParamSet) -> Result<Encoder> {
        let l1 = Dense::lookup(&params, "enc.l1")?;
        let l2 = Dense::lookup(&params, "enc.l2")?;
        let out = Dense::lookup(&params, "enc.out")?;
        if l1.fan_out(&params) != l2.fan_in(&params) || l2.fan_out(&params) != out.fan_in(&params) {
            return Err(Error::Snapshot("encoder layer widths do not chain".into()));
        }
        Ok(Encoder { params, l1, l2, out })
    }

    pub fn params(&self) -> &ParamSet {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut ParamSet {
        &mut self.params
    }

    pub fn input_dim(&self) -> usize {
        self.l1.fan_in(&self.params)
    }

    pub fn attributes(&self) -> usize {
        self.out.fan_out(&self.params)
    }

    /// Zeroes the output layer so every feature is `sigmoid(0) = 0.5`.
    pub fn zero_output_layer(&mut self) {
        self.params.get_mut(self.out.w).fill(0.0);
        self.params.get_mut(self.out.b).fill(0.0);
    }

    /// Sigmoid features for a batch of flattened images (`N x input`).
    pub fn forward(&self, tape: &mut Tape, bound: &Bound, x: Var) -> Result<Var> {
        let h = self.l1.forward(tape, bound, x)?;
        let h = tape.relu(h);
        let h = self.l2.forward(tape, bound, h)?;
        let h = tape.relu(h);
        let o = self.out.forward(tape, bound, h)?;
        Ok(tape.sigmoid(o))
    }

    pub fn encode(&self, x: &ImageTensor) -> Result<SemanticFeature> {
        if x.len() != self.input_dim() {
            return Err(Error::shape(
                "encode",
                format!("image has {} pixels, encoder expects {}", x.len(), self.input_dim()),
            ));
        }
        let h: Vec<f64> = self
            .l1
            .apply(&self.params, x.pixels())
            .into_iter()
            .map(|v| v.max(0.0))
            .collect();
        let h: Vec<f64> = self
            .l2
            .apply(&self.params, &h)
            .into_iter()
            .map(|v| v.max(0.0))
            .collect();
        let s = self
            .out
            .apply(&self.params, &h)
            .into_iter()
            .map(|v| 1.0 / (1.0 + (-v).exp()))
            .collect();
        Ok(SemanticFeature(s))
    }
}

/// Encoder loss on a batch of features `s` (`N x d`) with true classes.
pub fn loss_l1(
    tape: &mut Tape,
    s: Var,
    classes: &[usize],
    skb: &AttributeMatrix,
    weights: EncoderLossWeights,
    class_term: ClassTerm,
) -> Result<Var> {
    let (n, d) = tape.value(s).shape();
    if n == 0 || n != classes.len() {
        return Err(Error::shape(
            "loss_l1",
            format!("{n} features for {} labels", classes.len()),
        ));
    }
    if d != skb.dims() {
        return Err(Error::shape(
            "loss_l1",
            format!("feature width {d} vs {} attributes", skb.dims()),
        ));
    }
    let mut targets = Matrix::zeros(n, d);
    for (i, &m) in classes.iter().enumerate() {
        if m >= skb.classes() {
            return Err(Error::IndexOutOfRange {
                index: m,
                len: skb.classes(),
            });
        }
        targets.row_mut(i).copy_from_slice(skb.row(m));
    }
    let targets = tape.leaf(targets);
    let sq = tape.squared_error(s, targets)?;
    let mse = tape.scale(sq, weights.lambda1 / n as f64);
    let class_loss = match class_term {
        ClassTerm::SoftmaxOverClasses => {
            let kt = tape.leaf(skb.as_matrix().transpose());
            let logits = tape.matmul(s, kt)?;
            let ce = tape.softmax_cross_entropy(logits, classes)?;
            tape.scale(ce, weights.lambda2)
        }
        ClassTerm::LiteralBatchNormalized => {
            let prod = tape.mul(s, targets)?;
            let scores = tape.sum_cols(prod);
            let row = tape.transpose(scores);
            let lsm = tape.log_softmax(row);
            let total = tape.sum(lsm);
            tape.scale(total, weights.lambda2 / n as f64)
        }
    };
    tape.add(mse, class_loss)
}

fn stack_images(samples: &[&LabeledSample]) -> Result<Matrix> {
    let rows: Vec<&[f64]> = samples.iter().map(|s| s.image.pixels()).collect();
    Matrix::from_rows(&rows)
}

#[derive(Debug, Clone)]
pub struct TrainedEncoder {
    pub encoder: Encoder,
    /// Mean minibatch loss per epoch.
    pub loss_trace: Vec<f64>,
}

/// Minibatch Adam training against the SKB; deterministic given `seed`.
pub fn train_semantic_encoder(
    train: &[LabeledSample],
    skb: &AttributeMatrix,
    cfg: &EncoderConfig,
    seed: u64,
) -> Result<TrainedEncoder> {
    cfg.weights.validate()?;
    let input = train
        .first()
        .map(|s| s.image.len())
        .ok_or_else(|| Error::Invalid("empty training set".into()))?;
    for s in train {
        if s.image.len() != input {
            return Err(Error::shape("train_semantic_encoder", "images of differing sizes"));
        }
        if s.class.get() >= skb.classes() {
            return Err(Error::IndexOutOfRange {
                index: s.class.get(),
                len: skb.classes(),
            });
        }
    }
    if cfg.batch_size == 0 {
        return Err(Error::Invalid("batch_size must be positive".into()));
    }
    let mut encoder = Encoder::new(input, cfg.hidden, skb.dims(), derive_seed(seed, &[STREAM_INIT]));
    let mut adam = AdamState::new(cfg.adam, encoder.params.values());
    let mut order: Vec<usize> = (0..train.len()).collect();
    let mut trace = Vec::with_capacity(cfg.epochs);

    for epoch in 0..cfg.epochs {
        order.shuffle(&mut rng_from_seed(derive_seed(seed, &[STREAM_SHUFFLE, epoch as u64])));
        let mut total = 0.0;
        let mut batches = 0;
        for (b, chunk) in order.chunks(cfg.batch_size).enumerate() {
            let batch: Vec<&LabeledSample> = chunk.iter().map(|&i| &train[i]).collect();
            let classes: Vec<usize> = batch.iter().map(|s| s.class.get()).collect();
            let mut tape = Tape::new();
            let bound = encoder.params.bind(&mut tape);
            let x = tape.leaf(stack_images(&batch)?);
            let s = encoder.forward(&mut tape, &bound, x)?;
            let loss = loss_l1(&mut tape, s, &classes, skb, cfg.weights, cfg.class_term)?;
            let value = tape.value(loss).item();
            if !value.is_finite() {
                return Err(Error::NonFinite(format!("encoder loss at epoch {epoch}, batch {b}")));
            }
            tape.backward(loss)?;
            let grads = encoder.params.grads(&tape, &bound);
            adam.step(encoder.params.values_mut(), &grads)
                .map_err(|e| Error::NonFinite(format!("epoch {epoch}, batch {b}: {e}")))?;
            total += value;
            batches += 1;
        }
        trace.push(total / batches as f64);
        log::debug!("encoder epoch {epoch}: loss {:.5}", trace[epoch]);
    }
    Ok(TrainedEncoder {
        encoder,
        loss_trace: trace,
    })
}
