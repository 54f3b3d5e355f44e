//! Hierarchical conditional VAE with grouped latents.
//!
//! The latent `z` is split into ordered groups `z_1..z_G`. Group `g` has a
//! factorized Normal prior `p(z_g | z_<g, k)` and a posterior parameterized
//! relative to that prior,
//!
//! ```text
//! q(z_g | z_<g, x, k) = N(mu_g + dmu_g, sigma_g * dsigma_g)
//! ```
//!
//! where `(dmu_g, dsigma_g)` come from a delta network seeing the image
//! features, the condition and earlier groups. The decoder maps `(z, k)` to
//! Bernoulli pixel means. With the condition switched off (null-condition
//! mode) the same network is an unconditional hierarchical VAE.
//!
//! All standard deviations are `max(exp(.), SIGMA_FLOOR)`.
//!
//! Parameter names: `cvae.cond`, `cvae.feat`, `cvae.prior{g}.{h,out}`,
//! `cvae.post{g}.{h,out}`, `cvae.dec.{h1,h2,out}` (each with `.w`/`.b`);
//! snapshots add `cvae.meta = [conditional, W, H, C]`.

use rand::seq::SliceRandom;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::channel::{noise_sigma, NoisePower};
use crate::dataset::{ImageTensor, LabeledSample};
use crate::diffcore::{AdamConfig, AdamState, Bound, Dense, Init, Matrix, ParamSet, Tape, Var};
use crate::error::{Error, Result};
use crate::rng::{derive_seed, rng_from_seed, standard_normal, SimRng};
use crate::skb::AttributeMatrix;

pub const SIGMA_FLOOR: f64 = 1e-6;

const STREAM_INIT: u64 = 21;
const STREAM_SHUFFLE: u64 = 22;
const STREAM_BATCH: u64 = 23;

/// Ordered latent groups, stored flat.
#[derive(Debug, Clone, PartialEq)]
pub struct LatentGroups {
    widths: Vec<usize>,
    values: Vec<f64>,
}

impl LatentGroups {
    pub fn unflatten(widths: &[usize], flat: Vec<f64>) -> Result<Self> {
        if widths.is_empty() || widths.contains(&0) {
            return Err(Error::Invalid(format!("invalid group widths {widths:?}")));
        }
        if flat.len() != widths.iter().sum::<usize>() {
            return Err(Error::shape(
                "latent groups",
                format!("{} values for widths {widths:?}", flat.len()),
            ));
        }
        Ok(LatentGroups {
            widths: widths.to_vec(),
            values: flat,
        })
    }

    pub fn flatten(&self) -> &[f64] {
        &self.values
    }

    pub fn widths(&self) -> &[usize] {
        &self.widths
    }

    pub fn groups(&self) -> usize {
        self.widths.len()
    }

    pub fn total_len(&self) -> usize {
        self.values.len()
    }

    pub fn group(&self, g: usize) -> &[f64] {
        let start: usize = self.widths[..g].iter().sum();
        &self.values[start..start + self.widths[g]]
    }

    /// The first `g` groups.
    pub fn prefix(&self, g: usize) -> LatentGroups {
        let len: usize = self.widths[..g].iter().sum();
        LatentGroups {
            widths: self.widths[..g].to_vec(),
            values: self.values[..len].to_vec(),
        }
    }

    /// An empty prefix (no groups yet), the input for the first group.
    pub fn empty() -> LatentGroups {
        LatentGroups {
            widths: Vec::new(),
            values: Vec::new(),
        }
    }
}

/// Factorized Normal parameters of one group.
#[derive(Debug, Clone, PartialEq)]
pub struct GroupGaussians {
    pub mu: Vec<f64>,
    pub sigma: Vec<f64>,
}

/// `KL(N(mu_q, sigma_q^2) || N(mu_p, sigma_p^2))` summed over dimensions.
pub fn kl_diag_gaussians(q: &GroupGaussians, p: &GroupGaussians) -> Result<f64> {
    let n = q.mu.len();
    if q.sigma.len() != n || p.mu.len() != n || p.sigma.len() != n {
        return Err(Error::shape("kl_diag_gaussians", "parameter lengths differ"));
    }
    let mut kl = 0.0;
    for j in 0..n {
        let (sq, sp) = (q.sigma[j], p.sigma[j]);
        if !(sq > 0.0 && sp > 0.0) {
            return Err(Error::Invalid(format!(
                "standard deviations must be positive, got {sq} and {sp}"
            )));
        }
        let d = q.mu[j] - p.mu[j];
        kl += (sp / sq).ln() + (sq * sq + d * d) / (2.0 * sp * sp) - 0.5;
    }
    Ok(kl)
}

/// Same closed form on the tape, summed over every entry.
pub fn kl_on_tape(tape: &mut Tape, mu_q: Var, sig_q: Var, mu_p: Var, sig_p: Var) -> Result<Var> {
    let log_p = tape.log(sig_p);
    let log_q = tape.log(sig_q);
    let log_ratio = tape.sub(log_p, log_q)?;
    let diff = tape.sub(mu_q, mu_p)?;
    let diff2 = tape.mul(diff, diff)?;
    let sq2 = tape.mul(sig_q, sig_q)?;
    let num = tape.add(sq2, diff2)?;
    let sp2 = tape.mul(sig_p, sig_p)?;
    let den = tape.scale(sp2, 2.0);
    let frac = tape.div(num, den)?;
    let terms = tape.add(log_ratio, frac)?;
    let terms = tape.add_scalar(terms, -0.5);
    Ok(tape.sum(terms))
}

#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Likelihood {
    /// Binary cross-entropy against `[0, 1]` pixels.
    #[default]
    Bernoulli,
    /// `sum (x - mean)^2 / (2 sigma^2)`, constants dropped.
    Gaussian { sigma: f64 },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct CvaeConfig {
    pub group_widths: Vec<usize>,
    pub hidden: usize,
    pub embed: usize,
    /// `false` trains the null-condition (unconditional) model.
    pub conditional: bool,
    pub beta: f64,
    pub likelihood: Likelihood,
    pub epochs: usize,
    pub batch_size: usize,
    pub adam: AdamConfig,
    /// Per-batch SNR is drawn uniformly from this range (dB).
    pub train_snr_db: [f64; 2],
    /// Pass latents through the AWGN channel during training.
    pub train_channel: bool,
    pub channel_power: NoisePower,
}

impl Default for CvaeConfig {
    fn default() -> Self {
        CvaeConfig {
            group_widths: vec![8, 8],
            hidden: 64,
            embed: 16,
            conditional: true,
            beta: 1.0,
            likelihood: Likelihood::Bernoulli,
            epochs: 30,
            batch_size: 32,
            adam: AdamConfig::default(),
            train_snr_db: [0.0, 10.0],
            train_channel: true,
            channel_power: NoisePower::Empirical,
        }
    }
}

impl CvaeConfig {
    pub fn latent_len(&self) -> usize {
        self.group_widths.iter().sum()
    }

    pub fn validate(&self) -> Result<()> {
        if self.group_widths.is_empty() || self.group_widths.contains(&0) {
            return Err(Error::Invalid(format!("invalid group widths {:?}", self.group_widths)));
        }
        if self.beta.is_nan() || self.beta < 0.0 {
            return Err(Error::Invalid(format!("beta must be >= 0, got {}", self.beta)));
        }
        if self.hidden == 0 || self.embed == 0 || self.batch_size == 0 {
            return Err(Error::Invalid("hidden, embed and batch_size must be positive".into()));
        }
        if self.train_snr_db.iter().any(|s| s.is_nan()) || self.train_snr_db[0] > self.train_snr_db[1] {
            return Err(Error::Invalid(format!(
                "bad training SNR range {:?}",
                self.train_snr_db
            )));
        }
        Ok(())
    }
}

/// How latents reach the decoder inside the loss.
pub enum LatentChannel<'a> {
    Clean,
    /// Fixed additive noise, for deterministic gradient checks.
    Additive(&'a Matrix),
    /// Per-row AWGN at `snr_db` built from standard Normal `unit_noise`
    /// (same shape as `z`). With empirical power the noise scale
    /// `sqrt(mean(z_row^2)) * 10^(-snr/20)` is part of the graph, so the
    /// gradient sees that a louder latent also draws louder noise.
    Awgn {
        snr_db: f64,
        power: NoisePower,
        unit_noise: &'a Matrix,
    },
}

#[derive(Debug, Clone, Copy)]
pub struct LossTerms {
    /// `(reconstruction + beta * kl) / N`
    pub total: Var,
    /// Summed over the batch.
    pub reconstruction: Var,
    /// Summed over groups and the batch.
    pub kl: Var,
}

#[derive(Debug, Clone, Copy)]
struct Mlp {
    h: Dense,
    out: Dense,
}

impl Mlp {
    fn forward(&self, tape: &mut Tape, bound: &Bound, x: Var) -> Result<Var> {
        let h = self.h.forward(tape, bound, x)?;
        let h = tape.relu(h);
        self.out.forward(tape, bound, h)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Cvae {
    params: ParamSet,
    widths: Vec<usize>,
    conditional: bool,
    image_dims: (usize, usize, usize),
    attributes: usize,
    embed: usize,
}

/// Per-group tape handles from one encoder pass.
#[derive(Debug, Clone)]
pub struct GroupVars {
    pub mu_p: Var,
    pub sigma_p: Var,
    pub mu_q: Var,
    pub sigma_q: Var,
    pub z: Var,
    pub kl: Var,
}

impl Cvae {
    pub fn new(cfg: &CvaeConfig, image_dims: (usize, usize, usize), attributes: usize, seed: u64) -> Result<Cvae> {
        cfg.validate()?;
        let pixels = image_dims.0 * image_dims.1 * image_dims.2;
        if pixels == 0 || attributes == 0 {
            return Err(Error::Invalid("image and attribute sizes must be positive".into()));
        }
        let mut rng = rng_from_seed(seed);
        let mut ps = ParamSet::new();
        let (h, e) = (cfg.hidden, cfg.embed);
        Dense::new(&mut ps, "cvae.cond", attributes, e, Init::He, &mut rng);
        Dense::new(&mut ps, "cvae.feat", pixels, h, Init::He, &mut rng);
        let mut prefix = 0;
        for (g, &w) in cfg.group_widths.iter().enumerate() {
            Dense::new(&mut ps, &format!("cvae.prior{g}.h"), e + prefix, h, Init::He, &mut rng);
            Dense::new(&mut ps, &format!("cvae.prior{g}.out"), h, 2 * w, Init::Zero, &mut rng);
            Dense::new(
                &mut ps,
                &format!("cvae.post{g}.h"),
                h + e + prefix,
                h,
                Init::He,
                &mut rng,
            );
            Dense::new(&mut ps, &format!("cvae.post{g}.out"), h, 2 * w, Init::Zero, &mut rng);
            prefix += w;
        }
        Dense::new(&mut ps, "cvae.dec.h1", prefix + e, h, Init::He, &mut rng);
        Dense::new(&mut ps, "cvae.dec.h2", h, h, Init::He, &mut rng);
        Dense::new(&mut ps, "cvae.dec.out", h, pixels, Init::Xavier, &mut rng);
        Ok(Cvae {
            params: ps,
            widths: cfg.group_widths.clone(),
            conditional: cfg.conditional,
            image_dims,
            attributes,
            embed: e,
        })
    }

    /// Rebuilds a model from snapshot arrays (including `cvae.meta`).
    pub fn from_params(all: ParamSet) -> Result<Cvae> {
        let meta_id = all.require("cvae.meta")?;
        let meta = all.get(meta_id).as_slice().to_vec();
        if meta.len() != 4 {
            return Err(Error::Snapshot("cvae.meta must hold 4 values".into()));
        }
        let mut params = ParamSet::new();
        for (name, m) in all.iter() {
            if name != "cvae.meta" {
                params.insert(name, m.clone());
            }
        }
        let dims = (meta[1] as usize, meta[2] as usize, meta[3] as usize);
        let cond = Dense::lookup(&params, "cvae.cond")?;
        let mut widths = Vec::new();
        while let Some(id) = params.find(&format!("cvae.prior{}.out.w", widths.len())) {
            widths.push(params.get(id).cols() / 2);
        }
        let model = Cvae {
            attributes: cond.fan_in(&params),
            embed: cond.fan_out(&params),
            params,
            widths,
            conditional: meta[0] != 0.0,
            image_dims: dims,
        };
        model.check_shapes()?;
        Ok(model)
    }

    fn check_shapes(&self) -> Result<()> {
        if self.widths.is_empty() {
            return Err(Error::Snapshot("no latent groups found".into()));
        }
        let ps = &self.params;
        let hidden = Dense::lookup(ps, "cvae.feat")?.fan_out(ps);
        if Dense::lookup(ps, "cvae.feat")?.fan_in(ps) != self.pixels() {
            return Err(Error::Snapshot("feature layer does not match image size".into()));
        }
        let mut prefix = 0;
        for (g, &w) in self.widths.iter().enumerate() {
            let ph = self.dense(&format!("cvae.prior{g}.h"))?;
            let qh = self.dense(&format!("cvae.post{g}.h"))?;
            let qo = self.dense(&format!("cvae.post{g}.out"))?;
            if ph.fan_in(ps) != self.embed + prefix
                || qh.fan_in(ps) != hidden + self.embed + prefix
                || qo.fan_out(ps) != 2 * w
            {
                return Err(Error::Snapshot(format!("group {g} layer shapes inconsistent")));
            }
            prefix += w;
        }
        let d1 = self.dense("cvae.dec.h1")?;
        let dout = self.dense("cvae.dec.out")?;
        if d1.fan_in(ps) != prefix + self.embed || dout.fan_out(ps) != self.pixels() {
            return Err(Error::Snapshot("decoder shapes inconsistent".into()));
        }
        Ok(())
    }

    /// Arrays for a snapshot file, including the metadata entry.
    pub fn snapshot_params(&self) -> ParamSet {
        let mut ps = self.params.clone();
        let (w, h, c) = self.image_dims;
        ps.insert(
            "cvae.meta",
            Matrix::row_vector(vec![self.conditional as u8 as f64, w as f64, h as f64, c as f64]),
        );
        ps
    }

    pub fn params(&self) -> &ParamSet {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut ParamSet {
        &mut self.params
    }

    pub fn group_widths(&self) -> &[usize] {
        &self.widths
    }

    pub fn latent_len(&self) -> usize {
        self.widths.iter().sum()
    }

    pub fn is_conditional(&self) -> bool {
        self.conditional
    }

    pub fn image_dims(&self) -> (usize, usize, usize) {
        self.image_dims
    }

    pub fn pixels(&self) -> usize {
        self.image_dims.0 * self.image_dims.1 * self.image_dims.2
    }

    pub fn attributes(&self) -> usize {
        self.attributes
    }

    fn dense(&self, name: &str) -> Result<Dense> {
        Dense::lookup(&self.params, name)
    }

    fn mlp(&self, name: &str) -> Result<Mlp> {
        Ok(Mlp {
            h: self.dense(&format!("{name}.h"))?,
            out: self.dense(&format!("{name}.out"))?,
        })
    }

    /// Zeroes every posterior delta output layer, making `q = p` exactly.
    pub fn zero_posterior_deltas(&mut self) -> Result<()> {
        for g in 0..self.widths.len() {
            let d = self.dense(&format!("cvae.post{g}.out"))?;
            self.params.get_mut(d.w).fill(0.0);
            self.params.get_mut(d.b).fill(0.0);
        }
        Ok(())
    }

    /// Condition embedding, or zeros in null-condition mode.
    pub fn condition(&self, tape: &mut Tape, bound: &Bound, k: &Matrix) -> Result<Var> {
        if k.cols() != self.attributes {
            return Err(Error::shape(
                "cvae condition",
                format!("{} attributes, model expects {}", k.cols(), self.attributes),
            ));
        }
        if !self.conditional {
            return Ok(tape.leaf(Matrix::zeros(k.rows(), self.embed)));
        }
        let kv = tape.leaf(k.clone());
        let e = self.dense("cvae.cond")?.forward(tape, bound, kv)?;
        Ok(tape.relu(e))
    }

    fn split_gaussian(&self, tape: &mut Tape, out: Var, w: usize) -> Result<(Var, Var)> {
        let mu = tape.slice_cols(out, 0, w)?;
        let log_sigma = tape.slice_cols(out, w, w)?;
        let s = tape.exp(log_sigma);
        Ok((mu, tape.clamp_min(s, SIGMA_FLOOR)))
    }

    /// Prior `(mu, sigma)` of group `g` given the condition embedding and the
    /// concatenated earlier groups.
    pub fn prior_on_tape(
        &self,
        tape: &mut Tape,
        bound: &Bound,
        e: Var,
        prefix: Option<Var>,
        g: usize,
    ) -> Result<(Var, Var)> {
        let input = match prefix {
            None => e,
            Some(z) => tape.concat_cols(&[e, z])?,
        };
        let out = self.mlp(&format!("cvae.prior{g}"))?.forward(tape, bound, input)?;
        self.split_gaussian(tape, out, self.widths[g])
    }

    /// Posterior `(mu_p + dmu, sigma_p * dsigma)` of group `g`.
    #[allow(clippy::too_many_arguments)]
    pub fn posterior_on_tape(
        &self,
        tape: &mut Tape,
        bound: &Bound,
        features: Var,
        e: Var,
        prefix: Option<Var>,
        g: usize,
        prior: (Var, Var),
    ) -> Result<(Var, Var)> {
        let input = match prefix {
            None => tape.concat_cols(&[features, e])?,
            Some(z) => tape.concat_cols(&[features, e, z])?,
        };
        let out = self.mlp(&format!("cvae.post{g}"))?.forward(tape, bound, input)?;
        let (dmu, dsigma) = self.split_gaussian(tape, out, self.widths[g])?;
        let mu = tape.add(prior.0, dmu)?;
        let sigma = tape.mul(prior.1, dsigma)?;
        Ok((mu, sigma))
    }

    pub fn image_features(&self, tape: &mut Tape, bound: &Bound, x: Var) -> Result<Var> {
        let h = self.dense("cvae.feat")?.forward(tape, bound, x)?;
        Ok(tape.relu(h))
    }

    fn check_eps(&self, eps: &[Matrix], rows: usize) -> Result<()> {
        if eps.len() != self.widths.len() || eps.iter().zip(&self.widths).any(|(m, &w)| m.shape() != (rows, w)) {
            return Err(Error::shape(
                "cvae noise",
                format!(
                    "need {} matrices of {rows} rows with widths {:?}",
                    self.widths.len(),
                    self.widths
                ),
            ));
        }
        Ok(())
    }

    /// Top-down posterior sampling; returns `z` (all groups concatenated)
    /// and per-group handles.
    pub fn encode_on_tape(
        &self,
        tape: &mut Tape,
        bound: &Bound,
        x: Var,
        e: Var,
        eps: &[Matrix],
    ) -> Result<(Var, Vec<GroupVars>)> {
        let rows = tape.value(x).rows();
        if tape.value(x).cols() != self.pixels() {
            return Err(Error::shape(
                "cvae encode",
                format!("{} pixels, model expects {}", tape.value(x).cols(), self.pixels()),
            ));
        }
        self.check_eps(eps, rows)?;
        let features = self.image_features(tape, bound, x)?;
        let mut groups: Vec<GroupVars> = Vec::with_capacity(self.widths.len());
        let mut prefix: Option<Var> = None;
        for (g, noise) in eps.iter().enumerate() {
            let (mu_p, sigma_p) = self.prior_on_tape(tape, bound, e, prefix, g)?;
            let (mu_q, sigma_q) = self.posterior_on_tape(tape, bound, features, e, prefix, g, (mu_p, sigma_p))?;
            let z = tape.reparam(mu_q, sigma_q, noise)?;
            let kl = kl_on_tape(tape, mu_q, sigma_q, mu_p, sigma_p)?;
            groups.push(GroupVars {
                mu_p,
                sigma_p,
                mu_q,
                sigma_q,
                z,
                kl,
            });
            let zs: Vec<Var> = groups.iter().map(|gv| gv.z).collect();
            prefix = Some(if zs.len() == 1 { zs[0] } else { tape.concat_cols(&zs)? });
        }
        Ok((prefix.expect("at least one group"), groups))
    }

    /// Decoder logits for latents `z` (`N x l`).
    pub fn decode_on_tape(&self, tape: &mut Tape, bound: &Bound, z: Var, e: Var) -> Result<Var> {
        if tape.value(z).cols() != self.latent_len() {
            return Err(Error::shape(
                "cvae decode",
                format!("latent width {} vs {}", tape.value(z).cols(), self.latent_len()),
            ));
        }
        let input = tape.concat_cols(&[z, e])?;
        let h = self.dense("cvae.dec.h1")?.forward(tape, bound, input)?;
        let h = tape.relu(h);
        let h = self.dense("cvae.dec.h2")?.forward(tape, bound, h)?;
        let h = tape.relu(h);
        self.dense("cvae.dec.out")?.forward(tape, bound, h)
    }

    /// Ancestral prior sampling on the tape.
    pub fn prior_sample_on_tape(&self, tape: &mut Tape, bound: &Bound, e: Var, eps: &[Matrix]) -> Result<Var> {
        self.check_eps(eps, tape.value(e).rows())?;
        let mut zs: Vec<Var> = Vec::new();
        let mut prefix = None;
        for (g, noise) in eps.iter().enumerate() {
            let (mu, sigma) = self.prior_on_tape(tape, bound, e, prefix, g)?;
            zs.push(tape.reparam(mu, sigma, noise)?);
            prefix = Some(if zs.len() == 1 { zs[0] } else { tape.concat_cols(&zs)? });
        }
        Ok(prefix.expect("at least one group"))
    }

    /// The training objective on a batch: reconstruction of `x` from the
    /// channel-perturbed latent plus `beta` times the group KLs of the clean
    /// latent, averaged over the batch.
    #[allow(clippy::too_many_arguments)]
    pub fn loss_l2(
        &self,
        tape: &mut Tape,
        bound: &Bound,
        x: &Matrix,
        k: &Matrix,
        eps: &[Matrix],
        channel: LatentChannel<'_>,
        beta: f64,
        likelihood: Likelihood,
    ) -> Result<LossTerms> {
        let n = x.rows();
        if n == 0 || k.rows() != n {
            return Err(Error::shape("loss_l2", format!("{n} images, {} conditions", k.rows())));
        }
        let e = self.condition(tape, bound, k)?;
        let xv = tape.leaf(x.clone());
        let (z, groups) = self.encode_on_tape(tape, bound, xv, e, eps)?;
        let z_hat = match channel {
            LatentChannel::Clean => z,
            LatentChannel::Additive(noise) => {
                let nv = tape.leaf(noise.clone());
                tape.add(z, nv)?
            }
            LatentChannel::Awgn {
                snr_db,
                power,
                unit_noise,
            } => self.awgn_on_tape(tape, z, snr_db, power, unit_noise)?,
        };
        let logits = self.decode_on_tape(tape, bound, z_hat, e)?;
        let reconstruction = match likelihood {
            Likelihood::Bernoulli => tape.bce_with_logits(logits, x)?,
            Likelihood::Gaussian { sigma } => {
                let mean = tape.sigmoid(logits);
                let se = tape.squared_error(mean, xv)?;
                tape.scale(se, 1.0 / (2.0 * sigma * sigma))
            }
        };
        let mut kl = groups[0].kl;
        for gv in &groups[1..] {
            kl = tape.add(kl, gv.kl)?;
        }
        let weighted = tape.scale(kl, beta);
        let sum = tape.add(reconstruction, weighted)?;
        let total = tape.scale(sum, 1.0 / n as f64);
        if !tape.value(total).item().is_finite() {
            return Err(Error::NonFinite("cvae loss".into()));
        }
        Ok(LossTerms {
            total,
            reconstruction,
            kl,
        })
    }

    fn awgn_on_tape(&self, tape: &mut Tape, z: Var, snr_db: f64, power: NoisePower, unit: &Matrix) -> Result<Var> {
        let (rows, cols) = tape.value(z).shape();
        if unit.shape() != (rows, cols) {
            return Err(Error::shape(
                "latent channel",
                format!("noise {:?} vs latent {:?}", unit.shape(), (rows, cols)),
            ));
        }
        // Validates the SNR and rejects zero-power rows.
        for r in 0..rows {
            noise_sigma(tape.value(z).row(r), snr_db, power)?;
        }
        if snr_db == f64::INFINITY {
            return Ok(z);
        }
        let unit_v = tape.leaf(unit.clone());
        let noise = match power {
            NoisePower::FixedSigma(sigma) => tape.scale(unit_v, sigma),
            NoisePower::Empirical => {
                let sq = tape.mul(z, z)?;
                let row_power = tape.sum_cols(sq);
                let row_power = tape.scale(row_power, 1.0 / cols as f64);
                let log_power = tape.log(row_power);
                let half = tape.scale(log_power, 0.5);
                let rms = tape.exp(half);
                let ones = tape.leaf(Matrix::filled(1, cols, 1.0));
                let spread = tape.matmul(rms, ones)?;
                let scaled = tape.mul(spread, unit_v)?;
                tape.scale(scaled, 10f64.powf(-snr_db / 20.0))
            }
        };
        tape.add(z, noise)
    }

    /// Standard Normal noise for `rows` samples, one matrix per group.
    pub fn draw_eps(&self, rows: usize, rng: &mut SimRng) -> Vec<Matrix> {
        self.widths
            .iter()
            .map(|&w| {
                let data = (0..rows * w).map(|_| standard_normal(rng)).collect();
                Matrix::from_vec(rows, w, data).expect("sized")
            })
            .collect()
    }

    pub fn encode_batch(&self, x: &Matrix, k: &Matrix, eps: &[Matrix]) -> Result<Matrix> {
        let mut tape = Tape::new();
        let bound = self.params.bind(&mut tape);
        let e = self.condition(&mut tape, &bound, k)?;
        let xv = tape.leaf(x.clone());
        let (z, _) = self.encode_on_tape(&mut tape, &bound, xv, e, eps)?;
        Ok(tape.value(z).clone())
    }

    /// Pixel means in `(0, 1)` for each latent row.
    pub fn decode_batch(&self, z: &Matrix, k: &Matrix) -> Result<Matrix> {
        let mut tape = Tape::new();
        let bound = self.params.bind(&mut tape);
        let e = self.condition(&mut tape, &bound, k)?;
        let zv = tape.leaf(z.clone());
        let logits = self.decode_on_tape(&mut tape, &bound, zv, e)?;
        let means = tape.sigmoid(logits);
        Ok(tape.value(means).clone())
    }

    pub fn prior_sample_batch(&self, k: &Matrix, eps: &[Matrix]) -> Result<Matrix> {
        let mut tape = Tape::new();
        let bound = self.params.bind(&mut tape);
        let e = self.condition(&mut tape, &bound, k)?;
        let z = self.prior_sample_on_tape(&mut tape, &bound, e, eps)?;
        Ok(tape.value(z).clone())
    }

    fn prefix_var(&self, tape: &mut Tape, prefix: &LatentGroups) -> Result<Option<Var>> {
        let g = prefix.groups();
        if g >= self.widths.len() || prefix.widths() != &self.widths[..g] {
            return Err(Error::shape(
                "latent prefix",
                format!("prefix widths {:?} vs model {:?}", prefix.widths(), self.widths),
            ));
        }
        Ok((g > 0).then(|| tape.leaf(Matrix::row_vector(prefix.flatten().to_vec()))))
    }

    /// Prior of group `prefix.groups()` given attribute vector `k`.
    pub fn prior_params(&self, k: &[f64], prefix: &LatentGroups) -> Result<GroupGaussians> {
        let mut tape = Tape::new();
        let bound = self.params.bind(&mut tape);
        let e = self.condition(&mut tape, &bound, &Matrix::row_vector(k.to_vec()))?;
        let pv = self.prefix_var(&mut tape, prefix)?;
        let (mu, sigma) = self.prior_on_tape(&mut tape, &bound, e, pv, prefix.groups())?;
        Ok(GroupGaussians {
            mu: tape.value(mu).as_slice().to_vec(),
            sigma: tape.value(sigma).as_slice().to_vec(),
        })
    }

    /// `(prior, posterior)` of group `prefix.groups()` for image `x`.
    pub fn posterior_params(
        &self,
        x: &ImageTensor,
        k: &[f64],
        prefix: &LatentGroups,
    ) -> Result<(GroupGaussians, GroupGaussians)> {
        self.check_image(x)?;
        let mut tape = Tape::new();
        let bound = self.params.bind(&mut tape);
        let e = self.condition(&mut tape, &bound, &Matrix::row_vector(k.to_vec()))?;
        let pv = self.prefix_var(&mut tape, prefix)?;
        let xv = tape.leaf(Matrix::row_vector(x.pixels().to_vec()));
        let feats = self.image_features(&mut tape, &bound, xv)?;
        let g = prefix.groups();
        let prior = self.prior_on_tape(&mut tape, &bound, e, pv, g)?;
        let post = self.posterior_on_tape(&mut tape, &bound, feats, e, pv, g, prior)?;
        let grab = |t: &Tape, (m, s): (Var, Var)| GroupGaussians {
            mu: t.value(m).as_slice().to_vec(),
            sigma: t.value(s).as_slice().to_vec(),
        };
        Ok((grab(&tape, prior), grab(&tape, post)))
    }

    fn check_image(&self, x: &ImageTensor) -> Result<()> {
        if x.dims() != self.image_dims {
            return Err(Error::shape(
                "cvae image",
                format!("{:?} vs model {:?}", x.dims(), self.image_dims),
            ));
        }
        Ok(())
    }

    /// Posterior sample for one image, deterministic in `seed`.
    pub fn cvae_encode(&self, x: &ImageTensor, k: &[f64], seed: u64) -> Result<LatentGroups> {
        self.check_image(x)?;
        let eps = self.draw_eps(1, &mut rng_from_seed(seed));
        let z = self.encode_batch(
            &Matrix::row_vector(x.pixels().to_vec()),
            &Matrix::row_vector(k.to_vec()),
            &eps,
        )?;
        LatentGroups::unflatten(&self.widths, z.into_vec())
    }

    pub fn cvae_decode(&self, z: &LatentGroups, k: &[f64]) -> Result<ImageTensor> {
        if z.widths() != self.widths.as_slice() {
            return Err(Error::shape(
                "cvae_decode",
                format!("widths {:?} vs {:?}", z.widths(), self.widths),
            ));
        }
        let means = self.decode_batch(
            &Matrix::row_vector(z.flatten().to_vec()),
            &Matrix::row_vector(k.to_vec()),
        )?;
        let (w, h, c) = self.image_dims;
        ImageTensor::from_clamped(w, h, c, means.into_vec())
    }

    pub fn prior_sample(&self, k: &[f64], seed: u64) -> Result<LatentGroups> {
        let eps = self.draw_eps(1, &mut rng_from_seed(seed));
        let z = self.prior_sample_batch(&Matrix::row_vector(k.to_vec()), &eps)?;
        LatentGroups::unflatten(&self.widths, z.into_vec())
    }
}

#[derive(Debug, Clone)]
pub struct TrainedCvae {
    pub cvae: Cvae,
    /// Mean per-image loss per epoch.
    pub loss_trace: Vec<f64>,
}

/// Minibatch training with the true-class attribute vector as condition and
/// a fresh uniform training SNR per batch. Deterministic given `seed`.
pub fn train_cvae(train: &[LabeledSample], skb: &AttributeMatrix, cfg: &CvaeConfig, seed: u64) -> Result<TrainedCvae> {
    cfg.validate()?;
    let first = train
        .first()
        .ok_or_else(|| Error::Invalid("empty training set".into()))?;
    let dims = first.image.dims();
    for s in train {
        if s.image.dims() != dims {
            return Err(Error::shape("train_cvae", "images of differing sizes"));
        }
        if s.class.get() >= skb.classes() {
            return Err(Error::IndexOutOfRange {
                index: s.class.get(),
                len: skb.classes(),
            });
        }
    }
    let mut cvae = Cvae::new(cfg, dims, skb.dims(), derive_seed(seed, &[STREAM_INIT]))?;
    let mut adam = AdamState::new(cfg.adam, cvae.params.values());
    let mut order: Vec<usize> = (0..train.len()).collect();
    let mut trace = Vec::with_capacity(cfg.epochs);
    for epoch in 0..cfg.epochs {
        order.shuffle(&mut rng_from_seed(derive_seed(seed, &[STREAM_SHUFFLE, epoch as u64])));
        let mut total = 0.0;
        let mut kl_total = 0.0;
        let mut batches = 0;
        for (b, chunk) in order.chunks(cfg.batch_size).enumerate() {
            let mut rng = rng_from_seed(derive_seed(seed, &[STREAM_BATCH, epoch as u64, b as u64]));
            let xs: Vec<&[f64]> = chunk.iter().map(|&i| train[i].image.pixels()).collect();
            let ks: Vec<&[f64]> = chunk.iter().map(|&i| skb.row(train[i].class.get())).collect();
            let (x, k) = (Matrix::from_rows(&xs)?, Matrix::from_rows(&ks)?);
            let eps = cvae.draw_eps(chunk.len(), &mut rng);
            let snr_db = if cfg.train_snr_db[0] < cfg.train_snr_db[1] {
                rng.random_range(cfg.train_snr_db[0]..=cfg.train_snr_db[1])
            } else {
                cfg.train_snr_db[0]
            };
            let unit_noise = Matrix::from_vec(
                chunk.len(),
                cvae.latent_len(),
                (0..chunk.len() * cvae.latent_len())
                    .map(|_| standard_normal(&mut rng))
                    .collect(),
            )?;
            let channel = if cfg.train_channel {
                LatentChannel::Awgn {
                    snr_db,
                    power: cfg.channel_power,
                    unit_noise: &unit_noise,
                }
            } else {
                LatentChannel::Clean
            };
            let mut tape = Tape::new();
            let bound = cvae.params.bind(&mut tape);
            let terms = cvae
                .loss_l2(&mut tape, &bound, &x, &k, &eps, channel, cfg.beta, cfg.likelihood)
                .map_err(|e| Error::NonFinite(format!("epoch {epoch}, batch {b}: {e}")))?;
            let value = tape.value(terms.total).item();
            kl_total += tape.value(terms.kl).item() / chunk.len() as f64;
            tape.backward(terms.total)?;
            let grads = cvae.params.grads(&tape, &bound);
            adam.step(cvae.params.values_mut(), &grads)
                .map_err(|e| Error::NonFinite(format!("epoch {epoch}, batch {b}: {e}")))?;
            total += value;
            batches += 1;
        }
        trace.push(total / batches as f64);
        log::debug!(
            "cvae epoch {epoch}: loss {:.4}, kl {:.4}",
            trace[epoch],
            kl_total / batches as f64
        );
    }
    Ok(TrainedCvae {
        cvae,
        loss_trace: trace,
    })
}
