//! End-to-end transmission: compression-ratio accounting, mode selection,
//! transmitter and receiver wiring, and the vanilla baseline.

mod sweep;

pub use sweep::{
    ablate_skb, evaluate_classifier, sweep, vanilla_sweep, write_ablation_csv, write_sweep_csv, AblationConfig,
    AblationRow, SweepGrid, SweepRow, ABLATION_COLUMNS, SWEEP_COLUMNS,
};

use serde::Serialize;

use crate::channel::{awgn, ChannelConfig, Frame, NoisePower};
use crate::cvae::{Cvae, LatentGroups};
use crate::dataset::{mean_image, ImageTensor, LabeledSample};
use crate::encoder::Encoder;
use crate::error::{Error, Result};
use crate::metrics::{psnr, semantic_accuracy, ssim, EvalRecord, ImageScore, DEFAULT_GAMMA};
use crate::rng::derive_seed;
use crate::skb::{AttributeMatrix, ClassIndex};

/// Symbols used by the class index.
pub const INDEX_SYMBOLS: usize = 1;

/// Sub-stream tags under each image's seed `derive_seed(seed, [i])`.
pub const STREAM_POSTERIOR: u64 = 1;
pub const STREAM_CHANNEL: u64 = 2;
pub const STREAM_PRIOR: u64 = 3;

/// `(t + l) / (W * H * C)`.
pub fn compression_ratio(index_symbols: usize, latent_symbols: usize, dims: (usize, usize, usize)) -> f64 {
    (index_symbols + latent_symbols) as f64 / (dims.0 * dims.1 * dims.2) as f64
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct RateConfig {
    /// Compression ratio available at test time.
    pub budget: f64,
    /// Compression ratio the codec was trained for.
    pub theta: f64,
    pub index_symbols: usize,
    pub latent_symbols: usize,
    pub image_dims: (usize, usize, usize),
}

impl RateConfig {
    pub fn new(budget: f64, latent_symbols: usize, image_dims: (usize, usize, usize)) -> Result<RateConfig> {
        if !budget.is_finite() || budget < 0.0 {
            return Err(Error::Invalid(format!("compression budget must be >= 0, got {budget}")));
        }
        if image_dims.0 * image_dims.1 * image_dims.2 == 0 {
            return Err(Error::Invalid("image dimensions must be positive".into()));
        }
        Ok(RateConfig {
            budget,
            theta: compression_ratio(INDEX_SYMBOLS, latent_symbols, image_dims),
            index_symbols: INDEX_SYMBOLS,
            latent_symbols,
            image_dims,
        })
    }

    pub fn for_model(budget: f64, cvae: &Cvae) -> Result<RateConfig> {
        RateConfig::new(budget, cvae.latent_len(), cvae.image_dims())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum Mode {
    /// Index only; the receiver samples the conditional prior.
    Generate,
    /// Index and latent; the receiver reconstructs the source.
    Reconstruct,
}

impl Mode {
    pub fn as_str(self) -> &'static str {
        match self {
            Mode::Generate => "generate",
            Mode::Reconstruct => "reconstruct",
        }
    }
}

pub fn select_mode(rate: &RateConfig) -> Mode {
    if rate.budget < rate.theta {
        Mode::Generate
    } else {
        Mode::Reconstruct
    }
}

/// Channel settings for one evaluation run.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LinkConfig {
    /// `f64::INFINITY` disables the noise.
    pub snr_db: f64,
    pub power: NoisePower,
}

impl LinkConfig {
    pub fn new(snr_db: f64) -> LinkConfig {
        LinkConfig {
            snr_db,
            power: NoisePower::Empirical,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ImageOutput {
    pub true_class: ClassIndex,
    /// Index sent by the transmitter; `None` for the baseline.
    pub transmitted: Option<ClassIndex>,
    pub predicted: ClassIndex,
    pub image: ImageTensor,
    pub wire_bytes: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct RunResult {
    pub method: &'static str,
    pub mode: Mode,
    /// `None` for the baseline, which always sends its full latent.
    pub rate: Option<RateConfig>,
    pub link: LinkConfig,
    pub seed: u64,
    pub outputs: Vec<ImageOutput>,
    pub record: EvalRecord,
}

impl RunResult {
    pub fn wire_bytes(&self) -> usize {
        self.outputs.iter().map(|o| o.wire_bytes).sum()
    }

    /// Checks mode and index consistency for every image.
    pub fn verify(&self) -> Result<()> {
        if self.outputs.len() != self.record.len() {
            return Err(Error::Invalid("output and score counts differ".into()));
        }
        if let Some(rate) = &self.rate {
            if select_mode(rate) != self.mode {
                return Err(Error::Invalid("mode disagrees with the compression rule".into()));
            }
        }
        for (i, o) in self.outputs.iter().enumerate() {
            if let Some(v) = o.transmitted {
                if v != o.predicted {
                    return Err(Error::Invalid(format!(
                        "image {i}: predicted {} but sent {v}",
                        o.predicted
                    )));
                }
            }
        }
        Ok(())
    }
}

fn check_models(encoder: &Encoder, cvae: &Cvae, skb: &AttributeMatrix, test: &[LabeledSample]) -> Result<()> {
    if encoder.attributes() != skb.dims() || cvae.attributes() != skb.dims() {
        return Err(Error::shape(
            "pipeline models",
            format!(
                "encoder emits {} attributes, cvae expects {}, SKB has {}",
                encoder.attributes(),
                cvae.attributes(),
                skb.dims()
            ),
        ));
    }
    if encoder.input_dim() != cvae.pixels() {
        return Err(Error::shape(
            "pipeline models",
            format!(
                "encoder input {} vs cvae image size {}",
                encoder.input_dim(),
                cvae.pixels()
            ),
        ));
    }
    for (i, s) in test.iter().enumerate() {
        if s.image.dims() != cvae.image_dims() {
            return Err(Error::shape(
                "pipeline input",
                format!("image {i} has dims {:?}", s.image.dims()),
            ));
        }
        skb.lookup(s.class)?;
    }
    Ok(())
}

fn score(
    sample: &LabeledSample,
    skb: &AttributeMatrix,
    predicted: ClassIndex,
    semantic: &[f64],
    image: &ImageTensor,
) -> Result<ImageScore> {
    Ok(ImageScore {
        true_class: sample.class,
        predicted_class: predicted,
        semantic_accuracy: semantic_accuracy(semantic, skb.lookup(sample.class)?, DEFAULT_GAMMA)?,
        psnr: psnr(&sample.image, image)?,
        ssim: ssim(&sample.image, image)?,
    })
}

fn payload_to_f64(frame: &Frame) -> Vec<f64> {
    frame.payload().unwrap_or(&[]).iter().map(|&x| x as f64).collect()
}

/// The proposed SKB-guided transmission over `test`.
///
/// Image `i` draws all its randomness from `derive_seed(seed, [i])`, so the
/// result does not depend on evaluation order.
pub fn run_end_to_end(
    encoder: &Encoder,
    cvae: &Cvae,
    skb: &AttributeMatrix,
    rate: &RateConfig,
    link: &LinkConfig,
    test: &[LabeledSample],
    seed: u64,
) -> Result<RunResult> {
    check_models(encoder, cvae, skb, test)?;
    if rate.latent_symbols != cvae.latent_len() || rate.image_dims != cvae.image_dims() {
        return Err(Error::shape("run_end_to_end", "rate config does not match the model"));
    }
    let mode = select_mode(rate);
    let mut outputs = Vec::with_capacity(test.len());
    let mut record = EvalRecord::default();
    for (i, sample) in test.iter().enumerate() {
        let image_seed = derive_seed(seed, &[i as u64]);
        // transmitter
        let s = encoder.encode(&sample.image)?;
        let (v, corrected) = skb.nearest(s.as_slice())?;
        let frame = match mode {
            Mode::Generate => Frame::IndexOnly { v },
            Mode::Reconstruct => {
                let z = cvae.cvae_encode(&sample.image, corrected, derive_seed(image_seed, &[STREAM_POSTERIOR]))?;
                Frame::index_plus_latent(v, z.flatten())
            }
        };
        let wire = frame.encode();
        // receiver
        let received = Frame::decode(&wire)?;
        let v_hat = received.index();
        let condition = skb.lookup(v_hat)?;
        let z_hat = match mode {
            Mode::Generate => cvae.prior_sample(condition, derive_seed(image_seed, &[STREAM_PRIOR]))?,
            Mode::Reconstruct => {
                let channel = ChannelConfig {
                    snr_db: link.snr_db,
                    seed: derive_seed(image_seed, &[STREAM_CHANNEL]),
                    power: link.power,
                };
                let noisy = awgn(&payload_to_f64(&received), &channel)?;
                LatentGroups::unflatten(cvae.group_widths(), noisy)?
            }
        };
        let image = cvae.cvae_decode(&z_hat, condition)?;
        record.push(score(sample, skb, v_hat, condition, &image)?)?;
        outputs.push(ImageOutput {
            true_class: sample.class,
            transmitted: Some(v),
            predicted: v_hat,
            image,
            wire_bytes: wire.len(),
        });
    }
    let result = RunResult {
        method: "proposed",
        mode,
        rate: Some(*rate),
        link: *link,
        seed,
        outputs,
        record,
    };
    result.verify()?;
    Ok(result)
}

/// Unconditional VAE transmission, then classification of the
/// reconstruction with the semantic encoder and SKB. The baseline's semantic
/// feature is the SKB row of the predicted class.
pub fn run_vanilla_baseline(
    cvae: &Cvae,
    encoder: &Encoder,
    skb: &AttributeMatrix,
    link: &LinkConfig,
    test: &[LabeledSample],
    seed: u64,
) -> Result<RunResult> {
    if cvae.is_conditional() {
        return Err(Error::Invalid(
            "the vanilla baseline needs a null-condition model".into(),
        ));
    }
    check_models(encoder, cvae, skb, test)?;
    let null = vec![0.0; skb.dims()];
    let mut outputs = Vec::with_capacity(test.len());
    let mut record = EvalRecord::default();
    for (i, sample) in test.iter().enumerate() {
        let image_seed = derive_seed(seed, &[i as u64]);
        let z = cvae.cvae_encode(&sample.image, &null, derive_seed(image_seed, &[STREAM_POSTERIOR]))?;
        let symbols: Vec<f64> = z.flatten().iter().map(|&x| x as f32 as f64).collect();
        let channel = ChannelConfig {
            snr_db: link.snr_db,
            seed: derive_seed(image_seed, &[STREAM_CHANNEL]),
            power: link.power,
        };
        let z_hat = LatentGroups::unflatten(cvae.group_widths(), awgn(&symbols, &channel)?)?;
        let image = cvae.cvae_decode(&z_hat, &null)?;
        let (predicted, row) = skb.nearest(encoder.encode(&image)?.as_slice())?;
        record.push(score(sample, skb, predicted, row, &image)?)?;
        outputs.push(ImageOutput {
            true_class: sample.class,
            transmitted: None,
            predicted,
            image,
            wire_bytes: 4 * symbols.len(),
        });
    }
    Ok(RunResult {
        method: "vanilla",
        mode: Mode::Reconstruct,
        rate: None,
        link: *link,
        seed,
        outputs,
        record,
    })
}

/// Mean PSNR of predicting the training-set mean image for every test image.
pub fn mean_image_psnr(train: &[LabeledSample], test: &[LabeledSample]) -> Result<f64> {
    let mean = mean_image(train.iter().map(|s| &s.image))?;
    if test.is_empty() {
        return Err(Error::Invalid("empty test set".into()));
    }
    let mut total = 0.0;
    for s in test {
        total += psnr(&mean, &s.image)?
            .finite()
            .ok_or_else(|| Error::Degenerate("test image equals the mean image".into()))?;
    }
    Ok(total / test.len() as f64)
}
