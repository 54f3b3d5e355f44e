use std::path::Path;

use serde::{Deserialize, Serialize};

use super::{run_end_to_end, run_vanilla_baseline, LinkConfig, Mode, RateConfig, RunResult};
use crate::channel::NoisePower;
use crate::cvae::Cvae;
use crate::dataset::{make_glyph_dataset, GlyphSpec, LabeledSample};
use crate::encoder::{train_semantic_encoder, Encoder, EncoderConfig};
use crate::error::{Error, Result};
use crate::metrics::{classification_accuracy, semantic_accuracy, Aggregate, DEFAULT_GAMMA};
use crate::rng::derive_seed;
use crate::skb::AttributeMatrix;

#[derive(Debug, Clone, PartialEq)]
pub struct SweepGrid {
    pub snr_db: Vec<f64>,
    pub budgets: Vec<f64>,
    pub seeds: Vec<u64>,
    pub power: NoisePower,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SweepRow {
    pub method: &'static str,
    pub snr_db: f64,
    pub budget: Option<f64>,
    pub theta: Option<f64>,
    pub seed: u64,
    pub mode: Mode,
    pub aggregate: Aggregate,
    pub wire_bytes_per_image: f64,
}

impl SweepRow {
    fn from_run(run: &RunResult) -> Result<SweepRow> {
        Ok(SweepRow {
            method: run.method,
            snr_db: run.link.snr_db,
            budget: run.rate.map(|r| r.budget),
            theta: run.rate.map(|r| r.theta),
            seed: run.seed,
            mode: run.mode,
            aggregate: run.record.aggregate()?,
            wire_bytes_per_image: run.wire_bytes() as f64 / run.outputs.len() as f64,
        })
    }
}

pub const SWEEP_COLUMNS: [&str; 12] = [
    "method",
    "snr_db",
    "budget",
    "theta",
    "seed",
    "mode",
    "classification_accuracy",
    "semantic_accuracy",
    "psnr_db",
    "infinite_psnr",
    "ssim",
    "wire_bytes_per_image",
];

/// One proposed-method run per (SNR, budget, seed), in that nesting order.
pub fn sweep(
    encoder: &Encoder,
    cvae: &Cvae,
    skb: &AttributeMatrix,
    grid: &SweepGrid,
    test: &[LabeledSample],
) -> Result<Vec<SweepRow>> {
    let mut rows = Vec::with_capacity(grid.snr_db.len() * grid.budgets.len() * grid.seeds.len());
    for &snr_db in &grid.snr_db {
        for &budget in &grid.budgets {
            let rate = RateConfig::for_model(budget, cvae)?;
            for &seed in &grid.seeds {
                let link = LinkConfig {
                    snr_db,
                    power: grid.power,
                };
                let run = run_end_to_end(encoder, cvae, skb, &rate, &link, test, seed)?;
                rows.push(SweepRow::from_run(&run)?);
            }
        }
    }
    Ok(rows)
}

/// Baseline runs per (SNR, seed); budgets are ignored.
pub fn vanilla_sweep(
    unconditional: &Cvae,
    encoder: &Encoder,
    skb: &AttributeMatrix,
    grid: &SweepGrid,
    test: &[LabeledSample],
) -> Result<Vec<SweepRow>> {
    let mut rows = Vec::new();
    for &snr_db in &grid.snr_db {
        for &seed in &grid.seeds {
            let link = LinkConfig {
                snr_db,
                power: grid.power,
            };
            let run = run_vanilla_baseline(unconditional, encoder, skb, &link, test, seed)?;
            rows.push(SweepRow::from_run(&run)?);
        }
    }
    Ok(rows)
}

fn csv_error(path: &Path, e: csv::Error) -> Error {
    Error::Parse {
        path: path.to_path_buf(),
        reason: e.to_string(),
    }
}

fn opt(v: Option<f64>) -> String {
    v.map(|x| x.to_string()).unwrap_or_default()
}

pub fn write_sweep_csv(path: &Path, rows: &[SweepRow]) -> Result<()> {
    let mut w = csv::Writer::from_path(path).map_err(|e| csv_error(path, e))?;
    w.write_record(SWEEP_COLUMNS).map_err(|e| csv_error(path, e))?;
    for r in rows {
        let a = &r.aggregate;
        w.write_record([
            r.method.to_string(),
            r.snr_db.to_string(),
            opt(r.budget),
            opt(r.theta),
            r.seed.to_string(),
            r.mode.as_str().to_string(),
            a.classification_accuracy.to_string(),
            a.semantic_accuracy.to_string(),
            opt(a.psnr),
            a.infinite_psnr.to_string(),
            a.ssim.to_string(),
            r.wire_bytes_per_image.to_string(),
        ])
        .map_err(|e| csv_error(path, e))?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct AblationConfig {
    /// Attribute counts to compare; each must not exceed `glyph.attributes`.
    pub dims: Vec<usize>,
    pub seeds: Vec<u64>,
    pub glyph: GlyphSpec,
    pub encoder: EncoderConfig,
}

impl Default for AblationConfig {
    fn default() -> Self {
        AblationConfig {
            dims: vec![2, 3, 6, 12],
            seeds: vec![1, 2, 3, 4, 5],
            glyph: GlyphSpec::default(),
            encoder: EncoderConfig::default(),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AblationRow {
    pub attributes: usize,
    pub seed: u64,
    pub classification_accuracy: f64,
    pub semantic_accuracy: f64,
}

pub const ABLATION_COLUMNS: [&str; 4] = ["attributes", "seed", "classification_accuracy", "semantic_accuracy"];

/// SKB-size ablation.
///
/// For each seed one glyph set is rendered from the full attribute vectors;
/// each run keeps only the leading `d` SKB columns and retrains the encoder.
/// All runs of a seed therefore see identical images.
pub fn ablate_skb(cfg: &AblationConfig) -> Result<Vec<AblationRow>> {
    let min_d = *cfg
        .dims
        .iter()
        .min()
        .ok_or_else(|| Error::Invalid("no ablation sizes".into()))?;
    if min_d == 0 || cfg.dims.iter().any(|&d| d > cfg.glyph.attributes) {
        return Err(Error::Invalid(format!(
            "ablation sizes {:?} must lie in 1..={}",
            cfg.dims, cfg.glyph.attributes
        )));
    }
    let mut rows = Vec::new();
    for &seed in &cfg.seeds {
        let spec = GlyphSpec {
            seed,
            nonzero_prefix: cfg.glyph.nonzero_prefix.max(min_d),
            ..cfg.glyph.clone()
        };
        let data = make_glyph_dataset(&spec)?;
        for &d in &cfg.dims {
            let skb = data.skb.leading_attributes(d)?;
            let retag = |set: &[LabeledSample]| -> Vec<LabeledSample> {
                set.iter()
                    .map(|s| LabeledSample {
                        image: s.image.clone(),
                        class: s.class,
                        attributes: s.attributes[..d].to_vec(),
                    })
                    .collect()
            };
            let (train, test) = (retag(&data.train), retag(&data.test));
            let trained = train_semantic_encoder(&train, &skb, &cfg.encoder, derive_seed(seed, &[d as u64]))?;
            let (acc, sem) = evaluate_classifier(&trained.encoder, &skb, &test)?;
            log::info!("ablation d={d} seed={seed}: accuracy {acc:.3}, semantic {sem:.3}");
            rows.push(AblationRow {
                attributes: d,
                seed,
                classification_accuracy: acc,
                semantic_accuracy: sem,
            });
        }
    }
    Ok(rows)
}

/// `(classification accuracy, mean semantic accuracy)` of encode→nearest.
pub fn evaluate_classifier(encoder: &Encoder, skb: &AttributeMatrix, test: &[LabeledSample]) -> Result<(f64, f64)> {
    let mut preds = Vec::with_capacity(test.len());
    let mut sem = 0.0;
    for s in test {
        let (v, row) = skb.nearest(encoder.encode(&s.image)?.as_slice())?;
        sem += semantic_accuracy(row, skb.lookup(s.class)?, DEFAULT_GAMMA)?;
        preds.push(v);
    }
    let truths: Vec<_> = test.iter().map(|s| s.class).collect();
    Ok((classification_accuracy(&preds, &truths)?, sem / test.len() as f64))
}

pub fn write_ablation_csv(path: &Path, rows: &[AblationRow]) -> Result<()> {
    let mut w = csv::Writer::from_path(path).map_err(|e| csv_error(path, e))?;
    w.write_record(ABLATION_COLUMNS).map_err(|e| csv_error(path, e))?;
    for r in rows {
        w.write_record([
            r.attributes.to_string(),
            r.seed.to_string(),
            r.classification_accuracy.to_string(),
            r.semantic_accuracy.to_string(),
        ])
        .map_err(|e| csv_error(path, e))?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}
