//! Semantic accuracy, classification accuracy, PSNR and SSIM.

use std::fmt;
use std::path::Path;

use crate::dataset::ImageTensor;
use crate::error::{Error, Result};
use crate::skb::ClassIndex;

/// Default per-attribute tolerance for semantic accuracy.
pub const DEFAULT_GAMMA: f64 = 0.0005;

pub const SSIM_WINDOW: usize = 8;
pub const SSIM_STRIDE: usize = 4;
pub const SSIM_C1: f64 = 0.01 * 0.01;
pub const SSIM_C2: f64 = 0.03 * 0.03;

/// Fraction of attributes with `|s'_i - k_i| <= gamma`.
pub fn semantic_accuracy(predicted: &[f64], truth: &[f64], gamma: f64) -> Result<f64> {
    if predicted.len() != truth.len() || predicted.is_empty() {
        return Err(Error::shape(
            "semantic_accuracy",
            format!("lengths {} and {}", predicted.len(), truth.len()),
        ));
    }
    let hits = predicted
        .iter()
        .zip(truth)
        .filter(|(a, b)| (*a - *b).abs() <= gamma)
        .count();
    Ok(hits as f64 / predicted.len() as f64)
}

pub fn classification_accuracy(predictions: &[ClassIndex], truths: &[ClassIndex]) -> Result<f64> {
    if predictions.is_empty() {
        return Err(Error::Invalid("classification accuracy of an empty set".into()));
    }
    if predictions.len() != truths.len() {
        return Err(Error::shape(
            "classification_accuracy",
            format!("{} predictions, {} truths", predictions.len(), truths.len()),
        ));
    }
    let hits = predictions.iter().zip(truths).filter(|(p, t)| p == t).count();
    Ok(hits as f64 / predictions.len() as f64)
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Psnr {
    Finite(f64),
    /// The images are identical.
    Infinite,
}

impl Psnr {
    pub fn finite(self) -> Option<f64> {
        match self {
            Psnr::Finite(v) => Some(v),
            Psnr::Infinite => None,
        }
    }
}

impl fmt::Display for Psnr {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Psnr::Finite(v) => write!(f, "{v}"),
            Psnr::Infinite => f.write_str("inf"),
        }
    }
}

fn same_dims(op: &'static str, a: &ImageTensor, b: &ImageTensor) -> Result<()> {
    if a.dims() != b.dims() {
        return Err(Error::shape(op, format!("{:?} vs {:?}", a.dims(), b.dims())));
    }
    Ok(())
}

/// `10 log10(1 / MSE)` for unit peak.
pub fn psnr(a: &ImageTensor, b: &ImageTensor) -> Result<Psnr> {
    same_dims("psnr", a, b)?;
    let mse = a
        .pixels()
        .iter()
        .zip(b.pixels())
        .map(|(x, y)| (x - y) * (x - y))
        .sum::<f64>()
        / a.pixels().len() as f64;
    if mse == 0.0 {
        return Ok(Psnr::Infinite);
    }
    Ok(Psnr::Finite(10.0 * (1.0 / mse).log10()))
}

/// Mean SSIM over 8x8 uniform windows at stride 4, per channel.
pub fn ssim(a: &ImageTensor, b: &ImageTensor) -> Result<f64> {
    same_dims("ssim", a, b)?;
    let (w, h, c) = a.dims();
    if w < SSIM_WINDOW || h < SSIM_WINDOW {
        return Err(Error::Invalid(format!(
            "image {w}x{h} smaller than the {SSIM_WINDOW}x{SSIM_WINDOW} SSIM window"
        )));
    }
    let n = (SSIM_WINDOW * SSIM_WINDOW) as f64;
    let mut total = 0.0;
    let mut count = 0usize;
    for ch in 0..c {
        for y0 in (0..=h - SSIM_WINDOW).step_by(SSIM_STRIDE) {
            for x0 in (0..=w - SSIM_WINDOW).step_by(SSIM_STRIDE) {
                let (mut sa, mut sb, mut saa, mut sbb, mut sab) = (0.0, 0.0, 0.0, 0.0, 0.0);
                for y in y0..y0 + SSIM_WINDOW {
                    for x in x0..x0 + SSIM_WINDOW {
                        let (p, q) = (a.at(x, y, ch), b.at(x, y, ch));
                        sa += p;
                        sb += q;
                        saa += p * p;
                        sbb += q * q;
                        sab += p * q;
                    }
                }
                let (ma, mb) = (sa / n, sb / n);
                let va = saa / n - ma * ma;
                let vb = sbb / n - mb * mb;
                let cov = sab / n - ma * mb;
                total += ((2.0 * ma * mb + SSIM_C1) * (2.0 * cov + SSIM_C2))
                    / ((ma * ma + mb * mb + SSIM_C1) * (va + vb + SSIM_C2));
                count += 1;
            }
        }
    }
    Ok(total / count as f64)
}

#[derive(Debug, Clone, PartialEq)]
pub struct ImageScore {
    pub true_class: ClassIndex,
    pub predicted_class: ClassIndex,
    pub semantic_accuracy: f64,
    pub psnr: Psnr,
    pub ssim: f64,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Aggregate {
    pub classification_accuracy: f64,
    pub semantic_accuracy: f64,
    /// Mean over finite entries; `None` when every entry is infinite.
    pub psnr: Option<f64>,
    pub infinite_psnr: usize,
    pub ssim: f64,
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct EvalRecord {
    pub images: Vec<ImageScore>,
}

pub const EVAL_COLUMNS: [&str; 8] = [
    "image",
    "true_class",
    "predicted_class",
    "correct",
    "semantic_accuracy",
    "psnr_db",
    "infinite_psnr",
    "ssim",
];

impl EvalRecord {
    pub fn push(&mut self, score: ImageScore) -> Result<()> {
        if !(0.0..=1.0).contains(&score.semantic_accuracy) || !(-1.0..=1.0).contains(&score.ssim) {
            return Err(Error::Invalid(format!("score out of range: {score:?}")));
        }
        self.images.push(score);
        Ok(())
    }

    pub fn len(&self) -> usize {
        self.images.len()
    }

    pub fn is_empty(&self) -> bool {
        self.images.is_empty()
    }

    pub fn aggregate(&self) -> Result<Aggregate> {
        let preds: Vec<ClassIndex> = self.images.iter().map(|s| s.predicted_class).collect();
        let truths: Vec<ClassIndex> = self.images.iter().map(|s| s.true_class).collect();
        let classification = classification_accuracy(&preds, &truths)?;
        let n = self.images.len() as f64;
        let finite: Vec<f64> = self.images.iter().filter_map(|s| s.psnr.finite()).collect();
        Ok(Aggregate {
            classification_accuracy: classification,
            semantic_accuracy: self.images.iter().map(|s| s.semantic_accuracy).sum::<f64>() / n,
            psnr: (!finite.is_empty()).then(|| finite.iter().sum::<f64>() / finite.len() as f64),
            infinite_psnr: self.images.len() - finite.len(),
            ssim: self.images.iter().map(|s| s.ssim).sum::<f64>() / n,
        })
    }

    /// One row per image, then a `mean` row holding the aggregates.
    pub fn write_csv(&self, path: &Path) -> Result<()> {
        let agg = self.aggregate()?;
        let mut w = csv::Writer::from_path(path).map_err(|e| Error::Parse {
            path: path.to_path_buf(),
            reason: e.to_string(),
        })?;
        let mut rows: Vec<Vec<String>> = vec![EVAL_COLUMNS.iter().map(|s| s.to_string()).collect()];
        for (i, s) in self.images.iter().enumerate() {
            rows.push(vec![
                i.to_string(),
                s.true_class.to_string(),
                s.predicted_class.to_string(),
                ((s.true_class == s.predicted_class) as u8).to_string(),
                s.semantic_accuracy.to_string(),
                s.psnr.to_string(),
                ((s.psnr == Psnr::Infinite) as u8).to_string(),
                s.ssim.to_string(),
            ]);
        }
        rows.push(vec![
            "mean".into(),
            String::new(),
            String::new(),
            agg.classification_accuracy.to_string(),
            agg.semantic_accuracy.to_string(),
            agg.psnr.map(|v| v.to_string()).unwrap_or_default(),
            agg.infinite_psnr.to_string(),
            agg.ssim.to_string(),
        ]);
        for r in rows {
            w.write_record(&r).map_err(|e| Error::Parse {
                path: path.to_path_buf(),
                reason: e.to_string(),
            })?;
        }
        w.flush().map_err(|e| Error::io(path, e))
    }
}
