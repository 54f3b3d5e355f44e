//! Synthetic attribute-labelled glyph images.
//!
//! Each attribute owns a smooth random mask (a sum of Gaussian bumps). A
//! class image is the attribute-weighted sum of the masks, shifted by a small
//! per-sample integer jitter and perturbed with Gaussian pixel noise, so the
//! attributes are linearly recoverable from the pixels.

use rand::Rng;
use serde::{Deserialize, Serialize};

use super::image::ImageTensor;
use super::LabeledSample;
use crate::error::{Error, Result};
use crate::rng::{derive_seed, rng_from_seed, standard_normal, SimRng};
use crate::skb::{cosine_similarity, AttributeMatrix, MAX_CLASSES};

/// Attribute values are drawn from `{0, 0.25, 0.5, 0.75, 1}`.
pub const ATTRIBUTE_LEVELS: [f64; 5] = [0.0, 0.25, 0.5, 0.75, 1.0];
/// Upper bound on the cosine similarity of any two class vectors.
pub const MAX_PAIRWISE_COSINE: f64 = 0.95;
const BUMPS_PER_MASK: usize = 2;

const STREAM_MASKS: u64 = 1;
const STREAM_CLASSES: u64 = 2;
const STREAM_TRAIN: u64 = 3;
const STREAM_TEST: u64 = 4;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct GlyphSpec {
    pub classes: usize,
    pub attributes: usize,
    pub width: usize,
    pub height: usize,
    pub channels: usize,
    pub train_per_class: usize,
    pub test_per_class: usize,
    pub seed: u64,
    /// Maximum absolute integer shift in pixels, per axis.
    pub jitter: usize,
    pub noise_sigma: f64,
    /// Every class vector must be nonzero on its first `nonzero_prefix`
    /// attributes, so truncated SKBs stay valid.
    pub nonzero_prefix: usize,
}

impl Default for GlyphSpec {
    fn default() -> Self {
        GlyphSpec {
            classes: 8,
            attributes: 12,
            width: 16,
            height: 16,
            channels: 1,
            train_per_class: 200,
            test_per_class: 50,
            seed: 1,
            jitter: 1,
            noise_sigma: 0.05,
            nonzero_prefix: 0,
        }
    }
}

impl GlyphSpec {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Invalid(m));
        if self.classes == 0 || self.classes > MAX_CLASSES {
            return bad(format!("classes must be in 1..={MAX_CLASSES}, got {}", self.classes));
        }
        if self.attributes < 2 {
            return bad(format!("need at least 2 attributes, got {}", self.attributes));
        }
        if self.width * self.height * self.channels == 0 {
            return bad("image dimensions must be positive".into());
        }
        if self.train_per_class == 0 || self.test_per_class == 0 {
            return bad("train and test counts per class must be at least 1".into());
        }
        if self.nonzero_prefix > self.attributes {
            return bad("nonzero_prefix exceeds attribute count".into());
        }
        if !(self.noise_sigma >= 0.0 && self.noise_sigma.is_finite()) {
            return bad(format!("noise_sigma must be finite and >= 0, got {}", self.noise_sigma));
        }
        Ok(())
    }

    pub fn pixel_count(&self) -> usize {
        self.width * self.height * self.channels
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct GlyphDataset {
    pub skb: AttributeMatrix,
    pub train: Vec<LabeledSample>,
    pub test: Vec<LabeledSample>,
}

/// One mask per attribute, laid out like an image (`(y, x, c)`).
fn draw_masks(spec: &GlyphSpec, rng: &mut SimRng) -> Vec<Vec<f64>> {
    let (w, h, c) = (spec.width, spec.height, spec.channels);
    let short = w.min(h) as f64;
    (0..spec.attributes)
        .map(|_| {
            let mut mask = vec![0.0; w * h * c];
            for ch in 0..c {
                for _ in 0..BUMPS_PER_MASK {
                    let cx = rng.random_range(0.0..w as f64);
                    let cy = rng.random_range(0.0..h as f64);
                    let width = rng.random_range(short / 8.0..short / 4.0).max(0.5);
                    let amp = rng.random_range(0.5..1.0);
                    for y in 0..h {
                        for x in 0..w {
                            let dx = x as f64 + 0.5 - cx;
                            let dy = y as f64 + 0.5 - cy;
                            mask[(y * w + x) * c + ch] += amp * (-(dx * dx + dy * dy) / (2.0 * width * width)).exp();
                        }
                    }
                }
            }
            let peak = mask.iter().cloned().fold(0.0, f64::max);
            if peak > 0.0 {
                mask.iter_mut().for_each(|v| *v /= peak);
            }
            mask
        })
        .collect()
}

fn draw_class_vectors(spec: &GlyphSpec, rng: &mut SimRng) -> Result<Vec<Vec<f64>>> {
    let mut rows: Vec<Vec<f64>> = Vec::with_capacity(spec.classes);
    let budget = 10 * spec.classes;
    for _ in 0..budget {
        if rows.len() == spec.classes {
            break;
        }
        let cand: Vec<f64> = (0..spec.attributes)
            .map(|_| ATTRIBUTE_LEVELS[rng.random_range(0..ATTRIBUTE_LEVELS.len())])
            .collect();
        if cand.iter().all(|&v| v == 0.0) {
            continue;
        }
        if spec.nonzero_prefix > 0 && cand[..spec.nonzero_prefix].iter().all(|&v| v == 0.0) {
            continue;
        }
        let crowded = rows
            .iter()
            .any(|r| cosine_similarity(r, &cand).map_or(true, |s| s > MAX_PAIRWISE_COSINE));
        if !crowded {
            rows.push(cand);
        }
    }
    if rows.len() < spec.classes {
        return Err(Error::Invalid(format!(
            "could not draw {} class vectors with pairwise cosine <= {MAX_PAIRWISE_COSINE} \
             in {budget} draws ({} attributes); spec too crowded",
            spec.classes, spec.attributes
        )));
    }
    Ok(rows)
}

fn render_sample(spec: &GlyphSpec, composite: &[f64], seed: u64) -> Result<ImageTensor> {
    let (w, h, c) = (spec.width, spec.height, spec.channels);
    let mut rng = rng_from_seed(seed);
    let j = spec.jitter as i64;
    let (dx, dy) = if j > 0 {
        (rng.random_range(-j..=j), rng.random_range(-j..=j))
    } else {
        (0, 0)
    };
    let mut px = vec![0.0; w * h * c];
    for y in 0..h as i64 {
        for x in 0..w as i64 {
            let (sx, sy) = (x - dx, y - dy);
            let inside = sx >= 0 && sy >= 0 && sx < w as i64 && sy < h as i64;
            for ch in 0..c {
                let base = if inside {
                    composite[((sy as usize) * w + sx as usize) * c + ch]
                } else {
                    0.0
                };
                px[((y as usize) * w + x as usize) * c + ch] = base;
            }
        }
    }
    if spec.noise_sigma > 0.0 {
        for p in &mut px {
            *p += spec.noise_sigma * standard_normal(&mut rng);
        }
    }
    ImageTensor::from_clamped(w, h, c, px)
}

/// Generates the SKB plus disjoint train and test splits, deterministically
/// from `spec.seed`.
pub fn make_glyph_dataset(spec: &GlyphSpec) -> Result<GlyphDataset> {
    spec.validate()?;
    let masks = draw_masks(spec, &mut rng_from_seed(derive_seed(spec.seed, &[STREAM_MASKS])));
    let rows = draw_class_vectors(spec, &mut rng_from_seed(derive_seed(spec.seed, &[STREAM_CLASSES])))?;
    let skb = AttributeMatrix::new(&rows)?;

    // scale so the all-ones attribute vector peaks at 1
    let n = spec.pixel_count();
    let full: Vec<f64> = (0..n).map(|p| masks.iter().map(|m| m[p]).sum()).collect();
    let peak = full.iter().cloned().fold(0.0, f64::max).max(1e-12);

    let composites: Vec<Vec<f64>> = rows
        .iter()
        .map(|k| {
            (0..n)
                .map(|p| k.iter().zip(&masks).map(|(a, m)| a * m[p]).sum::<f64>() / peak)
                .collect()
        })
        .collect();

    let split = |stream: u64, per_class: usize| -> Result<Vec<LabeledSample>> {
        let mut out = Vec::with_capacity(per_class * spec.classes);
        for (m, comp) in composites.iter().enumerate() {
            for i in 0..per_class {
                let seed = derive_seed(spec.seed, &[stream, m as u64, i as u64]);
                out.push(LabeledSample {
                    image: render_sample(spec, comp, seed)?,
                    class: skb.index(m)?,
                    attributes: rows[m].clone(),
                });
            }
        }
        Ok(out)
    };
    let train = split(STREAM_TRAIN, spec.train_per_class)?;
    let test = split(STREAM_TEST, spec.test_per_class)?;
    Ok(GlyphDataset { skb, train, test })
}
