//! JSON run configuration shared by every CLI verb.

use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::channel::NoisePower;
use crate::cvae::CvaeConfig;
use crate::dataset::GlyphSpec;
use crate::encoder::EncoderConfig;
use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct Paths {
    /// Glyph export written by `gen-data`.
    pub data_dir: PathBuf,
    pub model_dir: PathBuf,
    pub output_dir: PathBuf,
}

impl Default for Paths {
    fn default() -> Self {
        Paths {
            data_dir: "data".into(),
            model_dir: "models".into(),
            output_dir: "out".into(),
        }
    }
}

impl Paths {
    pub fn encoder(&self) -> PathBuf {
        self.model_dir.join("encoder.skbm")
    }

    pub fn cvae(&self, conditional: bool) -> PathBuf {
        self.model_dir.join(if conditional {
            "cvae.skbm"
        } else {
            "cvae_unconditional.skbm"
        })
    }
}

/// A dataset on disk instead of generated glyphs.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExternalSource {
    pub attributes_csv: PathBuf,
    pub train_dir: PathBuf,
    pub test_dir: PathBuf,
}

/// A test-time compression budget: a number, or `"theta"` for the trained
/// ratio of the loaded model.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum Budget {
    Ratio(f64),
    Named(String),
}

impl Budget {
    pub fn resolve(&self, theta: f64) -> Result<f64> {
        match self {
            Budget::Ratio(b) => Ok(*b),
            Budget::Named(s) if s == "theta" => Ok(theta),
            Budget::Named(s) => Err(Error::Invalid(format!(
                "unknown budget {s:?}, expected a number or \"theta\""
            ))),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct EvalConfig {
    pub snr_db: Vec<f64>,
    pub budgets: Vec<Budget>,
    pub seeds: Vec<u64>,
    pub channel_power: NoisePower,
    /// Number of output images written as SKBI files by `run`.
    pub dump_images: usize,
}

impl Default for EvalConfig {
    fn default() -> Self {
        EvalConfig {
            snr_db: vec![0.0, 2.0, 4.0, 6.0, 8.0, 10.0],
            budgets: vec![Budget::Ratio(0.001), Budget::Named("theta".into())],
            seeds: vec![1],
            channel_power: NoisePower::Empirical,
            dump_images: 16,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct AblationSpec {
    pub dims: Vec<usize>,
    pub seeds: Vec<u64>,
}

impl Default for AblationSpec {
    fn default() -> Self {
        AblationSpec {
            dims: vec![2, 3, 6, 12],
            seeds: vec![1, 2, 3, 4, 5],
        }
    }
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(default)]
pub struct RunConfig {
    pub paths: Paths,
    pub glyph: GlyphSpec,
    pub external: Option<ExternalSource>,
    pub encoder: EncoderConfig,
    pub cvae: CvaeConfig,
    pub train_seed: u64,
    pub eval: EvalConfig,
    pub ablation: AblationSpec,
}

impl RunConfig {
    pub fn load(path: &Path) -> Result<RunConfig> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        serde_json::from_str(&text).map_err(|e| Error::Parse {
            path: path.to_path_buf(),
            reason: e.to_string(),
        })
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("config serializes")
    }

    pub fn image_dims(&self) -> (usize, usize, usize) {
        (self.glyph.width, self.glyph.height, self.glyph.channels)
    }
}
