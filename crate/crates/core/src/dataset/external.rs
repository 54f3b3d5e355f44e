//! Reading and writing attribute-labelled image folders.
//!
//! A folder holds image files plus a `labels.csv` of `filename,class` rows
//! (header optional). Images are either `SKBI` dumps or any PNG/JPEG; all are
//! bilinearly resized to the configured size and scaled to `[0, 1]`.

use std::fs;
use std::path::{Path, PathBuf};

use super::glyph::GlyphDataset;
use super::image::ImageTensor;
use super::LabeledSample;
use crate::error::{Error, Result};
use crate::skb::AttributeMatrix;

pub const LABELS_FILE: &str = "labels.csv";

#[derive(Debug, Clone)]
pub struct ExternalData {
    pub skb: AttributeMatrix,
    pub samples: Vec<LabeledSample>,
    /// Files listed in the labels that could not be decoded.
    pub skipped: usize,
    /// Attribute values clamped into `[0, 1]` while reading the SKB.
    pub clamped: usize,
}

fn read_labels(path: &Path) -> Result<Vec<(String, usize)>> {
    let mut reader = csv::ReaderBuilder::new()
        .has_headers(false)
        .trim(csv::Trim::All)
        .from_path(path)
        .map_err(|e| Error::Parse {
            path: path.into(),
            reason: e.to_string(),
        })?;
    let mut out = Vec::new();
    for (i, rec) in reader.records().enumerate() {
        let rec = rec.map_err(|e| Error::Parse {
            path: path.into(),
            reason: format!("row {i}: {e}"),
        })?;
        if rec.len() != 2 {
            return Err(Error::Parse {
                path: path.into(),
                reason: format!("row {i}: expected 'filename,class', got {} fields", rec.len()),
            });
        }
        match rec[1].parse::<usize>() {
            Ok(c) => out.push((rec[0].to_string(), c)),
            Err(_) if i == 0 => continue,
            Err(e) => {
                return Err(Error::Parse {
                    path: path.into(),
                    reason: format!("row {i}: class '{}': {e}", &rec[1]),
                })
            }
        }
    }
    Ok(out)
}

fn decode_image(path: &Path, dims: (usize, usize, usize)) -> Result<ImageTensor> {
    let (w, h, c) = dims;
    let img = if path.extension().is_some_and(|e| e == "skbi") {
        ImageTensor::read_skbi(path)?
    } else {
        let dynimg = image::open(path).map_err(|e| Error::Parse {
            path: path.into(),
            reason: e.to_string(),
        })?;
        let (iw, ih) = (dynimg.width() as usize, dynimg.height() as usize);
        let px: Vec<f64> = match c {
            1 => dynimg.to_luma32f().into_raw().into_iter().map(f64::from).collect(),
            3 => dynimg.to_rgb32f().into_raw().into_iter().map(f64::from).collect(),
            _ => return Err(Error::Invalid(format!("unsupported channel count {c}"))),
        };
        ImageTensor::from_clamped(iw, ih, c, px)?
    };
    if img.channels() != c {
        return Err(Error::Invalid(format!(
            "{}: {} channels, expected {c}",
            path.display(),
            img.channels()
        )));
    }
    img.resize_bilinear(w, h)
}

/// Loads an SKB CSV and a labelled image folder.
///
/// An empty or missing folder yields no samples. Labels naming a class the
/// SKB does not have are rejected; files that fail to decode are skipped and
/// counted.
pub fn load_external(attr_csv: &Path, image_dir: &Path, dims: (usize, usize, usize)) -> Result<ExternalData> {
    let (skb, clamped) = AttributeMatrix::read_csv(attr_csv)?;
    let labels_path = image_dir.join(LABELS_FILE);
    if !labels_path.exists() {
        let has_files = fs::read_dir(image_dir).map(|mut d| d.next().is_some()).unwrap_or(false);
        if has_files {
            return Err(Error::Parse {
                path: labels_path,
                reason: "image folder has files but no labels".into(),
            });
        }
        return Ok(ExternalData {
            skb,
            samples: Vec::new(),
            skipped: 0,
            clamped,
        });
    }
    let labels = read_labels(&labels_path)?;
    let mut samples = Vec::with_capacity(labels.len());
    let mut skipped = 0;
    for (name, class) in labels {
        let class = skb.index(class).map_err(|_| Error::Parse {
            path: labels_path.clone(),
            reason: format!(
                "'{name}' labelled class {class}, but the SKB has {} rows",
                skb.classes()
            ),
        })?;
        let path: PathBuf = image_dir.join(&name);
        match decode_image(&path, dims) {
            Ok(image) => samples.push(LabeledSample {
                image,
                class,
                attributes: skb.lookup(class)?.to_vec(),
            }),
            Err(e) => {
                log::warn!("skipping {}: {e}", path.display());
                skipped += 1;
            }
        }
    }
    if skipped > 0 {
        log::warn!("{}: skipped {skipped} undecodable images", image_dir.display());
    }
    Ok(ExternalData {
        skb,
        samples,
        skipped,
        clamped,
    })
}

fn write_split(dir: &Path, samples: &[LabeledSample]) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let mut labels = String::from("filename,class\n");
    for (i, s) in samples.iter().enumerate() {
        let name = format!("{i:06}.skbi");
        s.image.write_skbi(&dir.join(&name))?;
        labels.push_str(&format!("{name},{}\n", s.class));
    }
    let p = dir.join(LABELS_FILE);
    fs::write(&p, labels).map_err(|e| Error::io(p, e))
}

/// Writes `skb.csv`, `train/` and `test/` (each with `labels.csv`).
pub fn export_glyphs(ds: &GlyphDataset, dir: &Path) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    ds.skb.write_csv(&dir.join("skb.csv"))?;
    write_split(&dir.join("train"), &ds.train)?;
    write_split(&dir.join("test"), &ds.test)
}

/// Reads back a folder written by [`export_glyphs`].
pub fn load_glyph_export(dir: &Path, dims: (usize, usize, usize)) -> Result<GlyphDataset> {
    let csv = dir.join("skb.csv");
    let train = load_external(&csv, &dir.join("train"), dims)?;
    let test = load_external(&csv, &dir.join("test"), dims)?;
    if train.skipped + test.skipped > 0 {
        return Err(Error::Invalid(format!(
            "{}: {} images failed to decode",
            dir.display(),
            train.skipped + test.skipped
        )));
    }
    Ok(GlyphDataset {
        skb: train.skb,
        train: train.samples,
        test: test.samples,
    })
}
