//! The shared semantic knowledge base: one attribute vector per class.
//!
//! Row `m` of the matrix is the attribute vector of class `m`. Transmitter
//! and receiver hold identical copies, so a class index alone identifies the
//! corrected semantics.

use std::fmt;
use std::fs;
use std::io::Write;
use std::path::Path;

use crate::diffcore::{dot, Matrix};
use crate::error::{Error, Result};

/// Largest class count addressable by the one-byte index on the wire.
pub const MAX_CLASSES: usize = 256;
/// Cosine similarities closer than this are treated as equal by `nearest`.
pub const TIE_TOLERANCE: f64 = 1e-12;

/// Class index `v`, always below the class count of the SKB it came from.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct ClassIndex(u8);

impl ClassIndex {
    pub fn new(v: usize, classes: usize) -> Result<Self> {
        if v >= classes || v >= MAX_CLASSES {
            return Err(Error::IndexOutOfRange { index: v, len: classes });
        }
        Ok(ClassIndex(v as u8))
    }

    pub fn from_byte(b: u8) -> Self {
        ClassIndex(b)
    }

    pub fn as_byte(self) -> u8 {
        self.0
    }

    pub fn get(self) -> usize {
        self.0 as usize
    }
}

impl fmt::Display for ClassIndex {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}", self.0)
    }
}

/// Cosine similarity `<a,b> / (|a| |b|)`.
pub fn cosine_similarity(a: &[f64], b: &[f64]) -> Result<f64> {
    if a.len() != b.len() {
        return Err(Error::shape(
            "cosine_similarity",
            format!("lengths {} and {}", a.len(), b.len()),
        ));
    }
    let na = dot(a, a).sqrt();
    let nb = dot(b, b).sqrt();
    if na == 0.0 || nb == 0.0 {
        return Err(Error::Degenerate("cosine similarity of a zero-norm vector".into()));
    }
    Ok((dot(a, b) / (na * nb)).clamp(-1.0, 1.0))
}

/// `M x d` matrix of class attribute vectors with entries in `[0, 1]`.
#[derive(Debug, Clone, PartialEq)]
pub struct AttributeMatrix {
    rows: Matrix,
    norms: Vec<f64>,
}

impl AttributeMatrix {
    /// Builds an SKB, rejecting out-of-range entries and zero rows.
    pub fn new<R: AsRef<[f64]>>(rows: &[R]) -> Result<Self> {
        Self::build(Matrix::from_rows(rows)?)
    }

    /// Builds an SKB after clamping entries into `[0, 1]`. Returns the
    /// number of clamped entries alongside.
    pub fn new_clamped<R: AsRef<[f64]>>(rows: &[R]) -> Result<(Self, usize)> {
        let mut m = Matrix::from_rows(rows)?;
        let mut clamped = 0;
        for v in m.as_mut_slice() {
            if !v.is_finite() {
                return Err(Error::NonFinite("attribute value".into()));
            }
            if *v < 0.0 || *v > 1.0 {
                *v = v.clamp(0.0, 1.0);
                clamped += 1;
            }
        }
        Ok((Self::build(m)?, clamped))
    }

    fn build(rows: Matrix) -> Result<Self> {
        let (m, d) = rows.shape();
        if m == 0 || d == 0 {
            return Err(Error::Invalid(format!("SKB must be non-empty, got {m}x{d}")));
        }
        if m > MAX_CLASSES {
            return Err(Error::Invalid(format!(
                "{m} classes do not fit an 8-bit index (max {MAX_CLASSES})"
            )));
        }
        if let Some(v) = rows.as_slice().iter().find(|v| !(0.0..=1.0).contains(*v)) {
            return Err(Error::Invalid(format!("attribute value {v} outside [0, 1]")));
        }
        let norms: Vec<f64> = (0..m).map(|r| dot(rows.row(r), rows.row(r)).sqrt()).collect();
        if let Some(r) = norms.iter().position(|&n| n == 0.0) {
            return Err(Error::Degenerate(format!("class {r} has an all-zero attribute vector")));
        }
        Ok(AttributeMatrix { rows, norms })
    }

    pub fn classes(&self) -> usize {
        self.rows.rows()
    }

    pub fn dims(&self) -> usize {
        self.rows.cols()
    }

    pub fn row(&self, m: usize) -> &[f64] {
        self.rows.row(m)
    }

    pub fn as_matrix(&self) -> &Matrix {
        &self.rows
    }

    /// Row `v`.
    pub fn lookup(&self, v: ClassIndex) -> Result<&[f64]> {
        if v.get() >= self.classes() {
            return Err(Error::IndexOutOfRange {
                index: v.get(),
                len: self.classes(),
            });
        }
        Ok(self.rows.row(v.get()))
    }

    pub fn index(&self, v: usize) -> Result<ClassIndex> {
        ClassIndex::new(v, self.classes())
    }

    /// The row most cosine-similar to `s`. Similarities within
    /// [`TIE_TOLERANCE`] of the best count as ties and go to the lowest index.
    pub fn nearest(&self, s: &[f64]) -> Result<(ClassIndex, &[f64])> {
        if s.len() != self.dims() {
            return Err(Error::shape(
                "nearest",
                format!("feature length {} vs {} attributes", s.len(), self.dims()),
            ));
        }
        let ns = dot(s, s).sqrt();
        if ns == 0.0 || !ns.is_finite() {
            return Err(Error::Degenerate("semantic feature is zero or non-finite".into()));
        }
        let sims: Vec<f64> = (0..self.classes())
            .map(|m| dot(s, self.rows.row(m)) / (ns * self.norms[m]))
            .collect();
        let top = sims.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let best = sims.iter().position(|&c| c >= top - TIE_TOLERANCE).unwrap_or(0);
        Ok((ClassIndex(best as u8), self.rows.row(best)))
    }

    /// SKB restricted to the leading `d` attributes.
    pub fn leading_attributes(&self, d: usize) -> Result<AttributeMatrix> {
        if d == 0 || d > self.dims() {
            return Err(Error::Invalid(format!("cannot keep {d} of {} attributes", self.dims())));
        }
        let rows: Vec<Vec<f64>> = (0..self.classes()).map(|m| self.row(m)[..d].to_vec()).collect();
        AttributeMatrix::new(&rows)
    }

    /// Reads a headerless CSV, one class per row. Out-of-range values are
    /// clamped; the clamp count is returned and logged.
    pub fn read_csv(path: &Path) -> Result<(AttributeMatrix, usize)> {
        let mut reader = csv::ReaderBuilder::new()
            .has_headers(false)
            .trim(csv::Trim::All)
            .from_path(path)
            .map_err(|e| Error::Parse {
                path: path.into(),
                reason: e.to_string(),
            })?;
        let mut rows = Vec::new();
        for (i, rec) in reader.records().enumerate() {
            let rec = rec.map_err(|e| Error::Parse {
                path: path.into(),
                reason: format!("row {i}: {e}"),
            })?;
            let row = rec
                .iter()
                .map(|f| f.parse::<f64>())
                .collect::<std::result::Result<Vec<_>, _>>()
                .map_err(|e| Error::Parse {
                    path: path.into(),
                    reason: format!("row {i}: {e}"),
                })?;
            rows.push(row);
        }
        let (skb, clamped) = AttributeMatrix::new_clamped(&rows).map_err(|e| Error::Parse {
            path: path.into(),
            reason: e.to_string(),
        })?;
        if clamped > 0 {
            log::warn!("{}: clamped {clamped} attribute values into [0, 1]", path.display());
        }
        Ok((skb, clamped))
    }

    pub fn write_csv(&self, path: &Path) -> Result<()> {
        let mut f = fs::File::create(path).map_err(|e| Error::io(path, e))?;
        let mut text = String::new();
        for m in 0..self.classes() {
            let line: Vec<String> = self.row(m).iter().map(|v| v.to_string()).collect();
            text.push_str(&line.join(","));
            text.push('\n');
        }
        f.write_all(text.as_bytes()).map_err(|e| Error::io(path, e))
    }
}
