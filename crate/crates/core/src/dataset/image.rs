use std::fs;
use std::path::Path;

use crate::error::{Error, Result};

/// Magic prefix of raw image dumps.
pub const SKBI_MAGIC: &[u8; 4] = b"SKBI";

/// `W x H x C` image with pixels in `[0, 1]`, stored row-major as
/// `(y, x, c)` with the channel fastest.
#[derive(Debug, Clone, PartialEq)]
pub struct ImageTensor {
    width: usize,
    height: usize,
    channels: usize,
    pixels: Vec<f64>,
}

impl ImageTensor {
    pub fn new(width: usize, height: usize, channels: usize, pixels: Vec<f64>) -> Result<Self> {
        if width * height * channels == 0 {
            return Err(Error::Invalid(format!(
                "image dimensions {width}x{height}x{channels} must be positive"
            )));
        }
        if pixels.len() != width * height * channels {
            return Err(Error::shape(
                "image",
                format!(
                    "{width}x{height}x{channels} needs {} pixels, got {}",
                    width * height * channels,
                    pixels.len()
                ),
            ));
        }
        if let Some(p) = pixels.iter().find(|p| !(0.0..=1.0).contains(*p)) {
            return Err(Error::Invalid(format!("pixel value {p} outside [0, 1]")));
        }
        Ok(ImageTensor {
            width,
            height,
            channels,
            pixels,
        })
    }

    /// Clamps every pixel into `[0, 1]` (NaN becomes 0).
    pub fn from_clamped(width: usize, height: usize, channels: usize, mut pixels: Vec<f64>) -> Result<Self> {
        for p in &mut pixels {
            *p = if p.is_nan() { 0.0 } else { p.clamp(0.0, 1.0) };
        }
        Self::new(width, height, channels, pixels)
    }

    pub fn filled(width: usize, height: usize, channels: usize, value: f64) -> Result<Self> {
        Self::new(width, height, channels, vec![value; width * height * channels])
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn channels(&self) -> usize {
        self.channels
    }

    pub fn dims(&self) -> (usize, usize, usize) {
        (self.width, self.height, self.channels)
    }

    pub fn len(&self) -> usize {
        self.pixels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.pixels.is_empty()
    }

    pub fn pixels(&self) -> &[f64] {
        &self.pixels
    }

    #[inline]
    pub fn at(&self, x: usize, y: usize, c: usize) -> f64 {
        self.pixels[(y * self.width + x) * self.channels + c]
    }

    /// Bilinear resampling to `width x height` (pixel-center aligned).
    pub fn resize_bilinear(&self, width: usize, height: usize) -> Result<ImageTensor> {
        if (width, height) == (self.width, self.height) {
            return Ok(self.clone());
        }
        let c = self.channels;
        let mut out = Vec::with_capacity(width * height * c);
        let sx = self.width as f64 / width as f64;
        let sy = self.height as f64 / height as f64;
        for y in 0..height {
            let fy = ((y as f64 + 0.5) * sy - 0.5).clamp(0.0, (self.height - 1) as f64);
            let y0 = fy.floor() as usize;
            let y1 = (y0 + 1).min(self.height - 1);
            let wy = fy - y0 as f64;
            for x in 0..width {
                let fx = ((x as f64 + 0.5) * sx - 0.5).clamp(0.0, (self.width - 1) as f64);
                let x0 = fx.floor() as usize;
                let x1 = (x0 + 1).min(self.width - 1);
                let wx = fx - x0 as f64;
                for ch in 0..c {
                    let top = self.at(x0, y0, ch) * (1.0 - wx) + self.at(x1, y0, ch) * wx;
                    let bot = self.at(x0, y1, ch) * (1.0 - wx) + self.at(x1, y1, ch) * wx;
                    out.push(top * (1.0 - wy) + bot * wy);
                }
            }
        }
        ImageTensor::from_clamped(width, height, c, out)
    }

    /// `SKBI` dump: magic, `u32` W, H, C, then little-endian `f32` pixels.
    pub fn to_skbi(&self) -> Vec<u8> {
        let mut out = Vec::with_capacity(16 + 4 * self.pixels.len());
        out.extend_from_slice(SKBI_MAGIC);
        for d in [self.width, self.height, self.channels] {
            out.extend_from_slice(&(d as u32).to_le_bytes());
        }
        for &p in &self.pixels {
            out.extend_from_slice(&(p as f32).to_le_bytes());
        }
        out
    }

    pub fn from_skbi(buf: &[u8]) -> Result<ImageTensor> {
        if buf.len() < 16 || &buf[..4] != SKBI_MAGIC {
            return Err(Error::Invalid("not an SKBI image (bad magic or short header)".into()));
        }
        let dim = |i: usize| u32::from_le_bytes(buf[4 + 4 * i..8 + 4 * i].try_into().unwrap()) as usize;
        let (w, h, c) = (dim(0), dim(1), dim(2));
        let expected = w
            .checked_mul(h)
            .and_then(|v| v.checked_mul(c))
            .and_then(|v| v.checked_mul(4))
            .ok_or_else(|| Error::Invalid("SKBI dimensions overflow".into()))?;
        if buf.len() - 16 != expected {
            return Err(Error::Invalid(format!(
                "SKBI payload is {} bytes, header implies {expected}",
                buf.len() - 16
            )));
        }
        let pixels = buf[16..]
            .chunks_exact(4)
            .map(|b| f32::from_le_bytes(b.try_into().unwrap()) as f64)
            .collect();
        ImageTensor::new(w, h, c, pixels)
    }

    pub fn write_skbi(&self, path: &Path) -> Result<()> {
        fs::write(path, self.to_skbi()).map_err(|e| Error::io(path, e))
    }

    pub fn read_skbi(path: &Path) -> Result<ImageTensor> {
        let buf = fs::read(path).map_err(|e| Error::io(path, e))?;
        ImageTensor::from_skbi(&buf)
    }
}

/// Pixel-wise mean of a non-empty set of equally sized images.
pub fn mean_image<'a>(images: impl IntoIterator<Item = &'a ImageTensor>) -> Result<ImageTensor> {
    let mut iter = images.into_iter();
    let first = iter
        .next()
        .ok_or_else(|| Error::Invalid("mean of an empty image set".into()))?;
    let mut acc = first.pixels.clone();
    let mut n = 1usize;
    for img in iter {
        if img.dims() != first.dims() {
            return Err(Error::shape(
                "mean_image",
                format!("{:?} vs {:?}", img.dims(), first.dims()),
            ));
        }
        for (a, p) in acc.iter_mut().zip(&img.pixels) {
            *a += p;
        }
        n += 1;
    }
    acc.iter_mut().for_each(|a| *a /= n as f64);
    ImageTensor::from_clamped(first.width, first.height, first.channels, acc)
}
