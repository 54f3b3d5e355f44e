//! Parameter snapshot files.
//!
//! Layout, all integers little-endian:
//!
//! ```text
//! magic      4 bytes  "SKBM"
//! version    u16      currently 1
//! count      u32      number of arrays
//! repeated `count` times:
//!   name_len u16
//!   name     name_len bytes of UTF-8
//!   rank     u8       1 or 2
//!   dims     rank x u32
//!   payload  product(dims) x f64
//! ```

use std::fs;
use std::path::Path;

use super::matrix::Matrix;
use super::params::ParamSet;
use crate::error::{Error, Result};

pub const SNAPSHOT_MAGIC: &[u8; 4] = b"SKBM";
pub const SNAPSHOT_VERSION: u16 = 1;

pub fn encode_snapshot(params: &ParamSet) -> Vec<u8> {
    let mut out = Vec::new();
    out.extend_from_slice(SNAPSHOT_MAGIC);
    out.extend_from_slice(&SNAPSHOT_VERSION.to_le_bytes());
    out.extend_from_slice(&(params.len() as u32).to_le_bytes());
    for (name, m) in params.iter() {
        out.extend_from_slice(&(name.len() as u16).to_le_bytes());
        out.extend_from_slice(name.as_bytes());
        out.push(2);
        out.extend_from_slice(&(m.rows() as u32).to_le_bytes());
        out.extend_from_slice(&(m.cols() as u32).to_le_bytes());
        for v in m.as_slice() {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    out
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize, what: &str) -> Result<&'a [u8]> {
        if self.pos + n > self.buf.len() {
            return Err(Error::Snapshot(format!(
                "truncated at byte {} reading {what}",
                self.pos
            )));
        }
        let s = &self.buf[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u8(&mut self, what: &str) -> Result<u8> {
        Ok(self.take(1, what)?[0])
    }

    fn u16(&mut self, what: &str) -> Result<u16> {
        Ok(u16::from_le_bytes(self.take(2, what)?.try_into().unwrap()))
    }

    fn u32(&mut self, what: &str) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4, what)?.try_into().unwrap()))
    }
}

pub fn decode_snapshot(buf: &[u8]) -> Result<ParamSet> {
    let mut r = Reader { buf, pos: 0 };
    if r.take(4, "magic")? != SNAPSHOT_MAGIC {
        return Err(Error::Snapshot("bad magic, expected SKBM".into()));
    }
    let version = r.u16("version")?;
    if version != SNAPSHOT_VERSION {
        return Err(Error::Snapshot(format!("unsupported version {version}")));
    }
    let count = r.u32("array count")?;
    let mut params = ParamSet::new();
    for i in 0..count {
        let len = r.u16("name length")? as usize;
        let name = std::str::from_utf8(r.take(len, "name")?)
            .map_err(|_| Error::Snapshot(format!("array {i}: name is not UTF-8")))?
            .to_string();
        let rank = r.u8("rank")?;
        let (rows, cols) = match rank {
            1 => (1, r.u32("dim")? as usize),
            2 => (r.u32("dim")? as usize, r.u32("dim")? as usize),
            _ => return Err(Error::Snapshot(format!("array '{name}': unsupported rank {rank}"))),
        };
        let payload = r.take(rows * cols * 8, "payload")?;
        let data = payload
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
            .collect();
        params.insert(name, Matrix::from_vec(rows, cols, data)?);
    }
    if r.pos != buf.len() {
        return Err(Error::Snapshot(format!(
            "{} trailing bytes after last array",
            buf.len() - r.pos
        )));
    }
    Ok(params)
}

pub fn save_snapshot(params: &ParamSet, path: &Path) -> Result<()> {
    fs::write(path, encode_snapshot(params)).map_err(|e| Error::io(path, e))
}

pub fn load_snapshot(path: &Path) -> Result<ParamSet> {
    let buf = fs::read(path).map_err(|e| Error::io(path, e))?;
    decode_snapshot(&buf)
}
