//! Wire frames.
//!
//! ```text
//! byte 0      'F' (0x46)
//! byte 1      mode: 0 = index only, 1 = index + latent
//! byte 2      class index v (u8)
//! mode 1 only:
//! bytes 3..7  u32 little-endian latent length l
//! then        l x f32 little-endian latent symbols
//! ```

use std::fs;
use std::path::Path;

use crate::error::{Error, Result};
use crate::skb::ClassIndex;

pub const FRAME_TAG: u8 = b'F';
pub const MODE_INDEX_ONLY: u8 = 0;
pub const MODE_INDEX_PLUS_LATENT: u8 = 1;
pub const INDEX_ONLY_LEN: usize = 3;
pub const LATENT_HEADER_LEN: usize = 7;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum FrameMode {
    IndexOnly,
    IndexPlusLatent,
}

#[derive(Debug, Clone, PartialEq)]
pub enum Frame {
    IndexOnly { v: ClassIndex },
    IndexPlusLatent { v: ClassIndex, payload: Vec<f32> },
}

impl Frame {
    pub fn index_plus_latent(v: ClassIndex, latent: &[f64]) -> Frame {
        Frame::IndexPlusLatent {
            v,
            payload: latent.iter().map(|&x| x as f32).collect(),
        }
    }

    pub fn mode(&self) -> FrameMode {
        match self {
            Frame::IndexOnly { .. } => FrameMode::IndexOnly,
            Frame::IndexPlusLatent { .. } => FrameMode::IndexPlusLatent,
        }
    }

    pub fn index(&self) -> ClassIndex {
        match self {
            Frame::IndexOnly { v } | Frame::IndexPlusLatent { v, .. } => *v,
        }
    }

    pub fn payload(&self) -> Option<&[f32]> {
        match self {
            Frame::IndexOnly { .. } => None,
            Frame::IndexPlusLatent { payload, .. } => Some(payload),
        }
    }

    pub fn wire_len(&self) -> usize {
        match self {
            Frame::IndexOnly { .. } => INDEX_ONLY_LEN,
            Frame::IndexPlusLatent { payload, .. } => LATENT_HEADER_LEN + 4 * payload.len(),
        }
    }

    pub fn encode(&self) -> Vec<u8> {
        let mut out = Vec::with_capacity(self.wire_len());
        out.push(FRAME_TAG);
        match self {
            Frame::IndexOnly { v } => {
                out.push(MODE_INDEX_ONLY);
                out.push(v.as_byte());
            }
            Frame::IndexPlusLatent { v, payload } => {
                out.push(MODE_INDEX_PLUS_LATENT);
                out.push(v.as_byte());
                out.extend_from_slice(&(payload.len() as u32).to_le_bytes());
                for x in payload {
                    out.extend_from_slice(&x.to_le_bytes());
                }
            }
        }
        out
    }

    /// Decodes one frame from the front of `buf`, returning it and the number
    /// of bytes consumed.
    pub fn decode_prefix(buf: &[u8]) -> Result<(Frame, usize)> {
        let err = |position: usize, reason: String| Error::Frame { position, reason };
        if buf.len() < INDEX_ONLY_LEN {
            return Err(err(
                buf.len(),
                format!("truncated header: need {INDEX_ONLY_LEN} bytes, have {}", buf.len()),
            ));
        }
        if buf[0] != FRAME_TAG {
            return Err(err(0, format!("bad tag 0x{:02x}, expected 0x46", buf[0])));
        }
        let v = ClassIndex::from_byte(buf[2]);
        match buf[1] {
            MODE_INDEX_ONLY => Ok((Frame::IndexOnly { v }, INDEX_ONLY_LEN)),
            MODE_INDEX_PLUS_LATENT => {
                if buf.len() < LATENT_HEADER_LEN {
                    return Err(err(buf.len(), "truncated latent length field".to_string()));
                }
                let l = u32::from_le_bytes(buf[3..7].try_into().unwrap()) as usize;
                let end = l
                    .checked_mul(4)
                    .and_then(|n| n.checked_add(LATENT_HEADER_LEN))
                    .ok_or_else(|| err(3, format!("latent length {l} overflows")))?;
                if buf.len() < end {
                    return Err(err(
                        buf.len(),
                        format!("truncated payload: header declares {l} symbols ({end} bytes total)"),
                    ));
                }
                let payload = buf[LATENT_HEADER_LEN..end]
                    .chunks_exact(4)
                    .map(|c| f32::from_le_bytes(c.try_into().unwrap()))
                    .collect();
                Ok((Frame::IndexPlusLatent { v, payload }, end))
            }
            other => Err(err(1, format!("unknown mode byte {other}"))),
        }
    }

    /// Decodes a buffer holding exactly one frame.
    pub fn decode(buf: &[u8]) -> Result<Frame> {
        let (frame, used) = Frame::decode_prefix(buf)?;
        if used != buf.len() {
            return Err(Error::Frame {
                position: used,
                reason: format!("length mismatch: {} trailing bytes", buf.len() - used),
            });
        }
        Ok(frame)
    }
}

/// Writes frames back to back.
pub fn write_frames(path: &Path, frames: &[Frame]) -> Result<()> {
    let bytes: Vec<u8> = frames.iter().flat_map(Frame::encode).collect();
    fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

pub fn read_frames(path: &Path) -> Result<Vec<Frame>> {
    let buf = fs::read(path).map_err(|e| Error::io(path, e))?;
    let mut pos = 0;
    let mut out = Vec::new();
    while pos < buf.len() {
        let (f, used) = Frame::decode_prefix(&buf[pos..]).map_err(|e| match e {
            Error::Frame { position, reason } => Error::Frame {
                position: pos + position,
                reason,
            },
            other => other,
        })?;
        out.push(f);
        pos += used;
    }
    Ok(out)
}
