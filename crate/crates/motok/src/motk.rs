//! `.motk` motion files: a fixed 32-byte little-endian header, `N·D`
//! 32-bit float frame values, and an optional length-prefixed UTF-8 caption.
//!
//! | offset | size | field                                   |
//! |--------|------|-----------------------------------------|
//! | 0      | 4    | magic `MOTK`                            |
//! | 4      | 2    | version (1)                             |
//! | 6      | 2    | flags: bit 0 category, bit 1 text        |
//! | 8      | 4    | N frames                                |
//! | 12     | 4    | D features                              |
//! | 16     | 4    | J joints                                |
//! | 20     | 4    | fps (f32)                               |
//! | 24     | 4    | category (i32, -1 when absent)          |
//! | 28     | 4    | reserved, zero                          |
//!
//! Frames are stored as f32, so values round-trip exactly when they are
//! representable in single precision.

use std::path::Path;

use motok_core::kcb::ContactState;
use motok_core::motion::MotionSequence;
use motok_core::Tensor;

use crate::error::{MotokError, Result};

pub const MAGIC: &[u8; 4] = b"MOTK";
pub const VERSION: u16 = 1;
pub const HEADER_LEN: usize = 32;
const FLAG_CATEGORY: u16 = 1;
const FLAG_TEXT: u16 = 2;

/// A decoded file: the sequence plus the joint count recorded in its header.
#[derive(Debug, Clone, PartialEq)]
pub struct MotkFile {
    pub seq: MotionSequence,
    pub joints: u32,
}

fn u16_at(b: &[u8], at: usize) -> u16 {
    u16::from_le_bytes([b[at], b[at + 1]])
}

fn u32_at(b: &[u8], at: usize) -> u32 {
    u32::from_le_bytes(b[at..at + 4].try_into().unwrap())
}

pub fn encode(seq: &MotionSequence, joints: u32) -> Result<Vec<u8>> {
    let (n, d) = (seq.len(), seq.dim());
    let narrow = |what: &str, v: usize| {
        u32::try_from(v).map_err(|_| MotokError::Usage(format!("{what} {v} does not fit the header")))
    };
    let mut flags = 0;
    if seq.category.is_some() {
        flags |= FLAG_CATEGORY;
    }
    if seq.text.is_some() {
        flags |= FLAG_TEXT;
    }
    let category = match seq.category {
        Some(c) => i32::try_from(c).map_err(|_| MotokError::Usage(format!("category {c} does not fit the header")))?,
        None => -1,
    };
    let mut out = Vec::with_capacity(HEADER_LEN + 4 * n * d);
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&VERSION.to_le_bytes());
    out.extend_from_slice(&flags.to_le_bytes());
    out.extend_from_slice(&narrow("frame count", n)?.to_le_bytes());
    out.extend_from_slice(&narrow("feature count", d)?.to_le_bytes());
    out.extend_from_slice(&joints.to_le_bytes());
    out.extend_from_slice(&(seq.fps as f32).to_le_bytes());
    out.extend_from_slice(&category.to_le_bytes());
    out.extend_from_slice(&[0; 4]);
    for &v in seq.frames.data() {
        out.extend_from_slice(&(v as f32).to_le_bytes());
    }
    if let Some(text) = &seq.text {
        out.extend_from_slice(&narrow("caption length", text.len())?.to_le_bytes());
        out.extend_from_slice(text.as_bytes());
    }
    Ok(out)
}

pub fn decode(bytes: &[u8]) -> Result<MotkFile> {
    let bad = |why: String| MotokError::MalformedHeader(why);
    if bytes.len() < HEADER_LEN {
        return Err(bad(format!("{} bytes, header needs {HEADER_LEN}", bytes.len())));
    }
    if &bytes[..4] != MAGIC {
        return Err(bad(format!("magic {:?}, expected MOTK", &bytes[..4])));
    }
    let version = u16_at(bytes, 4);
    if version != VERSION {
        return Err(bad(format!("unsupported version {version}")));
    }
    let flags = u16_at(bytes, 6);
    if flags & !(FLAG_CATEGORY | FLAG_TEXT) != 0 {
        return Err(bad(format!("unknown flags {flags:#x}")));
    }
    let n = u32_at(bytes, 8) as usize;
    let d = u32_at(bytes, 12) as usize;
    let joints = u32_at(bytes, 16);
    let fps = f32::from_le_bytes(bytes[20..24].try_into().unwrap()) as f64;
    let category = i32::from_le_bytes(bytes[24..28].try_into().unwrap());
    if n == 0 || d == 0 {
        return Err(bad(format!("empty shape {n}x{d}")));
    }
    if !(fps.is_finite() && fps > 0.0) {
        return Err(bad(format!("fps {fps}")));
    }
    let category = match (flags & FLAG_CATEGORY != 0, category) {
        (true, c) if c >= 0 => Some(c as u32),
        (false, -1) => None,
        (_, c) => return Err(bad(format!("category {c} inconsistent with flags {flags:#x}"))),
    };
    let values = n
        .checked_mul(d)
        .filter(|v| *v <= (usize::MAX - HEADER_LEN) / 4)
        .ok_or_else(|| bad(format!("shape {n}x{d} overflows")))?;
    let payload_end = HEADER_LEN + 4 * values;
    if bytes.len() < payload_end {
        return Err(MotokError::TruncatedPayload {
            expected: payload_end,
            found: bytes.len(),
        });
    }
    let data: Vec<f64> = bytes[HEADER_LEN..payload_end]
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes(c.try_into().unwrap()) as f64)
        .collect();
    let mut rest = &bytes[payload_end..];
    let text = if flags & FLAG_TEXT != 0 {
        if rest.len() < 4 {
            return Err(MotokError::TruncatedPayload {
                expected: payload_end + 4,
                found: bytes.len(),
            });
        }
        let len = u32_at(rest, 0) as usize;
        if rest.len() - 4 < len {
            return Err(MotokError::TruncatedPayload {
                expected: payload_end + 4 + len,
                found: bytes.len(),
            });
        }
        let s = std::str::from_utf8(&rest[4..4 + len]).map_err(|e| bad(format!("caption is not UTF-8: {e}")))?;
        rest = &rest[4 + len..];
        Some(s.to_string())
    } else {
        None
    };
    if !rest.is_empty() {
        return Err(bad(format!("{} trailing bytes", rest.len())));
    }
    let mut seq = MotionSequence::new(Tensor::new(&[n, d], data)?, fps)?;
    seq.category = category;
    seq.text = text;
    Ok(MotkFile { seq, joints })
}

pub fn save(path: &Path, seq: &MotionSequence, joints: u32) -> Result<()> {
    std::fs::write(path, encode(seq, joints)?).map_err(MotokError::io(path))
}

pub fn load(path: &Path) -> Result<MotkFile> {
    decode(&std::fs::read(path).map_err(MotokError::io(path))?)
}

/// Debug dump: a metadata line, then one object per frame with its values
/// and, when given, the per-foot contact labels of that frame.
pub fn to_jsonl(seq: &MotionSequence, contacts: Option<&ContactState>) -> Result<String> {
    let meta = serde_json::json!({
        "frames": seq.len(),
        "dim": seq.dim(),
        "fps": seq.fps,
        "category": seq.category,
        "text": seq.text,
    });
    let mut out = serde_json::to_string(&meta)?;
    out.push('\n');
    for t in 0..seq.len() {
        let mut line = serde_json::json!({ "t": t, "values": seq.frame(t) });
        if let Some(c) = contacts {
            line["contacts"] = serde_json::json!(c.labels.get(t));
        }
        out.push_str(&serde_json::to_string(&line)?);
        out.push('\n');
    }
    Ok(out)
}
