//! Acoustic-feature file ingestion and persistence.
//!
//! The native format is a small binary container ("HFM1"): magic bytes,
//! little-endian u32 frame count and width, f32 frame hop in milliseconds,
//! then the frames as row-major f32, and optionally a u32 class label
//! prefixed by the sentinel `0xFFFF_FFFE`. Values are widened to f64 in
//! memory. A CSV fallback (header row `T,d,hop_ms`, then one row per frame)
//! covers hand-written inputs.

use crate::error::{HierformError, Result};
use crate::numerics::Matrix;
use std::fs;
use std::path::Path;

pub const FEATURE_MAGIC: &[u8; 4] = b"HFM1";
const LABEL_SENTINEL: u32 = 0xFFFF_FFFE;

/// A T-by-d matrix of per-frame acoustic features with frame-hop metadata.
#[derive(Debug, Clone, PartialEq)]
pub struct FeatureSequence {
    pub values: Matrix,
    pub hop_ms: f64,
    pub label: Option<u32>,
}

impl FeatureSequence {
    pub fn new(values: Matrix, hop_ms: f64, label: Option<u32>) -> Result<Self> {
        if values.rows() == 0 || values.cols() == 0 {
            return Err(HierformError::Validation(
                "feature matrix must be non-empty".into(),
            ));
        }
        if hop_ms <= 0.0 {
            return Err(HierformError::Validation(format!(
                "hop must be positive, got {hop_ms}"
            )));
        }
        if !values.is_finite() {
            return Err(HierformError::NonFinite {
                op: "feature_sequence",
            });
        }
        Ok(FeatureSequence {
            values,
            hop_ms,
            label,
        })
    }

    pub fn frames(&self) -> usize {
        self.values.rows()
    }

    pub fn width(&self) -> usize {
        self.values.cols()
    }
}

/// Serializes to the binary container. Values are narrowed to f32 on disk.
pub fn save_features(path: &Path, seq: &FeatureSequence) -> Result<()> {
    let mut bytes = Vec::with_capacity(16 + seq.values.len() * 4);
    bytes.extend_from_slice(FEATURE_MAGIC);
    bytes.extend_from_slice(&(seq.frames() as u32).to_le_bytes());
    bytes.extend_from_slice(&(seq.width() as u32).to_le_bytes());
    bytes.extend_from_slice(&(seq.hop_ms as f32).to_le_bytes());
    for v in seq.values.data() {
        bytes.extend_from_slice(&(*v as f32).to_le_bytes());
    }
    if let Some(label) = seq.label {
        bytes.extend_from_slice(&LABEL_SENTINEL.to_le_bytes());
        bytes.extend_from_slice(&label.to_le_bytes());
    }
    fs::write(path, bytes)?;
    Ok(())
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize, what: &str) -> Result<&'a [u8]> {
        if self.pos + n > self.bytes.len() {
            return Err(HierformError::Truncated(format!(
                "expected {n} more bytes for {what} at offset {}",
                self.pos
            )));
        }
        let out = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        Ok(out)
    }

    fn u32(&mut self, what: &str) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4, what)?.try_into().unwrap()))
    }

    fn f32(&mut self, what: &str) -> Result<f32> {
        Ok(f32::from_le_bytes(self.take(4, what)?.try_into().unwrap()))
    }

    fn remaining(&self) -> usize {
        self.bytes.len() - self.pos
    }
}

/// Parses a feature file: the binary container when the magic matches, the
/// CSV fallback when the file starts with printable text, otherwise a
/// bad-magic error.
pub fn load_features(path: &Path) -> Result<FeatureSequence> {
    let bytes = fs::read(path)?;
    if bytes.len() >= 4 && &bytes[..4] == FEATURE_MAGIC {
        return parse_binary(&bytes);
    }
    // a CSV file starts with an ASCII digit of the frame count
    if bytes.first().is_some_and(|b| b.is_ascii_digit()) {
        let text = std::str::from_utf8(&bytes)
            .map_err(|_| HierformError::BadMagic("neither HFM1 nor text".into()))?;
        return parse_csv(text);
    }
    Err(HierformError::BadMagic(format!(
        "file does not start with {:?} or a CSV header",
        std::str::from_utf8(FEATURE_MAGIC).unwrap()
    )))
}

fn parse_binary(bytes: &[u8]) -> Result<FeatureSequence> {
    let mut r = Reader { bytes, pos: 4 };
    let t = r.u32("frame count")? as usize;
    let d = r.u32("feature width")? as usize;
    let hop = r.f32("hop")? as f64;
    if t == 0 || d == 0 {
        return Err(HierformError::Format(format!("degenerate shape {t}x{d}")));
    }
    let mut data = Vec::with_capacity(t * d);
    for i in 0..t * d {
        let v = r.f32(&format!("value {i}"))? as f64;
        if !v.is_finite() {
            return Err(HierformError::NonFinite {
                op: "load_features",
            });
        }
        data.push(v);
    }
    let label = match r.remaining() {
        0 => None,
        8 => {
            let sentinel = r.u32("label sentinel")?;
            if sentinel != LABEL_SENTINEL {
                return Err(HierformError::Format(format!(
                    "unexpected trailer {sentinel:#x}, expected label sentinel"
                )));
            }
            Some(r.u32("label")?)
        }
        n => {
            return Err(HierformError::Truncated(format!(
                "{n} trailing bytes, expected none or an 8-byte label trailer"
            )))
        }
    };
    FeatureSequence::new(Matrix::new(t, d, data)?, hop, label)
}

fn parse_csv(text: &str) -> Result<FeatureSequence> {
    let mut lines = text.lines().filter(|l| !l.trim().is_empty());
    let header = lines
        .next()
        .ok_or_else(|| HierformError::Format("empty CSV".into()))?;
    let head: Vec<&str> = header.split(',').map(str::trim).collect();
    if head.len() != 3 {
        return Err(HierformError::Format(format!(
            "CSV header must be T,d,hop_ms, got {header:?}"
        )));
    }
    let t: usize = head[0]
        .parse()
        .map_err(|_| HierformError::Format(format!("bad frame count {:?}", head[0])))?;
    let d: usize = head[1]
        .parse()
        .map_err(|_| HierformError::Format(format!("bad width {:?}", head[1])))?;
    let hop: f64 = head[2]
        .parse()
        .map_err(|_| HierformError::Format(format!("bad hop {:?}", head[2])))?;
    let mut data = Vec::with_capacity(t * d);
    for (i, line) in lines.enumerate() {
        if i >= t {
            return Err(HierformError::Format(format!("more than {t} data rows")));
        }
        for field in line.split(',') {
            let v: f64 = field
                .trim()
                .parse()
                .map_err(|_| HierformError::Format(format!("bad value {field:?} on row {i}")))?;
            if !v.is_finite() {
                return Err(HierformError::NonFinite {
                    op: "load_features",
                });
            }
            data.push(v);
        }
        if data.len() != (i + 1) * d {
            return Err(HierformError::Format(format!(
                "row {i} has {} values, expected {d}",
                data.len() - i * d
            )));
        }
    }
    if data.len() != t * d {
        return Err(HierformError::Truncated(format!(
            "CSV has {} values, header declared {}",
            data.len(),
            t * d
        )));
    }
    FeatureSequence::new(Matrix::new(t, d, data)?, hop, None)
}

/// Pads (with zero frames, marked invalid) or truncates (at the tail) to
/// exactly `max_t` frames. The mask marks the real frames.
pub fn pad_or_truncate(
    seq: &FeatureSequence,
    max_t: usize,
) -> Result<(FeatureSequence, Vec<bool>)> {
    if max_t == 0 {
        return Err(HierformError::InvalidParam {
            name: "max_t",
            reason: "target length must be at least 1".into(),
        });
    }
    let t = seq.frames();
    let d = seq.width();
    let keep = t.min(max_t);
    let mut data = Vec::with_capacity(max_t * d);
    data.extend_from_slice(&seq.values.data()[..keep * d]);
    data.resize(max_t * d, 0.0);
    let mut valid = vec![true; keep];
    valid.resize(max_t, false);
    Ok((
        FeatureSequence {
            values: Matrix::new(max_t, d, data)?,
            hop_ms: seq.hop_ms,
            label: seq.label,
        },
        valid,
    ))
}
