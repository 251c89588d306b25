//! On-disk formats.
//!
//! Feature file (`.pcpl`), little-endian:
//!
//! ```text
//! offset  size  field
//! 0       4     magic "PCPL"
//! 4       1     version = 1
//! 5       1     dtype = 1 (f32)
//! 6       2     reserved = 0
//! 8       4     n (rows, u32)
//! 12      4     d (columns, u32)
//! 16      4*n*d row-major f32 values
//! ```
//!
//! Checkpoint file, little-endian:
//!
//! ```text
//! "PCPM", version u8 = 1, layer count u32,
//! per layer: rows u32, cols u32, activation tag u8,
//! per layer: weights then biases as f64,
//! CRC32 (IEEE) of every preceding byte as u32
//! ```
//!
//! The last layer in a checkpoint is the classifier head.
//!
//! Labels are one base-10 integer per line; proportions are a JSON array;
//! configs are JSON objects with [`AdaptConfig`] keys.

use std::fs;
use std::path::Path;

use serde::de::DeserializeOwned;

use crate::adapt::AdaptConfig;
use crate::error::{Error, Result};
use crate::model::{Activation, Classifier, Dense};
use crate::types::{FeatureMatrix, ProportionSpec};

pub const FEATURE_MAGIC: &[u8; 4] = b"PCPL";
pub const CHECKPOINT_MAGIC: &[u8; 4] = b"PCPM";
pub const FORMAT_VERSION: u8 = 1;
pub const DTYPE_F32: u8 = 1;
pub const FEATURE_HEADER_LEN: usize = 16;

/// Bounds-checked little-endian reader over an in-memory file.
struct Cursor<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Cursor<'a> {
    fn take(&mut self, len: usize, what: &str) -> Result<&'a [u8]> {
        let end = self
            .pos
            .checked_add(len)
            .filter(|&e| e <= self.buf.len())
            .ok_or_else(|| {
                Error::format(
                    self.pos as u64,
                    format!(
                        "truncated {what}: need {len} bytes, {} remain",
                        self.buf.len() - self.pos
                    ),
                )
            })?;
        let out = &self.buf[self.pos..end];
        self.pos = end;
        Ok(out)
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

    fn remaining(&self) -> usize {
        self.buf.len() - self.pos
    }
}

fn check_magic(buf: &[u8], magic: &[u8; 4]) -> Result<()> {
    if buf.len() < 4 || &buf[..4] != magic {
        return Err(Error::format(
            0,
            format!("bad magic, expected {:?}", std::str::from_utf8(magic).unwrap()),
        ));
    }
    Ok(())
}

pub fn encode_features(m: &FeatureMatrix) -> Result<Vec<u8>> {
    let n = u32::try_from(m.n()).map_err(|_| Error::validation("too many rows for u32"))?;
    let d = u32::try_from(m.d()).map_err(|_| Error::validation("too many columns for u32"))?;
    let mut out = Vec::with_capacity(FEATURE_HEADER_LEN + 4 * m.data().len());
    out.extend_from_slice(FEATURE_MAGIC);
    out.push(FORMAT_VERSION);
    out.push(DTYPE_F32);
    out.extend_from_slice(&0u16.to_le_bytes());
    out.extend_from_slice(&n.to_le_bytes());
    out.extend_from_slice(&d.to_le_bytes());
    for (i, &v) in m.data().iter().enumerate() {
        let narrow = v as f32;
        if !narrow.is_finite() {
            return Err(Error::validation(format!(
                "value {v} at row {}, column {} does not fit in f32",
                i / m.d(),
                i % m.d()
            )));
        }
        out.extend_from_slice(&narrow.to_le_bytes());
    }
    Ok(out)
}

pub fn decode_features(buf: &[u8]) -> Result<FeatureMatrix> {
    check_magic(buf, FEATURE_MAGIC)?;
    let mut cur = Cursor { buf, pos: 4 };
    let version = cur.u8("header")?;
    if version != FORMAT_VERSION {
        return Err(Error::format(4, format!("unsupported version {version}")));
    }
    let dtype = cur.u8("header")?;
    if dtype != DTYPE_F32 {
        return Err(Error::format(5, format!("unsupported dtype {dtype}")));
    }
    let reserved = cur.u16("header")?;
    if reserved != 0 {
        return Err(Error::format(6, format!("reserved field is {reserved}, expected 0")));
    }
    let n = cur.u32("header")? as usize;
    let d = cur.u32("header")? as usize;
    if n == 0 || d == 0 {
        return Err(Error::format(8, format!("empty matrix {n}x{d}")));
    }
    let payload = n
        .checked_mul(d)
        .and_then(|v| v.checked_mul(4))
        .ok_or_else(|| Error::format(8, "n*d overflows"))?;
    if cur.remaining() != payload {
        let what = if cur.remaining() < payload {
            "truncated payload"
        } else {
            "trailing bytes after payload"
        };
        return Err(Error::format(
            FEATURE_HEADER_LEN as u64,
            format!("{what}: header declares {payload} bytes, found {}", cur.remaining()),
        ));
    }
    let bytes = cur.take(payload, "payload")?;
    let mut data = Vec::with_capacity(n * d);
    for (i, chunk) in bytes.chunks_exact(4).enumerate() {
        let v = f32::from_le_bytes(chunk.try_into().unwrap());
        if !v.is_finite() {
            return Err(Error::format(
                (FEATURE_HEADER_LEN + 4 * i) as u64,
                format!("non-finite value {v}"),
            ));
        }
        data.push(v as f64);
    }
    FeatureMatrix::new(n, d, data)
}

pub fn write_features(m: &FeatureMatrix, path: impl AsRef<Path>) -> Result<()> {
    fs::write(path, encode_features(m)?)?;
    Ok(())
}

pub fn read_features(path: impl AsRef<Path>) -> Result<FeatureMatrix> {
    decode_features(&fs::read(path)?)
}

pub fn parse_labels(text: &str) -> Result<Vec<usize>> {
    let body = text.strip_suffix('\n').unwrap_or(text);
    if body.is_empty() {
        return Ok(Vec::new());
    }
    body.split('\n')
        .enumerate()
        .map(|(i, line)| {
            let line = line.strip_suffix('\r').unwrap_or(line).trim();
            line.parse::<usize>().map_err(|e| {
                Error::parse(format!("line {}", i + 1), format!("{line:?}: {e}"))
            })
        })
        .collect()
}

pub fn format_labels(labels: &[usize]) -> String {
    labels.iter().map(|l| format!("{l}\n")).collect()
}

pub fn read_labels(path: impl AsRef<Path>) -> Result<Vec<usize>> {
    parse_labels(&fs::read_to_string(path)?)
}

pub fn write_labels(labels: &[usize], path: impl AsRef<Path>) -> Result<()> {
    fs::write(path, format_labels(labels))?;
    Ok(())
}

fn json_error(what: &str, e: serde_json::Error) -> Error {
    Error::parse(
        format!("{what}, line {} column {}", e.line(), e.column()),
        e.to_string(),
    )
}

fn parse_json<T: DeserializeOwned>(what: &str, text: &str) -> Result<T> {
    serde_json::from_str(text).map_err(|e| json_error(what, e))
}

pub fn parse_proportions(text: &str) -> Result<ProportionSpec> {
    let raw: Vec<f64> = parse_json("proportions", text)?;
    ProportionSpec::new(raw)
}

pub fn read_proportions(path: impl AsRef<Path>) -> Result<ProportionSpec> {
    parse_proportions(&fs::read_to_string(path)?)
}

pub fn write_proportions(p: &ProportionSpec, path: impl AsRef<Path>) -> Result<()> {
    fs::write(path, serde_json::to_string(p).expect("f64 vector serializes"))?;
    Ok(())
}

/// Missing keys take [`AdaptConfig::default`]; unknown keys are rejected.
pub fn parse_config(text: &str) -> Result<AdaptConfig> {
    let cfg: AdaptConfig = parse_json("config", text)?;
    cfg.validate()?;
    Ok(cfg)
}

pub fn read_config(path: impl AsRef<Path>) -> Result<AdaptConfig> {
    parse_config(&fs::read_to_string(path)?)
}

pub fn encode_checkpoint(model: &Classifier) -> Vec<u8> {
    let layers: Vec<&Dense> = model
        .extractor()
        .iter()
        .chain(std::iter::once(model.head()))
        .collect();
    let mut out = Vec::new();
    out.extend_from_slice(CHECKPOINT_MAGIC);
    out.push(FORMAT_VERSION);
    out.extend_from_slice(&(layers.len() as u32).to_le_bytes());
    for l in &layers {
        out.extend_from_slice(&(l.rows as u32).to_le_bytes());
        out.extend_from_slice(&(l.cols as u32).to_le_bytes());
        out.push(l.activation.tag());
    }
    for l in &layers {
        for v in l.weight.iter().chain(&l.bias) {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    let crc = crc32fast::hash(&out);
    out.extend_from_slice(&crc.to_le_bytes());
    out
}

pub fn decode_checkpoint(buf: &[u8]) -> Result<Classifier> {
    check_magic(buf, CHECKPOINT_MAGIC)?;
    if buf.len() < 4 + 1 + 4 + 4 {
        return Err(Error::format(4, "truncated checkpoint header"));
    }
    let body_len = buf.len() - 4;
    let stored = u32::from_le_bytes(buf[body_len..].try_into().unwrap());
    let actual = crc32fast::hash(&buf[..body_len]);
    if stored != actual {
        return Err(Error::format(
            body_len as u64,
            format!("checksum mismatch: stored {stored:08x}, computed {actual:08x}"),
        ));
    }

    let mut cur = Cursor {
        buf: &buf[..body_len],
        pos: 4,
    };
    let version = cur.u8("header")?;
    if version != FORMAT_VERSION {
        return Err(Error::format(4, format!("unsupported version {version}")));
    }
    let count = cur.u32("header")? as usize;
    // each layer descriptor takes 9 bytes; reject counts the file cannot hold
    if count == 0 || count > cur.remaining() / 9 {
        return Err(Error::format(5, format!("implausible layer count {count}")));
    }
    let mut shapes = Vec::with_capacity(count);
    for _ in 0..count {
        let at = cur.pos as u64;
        let rows = cur.u32("layer descriptor")? as usize;
        let cols = cur.u32("layer descriptor")? as usize;
        let tag = cur.u8("layer descriptor")?;
        let act = Activation::from_tag(tag)
            .ok_or_else(|| Error::format(at + 8, format!("unknown activation tag {tag}")))?;
        shapes.push((rows, cols, act));
    }
    let needed = shapes
        .iter()
        .try_fold(0usize, |acc, &(r, c, _)| {
            r.checked_mul(c)?.checked_add(r)?.checked_mul(8)?.checked_add(acc)
        })
        .ok_or_else(|| Error::format(cur.pos as u64, "parameter size overflows"))?;
    if needed != cur.remaining() {
        return Err(Error::format(
            cur.pos as u64,
            format!(
                "parameter block should be {needed} bytes, found {}",
                cur.remaining()
            ),
        ));
    }
    let mut read_f64s = |len: usize| -> Result<Vec<f64>> {
        let bytes = cur.take(len * 8, "parameters")?;
        Ok(bytes
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
            .collect())
    };
    let mut layers = Vec::with_capacity(count);
    for &(rows, cols, activation) in &shapes {
        let weight = read_f64s(rows * cols)?;
        let bias = read_f64s(rows)?;
        layers.push(Dense {
            rows,
            cols,
            weight,
            bias,
            activation,
        });
    }
    let head = layers.pop().expect("count checked non-zero");
    Classifier::from_layers(layers, head, 0)
}

pub fn write_checkpoint(model: &Classifier, path: impl AsRef<Path>) -> Result<()> {
    fs::write(path, encode_checkpoint(model))?;
    Ok(())
}

pub fn read_checkpoint(path: impl AsRef<Path>) -> Result<Classifier> {
    decode_checkpoint(&fs::read(path)?)
}
