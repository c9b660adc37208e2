//! Binary tensor containers.
//!
//! Layout: an 8-byte magic string, the header length as a little-endian
//! `u64`, a JSON header, then the tensors as little-endian `f64`, row-major
//! and concatenated in table order. The header's `tensors` entry lists
//! `{name, shape, offset}` with byte offsets into the payload.
//!
//! Headers are JSON objects with sorted keys and shortest round-trip float
//! formatting, so decoding then encoding reproduces a file byte for byte.

use std::path::Path;

use anyhow::Context;
use kkl_core::{KklError, Tensor};
use serde::{Deserialize, Serialize};
use serde_json::{Map, Value};

pub const CHECKPOINT_MAGIC: &[u8; 8] = b"KKLCKPT1";
pub const DATA_MAGIC: &[u8; 8] = b"KKLDATA1";

const PREFIX: usize = 16;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
struct Entry {
    name: String,
    shape: Vec<usize>,
    offset: usize,
}

/// A decoded container: the header without its tensor table, plus the
/// named tensors in file order.
#[derive(Clone, Debug, PartialEq)]
pub struct Container {
    pub header: Map<String, Value>,
    pub tensors: Vec<(String, Tensor)>,
}

fn format_error(offset: usize, message: impl Into<String>) -> KklError {
    KklError::Format {
        offset,
        message: message.into(),
    }
}

impl Container {
    pub fn new(header: Map<String, Value>) -> Self {
        Self {
            header,
            tensors: Vec::new(),
        }
    }

    pub fn push(&mut self, name: impl Into<String>, t: Tensor) {
        self.tensors.push((name.into(), t));
    }

    pub fn tensor(&self, name: &str) -> Result<&Tensor, KklError> {
        self.tensors
            .iter()
            .find(|(n, _)| n == name)
            .map(|(_, t)| t)
            .ok_or_else(|| format_error(0, format!("tensor `{name}` not in container")))
    }

    /// Typed view of a header field.
    pub fn field<T: serde::de::DeserializeOwned>(&self, key: &str) -> Result<T, KklError> {
        let v = self
            .header
            .get(key)
            .ok_or_else(|| format_error(PREFIX, format!("header lacks `{key}`")))?;
        T::deserialize(v).map_err(|e| format_error(PREFIX, format!("header field `{key}`: {e}")))
    }

    pub fn encode(&self, magic: &[u8; 8]) -> Vec<u8> {
        let mut offset = 0;
        let mut table = Vec::with_capacity(self.tensors.len());
        for (name, t) in &self.tensors {
            table.push(Entry {
                name: name.clone(),
                shape: t.shape().to_vec(),
                offset,
            });
            offset += t.numel() * 8;
        }
        let mut header = self.header.clone();
        header.insert("tensors".into(), serde_json::to_value(table).expect("table serializes"));
        let json = serde_json::to_vec(&Value::Object(header)).expect("header serializes");
        let mut out = Vec::with_capacity(PREFIX + json.len() + offset);
        out.extend_from_slice(magic);
        out.extend_from_slice(&(json.len() as u64).to_le_bytes());
        out.extend_from_slice(&json);
        for (_, t) in &self.tensors {
            for v in t.data() {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        out
    }

    /// Parses `bytes`, reporting the byte offset of the first
    /// inconsistency.
    pub fn decode(magic: &[u8; 8], bytes: &[u8]) -> Result<Self, KklError> {
        if bytes.len() < PREFIX {
            return Err(format_error(bytes.len(), "file shorter than its fixed prefix"));
        }
        if &bytes[..8] != magic {
            return Err(format_error(
                0,
                format!("bad magic, expected {}", String::from_utf8_lossy(magic)),
            ));
        }
        let hlen = u64::from_le_bytes(bytes[8..16].try_into().expect("8 bytes")) as usize;
        let payload_start = PREFIX
            .checked_add(hlen)
            .filter(|&e| e <= bytes.len())
            .ok_or_else(|| format_error(8, format!("header length {hlen} exceeds the file")))?;
        let header: Value = serde_json::from_slice(&bytes[PREFIX..payload_start]).map_err(|e| {
            let at = PREFIX + line_col_offset(&bytes[PREFIX..payload_start], e.line(), e.column());
            format_error(at, format!("header is not valid JSON: {e}"))
        })?;
        let Value::Object(mut header) = header else {
            return Err(format_error(PREFIX, "header is not a JSON object"));
        };
        let table: Vec<Entry> = header
            .remove("tensors")
            .ok_or_else(|| format_error(PREFIX, "header lacks the tensor table"))
            .and_then(|v| {
                serde_json::from_value(v).map_err(|e| format_error(PREFIX, format!("bad tensor table: {e}")))
            })?;
        let payload = &bytes[payload_start..];
        let mut expected = 0;
        let mut tensors = Vec::with_capacity(table.len());
        for e in table {
            if e.offset != expected {
                return Err(format_error(
                    payload_start + expected,
                    format!("tensor `{}` declared at payload offset {}, expected {expected}", e.name, e.offset),
                ));
            }
            let n: usize = e.shape.iter().product();
            let end = expected + n * 8;
            if end > payload.len() {
                return Err(format_error(
                    payload_start + payload.len(),
                    format!("payload ends inside tensor `{}` ({} of {} bytes)", e.name, payload.len() - expected, n * 8),
                ));
            }
            let data = payload[expected..end]
                .chunks_exact(8)
                .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
                .collect();
            let t = Tensor::new(e.shape.clone(), data).map_err(|err| format_error(payload_start + expected, err.to_string()))?;
            tensors.push((e.name, t));
            expected = end;
        }
        if expected != payload.len() {
            return Err(format_error(
                payload_start + expected,
                format!("{} trailing bytes after the last tensor", payload.len() - expected),
            ));
        }
        Ok(Self { header, tensors })
    }

    pub fn save(&self, magic: &[u8; 8], path: &Path) -> anyhow::Result<()> {
        if let Some(dir) = path.parent() {
            std::fs::create_dir_all(dir).with_context(|| format!("creating {}", dir.display()))?;
        }
        std::fs::write(path, self.encode(magic)).with_context(|| format!("writing {}", path.display()))
    }

    pub fn load(magic: &[u8; 8], path: &Path) -> anyhow::Result<Self> {
        let bytes = std::fs::read(path).with_context(|| format!("reading {}", path.display()))?;
        Self::decode(magic, &bytes).with_context(|| format!("loading {}", path.display()))
    }
}

fn line_col_offset(text: &[u8], line: usize, column: usize) -> usize {
    let mut start = 0;
    for _ in 1..line {
        match text[start..].iter().position(|&b| b == b'\n') {
            Some(p) => start += p + 1,
            None => break,
        }
    }
    (start + column.saturating_sub(1)).min(text.len())
}
