//! Named-tensor container used by checkpoints, statistic dumps, and risk
//! dumps.
//!
//! Layout: 8 magic bytes, u32 LE format version, u32 LE header length, a
//! UTF-8 header, then raw little-endian f32 payloads in header order. The
//! header is line-oriented: `meta <key> <value>` lines first, then one
//! `tensor <name> f32 <d0> [<d1> ...]` line per tensor. Serialization is
//! byte-deterministic for equal contents.

use std::fs;
use std::path::Path;

use crate::error::UcanError;
use crate::Result;

pub const MAGIC: &[u8; 8] = b"UCANTENS";
pub const VERSION: u32 = 1;

/// One tensor with a stable name and explicit shape.
#[derive(Debug, Clone, PartialEq)]
pub struct NamedTensor {
    pub name: String,
    pub shape: Vec<usize>,
    pub data: Vec<f32>,
}

/// Ordered metadata plus ordered tensors.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct TensorFile {
    pub meta: Vec<(String, String)>,
    pub tensors: Vec<NamedTensor>,
}

impl TensorFile {
    pub fn new() -> Self {
        TensorFile::default()
    }

    /// Appends a metadata pair. Keys must be single tokens; values may
    /// contain spaces but not newlines.
    pub fn push_meta(&mut self, key: &str, value: impl ToString) -> Result<()> {
        let value = value.to_string();
        if key.is_empty() || key.chars().any(char::is_whitespace) {
            return Err(UcanError::Checkpoint(format!("bad meta key {key:?}")));
        }
        if value.contains('\n') || value.is_empty() {
            return Err(UcanError::Checkpoint(format!("bad meta value for {key}")));
        }
        self.meta.push((key.to_string(), value));
        Ok(())
    }

    /// Appends a tensor after validating name, shape, and element count.
    pub fn push(&mut self, name: &str, shape: Vec<usize>, data: Vec<f32>) -> Result<()> {
        if name.is_empty() || name.chars().any(char::is_whitespace) {
            return Err(UcanError::Checkpoint(format!("bad tensor name {name:?}")));
        }
        if self.tensors.iter().any(|t| t.name == name) {
            return Err(UcanError::Checkpoint(format!("duplicate tensor {name}")));
        }
        if shape.is_empty() {
            return Err(UcanError::Checkpoint(format!("tensor {name} has empty shape")));
        }
        let count: usize = shape.iter().product();
        if count != data.len() {
            return Err(UcanError::Checkpoint(format!(
                "tensor {name}: shape {shape:?} wants {count} elements, got {}",
                data.len()
            )));
        }
        self.tensors.push(NamedTensor { name: name.to_string(), shape, data });
        Ok(())
    }

    pub fn meta_value(&self, key: &str) -> Option<&str> {
        self.meta.iter().find(|(k, _)| k == key).map(|(_, v)| v.as_str())
    }

    /// Metadata value or a checkpoint error naming the missing key.
    pub fn require_meta(&self, key: &str) -> Result<&str> {
        self.meta_value(key)
            .ok_or_else(|| UcanError::Checkpoint(format!("missing meta key {key}")))
    }

    pub fn tensor(&self, name: &str) -> Option<&NamedTensor> {
        self.tensors.iter().find(|t| t.name == name)
    }

    /// Tensor by name or a checkpoint error naming what is absent.
    pub fn require(&self, name: &str) -> Result<&NamedTensor> {
        self.tensor(name)
            .ok_or_else(|| UcanError::Checkpoint(format!("missing tensor {name}")))
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut header = String::new();
        for (k, v) in &self.meta {
            header.push_str("meta ");
            header.push_str(k);
            header.push(' ');
            header.push_str(v);
            header.push('\n');
        }
        for t in &self.tensors {
            header.push_str("tensor ");
            header.push_str(&t.name);
            header.push_str(" f32");
            for d in &t.shape {
                header.push(' ');
                header.push_str(&d.to_string());
            }
            header.push('\n');
        }
        let header = header.into_bytes();
        let payload_len: usize = self.tensors.iter().map(|t| t.data.len() * 4).sum();
        let mut out = Vec::with_capacity(16 + header.len() + payload_len);
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&VERSION.to_le_bytes());
        out.extend_from_slice(&(header.len() as u32).to_le_bytes());
        out.extend_from_slice(&header);
        for t in &self.tensors {
            for v in &t.data {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        if bytes.len() < 16 {
            return Err(UcanError::Checkpoint("file shorter than fixed header".into()));
        }
        if &bytes[0..8] != MAGIC {
            return Err(UcanError::Checkpoint("bad magic bytes".into()));
        }
        let version = u32::from_le_bytes(bytes[8..12].try_into().unwrap());
        if version != VERSION {
            return Err(UcanError::Checkpoint(format!(
                "unsupported format version {version} (expected {VERSION})"
            )));
        }
        let header_len = u32::from_le_bytes(bytes[12..16].try_into().unwrap()) as usize;
        if bytes.len() < 16 + header_len {
            return Err(UcanError::Checkpoint("truncated header".into()));
        }
        let header = std::str::from_utf8(&bytes[16..16 + header_len])
            .map_err(|_| UcanError::Checkpoint("header is not UTF-8".into()))?;

        let mut file = TensorFile::new();
        let mut shapes: Vec<(String, Vec<usize>)> = Vec::new();
        for (idx, line) in header.lines().enumerate() {
            if line.is_empty() {
                continue;
            }
            let mut parts = line.split(' ');
            match parts.next() {
                Some("meta") => {
                    let key = parts.next().ok_or_else(|| bad_line(idx, line))?;
                    let rest: Vec<&str> = parts.collect();
                    if rest.is_empty() {
                        return Err(bad_line(idx, line));
                    }
                    file.meta.push((key.to_string(), rest.join(" ")));
                }
                Some("tensor") => {
                    let name = parts.next().ok_or_else(|| bad_line(idx, line))?;
                    match parts.next() {
                        Some("f32") => {}
                        _ => return Err(bad_line(idx, line)),
                    }
                    let mut shape = Vec::new();
                    for tok in parts {
                        let d: usize = tok.parse().map_err(|_| bad_line(idx, line))?;
                        shape.push(d);
                    }
                    if shape.is_empty() {
                        return Err(bad_line(idx, line));
                    }
                    shapes.push((name.to_string(), shape));
                }
                _ => return Err(bad_line(idx, line)),
            }
        }

        let mut offset = 16 + header_len;
        for (name, shape) in shapes {
            let count: usize = shape.iter().product();
            let end = offset + count * 4;
            if bytes.len() < end {
                return Err(UcanError::Checkpoint(format!("truncated payload for tensor {name}")));
            }
            let mut data = Vec::with_capacity(count);
            for chunk in bytes[offset..end].chunks_exact(4) {
                data.push(f32::from_le_bytes(chunk.try_into().unwrap()));
            }
            file.tensors.push(NamedTensor { name, shape, data });
            offset = end;
        }
        if offset != bytes.len() {
            return Err(UcanError::Checkpoint(format!(
                "{} trailing bytes after declared payload",
                bytes.len() - offset
            )));
        }
        Ok(file)
    }

    pub fn write(&self, path: &Path) -> Result<()> {
        fs::write(path, self.to_bytes())?;
        Ok(())
    }

    pub fn read(path: &Path) -> Result<Self> {
        let bytes = fs::read(path)?;
        TensorFile::from_bytes(&bytes)
    }
}

fn bad_line(idx: usize, line: &str) -> UcanError {
    UcanError::Checkpoint(format!("malformed header line {}: {line:?}", idx + 1))
}
