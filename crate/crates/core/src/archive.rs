//! Versioned tensor archive.
//!
//! Layout: the 8-byte magic `PCRNARCH`, a little-endian `u32` format version,
//! a little-endian `u64` header length, a UTF-8 JSON header, then every
//! tensor's values as little-endian `f64` in header order. The header holds
//! `kind`, free-form `metadata` and a tensor index of `name`, `shape` and
//! `offset` (in values). Output bytes are a pure function of the contents.

use std::path::Path;

use ndarray::{ArrayD, IxDyn};
use serde::{Deserialize, Serialize};
use serde_json::Value;

use crate::error::{ReconError, Result};

pub const MAGIC: &[u8; 8] = b"PCRNARCH";
pub const FORMAT_VERSION: u32 = 1;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
struct TensorEntry {
    name: String,
    shape: Vec<usize>,
    offset: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
struct Header {
    kind: String,
    metadata: Value,
    tensors: Vec<TensorEntry>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Archive {
    pub kind: String,
    pub metadata: Value,
    names: Vec<String>,
    shapes: Vec<Vec<usize>>,
    values: Vec<Vec<f64>>,
}

impl Archive {
    pub fn new(kind: impl Into<String>, metadata: Value) -> Self {
        Self {
            kind: kind.into(),
            metadata,
            names: Vec::new(),
            shapes: Vec::new(),
            values: Vec::new(),
        }
    }

    pub fn push(&mut self, name: impl Into<String>, shape: &[usize], values: Vec<f64>) -> Result<()> {
        let name = name.into();
        let expected: usize = shape.iter().product();
        if expected != values.len() {
            return Err(ReconError::shape("archive tensor", &[expected], &[values.len()]));
        }
        if self.names.contains(&name) {
            return Err(ReconError::Format(format!("duplicate tensor {name}")));
        }
        self.names.push(name);
        self.shapes.push(shape.to_vec());
        self.values.push(values);
        Ok(())
    }

    pub fn push_array<D: ndarray::Dimension>(&mut self, name: impl Into<String>, a: &ndarray::Array<f64, D>) -> Result<()> {
        self.push(name, a.shape(), a.iter().copied().collect())
    }

    pub fn names(&self) -> &[String] {
        &self.names
    }

    pub fn get(&self, name: &str) -> Option<(&[usize], &[f64])> {
        let i = self.names.iter().position(|n| n == name)?;
        Some((&self.shapes[i], &self.values[i]))
    }

    pub fn require(&self, name: &str) -> Result<(&[usize], &[f64])> {
        self.get(name).ok_or_else(|| ReconError::Missing(format!("tensor {name}")))
    }

    pub fn array(&self, name: &str) -> Result<ArrayD<f64>> {
        let (shape, values) = self.require(name)?;
        ArrayD::from_shape_vec(IxDyn(shape), values.to_vec()).map_err(|e| ReconError::Format(e.to_string()))
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let mut offset = 0;
        let tensors = self
            .names
            .iter()
            .zip(&self.shapes)
            .zip(&self.values)
            .map(|((name, shape), values)| {
                let entry = TensorEntry {
                    name: name.clone(),
                    shape: shape.clone(),
                    offset,
                };
                offset += values.len();
                entry
            })
            .collect();
        let header = serde_json::to_vec(&Header {
            kind: self.kind.clone(),
            metadata: self.metadata.clone(),
            tensors,
        })?;
        let mut out = Vec::with_capacity(20 + header.len() + offset * 8);
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&FORMAT_VERSION.to_le_bytes());
        out.extend_from_slice(&(header.len() as u64).to_le_bytes());
        out.extend_from_slice(&header);
        for v in self.values.iter().flatten() {
            out.extend_from_slice(&v.to_le_bytes());
        }
        Ok(out)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let bad = |msg: &str| ReconError::Format(format!("archive: {msg}"));
        if bytes.len() < 20 || &bytes[..8] != MAGIC {
            return Err(bad("missing magic"));
        }
        let version = u32::from_le_bytes(bytes[8..12].try_into().expect("4 bytes"));
        if version != FORMAT_VERSION {
            return Err(bad(&format!("unsupported version {version}")));
        }
        let header_len = u64::from_le_bytes(bytes[12..20].try_into().expect("8 bytes")) as usize;
        let body = 20usize.checked_add(header_len).filter(|&e| e <= bytes.len()).ok_or_else(|| bad("truncated header"))?;
        let header: Header = serde_json::from_slice(&bytes[20..body])?;
        let data = &bytes[body..];
        if data.len() % 8 != 0 {
            return Err(bad("data length is not a multiple of 8"));
        }
        let total = data.len() / 8;
        let mut archive = Archive::new(header.kind, header.metadata);
        for t in header.tensors {
            let len: usize = t.shape.iter().product();
            if t.offset + len > total {
                return Err(bad(&format!("tensor {} out of bounds", t.name)));
            }
            let values = data[t.offset * 8..(t.offset + len) * 8]
                .chunks_exact(8)
                .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
                .collect();
            archive.push(t.name, &t.shape, values)?;
        }
        Ok(archive)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_bytes()?)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_bytes(&std::fs::read(path)?)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::Array3;
    use serde_json::json;

    #[test]
    fn roundtrip_is_exact_and_deterministic() {
        let mut a = Archive::new("test", json!({"seed": 3, "name": "x"}));
        let t = Array3::from_shape_fn((2, 3, 4), |(i, j, k)| (i as f64 - 0.5) * 1e-300 + j as f64 / 3.0 + k as f64);
        a.push_array("t", &t).unwrap();
        a.push("empty", &[0], vec![]).unwrap();
        a.push("nan", &[1], vec![f64::NAN]).unwrap();
        let bytes = a.to_bytes().unwrap();
        assert_eq!(bytes, a.clone().to_bytes().unwrap());
        let b = Archive::from_bytes(&bytes).unwrap();
        assert_eq!(b.array("t").unwrap().into_dimensionality::<ndarray::Ix3>().unwrap(), t);
        assert_eq!(b.metadata, a.metadata);
        assert!(b.get("nan").unwrap().1[0].is_nan());
        assert_eq!(b.names(), a.names());
    }

    #[test]
    fn rejects_malformed_input() {
        let mut a = Archive::new("k", Value::Null);
        assert!(a.push("x", &[2, 2], vec![1.0; 3]).is_err());
        a.push("x", &[1], vec![1.0]).unwrap();
        assert!(a.push("x", &[1], vec![1.0]).is_err());
        let bytes = a.to_bytes().unwrap();
        assert!(Archive::from_bytes(&bytes[..bytes.len() - 1]).is_err());
        assert!(Archive::from_bytes(b"NOTANARCHIVE________").is_err());
        let mut wrong_version = bytes.clone();
        wrong_version[8] = 9;
        assert!(Archive::from_bytes(&wrong_version).is_err());
        assert!(matches!(a.require("y"), Err(ReconError::Missing(_))));
    }
}
