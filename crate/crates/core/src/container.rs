//! The `DPSG` binary container shared by datasets, checkpoints and calibration
//! artifacts.
//!
//! Layout, all integers little-endian:
//!
//! ```text
//! "DPSG" | u32 header_len | header_len bytes of UTF-8 JSON | f32 payloads
//! ```
//!
//! The JSON header is `{"version":1,"dtype":"f32","arrays":[{"name":..,"shape":[..]}],"meta":{..}}`
//! and payloads are concatenated in header order.

use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use serde_json::Value;

use crate::error::{Error, Result};

pub const MAGIC: &[u8; 4] = b"DPSG";
pub const VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq)]
pub struct NamedArray {
    pub name: String,
    pub shape: Vec<usize>,
    pub data: Vec<f32>,
}

impl NamedArray {
    pub fn new(name: impl Into<String>, shape: Vec<usize>, data: Vec<f32>) -> Self {
        let name = name.into();
        debug_assert_eq!(shape.iter().product::<usize>(), data.len(), "array {name}");
        Self { name, shape, data }
    }

    pub fn from_f64(name: impl Into<String>, shape: Vec<usize>, data: &[f64]) -> Self {
        Self::new(name, shape, data.iter().map(|&v| v as f32).collect())
    }

    pub fn to_f64(&self) -> Vec<f64> {
        self.data.iter().map(|&v| f64::from(v)).collect()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Container {
    pub arrays: Vec<NamedArray>,
    pub meta: Value,
}

#[derive(Serialize, Deserialize)]
struct ArraySpec {
    name: String,
    shape: Vec<usize>,
}

#[derive(Serialize, Deserialize)]
struct Header {
    version: u32,
    dtype: String,
    arrays: Vec<ArraySpec>,
    meta: Value,
}

impl Container {
    pub fn new(meta: Value) -> Self {
        Self {
            arrays: Vec::new(),
            meta,
        }
    }

    pub fn push(&mut self, array: NamedArray) {
        self.arrays.push(array);
    }

    pub fn array(&self, name: &str) -> Option<&NamedArray> {
        self.arrays.iter().find(|a| a.name == name)
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let header = Header {
            version: VERSION,
            dtype: "f32".into(),
            arrays: self
                .arrays
                .iter()
                .map(|a| ArraySpec {
                    name: a.name.clone(),
                    shape: a.shape.clone(),
                })
                .collect(),
            meta: self.meta.clone(),
        };
        let json = serde_json::to_vec(&header)?;
        let payload: usize = self.arrays.iter().map(|a| a.data.len() * 4).sum();
        let mut out = Vec::with_capacity(8 + json.len() + payload);
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&(json.len() as u32).to_le_bytes());
        out.extend_from_slice(&json);
        for a in &self.arrays {
            for v in &a.data {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        Ok(out)
    }

    pub fn from_bytes(bytes: &[u8], path: &Path) -> Result<Self> {
        let path_buf = || PathBuf::from(path);
        if bytes.len() < 4 {
            return Err(Error::Truncated {
                path: path_buf(),
                detail: "shorter than magic".into(),
            });
        }
        if &bytes[..4] != MAGIC {
            return Err(Error::BadMagic { path: path_buf() });
        }
        if bytes.len() < 8 {
            return Err(Error::Truncated {
                path: path_buf(),
                detail: "missing header length".into(),
            });
        }
        let header_len = u32::from_le_bytes(bytes[4..8].try_into().expect("4 bytes")) as usize;
        let header_end = 8 + header_len;
        if bytes.len() < header_end {
            return Err(Error::Truncated {
                path: path_buf(),
                detail: format!("header declares {header_len} bytes, file has {}", bytes.len() - 8),
            });
        }
        let header: Header = serde_json::from_slice(&bytes[8..header_end]).map_err(|e| Error::Header {
            path: path_buf(),
            detail: e.to_string(),
        })?;
        if header.version != VERSION {
            return Err(Error::UnsupportedVersion(header.version));
        }
        if header.dtype != "f32" {
            return Err(Error::Header {
                path: path_buf(),
                detail: format!("unsupported dtype {}", header.dtype),
            });
        }
        let expected: usize = header
            .arrays
            .iter()
            .map(|a| a.shape.iter().product::<usize>() * 4)
            .sum();
        let actual = bytes.len() - header_end;
        if expected != actual {
            return Err(Error::PayloadSizeMismatch {
                path: path_buf(),
                expected,
                actual,
            });
        }
        let mut offset = header_end;
        let mut arrays = Vec::with_capacity(header.arrays.len());
        for spec in header.arrays {
            let n: usize = spec.shape.iter().product();
            let data = bytes[offset..offset + 4 * n]
                .chunks_exact(4)
                .map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes")))
                .collect();
            offset += 4 * n;
            arrays.push(NamedArray {
                name: spec.name,
                shape: spec.shape,
                data,
            });
        }
        Ok(Self {
            arrays,
            meta: header.meta,
        })
    }

    pub fn write(&self, path: &Path) -> Result<()> {
        let bytes = self.to_bytes()?;
        let mut f = fs::File::create(path)?;
        f.write_all(&bytes)?;
        Ok(())
    }

    pub fn read(path: &Path) -> Result<Self> {
        let bytes = fs::read(path)?;
        Self::from_bytes(&bytes, path)
    }
}
