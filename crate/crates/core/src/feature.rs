//! Sampled 2-D feature arrays and their on-disk format.
//!
//! A feature file is laid out as
//!
//! ```text
//! b"FTF1" | header_len: u32 LE | header: UTF-8 JSON | payload: f32 LE, row-major
//! ```
//!
//! The header holds `dtype` (always `"f32"`), `shape` (`[rows, cols]`),
//! `sample_rate_hz`, `unit` and `source`. Unknown header keys are preserved
//! on a read/write round trip.

use std::fs;
use std::io::Write;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::Tensor;

pub const MAGIC: [u8; 4] = *b"FTF1";

/// A `rows x cols` array sampled along its columns (channels or features by
/// time).
#[derive(Debug, Clone, PartialEq)]
pub struct FeatureTensor {
    rows: usize,
    cols: usize,
    data: Vec<f32>,
    pub sample_rate_hz: f64,
    pub unit: String,
    pub source: String,
    pub extra: serde_json::Map<String, serde_json::Value>,
}

#[derive(Debug, Serialize, Deserialize)]
struct Header {
    dtype: String,
    shape: Vec<usize>,
    sample_rate_hz: f64,
    #[serde(default)]
    unit: String,
    #[serde(default)]
    source: String,
    #[serde(flatten)]
    extra: serde_json::Map<String, serde_json::Value>,
}

impl FeatureTensor {
    pub fn new(rows: usize, cols: usize, data: Vec<f32>, sample_rate_hz: f64) -> Result<Self> {
        if rows * cols != data.len() {
            return Err(Error::invalid(format!(
                "feature tensor {rows}x{cols} needs {} values, got {}",
                rows * cols,
                data.len()
            )));
        }
        if !(sample_rate_hz > 0.0 && sample_rate_hz.is_finite()) {
            return Err(Error::invalid(format!("invalid sample rate {sample_rate_hz}")));
        }
        Ok(Self {
            rows,
            cols,
            data,
            sample_rate_hz,
            unit: String::new(),
            source: String::new(),
            extra: Default::default(),
        })
    }

    pub fn zeros(rows: usize, cols: usize, sample_rate_hz: f64) -> Result<Self> {
        Self::new(rows, cols, vec![0.0; rows * cols], sample_rate_hz)
    }

    pub fn with_unit(mut self, unit: impl Into<String>) -> Self {
        self.unit = unit.into();
        self
    }

    pub fn with_source(mut self, source: impl Into<String>) -> Self {
        self.source = source.into();
        self
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn data(&self) -> &[f32] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f32] {
        &mut self.data
    }

    pub fn row(&self, r: usize) -> &[f32] {
        &self.data[r * self.cols..(r + 1) * self.cols]
    }

    pub fn row_mut(&mut self, r: usize) -> &mut [f32] {
        &mut self.data[r * self.cols..(r + 1) * self.cols]
    }

    pub fn at(&self, r: usize, c: usize) -> f32 {
        self.data[r * self.cols + c]
    }

    pub fn duration_s(&self) -> f64 {
        self.cols as f64 / self.sample_rate_hz
    }

    /// Copy with the same metadata and new values of a possibly different shape.
    pub fn with_data(&self, rows: usize, cols: usize, data: Vec<f32>) -> Result<Self> {
        let mut out = Self::new(rows, cols, data, self.sample_rate_hz)?;
        out.unit.clone_from(&self.unit);
        out.source.clone_from(&self.source);
        out.extra.clone_from(&self.extra);
        Ok(out)
    }

    /// Columns `start..start + len` as a dense tensor.
    pub fn window(&self, start: usize, len: usize) -> Result<Tensor> {
        if start + len > self.cols {
            return Err(Error::invalid(format!(
                "window {start}..{} exceeds {} samples",
                start + len,
                self.cols
            )));
        }
        let mut data = Vec::with_capacity(self.rows * len);
        for r in 0..self.rows {
            data.extend_from_slice(&self.row(r)[start..start + len]);
        }
        Tensor::new([self.rows, len], data)
    }

    pub fn to_tensor(&self) -> Tensor {
        Tensor::new([self.rows, self.cols], self.data.clone()).expect("consistent shape")
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let header = Header {
            dtype: "f32".into(),
            shape: vec![self.rows, self.cols],
            sample_rate_hz: self.sample_rate_hz,
            unit: self.unit.clone(),
            source: self.source.clone(),
            extra: self.extra.clone(),
        };
        let header = serde_json::to_vec(&header).expect("header serializes");
        let mut out = Vec::with_capacity(8 + header.len() + 4 * self.data.len());
        out.extend_from_slice(&MAGIC);
        out.extend_from_slice(&(header.len() as u32).to_le_bytes());
        out.extend_from_slice(&header);
        for v in &self.data {
            out.extend_from_slice(&v.to_le_bytes());
        }
        out
    }

    /// Parses the bytes of a feature file; `path` is only used in errors.
    pub fn from_bytes(bytes: &[u8], path: &Path) -> Result<Self> {
        let malformed = |reason: String| Error::MalformedHeader {
            path: path.to_path_buf(),
            reason,
        };
        if bytes.len() < 4 {
            return Err(malformed(format!("file is only {} bytes", bytes.len())));
        }
        let magic: [u8; 4] = bytes[..4].try_into().unwrap();
        if magic != MAGIC {
            return Err(Error::BadMagic {
                path: path.to_path_buf(),
                found: magic,
            });
        }
        let len_bytes: [u8; 4] = bytes
            .get(4..8)
            .ok_or_else(|| malformed("missing header length".into()))?
            .try_into()
            .unwrap();
        let header_len = u32::from_le_bytes(len_bytes) as usize;
        let header_bytes = bytes
            .get(8..8 + header_len)
            .ok_or_else(|| malformed(format!("header length {header_len} exceeds file size")))?;
        let header: Header =
            serde_json::from_slice(header_bytes).map_err(|e| malformed(e.to_string()))?;
        if header.dtype != "f32" {
            return Err(malformed(format!("unsupported dtype {:?}", header.dtype)));
        }
        let [rows, cols] = header.shape[..] else {
            return Err(malformed(format!("shape {:?} is not 2-D", header.shape)));
        };
        if !(header.sample_rate_hz > 0.0 && header.sample_rate_hz.is_finite()) {
            return Err(malformed(format!("sample_rate_hz {}", header.sample_rate_hz)));
        }
        let payload = &bytes[8 + header_len..];
        let expected = 4 * rows * cols;
        if payload.len() < expected {
            return Err(Error::Truncated {
                path: path.to_path_buf(),
                expected,
                found: payload.len(),
            });
        }
        if payload.len() > expected {
            return Err(malformed(format!(
                "{} trailing bytes after payload",
                payload.len() - expected
            )));
        }
        let data = payload
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().unwrap()))
            .collect();
        Ok(Self {
            rows,
            cols,
            data,
            sample_rate_hz: header.sample_rate_hz,
            unit: header.unit,
            source: header.source,
            extra: header.extra,
        })
    }
}

pub fn read_feature_file(path: impl AsRef<Path>) -> Result<FeatureTensor> {
    let path = path.as_ref();
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    FeatureTensor::from_bytes(&bytes, path)
}

pub fn write_feature_file(path: impl AsRef<Path>, tensor: &FeatureTensor) -> Result<()> {
    let path = path.as_ref();
    if let Some(parent) = path.parent() {
        fs::create_dir_all(parent).map_err(|e| Error::io(parent, e))?;
    }
    let mut f = fs::File::create(path).map_err(|e| Error::io(path, e))?;
    f.write_all(&tensor.to_bytes()).map_err(|e| Error::io(path, e))?;
    Ok(())
}
