//! Flat parameter storage with a manifest, and its binary checkpoint form.

use std::io::{self, Read, Write};

use ndarray::{ArrayView1, ArrayView2, ArrayViewMut1, ArrayViewMut2};
use rand::Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ParamSpec {
    pub name: String,
    pub shape: Vec<usize>,
    pub offset: usize,
}

impl ParamSpec {
    pub fn len(&self) -> usize {
        self.shape.iter().product()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn range(&self) -> std::ops::Range<usize> {
        self.offset..self.offset + self.len()
    }

    /// Two-dimensional arrays are weight matrices; rows are output units.
    pub fn is_matrix(&self) -> bool {
        self.shape.len() == 2
    }
}

/// All parameters of a network in one contiguous `f64` buffer.
#[derive(Clone, Debug, PartialEq)]
pub struct Params {
    pub manifest: Vec<ParamSpec>,
    pub values: Vec<f64>,
}

impl Params {
    /// Lays out arrays in the given order; values start at zero.
    pub fn new(arrays: &[(&str, &[usize])]) -> Self {
        let mut manifest = Vec::with_capacity(arrays.len());
        let mut offset = 0;
        for (name, shape) in arrays {
            let spec = ParamSpec {
                name: name.to_string(),
                shape: shape.to_vec(),
                offset,
            };
            offset += spec.len();
            manifest.push(spec);
        }
        Self {
            manifest,
            values: vec![0.0; offset],
        }
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn zeros_like(&self) -> Vec<f64> {
        vec![0.0; self.values.len()]
    }

    pub fn spec(&self, name: &str) -> Option<&ParamSpec> {
        self.manifest.iter().find(|s| s.name == name)
    }

    pub fn is_finite(&self) -> bool {
        self.values.iter().all(|v| v.is_finite())
    }

    /// Weights uniform in `±1/sqrt(fan_in)` (PyTorch's `Linear` default),
    /// biases zero. Uniform biases of the same scale dominate the small
    /// activations of a fresh network and map every input to nearly the
    /// same projection.
    pub fn init_linear<R: Rng>(&mut self, weight: usize, bias: usize, rng: &mut R) {
        let fan_in = self.manifest[weight].shape[1];
        let bound = 1.0 / (fan_in as f64).sqrt();
        let r = self.manifest[weight].range();
        for v in &mut self.values[r] {
            *v = rng.random_range(-bound..bound);
        }
        let r = self.manifest[bias].range();
        self.values[r].fill(0.0);
    }

    pub fn matrix(&self, idx: usize) -> ArrayView2<'_, f64> {
        matrix_of(&self.manifest[idx], &self.values)
    }

    pub fn vector(&self, idx: usize) -> ArrayView1<'_, f64> {
        vector_of(&self.manifest[idx], &self.values)
    }
}

pub fn matrix_of<'a>(spec: &ParamSpec, values: &'a [f64]) -> ArrayView2<'a, f64> {
    ArrayView2::from_shape((spec.shape[0], spec.shape[1]), &values[spec.range()])
        .expect("manifest shape matches buffer")
}

pub fn vector_of<'a>(spec: &ParamSpec, values: &'a [f64]) -> ArrayView1<'a, f64> {
    ArrayView1::from(&values[spec.range()])
}

pub fn matrix_of_mut<'a>(spec: &ParamSpec, values: &'a mut [f64]) -> ArrayViewMut2<'a, f64> {
    ArrayViewMut2::from_shape((spec.shape[0], spec.shape[1]), &mut values[spec.range()])
        .expect("manifest shape matches buffer")
}

pub fn vector_of_mut<'a>(spec: &ParamSpec, values: &'a mut [f64]) -> ArrayViewMut1<'a, f64> {
    ArrayViewMut1::from(&mut values[spec.range()])
}

const MAGIC: &[u8; 8] = b"EVOAUGCK";
const VERSION: u32 = 1;

#[derive(Debug, Error)]
pub enum CheckpointError {
    #[error("not a checkpoint file")]
    BadMagic,
    #[error("unsupported checkpoint version {0}")]
    BadVersion(u32),
    #[error("corrupt checkpoint: {0}")]
    Corrupt(String),
    #[error(transparent)]
    Io(#[from] io::Error),
}

/// Writes magic, version, the manifest as JSON and the values as
/// little-endian `f64`.
pub fn write_checkpoint(params: &Params, mut w: impl Write) -> Result<(), CheckpointError> {
    let manifest = serde_json::to_vec(&params.manifest).expect("manifest serializes");
    w.write_all(MAGIC)?;
    w.write_all(&VERSION.to_le_bytes())?;
    w.write_all(&(manifest.len() as u64).to_le_bytes())?;
    w.write_all(&manifest)?;
    w.write_all(&(params.values.len() as u64).to_le_bytes())?;
    let mut buf = Vec::with_capacity(params.values.len() * 8);
    for v in &params.values {
        buf.extend_from_slice(&v.to_le_bytes());
    }
    w.write_all(&buf)?;
    Ok(())
}

fn read_u64(r: &mut impl Read) -> Result<u64, CheckpointError> {
    let mut b = [0u8; 8];
    r.read_exact(&mut b)?;
    Ok(u64::from_le_bytes(b))
}

pub fn read_checkpoint(mut r: impl Read) -> Result<Params, CheckpointError> {
    let mut magic = [0u8; 8];
    r.read_exact(&mut magic)?;
    if &magic != MAGIC {
        return Err(CheckpointError::BadMagic);
    }
    let mut v = [0u8; 4];
    r.read_exact(&mut v)?;
    let version = u32::from_le_bytes(v);
    if version != VERSION {
        return Err(CheckpointError::BadVersion(version));
    }
    let manifest_len = read_u64(&mut r)?;
    let mut manifest_bytes = Vec::new();
    r.by_ref().take(manifest_len).read_to_end(&mut manifest_bytes)?;
    if manifest_bytes.len() as u64 != manifest_len {
        return Err(CheckpointError::Corrupt("truncated manifest".into()));
    }
    let manifest: Vec<ParamSpec> = serde_json::from_slice(&manifest_bytes)
        .map_err(|e| CheckpointError::Corrupt(e.to_string()))?;
    let count = read_u64(&mut r)? as usize;
    let expected: usize = manifest.iter().map(ParamSpec::len).sum();
    let contiguous = manifest
        .iter()
        .scan(0, |off, s| {
            let ok = s.offset == *off;
            *off += s.len();
            Some(ok)
        })
        .all(|ok| ok);
    if count != expected || !contiguous {
        return Err(CheckpointError::Corrupt("manifest does not match value count".into()));
    }
    let mut bytes = Vec::new();
    r.take(count as u64 * 8).read_to_end(&mut bytes)?;
    if bytes.len() != count * 8 {
        return Err(CheckpointError::Corrupt("truncated values".into()));
    }
    let values = bytes
        .chunks_exact(8)
        .map(|c| f64::from_le_bytes(c.try_into().expect("8-byte chunk")))
        .collect();
    Ok(Params { manifest, values })
}
