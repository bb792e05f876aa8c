//! Sparsifying compressors for device uploads.
//!
//! Both operators keep `k = ceil(theta * d)` coordinates and satisfy the
//! contraction `||Q(x) - x||^2 <= (1 - theta) ||x||^2` (top-k
//! deterministically, random-k in expectation).

use std::cmp::Ordering;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::ModelVector;

/// Fraction of coordinates kept, in `(0, 1]`.
#[derive(Debug, Clone, Copy, PartialEq, PartialOrd)]
pub struct CompressionRatio(f64);

impl CompressionRatio {
    pub const FULL: Self = Self(1.0);

    pub fn new(theta: f64) -> Result<Self> {
        if theta > 0.0 && theta <= 1.0 {
            Ok(Self(theta))
        } else {
            Err(Error::InvalidParameter(format!("compression ratio must be in (0, 1], got {theta}")))
        }
    }

    pub fn value(self) -> f64 {
        self.0
    }

    /// `ceil(theta * d)`, clamped to `[1, d]`. The product is rounded away
    /// from spurious ulps first so that e.g. `0.1 * 30` keeps 3 coordinates.
    pub fn kept(self, d: usize) -> usize {
        let exact = self.0 * d as f64;
        let snapped = if (exact - exact.round()).abs() <= 1e-9 * exact.max(1.0) {
            exact.round()
        } else {
            exact.ceil()
        };
        (snapped as usize).clamp(1, d.max(1))
    }
}

/// Sparse vector with strictly increasing indices into a length-`dim` vector.
#[derive(Debug, Clone, PartialEq)]
pub struct SparseDelta {
    indices: Vec<u32>,
    values: Vec<f64>,
    dim: usize,
}

impl SparseDelta {
    pub fn new(indices: Vec<u32>, values: Vec<f64>, dim: usize) -> Result<Self> {
        if indices.is_empty() || indices.len() != values.len() {
            return Err(Error::InvalidParameter(format!(
                "sparse delta needs matching non-empty indices/values ({} vs {})",
                indices.len(),
                values.len()
            )));
        }
        if indices.windows(2).any(|w| w[0] >= w[1]) {
            return Err(Error::InvalidParameter("sparse indices must be strictly increasing".into()));
        }
        if let Some(&last) = indices.last() {
            if last as usize >= dim {
                return Err(Error::IndexOutOfRange { index: last as usize, dim });
            }
        }
        if values.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite("sparse delta"));
        }
        Ok(Self { indices, values, dim })
    }

    pub fn indices(&self) -> &[u32] {
        &self.indices
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn nnz(&self) -> usize {
        self.indices.len()
    }

    pub fn densify(&self) -> ModelVector {
        let mut out = vec![0.0; self.dim];
        for (&i, &v) in self.indices.iter().zip(&self.values) {
            out[i as usize] = v;
        }
        ModelVector::new(out).expect("values are finite")
    }

    /// Little-endian wire form: `u32` count, the sorted `u32` indices, then
    /// the `f64` values.
    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::with_capacity(self.encoded_len());
        out.extend_from_slice(&(self.indices.len() as u32).to_le_bytes());
        for i in &self.indices {
            out.extend_from_slice(&i.to_le_bytes());
        }
        for v in &self.values {
            out.extend_from_slice(&v.to_le_bytes());
        }
        out
    }

    pub fn from_bytes(bytes: &[u8], dim: usize) -> Result<Self> {
        let short = || Error::Parse("truncated sparse delta".into());
        let count = u32::from_le_bytes(bytes.get(..4).ok_or_else(short)?.try_into().unwrap()) as usize;
        if bytes.len() != 4 + 12 * count {
            return Err(Error::Parse(format!(
                "sparse delta of {count} entries needs {} bytes, got {}",
                4 + 12 * count,
                bytes.len()
            )));
        }
        let idx_end = 4 + 4 * count;
        let indices = bytes[4..idx_end]
            .chunks_exact(4)
            .map(|c| u32::from_le_bytes(c.try_into().unwrap()))
            .collect();
        let values = bytes[idx_end..]
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
            .collect();
        Self::new(indices, values, dim)
    }

    /// Size of [`SparseDelta::to_bytes`] without encoding.
    pub fn encoded_len(&self) -> usize {
        4 + 12 * self.indices.len()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Compressor {
    #[default]
    TopK,
    RandomK,
}

/// Keeps the `ceil(theta * d)` largest-magnitude coordinates; ties go to the
/// lower index. A zero input yields `k` explicit zeros.
pub fn top_k(x: &ModelVector, theta: CompressionRatio) -> Result<SparseDelta> {
    let d = x.len();
    if d == 0 {
        return Err(Error::InvalidParameter("cannot compress an empty vector".into()));
    }
    let k = theta.kept(d);
    let values = x.as_slice();
    let mut order: Vec<u32> = (0..d as u32).collect();
    if k < d {
        let by_magnitude = |a: &u32, b: &u32| -> Ordering {
            let (va, vb) = (values[*a as usize].abs(), values[*b as usize].abs());
            vb.total_cmp(&va).then(a.cmp(b))
        };
        order.select_nth_unstable_by(k - 1, by_magnitude);
        order.truncate(k);
        order.sort_unstable();
    }
    let kept = order.iter().map(|&i| values[i as usize]).collect();
    SparseDelta::new(order, kept, d)
}

/// Keeps `ceil(theta * d)` coordinates chosen uniformly at random, unscaled.
pub fn random_k<R: Rng + ?Sized>(x: &ModelVector, theta: CompressionRatio, rng: &mut R) -> Result<SparseDelta> {
    let d = x.len();
    if d == 0 {
        return Err(Error::InvalidParameter("cannot compress an empty vector".into()));
    }
    let k = theta.kept(d);
    let mut idx: Vec<u32> = if k == d {
        (0..d as u32).collect()
    } else {
        rand::seq::index::sample(rng, d, k).into_iter().map(|i| i as u32).collect()
    };
    idx.sort_unstable();
    let kept = idx.iter().map(|&i| x.as_slice()[i as usize]).collect();
    SparseDelta::new(idx, kept, d)
}

/// `base + scale * densify(delta)`.
pub fn apply_sparse(base: &ModelVector, delta: &SparseDelta, scale: f64) -> Result<ModelVector> {
    if delta.dim() != base.len() {
        return Err(Error::DimensionMismatch { expected: base.len(), actual: delta.dim() });
    }
    let mut out = base.as_slice().to_vec();
    for (&i, &v) in delta.indices().iter().zip(delta.values()) {
        let slot = out
            .get_mut(i as usize)
            .ok_or(Error::IndexOutOfRange { index: i as usize, dim: base.len() })?;
        *slot += scale * v;
    }
    ModelVector::new(out)
}
