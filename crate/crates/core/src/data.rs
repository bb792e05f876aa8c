//! Synthetic datasets and non-IID partitioning across devices.

use std::path::Path;

use rand::seq::SliceRandom;
use rand::Rng;
use rand_distr::{Distribution, Gamma, StandardNormal};

use crate::error::{Error, Result};
use crate::model::{Batch, LocalObjective, LossModel, ModelVector};
use crate::rng::{stream, Purpose};

/// Labelled samples stored row-major.
#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    features: Vec<f64>,
    labels: Vec<usize>,
    n_classes: usize,
    feature_dim: usize,
}

impl Dataset {
    pub fn new(features: Vec<f64>, labels: Vec<usize>, n_classes: usize, feature_dim: usize) -> Result<Self> {
        if labels.is_empty() {
            return Err(Error::InvalidParameter("dataset must be non-empty".into()));
        }
        if feature_dim == 0 || features.len() != labels.len() * feature_dim {
            return Err(Error::DimensionMismatch {
                expected: labels.len() * feature_dim,
                actual: features.len(),
            });
        }
        if let Some(&label) = labels.iter().find(|&&l| l >= n_classes) {
            return Err(Error::LabelOutOfRange { label, n_classes });
        }
        Ok(Self { features, labels, n_classes, feature_dim })
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn n_classes(&self) -> usize {
        self.n_classes
    }

    pub fn feature_dim(&self) -> usize {
        self.feature_dim
    }

    pub fn features(&self) -> &[f64] {
        &self.features
    }

    pub fn labels(&self) -> &[usize] {
        &self.labels
    }

    pub fn row(&self, i: usize) -> &[f64] {
        &self.features[i * self.feature_dim..(i + 1) * self.feature_dim]
    }

    /// Rows at `indices`, in the given order.
    pub fn subset(&self, indices: &[usize]) -> Result<Self> {
        let mut features = Vec::with_capacity(indices.len() * self.feature_dim);
        let mut labels = Vec::with_capacity(indices.len());
        for &i in indices {
            if i >= self.len() {
                return Err(Error::IndexOutOfRange { index: i, dim: self.len() });
            }
            features.extend_from_slice(self.row(i));
            labels.push(self.labels[i]);
        }
        Self::new(features, labels, self.n_classes, self.feature_dim)
    }

    pub fn batch(&self, indices: &[usize]) -> Result<Batch> {
        if indices.is_empty() {
            return Err(Error::EmptyBatch);
        }
        let mut features = Vec::with_capacity(indices.len() * self.feature_dim);
        let mut labels = Vec::with_capacity(indices.len());
        for &i in indices {
            if i >= self.len() {
                return Err(Error::IndexOutOfRange { index: i, dim: self.len() });
            }
            features.extend_from_slice(self.row(i));
            labels.push(self.labels[i]);
        }
        Batch::new(features, labels, self.feature_dim)
    }

    pub fn as_batch(&self) -> Batch {
        Batch::new(self.features.clone(), self.labels.clone(), self.feature_dim)
            .expect("dataset invariants imply a valid batch")
    }

    /// Sample count per class.
    pub fn class_counts(&self) -> Vec<usize> {
        let mut counts = vec![0; self.n_classes];
        for &l in &self.labels {
            counts[l] += 1;
        }
        counts
    }

    /// Loads a CSV whose rows are `feature..., label` after a mandatory
    /// header line. `n_classes` defaults to `max label + 1`.
    pub fn load_csv(path: impl AsRef<Path>, n_classes: Option<usize>) -> Result<Self> {
        let mut reader = csv::ReaderBuilder::new().has_headers(true).from_path(path)?;
        let header = reader.headers()?.clone();
        if header.len() < 2 {
            return Err(Error::Parse("need at least one feature column and a label column".into()));
        }
        if header.iter().all(|h| h.trim().parse::<f64>().is_ok()) {
            return Err(Error::Parse("missing header line".into()));
        }
        let feature_dim = header.len() - 1;
        let mut features = Vec::new();
        let mut labels = Vec::new();
        for (line, record) in reader.records().enumerate() {
            let record = record?;
            for field in record.iter().take(feature_dim) {
                let v: f64 = field
                    .trim()
                    .parse()
                    .map_err(|_| Error::Parse(format!("row {}: bad feature {field:?}", line + 1)))?;
                features.push(v);
            }
            let label = &record[feature_dim];
            labels.push(
                label
                    .trim()
                    .parse::<usize>()
                    .map_err(|_| Error::Parse(format!("row {}: bad label {label:?}", line + 1)))?,
            );
        }
        let n_classes = n_classes.unwrap_or_else(|| labels.iter().max().map_or(0, |m| m + 1));
        Self::new(features, labels, n_classes, feature_dim)
    }
}

/// Gaussian class clusters with unit noise. Class means are pairwise
/// `class_sep` apart: scaled standard basis vectors when there are at least
/// as many features as classes, random directions otherwise.
pub fn generate_synthetic(
    n_classes: usize,
    feature_dim: usize,
    n_samples: usize,
    class_sep: f64,
    seed: u64,
) -> Result<Dataset> {
    if n_classes == 0 || feature_dim == 0 || n_samples == 0 {
        return Err(Error::InvalidParameter("dataset dimensions must be positive".into()));
    }
    if n_samples < n_classes {
        return Err(Error::InvalidParameter(format!(
            "need at least one sample per class ({n_samples} < {n_classes})"
        )));
    }
    if !(class_sep >= 0.0 && class_sep.is_finite()) {
        return Err(Error::InvalidParameter(format!("class_sep must be >= 0, got {class_sep}")));
    }
    let mut rng = stream(seed, Purpose::Data, &[]);
    let radius = class_sep / std::f64::consts::SQRT_2;
    let means: Vec<Vec<f64>> = (0..n_classes)
        .map(|c| {
            if n_classes <= feature_dim {
                let mut m = vec![0.0; feature_dim];
                m[c] = radius;
                m
            } else {
                let dir: Vec<f64> = (0..feature_dim).map(|_| StandardNormal.sample(&mut rng)).collect();
                let norm = dir.iter().map(|v| v * v).sum::<f64>().sqrt().max(1e-12);
                dir.iter().map(|v| radius * v / norm).collect()
            }
        })
        .collect();
    let mut labels: Vec<usize> = (0..n_samples).map(|i| i % n_classes).collect();
    labels.shuffle(&mut rng);
    let mut features = Vec::with_capacity(n_samples * feature_dim);
    for &label in &labels {
        for mean in &means[label] {
            let noise: f64 = StandardNormal.sample(&mut rng);
            features.push(mean + noise);
        }
    }
    Dataset::new(features, labels, n_classes, feature_dim)
}

/// Splits off a held-out set of `ceil(fraction * n)` samples.
pub fn holdout_split(ds: &Dataset, fraction: f64, seed: u64) -> Result<(Dataset, Dataset)> {
    if !(fraction > 0.0 && fraction < 1.0) {
        return Err(Error::InvalidParameter(format!("holdout fraction must be in (0, 1), got {fraction}")));
    }
    let n_test = ((fraction * ds.len() as f64).ceil() as usize).clamp(1, ds.len().saturating_sub(1));
    if n_test == 0 {
        return Err(Error::InvalidParameter("dataset too small to split".into()));
    }
    let mut order: Vec<usize> = (0..ds.len()).collect();
    order.shuffle(&mut stream(seed, Purpose::Holdout, &[]));
    let (test, train) = order.split_at(n_test);
    let mut train = train.to_vec();
    let mut test = test.to_vec();
    train.sort_unstable();
    test.sort_unstable();
    Ok((ds.subset(&train)?, ds.subset(&test)?))
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PartitionSpec {
    pub n_devices: usize,
    pub beta: f64,
    pub seed: u64,
}

/// Upper bound on Dirichlet re-draws before giving up on non-empty shards.
pub const MAX_PARTITION_ATTEMPTS: usize = 1000;

/// Per-class Dirichlet allocation: for every class, proportions over devices
/// are drawn from `Dirichlet(beta, ..., beta)` and that class's samples are
/// dealt out accordingly. Draws leaving any device empty are rejected and
/// re-drawn from the next sub-seed.
pub fn dirichlet_partition(ds: &Dataset, spec: &PartitionSpec) -> Result<Vec<Dataset>> {
    Ok(dirichlet_partition_indices(ds, spec)?
        .iter()
        .map(|idx| ds.subset(idx))
        .collect::<Result<Vec<_>>>()?)
}

/// Same as [`dirichlet_partition`] but returns the sample indices per device.
pub fn dirichlet_partition_indices(ds: &Dataset, spec: &PartitionSpec) -> Result<Vec<Vec<usize>>> {
    let n = spec.n_devices;
    if n == 0 {
        return Err(Error::InvalidParameter("need at least one device".into()));
    }
    if !(spec.beta > 0.0 && spec.beta.is_finite()) {
        return Err(Error::InvalidParameter(format!("beta must be positive, got {}", spec.beta)));
    }
    if ds.len() < n {
        return Err(Error::InvalidParameter(format!(
            "{} samples cannot cover {n} devices",
            ds.len()
        )));
    }
    let mut by_class: Vec<Vec<usize>> = vec![Vec::new(); ds.n_classes()];
    for (i, &l) in ds.labels().iter().enumerate() {
        by_class[l].push(i);
    }
    let gamma = Gamma::new(spec.beta, 1.0).map_err(|e| Error::InvalidParameter(e.to_string()))?;

    'attempt: for attempt in 0..MAX_PARTITION_ATTEMPTS {
        let mut rng = stream(spec.seed, Purpose::Partition, &[attempt as u64]);
        let mut shards: Vec<Vec<usize>> = vec![Vec::new(); n];
        for members in by_class.iter().filter(|m| !m.is_empty()) {
            let mut members = members.clone();
            members.shuffle(&mut rng);
            let weights: Vec<f64> = (0..n).map(|_| gamma.sample(&mut rng)).collect();
            let total: f64 = weights.iter().sum();
            if !(total > 0.0 && total.is_finite()) {
                continue 'attempt;
            }
            let count = members.len();
            let mut start = 0usize;
            let mut cumulative = 0.0;
            for (device, w) in weights.iter().enumerate() {
                cumulative += w / total;
                let end = if device + 1 == n {
                    count
                } else {
                    ((cumulative * count as f64).round() as usize).clamp(start, count)
                };
                shards[device].extend_from_slice(&members[start..end]);
                start = end;
            }
        }
        if shards.iter().any(|s| s.is_empty()) {
            continue;
        }
        for s in &mut shards {
            s.sort_unstable();
        }
        return Ok(shards);
    }
    Err(Error::PartitionFailed(MAX_PARTITION_ATTEMPTS))
}

/// Adds a per-device Gaussian mean shift (std `scale`) to every feature of
/// each shard, emulating naturally non-IID writers.
pub fn apply_feature_shift(shards: &mut [Dataset], scale: f64, seed: u64) {
    if scale == 0.0 {
        return;
    }
    for (device, shard) in shards.iter_mut().enumerate() {
        let mut rng = stream(seed, Purpose::FeatureShift, &[device as u64]);
        let shift: Vec<f64> = (0..shard.feature_dim)
            .map(|_| { let z: f64 = StandardNormal.sample(&mut rng); scale * z })
            .collect();
        for row in shard.features.chunks_mut(shard.feature_dim) {
            for (x, s) in row.iter_mut().zip(&shift) {
                *x += s;
            }
        }
    }
}

/// Mean total-variation distance between each shard's label distribution
/// and the pooled one. Zero for perfectly IID shards.
pub fn label_skew(shards: &[Dataset]) -> f64 {
    let n_classes = shards[0].n_classes();
    let mut pooled = vec![0.0; n_classes];
    let mut total = 0.0;
    for s in shards {
        for (p, c) in pooled.iter_mut().zip(s.class_counts()) {
            *p += c as f64;
        }
        total += s.len() as f64;
    }
    pooled.iter_mut().for_each(|p| *p /= total);
    let tv: f64 = shards
        .iter()
        .map(|s| {
            let n = s.len() as f64;
            0.5 * s.class_counts().iter().zip(&pooled).map(|(&c, p)| (c as f64 / n - p).abs()).sum::<f64>()
        })
        .sum();
    tv / shards.len() as f64
}

/// A device's shard paired with the loss family it trains.
#[derive(Debug, Clone, Copy)]
pub struct DeviceObjective<'a> {
    pub data: &'a Dataset,
    pub loss: &'a LossModel,
}

impl LocalObjective for DeviceObjective<'_> {
    fn dim(&self) -> usize {
        self.loss.dim()
    }

    fn n_samples(&self) -> usize {
        self.data.len()
    }

    fn gradient_at(&self, model: &ModelVector, indices: &[usize]) -> Result<ModelVector> {
        self.loss.stochastic_gradient(model, &self.data.batch(indices)?)
    }
}

/// Uniformly draws `k` distinct indices out of `n`.
pub(crate) fn sample_indices(rng: &mut impl Rng, n: usize, k: usize) -> Vec<usize> {
    rand::seq::index::sample(rng, n, k.min(n)).into_vec()
}
