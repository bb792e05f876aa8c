//! Model vectors, loss families, stochastic gradients and the SGD step.
//!
//! Two loss families are supported, both trained with softmax cross-entropy:
//! multinomial logistic regression and a one-hidden-layer `tanh` MLP. Model
//! parameters live in a flat [`ModelVector`] so that compression and
//! aggregation never need to know the architecture.

use nalgebra::DMatrix;
use rand::seq::SliceRandom;
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Dense parameter vector. Every constructor and arithmetic helper rejects
/// non-finite entries.
#[derive(Debug, Clone, PartialEq)]
pub struct ModelVector(Vec<f64>);

impl ModelVector {
    pub fn new(values: Vec<f64>) -> Result<Self> {
        if values.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite("model vector"));
        }
        Ok(Self(values))
    }

    pub fn zeros(d: usize) -> Self {
        Self(vec![0.0; d])
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.0
    }

    pub fn into_vec(self) -> Vec<f64> {
        self.0
    }

    pub fn norm_sq(&self) -> f64 {
        self.0.iter().map(|v| v * v).sum()
    }

    fn check_len(&self, other: &Self) -> Result<()> {
        if self.len() != other.len() {
            return Err(Error::DimensionMismatch { expected: self.len(), actual: other.len() });
        }
        Ok(())
    }

    /// `self - other`.
    pub fn sub(&self, other: &Self) -> Result<Self> {
        self.check_len(other)?;
        Self::new(self.0.iter().zip(&other.0).map(|(a, b)| a - b).collect())
    }

    /// `self + scale * other`.
    pub fn add_scaled(&self, other: &Self, scale: f64) -> Result<Self> {
        self.check_len(other)?;
        Self::new(self.0.iter().zip(&other.0).map(|(a, b)| a + scale * b).collect())
    }

    pub fn scale(&self, c: f64) -> Result<Self> {
        Self::new(self.0.iter().map(|v| c * v).collect())
    }

    pub fn distance_sq(&self, other: &Self) -> Result<f64> {
        self.check_len(other)?;
        Ok(self.0.iter().zip(&other.0).map(|(a, b)| (a - b) * (a - b)).sum())
    }
}

/// A mini-batch: `b` rows of `feature_dim` features (row-major) and labels.
#[derive(Debug, Clone, PartialEq)]
pub struct Batch {
    features: Vec<f64>,
    labels: Vec<usize>,
    feature_dim: usize,
}

impl Batch {
    pub fn new(features: Vec<f64>, labels: Vec<usize>, feature_dim: usize) -> Result<Self> {
        if labels.is_empty() {
            return Err(Error::EmptyBatch);
        }
        if features.len() != labels.len() * feature_dim {
            return Err(Error::DimensionMismatch {
                expected: labels.len() * feature_dim,
                actual: features.len(),
            });
        }
        Ok(Self { features, labels, feature_dim })
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn feature_dim(&self) -> usize {
        self.feature_dim
    }

    pub fn row(&self, i: usize) -> &[f64] {
        &self.features[i * self.feature_dim..(i + 1) * self.feature_dim]
    }

    pub fn labels(&self) -> &[usize] {
        &self.labels
    }

    pub fn features(&self) -> &[f64] {
        &self.features
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "type")]
pub enum LossKind {
    /// Multinomial logistic regression: `W` (classes x features) then bias.
    Logistic,
    /// `tanh` hidden layer: `W1` (hidden x features), `b1`, `W2` (classes x hidden), `b2`.
    Mlp { hidden: usize },
}

/// A loss family with its dimensions and a smoothness estimate `L`.
#[derive(Debug, Clone, PartialEq)]
pub struct LossModel {
    pub kind: LossKind,
    pub n_features: usize,
    pub n_classes: usize,
    pub l_estimate: f64,
}

/// Fixed smoothness proxy used for the MLP family, where no cheap bound exists.
pub const MLP_SMOOTHNESS: f64 = 1.0;

impl LossModel {
    pub fn logistic(n_features: usize, n_classes: usize) -> Result<Self> {
        Self::validate_dims(n_features, n_classes)?;
        Ok(Self { kind: LossKind::Logistic, n_features, n_classes, l_estimate: 0.25 })
    }

    pub fn mlp(n_features: usize, hidden: usize, n_classes: usize) -> Result<Self> {
        Self::validate_dims(n_features, n_classes)?;
        if hidden == 0 {
            return Err(Error::InvalidParameter("hidden layer width must be positive".into()));
        }
        Ok(Self {
            kind: LossKind::Mlp { hidden },
            n_features,
            n_classes,
            l_estimate: MLP_SMOOTHNESS,
        })
    }

    fn validate_dims(n_features: usize, n_classes: usize) -> Result<()> {
        if n_features == 0 || n_classes < 2 {
            return Err(Error::InvalidParameter(format!(
                "need n_features >= 1 and n_classes >= 2, got {n_features} and {n_classes}"
            )));
        }
        Ok(())
    }

    /// Sets `l_estimate` from data. For softmax cross-entropy the Hessian
    /// with respect to the logits has spectral norm at most 1/2, so
    /// `L <= lambda_max(E[x x^T]) / 2` with `x` augmented by the bias input.
    /// The MLP keeps its configured constant.
    pub fn with_smoothness_from(mut self, features: &[f64]) -> Result<Self> {
        if let LossKind::Logistic = self.kind {
            self.l_estimate = logistic_smoothness(features, self.n_features)?;
        }
        Ok(self)
    }

    /// Number of parameters.
    pub fn dim(&self) -> usize {
        let (f, c) = (self.n_features, self.n_classes);
        match self.kind {
            LossKind::Logistic => c * (f + 1),
            LossKind::Mlp { hidden: h } => h * f + h + c * h + c,
        }
    }

    /// Initial parameters: zeros for logistic regression, scaled uniform
    /// weights and zero biases for the MLP.
    pub fn init(&self, rng: &mut ChaCha8Rng) -> ModelVector {
        match self.kind {
            LossKind::Logistic => ModelVector::zeros(self.dim()),
            LossKind::Mlp { hidden } => {
                let (f, c) = (self.n_features, self.n_classes);
                let mut v = Vec::with_capacity(self.dim());
                let s1 = 1.0 / (f as f64).sqrt();
                v.extend((0..hidden * f).map(|_| rng.random_range(-s1..s1)));
                v.extend(std::iter::repeat_n(0.0, hidden));
                let s2 = 1.0 / (hidden as f64).sqrt();
                v.extend((0..c * hidden).map(|_| rng.random_range(-s2..s2)));
                v.extend(std::iter::repeat_n(0.0, c));
                ModelVector(v)
            }
        }
    }

    fn check(&self, model: &ModelVector, batch: &Batch) -> Result<()> {
        if model.len() != self.dim() {
            return Err(Error::DimensionMismatch { expected: self.dim(), actual: model.len() });
        }
        if batch.feature_dim() != self.n_features {
            return Err(Error::DimensionMismatch {
                expected: self.n_features,
                actual: batch.feature_dim(),
            });
        }
        if let Some(&label) = batch.labels().iter().find(|&&l| l >= self.n_classes) {
            return Err(Error::LabelOutOfRange { label, n_classes: self.n_classes });
        }
        Ok(())
    }

    /// Logits for one sample, plus the hidden activations for the MLP.
    fn forward(&self, w: &[f64], x: &[f64], logits: &mut [f64], hidden_out: &mut Vec<f64>) {
        let (f, c) = (self.n_features, self.n_classes);
        match self.kind {
            LossKind::Logistic => {
                let bias = &w[c * f..];
                for k in 0..c {
                    logits[k] = dot(&w[k * f..(k + 1) * f], x) + bias[k];
                }
            }
            LossKind::Mlp { hidden: h } => {
                let (w1, rest) = w.split_at(h * f);
                let (b1, rest) = rest.split_at(h);
                let (w2, b2) = rest.split_at(c * h);
                hidden_out.clear();
                hidden_out.extend((0..h).map(|j| (dot(&w1[j * f..(j + 1) * f], x) + b1[j]).tanh()));
                for k in 0..c {
                    logits[k] = dot(&w2[k * h..(k + 1) * h], hidden_out) + b2[k];
                }
            }
        }
    }

    /// Mean cross-entropy over the batch.
    pub fn loss(&self, model: &ModelVector, batch: &Batch) -> Result<f64> {
        self.check(model, batch)?;
        let mut logits = vec![0.0; self.n_classes];
        let mut hidden = Vec::new();
        let mut total = 0.0;
        for i in 0..batch.len() {
            self.forward(model.as_slice(), batch.row(i), &mut logits, &mut hidden);
            let y = batch.labels()[i];
            total += log_sum_exp(&logits) - logits[y];
        }
        let value = total / batch.len() as f64;
        if !value.is_finite() {
            return Err(Error::NonFinite("loss"));
        }
        Ok(value)
    }

    /// Fraction of samples whose arg-max logit equals the label.
    pub fn accuracy(&self, model: &ModelVector, batch: &Batch) -> Result<f64> {
        self.check(model, batch)?;
        let mut logits = vec![0.0; self.n_classes];
        let mut hidden = Vec::new();
        let mut correct = 0usize;
        for i in 0..batch.len() {
            self.forward(model.as_slice(), batch.row(i), &mut logits, &mut hidden);
            // ties resolve to the lowest class index
            let pred = logits
                .iter()
                .enumerate()
                .fold((0, f64::NEG_INFINITY), |best, (k, &v)| if v > best.1 { (k, v) } else { best })
                .0;
            if pred == batch.labels()[i] {
                correct += 1;
            }
        }
        Ok(correct as f64 / batch.len() as f64)
    }

    /// Gradient of [`LossModel::loss`] with respect to the parameters.
    pub fn stochastic_gradient(&self, model: &ModelVector, batch: &Batch) -> Result<ModelVector> {
        if batch.is_empty() {
            return Err(Error::EmptyBatch);
        }
        self.check(model, batch)?;
        let (f, c) = (self.n_features, self.n_classes);
        let w = model.as_slice();
        let mut grad = vec![0.0; self.dim()];
        let mut logits = vec![0.0; c];
        let mut hidden = Vec::new();
        let inv_b = 1.0 / batch.len() as f64;
        for i in 0..batch.len() {
            let x = batch.row(i);
            self.forward(w, x, &mut logits, &mut hidden);
            softmax_in_place(&mut logits);
            logits[batch.labels()[i]] -= 1.0;
            let dlogits = &logits;
            match self.kind {
                LossKind::Logistic => {
                    for k in 0..c {
                        let g = dlogits[k] * inv_b;
                        for (gw, xj) in grad[k * f..(k + 1) * f].iter_mut().zip(x) {
                            *gw += g * xj;
                        }
                        grad[c * f + k] += g;
                    }
                }
                LossKind::Mlp { hidden: h } => {
                    let w2 = &w[h * f + h..h * f + h + c * h];
                    let (gw1, rest) = grad.split_at_mut(h * f);
                    let (gb1, rest) = rest.split_at_mut(h);
                    let (gw2, gb2) = rest.split_at_mut(c * h);
                    let mut dz = vec![0.0; h];
                    for k in 0..c {
                        let g = dlogits[k] * inv_b;
                        gb2[k] += g;
                        for j in 0..h {
                            gw2[k * h + j] += g * hidden[j];
                            dz[j] += g * w2[k * h + j];
                        }
                    }
                    for j in 0..h {
                        let dzj = dz[j] * (1.0 - hidden[j] * hidden[j]);
                        gb1[j] += dzj;
                        for (gw, xi) in gw1[j * f..(j + 1) * f].iter_mut().zip(x) {
                            *gw += dzj * xi;
                        }
                    }
                }
            }
        }
        ModelVector::new(grad)
    }
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

fn log_sum_exp(v: &[f64]) -> f64 {
    let max = v.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    max + v.iter().map(|x| (x - max).exp()).sum::<f64>().ln()
}

fn softmax_in_place(v: &mut [f64]) {
    let max = v.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let mut sum = 0.0;
    for x in v.iter_mut() {
        *x = (*x - max).exp();
        sum += *x;
    }
    for x in v.iter_mut() {
        *x /= sum;
    }
}

fn logistic_smoothness(features: &[f64], n_features: usize) -> Result<f64> {
    if n_features == 0 || features.is_empty() || features.len() % n_features != 0 {
        return Err(Error::InvalidParameter("feature matrix shape".into()));
    }
    let n = features.len() / n_features;
    let d = n_features + 1;
    let mut second_moment = DMatrix::<f64>::zeros(d, d);
    let mut row = vec![1.0; d];
    for chunk in features.chunks(n_features) {
        row[..n_features].copy_from_slice(chunk);
        for a in 0..d {
            for b in 0..d {
                second_moment[(a, b)] += row[a] * row[b];
            }
        }
    }
    second_moment /= n as f64;
    let eig = second_moment.try_symmetric_eigen(1e-12, 10_000).ok_or(Error::EigenFailure)?;
    let lambda_max = eig.eigenvalues.iter().cloned().fold(0.0, f64::max);
    Ok(0.5 * lambda_max)
}

/// One plain SGD step: `model - eta * grad`.
pub fn sgd_step(model: &ModelVector, grad: &ModelVector, eta: f64) -> Result<ModelVector> {
    if !(eta > 0.0 && eta.is_finite()) {
        return Err(Error::InvalidParameter(format!("learning rate must be positive, got {eta}")));
    }
    if grad.as_slice().iter().any(|g| !g.is_finite()) {
        return Err(Error::NonFinite("gradient"));
    }
    model.add_scaled(grad, -eta)
}

/// Heavy-ball step: `v <- momentum * v + grad; x <- x - eta * v`.
/// With `momentum == 0` this is exactly [`sgd_step`].
pub fn momentum_step(
    model: &ModelVector,
    velocity: &mut ModelVector,
    grad: &ModelVector,
    eta: f64,
    momentum: f64,
) -> Result<ModelVector> {
    if momentum == 0.0 {
        return sgd_step(model, grad, eta);
    }
    *velocity = grad.add_scaled(velocity, momentum)?;
    sgd_step(model, velocity, eta)
}

/// Something that yields gradients of a device's local objective on subsets
/// of its samples.
pub trait LocalObjective {
    fn dim(&self) -> usize;
    fn n_samples(&self) -> usize;
    fn gradient_at(&self, model: &ModelVector, indices: &[usize]) -> Result<ModelVector>;

    fn full_gradient(&self, model: &ModelVector) -> Result<ModelVector> {
        let all: Vec<usize> = (0..self.n_samples()).collect();
        self.gradient_at(model, &all)
    }
}

/// Epoch-based mini-batch sampler: uniform without replacement within an
/// epoch, reshuffled at every epoch boundary.
#[derive(Debug, Clone)]
pub struct BatchSampler {
    order: Vec<usize>,
    cursor: usize,
    rng: ChaCha8Rng,
}

impl BatchSampler {
    pub fn new(n_samples: usize, mut rng: ChaCha8Rng) -> Self {
        let mut order: Vec<usize> = (0..n_samples).collect();
        order.shuffle(&mut rng);
        Self { order, cursor: 0, rng }
    }

    /// Next batch of sample indices. A batch at least as large as the local
    /// dataset is the whole dataset in index order.
    pub fn next_batch(&mut self, batch_size: usize) -> Vec<usize> {
        let n = self.order.len();
        if batch_size >= n {
            return (0..n).collect();
        }
        if self.cursor + batch_size > n {
            self.order.shuffle(&mut self.rng);
            self.cursor = 0;
        }
        let batch = self.order[self.cursor..self.cursor + batch_size].to_vec();
        self.cursor += batch_size;
        batch
    }
}
