//! Model parameters, the linear softmax classifier, local SGD, and packing
//! of real parameter updates into complex channel symbols.
//!
//! The model is multinomial logistic regression with a bias per class:
//! `dim = (num_features + 1) * num_classes`, padded with one trailing zero
//! when that product is odd so the vector always splits into two equal
//! halves for complex packing. Loss and gradient ignore the padding entry.

use crate::error::{Error, Result};
use num_complex::Complex64;
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use std::ops::{Add, Index, Sub};

/// A real parameter vector of even dimension `2N`.
#[derive(Debug, Clone, PartialEq)]
pub struct ModelVector {
    values: Vec<f64>,
}

impl ModelVector {
    pub fn new(values: Vec<f64>) -> Self {
        debug_assert!(values.iter().all(|v| v.is_finite()), "non-finite entry");
        Self { values }
    }

    pub fn zeros(dim: usize) -> Self {
        Self { values: vec![0.0; dim] }
    }

    pub fn dim(&self) -> usize {
        self.values.len()
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.values
    }

    pub fn into_vec(self) -> Vec<f64> {
        self.values
    }

    pub fn norm(&self) -> f64 {
        self.values.iter().map(|v| v * v).sum::<f64>().sqrt()
    }

    /// Squared Euclidean distance to `other`.
    pub fn dist2(&self, other: &ModelVector) -> f64 {
        assert_eq!(self.dim(), other.dim(), "dimension mismatch in dist2");
        self.values
            .iter()
            .zip(&other.values)
            .map(|(a, b)| (a - b) * (a - b))
            .sum()
    }

    pub fn dot(&self, other: &ModelVector) -> f64 {
        assert_eq!(self.dim(), other.dim(), "dimension mismatch in dot");
        self.values.iter().zip(&other.values).map(|(a, b)| a * b).sum()
    }

    pub fn scale(&self, s: f64) -> ModelVector {
        ModelVector::new(self.values.iter().map(|v| v * s).collect())
    }

    /// Returns the vector scaled to unit norm; the zero vector is returned
    /// unchanged.
    pub fn normalized(&self) -> ModelVector {
        let n = self.norm();
        if n == 0.0 {
            self.clone()
        } else {
            self.scale(1.0 / n)
        }
    }

    pub fn is_finite(&self) -> bool {
        self.values.iter().all(|v| v.is_finite())
    }
}

impl Index<usize> for ModelVector {
    type Output = f64;
    fn index(&self, i: usize) -> &f64 {
        &self.values[i]
    }
}

impl Add for &ModelVector {
    type Output = ModelVector;
    fn add(self, rhs: &ModelVector) -> ModelVector {
        assert_eq!(self.dim(), rhs.dim(), "dimension mismatch in add");
        ModelVector::new(self.values.iter().zip(&rhs.values).map(|(a, b)| a + b).collect())
    }
}

impl Sub for &ModelVector {
    type Output = ModelVector;
    fn sub(self, rhs: &ModelVector) -> ModelVector {
        assert_eq!(self.dim(), rhs.dim(), "dimension mismatch in sub");
        ModelVector::new(self.values.iter().zip(&rhs.values).map(|(a, b)| a - b).collect())
    }
}

/// A complex symbol vector of length `N` carrying a packed model update.
#[derive(Debug, Clone, PartialEq)]
pub struct ComplexUpdate {
    values: Vec<Complex64>,
}

impl ComplexUpdate {
    pub fn new(values: Vec<Complex64>) -> Self {
        Self { values }
    }

    pub fn zeros(len: usize) -> Self {
        Self { values: vec![Complex64::new(0.0, 0.0); len] }
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn as_slice(&self) -> &[Complex64] {
        &self.values
    }

    pub fn norm(&self) -> f64 {
        self.values.iter().map(|v| v.norm_sqr()).sum::<f64>().sqrt()
    }
}

/// Packs a real update of even dimension `2N` into `N` complex symbols:
/// entry `n` carries the real part from position `n` and the imaginary part
/// from position `n + N`.
pub fn pack_complex(update: &ModelVector) -> Result<ComplexUpdate> {
    let dim = update.dim();
    if dim % 2 != 0 {
        return Err(Error::OddLength(dim));
    }
    let half = dim / 2;
    let v = update.as_slice();
    Ok(ComplexUpdate::new(
        (0..half).map(|n| Complex64::new(v[n], v[n + half])).collect(),
    ))
}

/// Inverse of [`pack_complex`]: real parts become the first half, imaginary
/// parts the second half.
pub fn unpack_complex(signal: &ComplexUpdate) -> ModelVector {
    let half = signal.len();
    let mut out = vec![0.0; 2 * half];
    for (n, z) in signal.as_slice().iter().enumerate() {
        out[n] = z.re;
        out[n + half] = z.im;
    }
    ModelVector::new(out)
}

/// The difference `after - before` between two models of equal dimension.
pub fn compute_update(before: &ModelVector, after: &ModelVector) -> Result<ModelVector> {
    if before.dim() != after.dim() {
        return Err(Error::DimensionMismatch {
            context: "compute_update",
            expected: before.dim(),
            actual: after.dim(),
        });
    }
    Ok(after - before)
}

/// A flat dataset of feature vectors with integer class labels.
#[derive(Debug, Clone)]
pub struct LocalDataset {
    num_features: usize,
    features: Vec<f64>,
    labels: Vec<usize>,
}

impl LocalDataset {
    pub fn new(num_features: usize) -> Self {
        Self { num_features, features: Vec::new(), labels: Vec::new() }
    }

    pub fn push(&mut self, features: &[f64], label: usize) {
        assert_eq!(features.len(), self.num_features, "feature length mismatch");
        self.features.extend_from_slice(features);
        self.labels.push(label);
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn num_features(&self) -> usize {
        self.num_features
    }

    pub fn features_of(&self, i: usize) -> &[f64] {
        let s = i * self.num_features;
        &self.features[s..s + self.num_features]
    }

    pub fn label_of(&self, i: usize) -> usize {
        self.labels[i]
    }

    pub fn labels(&self) -> &[usize] {
        &self.labels
    }

    /// The dataset restricted to the given sample indices, in order.
    pub fn subset(&self, indices: &[usize]) -> LocalDataset {
        let mut out = LocalDataset::new(self.num_features);
        for &i in indices {
            out.push(self.features_of(i), self.label_of(i));
        }
        out
    }

    /// Concatenation of several datasets with identical feature width.
    pub fn concat(parts: &[&LocalDataset]) -> Result<LocalDataset> {
        let first = parts.first().ok_or(Error::Empty("dataset list"))?;
        let mut out = LocalDataset::new(first.num_features);
        for p in parts {
            if p.num_features != first.num_features {
                return Err(Error::DimensionMismatch {
                    context: "concat",
                    expected: first.num_features,
                    actual: p.num_features,
                });
            }
            out.features.extend_from_slice(&p.features);
            out.labels.extend_from_slice(&p.labels);
        }
        Ok(out)
    }
}

/// Per-round local training parameters.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TrainingConfig {
    /// Number of local SGD steps per round.
    pub tau: usize,
    /// Learning rate for this round.
    pub eta: f64,
    /// Mini-batch size; must not exceed the local dataset size.
    pub batch_size: usize,
}

/// Learning-rate schedule across rounds.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Schedule {
    Constant(f64),
    /// `base * factor^(t / every)` with integer division.
    StepDecay { base: f64, factor: f64, every: usize },
}

impl Schedule {
    pub fn at(&self, t: usize) -> f64 {
        match *self {
            Schedule::Constant(v) => v,
            Schedule::StepDecay { base, factor, every } => {
                base * factor.powi((t / every.max(1)) as i32)
            }
        }
    }
}

/// Shape and regularization of the softmax classifier.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ModelSpec {
    pub num_features: usize,
    pub num_classes: usize,
    /// L2 penalty `lambda/2 * ||theta||^2` added to the mean cross-entropy;
    /// zero disables it.
    pub l2_reg: f64,
}

impl ModelSpec {
    pub fn new(num_features: usize, num_classes: usize) -> Self {
        Self { num_features, num_classes, l2_reg: 0.0 }
    }

    pub fn with_l2(mut self, l2_reg: f64) -> Self {
        self.l2_reg = l2_reg;
        self
    }

    /// Number of active parameters: one weight per feature plus a bias,
    /// per class.
    pub fn raw_dim(&self) -> usize {
        (self.num_features + 1) * self.num_classes
    }

    /// Parameter vector dimension, padded to the next even number.
    pub fn dim(&self) -> usize {
        let raw = self.raw_dim();
        raw + raw % 2
    }

    /// Number of complex symbols a packed update occupies.
    pub fn half_dim(&self) -> usize {
        self.dim() / 2
    }

    fn check(&self, model: &ModelVector, data: &LocalDataset) -> Result<()> {
        if model.dim() != self.dim() {
            return Err(Error::DimensionMismatch {
                context: "model dimension",
                expected: self.dim(),
                actual: model.dim(),
            });
        }
        if data.num_features() != self.num_features {
            return Err(Error::DimensionMismatch {
                context: "feature dimension",
                expected: self.num_features,
                actual: data.num_features(),
            });
        }
        if data.is_empty() {
            return Err(Error::Empty("dataset"));
        }
        Ok(())
    }

    fn logits(&self, model: &ModelVector, x: &[f64], out: &mut [f64]) {
        let stride = self.num_features + 1;
        let v = model.as_slice();
        for (c, o) in out.iter_mut().enumerate() {
            let row = &v[c * stride..c * stride + stride];
            let mut z = row[self.num_features];
            for (w, xv) in row[..self.num_features].iter().zip(x) {
                z += w * xv;
            }
            *o = z;
        }
    }

    /// Mean cross-entropy over `data` plus the L2 penalty.
    pub fn loss(&self, model: &ModelVector, data: &LocalDataset) -> Result<f64> {
        self.check(model, data)?;
        let mut logits = vec![0.0; self.num_classes];
        let mut total = 0.0;
        for i in 0..data.len() {
            self.logits(model, data.features_of(i), &mut logits);
            let max = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let lse = max + logits.iter().map(|z| (z - max).exp()).sum::<f64>().ln();
            total += lse - logits[data.label_of(i)];
        }
        let mut loss = total / data.len() as f64;
        if self.l2_reg != 0.0 {
            let sq: f64 = model.as_slice()[..self.raw_dim()].iter().map(|v| v * v).sum();
            loss += 0.5 * self.l2_reg * sq;
        }
        Ok(loss)
    }

    fn gradient_on(&self, model: &ModelVector, data: &LocalDataset, indices: &[usize]) -> ModelVector {
        let stride = self.num_features + 1;
        let mut grad = vec![0.0; self.dim()];
        let mut p = vec![0.0; self.num_classes];
        for &i in indices {
            let x = data.features_of(i);
            self.logits(model, x, &mut p);
            let max = p.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let mut sum = 0.0;
            for z in p.iter_mut() {
                *z = (*z - max).exp();
                sum += *z;
            }
            let label = data.label_of(i);
            for c in 0..self.num_classes {
                let mut delta = p[c] / sum;
                if c == label {
                    delta -= 1.0;
                }
                let row = c * stride;
                for (j, xv) in x.iter().enumerate() {
                    grad[row + j] += delta * xv;
                }
                grad[row + self.num_features] += delta;
            }
        }
        let inv = 1.0 / indices.len() as f64;
        for g in grad.iter_mut() {
            *g *= inv;
        }
        if self.l2_reg != 0.0 {
            let v = model.as_slice();
            for j in 0..self.raw_dim() {
                grad[j] += self.l2_reg * v[j];
            }
        }
        ModelVector::new(grad)
    }

    /// Full-batch gradient of [`Self::loss`] at `model`.
    pub fn gradient(&self, model: &ModelVector, data: &LocalDataset) -> Result<ModelVector> {
        self.check(model, data)?;
        let all: Vec<usize> = (0..data.len()).collect();
        Ok(self.gradient_on(model, data, &all))
    }

    /// Class prediction by highest logit; ties go to the lowest class index.
    pub fn predict(&self, model: &ModelVector, x: &[f64]) -> usize {
        let mut logits = vec![0.0; self.num_classes];
        self.logits(model, x, &mut logits);
        let mut best = 0;
        for c in 1..self.num_classes {
            if logits[c] > logits[best] {
                best = c;
            }
        }
        best
    }

    /// Runs `tau` mini-batch SGD steps from `model` and returns the resulting
    /// model. Batches are drawn without replacement from a seeded shuffle and
    /// the pool is reshuffled whenever fewer than `batch_size` samples remain.
    pub fn local_train(
        &self,
        model: &ModelVector,
        data: &LocalDataset,
        cfg: &TrainingConfig,
        seed: u64,
    ) -> Result<ModelVector> {
        self.check(model, data)?;
        if cfg.tau == 0 {
            return Err(Error::Config("tau must be at least 1".into()));
        }
        if cfg.batch_size == 0 {
            return Err(Error::Config("batch_size must be at least 1".into()));
        }
        if cfg.batch_size > data.len() {
            return Err(Error::Config(format!(
                "batch_size {} exceeds local dataset size {}",
                cfg.batch_size,
                data.len()
            )));
        }
        if !(cfg.eta >= 0.0 && cfg.eta.is_finite()) {
            return Err(Error::Config(format!("eta must be finite and non-negative, got {}", cfg.eta)));
        }

        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut order: Vec<usize> = (0..data.len()).collect();
        let mut cursor = data.len(); // force a shuffle before the first batch
        let mut theta = model.clone();
        for _ in 0..cfg.tau {
            if cursor + cfg.batch_size > data.len() {
                order.shuffle(&mut rng);
                cursor = 0;
            }
            let batch = &order[cursor..cursor + cfg.batch_size];
            cursor += cfg.batch_size;
            let grad = self.gradient_on(&theta, data, batch);
            theta = &theta - &grad.scale(cfg.eta);
        }
        Ok(theta)
    }
}
