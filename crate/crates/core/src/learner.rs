//! Datasets, small classifiers and mini-batch SGD.
//!
//! Two model families are supported: a linear softmax classifier and a
//! one-hidden-layer tanh MLP.  Parameters live in one flat vector so that
//! federated deltas are plain vector differences.
//!
//! Flat layouts (row-major):
//!
//! * linear: `W (C x d)`, then `b (C)`
//! * mlp: `W1 (H x d)`, `b1 (H)`, `W2 (C x H)`, `b2 (C)`

use rand::seq::SliceRandom;
use rand::Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::seed;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum LearnerError {
    #[error("dimension mismatch in {what}: expected {expected}, found {found}")]
    Dimension {
        what: &'static str,
        expected: usize,
        found: usize,
    },
    #[error("empty input: {0}")]
    EmptyInput(&'static str),
    #[error("invalid hyperparameters: {0}")]
    InvalidHyperparams(String),
    #[error("invalid dataset: {0}")]
    InvalidDataset(String),
    #[error("invalid model: {0}")]
    InvalidModel(String),
}

pub type Result<T> = std::result::Result<T, LearnerError>;

/// Labelled samples with a dense row-major feature matrix.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Dataset {
    n_features: usize,
    n_classes: usize,
    features: Vec<f64>,
    labels: Vec<usize>,
}

impl Dataset {
    pub fn new(
        features: Vec<f64>,
        labels: Vec<usize>,
        n_features: usize,
        n_classes: usize,
    ) -> Result<Self> {
        if n_features == 0 || n_classes == 0 {
            return Err(LearnerError::InvalidDataset(
                "feature width and class count must be positive".into(),
            ));
        }
        if features.len() != labels.len() * n_features {
            return Err(LearnerError::Dimension {
                what: "feature matrix",
                expected: labels.len() * n_features,
                found: features.len(),
            });
        }
        if let Some(&bad) = labels.iter().find(|&&y| y >= n_classes) {
            return Err(LearnerError::InvalidDataset(format!(
                "label {bad} out of range for {n_classes} classes"
            )));
        }
        if features.iter().any(|x| !x.is_finite()) {
            return Err(LearnerError::InvalidDataset("non-finite feature".into()));
        }
        Ok(Self {
            n_features,
            n_classes,
            features,
            labels,
        })
    }

    pub fn from_rows(rows: &[Vec<f64>], labels: Vec<usize>, n_classes: usize) -> Result<Self> {
        let n_features = rows.first().map_or(0, Vec::len);
        if let Some(r) = rows.iter().find(|r| r.len() != n_features) {
            return Err(LearnerError::Dimension {
                what: "feature row",
                expected: n_features,
                found: r.len(),
            });
        }
        if rows.len() != labels.len() {
            return Err(LearnerError::Dimension {
                what: "labels",
                expected: rows.len(),
                found: labels.len(),
            });
        }
        Self::new(rows.concat(), labels, n_features.max(1), n_classes)
    }

    /// An empty dataset with the given schema.
    pub fn empty(n_features: usize, n_classes: usize) -> Result<Self> {
        Self::new(Vec::new(), Vec::new(), n_features, n_classes)
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn n_features(&self) -> usize {
        self.n_features
    }

    pub fn n_classes(&self) -> usize {
        self.n_classes
    }

    pub fn row(&self, i: usize) -> &[f64] {
        &self.features[i * self.n_features..(i + 1) * self.n_features]
    }

    pub fn label(&self, i: usize) -> usize {
        self.labels[i]
    }

    pub fn labels(&self) -> &[usize] {
        &self.labels
    }

    pub fn features(&self) -> &[f64] {
        &self.features
    }

    /// Copies the selected rows, in the given order.
    pub fn select(&self, indices: &[usize]) -> Dataset {
        let mut features = Vec::with_capacity(indices.len() * self.n_features);
        let mut labels = Vec::with_capacity(indices.len());
        for &i in indices {
            features.extend_from_slice(self.row(i));
            labels.push(self.labels[i]);
        }
        Dataset {
            n_features: self.n_features,
            n_classes: self.n_classes,
            features,
            labels,
        }
    }

    /// Same labels, replaced feature matrix.
    pub fn with_features(&self, features: Vec<f64>) -> Result<Dataset> {
        Dataset::new(
            features,
            self.labels.clone(),
            self.n_features,
            self.n_classes,
        )
    }

    /// Concatenates datasets sharing one schema.
    pub fn concat(parts: &[&Dataset]) -> Result<Dataset> {
        let first = parts.first().ok_or(LearnerError::EmptyInput("concat"))?;
        let mut features = Vec::new();
        let mut labels = Vec::new();
        for p in parts {
            if p.n_features != first.n_features || p.n_classes != first.n_classes {
                return Err(LearnerError::InvalidDataset(
                    "cannot concatenate datasets with different schemas".into(),
                ));
            }
            features.extend_from_slice(&p.features);
            labels.extend_from_slice(&p.labels);
        }
        Dataset::new(features, labels, first.n_features, first.n_classes)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case")]
pub enum Architecture {
    LinearSoftmax,
    Mlp { hidden: usize },
}

/// Everything needed to interpret a flat weight vector.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct ModelShape {
    pub arch: Architecture,
    pub n_features: usize,
    pub n_classes: usize,
}

impl ModelShape {
    pub fn linear(n_features: usize, n_classes: usize) -> Self {
        Self {
            arch: Architecture::LinearSoftmax,
            n_features,
            n_classes,
        }
    }

    pub fn mlp(n_features: usize, hidden: usize, n_classes: usize) -> Self {
        Self {
            arch: Architecture::Mlp { hidden },
            n_features,
            n_classes,
        }
    }

    pub fn param_count(&self) -> usize {
        let (d, c) = (self.n_features, self.n_classes);
        match self.arch {
            Architecture::LinearSoftmax => c * d + c,
            Architecture::Mlp { hidden: h } => h * d + h + c * h + c,
        }
    }

    fn validate(&self) -> Result<()> {
        let hidden_ok = match self.arch {
            Architecture::LinearSoftmax => true,
            Architecture::Mlp { hidden } => hidden > 0,
        };
        if self.n_features == 0 || self.n_classes == 0 || !hidden_ok {
            return Err(LearnerError::InvalidModel(format!(
                "degenerate shape {self:?}"
            )));
        }
        Ok(())
    }
}

/// Flat classifier parameters plus their shape descriptor.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ModelParams {
    shape: ModelShape,
    weights: Vec<f64>,
}

impl ModelParams {
    pub fn zeros(shape: ModelShape) -> Result<Self> {
        shape.validate()?;
        Ok(Self {
            weights: vec![0.0; shape.param_count()],
            shape,
        })
    }

    /// Uniform weights in `[-scale, scale]`.
    pub fn random(shape: ModelShape, seed: u64, scale: f64) -> Result<Self> {
        shape.validate()?;
        let mut rng = seed::rng(seed);
        let weights = (0..shape.param_count())
            .map(|_| rng.random_range(-1.0..=1.0) * scale)
            .collect();
        Self::from_weights(shape, weights)
    }

    pub fn from_weights(shape: ModelShape, weights: Vec<f64>) -> Result<Self> {
        shape.validate()?;
        if weights.len() != shape.param_count() {
            return Err(LearnerError::Dimension {
                what: "weight vector",
                expected: shape.param_count(),
                found: weights.len(),
            });
        }
        if weights.iter().any(|w| !w.is_finite()) {
            return Err(LearnerError::InvalidModel("non-finite weight".into()));
        }
        Ok(Self { shape, weights })
    }

    pub fn shape(&self) -> &ModelShape {
        &self.shape
    }

    pub fn weights(&self) -> &[f64] {
        &self.weights
    }

    pub fn len(&self) -> usize {
        self.weights.len()
    }

    pub fn is_empty(&self) -> bool {
        self.weights.is_empty()
    }

    /// Little-endian IEEE-754 encoding of the weight vector.
    pub fn weights_le_bytes(&self) -> Vec<u8> {
        self.weights.iter().flat_map(|w| w.to_le_bytes()).collect()
    }

    /// `self + delta`, elementwise.
    pub fn offset(&self, delta: &[f64]) -> Result<ModelParams> {
        if delta.len() != self.weights.len() {
            return Err(LearnerError::Dimension {
                what: "delta",
                expected: self.weights.len(),
                found: delta.len(),
            });
        }
        let weights = self.weights.iter().zip(delta).map(|(w, d)| w + d).collect();
        ModelParams::from_weights(self.shape, weights)
    }

    /// `self - base`, elementwise.
    pub fn difference(&self, base: &ModelParams) -> Result<Vec<f64>> {
        if base.shape != self.shape {
            return Err(LearnerError::InvalidModel("shape mismatch".into()));
        }
        Ok(self
            .weights
            .iter()
            .zip(&base.weights)
            .map(|(a, b)| a - b)
            .collect())
    }

    fn check_data(&self, data: &Dataset) -> Result<()> {
        if data.n_features != self.shape.n_features {
            return Err(LearnerError::Dimension {
                what: "feature width",
                expected: self.shape.n_features,
                found: data.n_features,
            });
        }
        if data.n_classes != self.shape.n_classes {
            return Err(LearnerError::Dimension {
                what: "class count",
                expected: self.shape.n_classes,
                found: data.n_classes,
            });
        }
        Ok(())
    }

    /// Class scores for one sample, written into `logits`; returns hidden
    /// activations for the MLP (empty for linear models).
    fn forward(&self, x: &[f64], logits: &mut [f64], hidden_buf: &mut Vec<f64>) {
        let (d, c) = (self.shape.n_features, self.shape.n_classes);
        let w = &self.weights;
        match self.shape.arch {
            Architecture::LinearSoftmax => {
                let bias = &w[c * d..];
                for (k, z) in logits.iter_mut().enumerate() {
                    *z = bias[k] + dot(&w[k * d..(k + 1) * d], x);
                }
            }
            Architecture::Mlp { hidden: h } => {
                let b1 = &w[h * d..h * d + h];
                let w2_off = h * d + h;
                let b2 = &w[w2_off + c * h..];
                hidden_buf.clear();
                hidden_buf.extend((0..h).map(|j| (b1[j] + dot(&w[j * d..(j + 1) * d], x)).tanh()));
                for (k, z) in logits.iter_mut().enumerate() {
                    *z = b2[k] + dot(&w[w2_off + k * h..w2_off + (k + 1) * h], hidden_buf);
                }
            }
        }
    }

    /// Predicted class; ties go to the lowest class id.
    pub fn predict(&self, x: &[f64]) -> usize {
        let mut logits = vec![0.0; self.shape.n_classes];
        let mut hidden = Vec::new();
        self.forward(x, &mut logits, &mut hidden);
        argmax_lowest(&logits)
    }

    /// Sums loss and gradient over `rows`; gradient is accumulated into `grad`.
    fn accumulate(&self, data: &Dataset, rows: &[usize], grad: Option<&mut [f64]>) -> f64 {
        let (d, c) = (self.shape.n_features, self.shape.n_classes);
        let mut logits = vec![0.0; c];
        let mut hidden = Vec::new();
        let mut dz = vec![0.0; c];
        let mut loss = 0.0;
        let mut grad = grad;
        for &i in rows {
            let x = data.row(i);
            let y = data.labels[i];
            self.forward(x, &mut logits, &mut hidden);
            let lse = log_sum_exp(&logits);
            loss += lse - logits[y];
            let Some(g) = grad.as_deref_mut() else {
                continue;
            };
            for (k, dzk) in dz.iter_mut().enumerate() {
                *dzk = (logits[k] - lse).exp() - if k == y { 1.0 } else { 0.0 };
            }
            match self.shape.arch {
                Architecture::LinearSoftmax => {
                    for k in 0..c {
                        axpy(dz[k], x, &mut g[k * d..(k + 1) * d]);
                        g[c * d + k] += dz[k];
                    }
                }
                Architecture::Mlp { hidden: h } => {
                    let w2_off = h * d + h;
                    for k in 0..c {
                        axpy(dz[k], &hidden, &mut g[w2_off + k * h..w2_off + (k + 1) * h]);
                        g[w2_off + c * h + k] += dz[k];
                    }
                    for j in 0..h {
                        let back: f64 = (0..c)
                            .map(|k| self.weights[w2_off + k * h + j] * dz[k])
                            .sum();
                        let da = back * (1.0 - hidden[j] * hidden[j]);
                        axpy(da, x, &mut g[j * d..(j + 1) * d]);
                        g[h * d + j] += da;
                    }
                }
            }
        }
        loss
    }
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

fn axpy(alpha: f64, x: &[f64], y: &mut [f64]) {
    for (yi, xi) in y.iter_mut().zip(x) {
        *yi += alpha * xi;
    }
}

fn log_sum_exp(z: &[f64]) -> f64 {
    let max = z.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    max + z.iter().map(|v| (v - max).exp()).sum::<f64>().ln()
}

fn argmax_lowest(z: &[f64]) -> usize {
    let mut best = 0;
    for (k, &v) in z.iter().enumerate().skip(1) {
        if v > z[best] {
            best = k;
        }
    }
    best
}

/// Local training hyperparameters.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Hyperparams {
    pub learning_rate: f64,
    pub batch_size: usize,
    pub local_epochs: usize,
    pub seed: u64,
}

impl Hyperparams {
    pub fn validate(&self) -> Result<()> {
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return Err(LearnerError::InvalidHyperparams(format!(
                "learning rate must be positive, got {}",
                self.learning_rate
            )));
        }
        if self.batch_size == 0 {
            return Err(LearnerError::InvalidHyperparams(
                "batch size must be at least 1".into(),
            ));
        }
        Ok(())
    }

    pub fn with_seed(self, seed: u64) -> Self {
        Self { seed, ..self }
    }
}

/// Test-set accuracy in `[0, 1]`.
#[derive(Clone, Copy, Debug, PartialEq, PartialOrd, Serialize, Deserialize)]
pub struct UtilityScore(f64);

impl UtilityScore {
    pub fn new(value: f64) -> Option<Self> {
        (0.0..=1.0).contains(&value).then_some(Self(value))
    }

    pub fn value(self) -> f64 {
        self.0
    }
}

/// Mean cross-entropy of `params` over `batch`.
pub fn loss(params: &ModelParams, batch: &Dataset) -> Result<f64> {
    params.check_data(batch)?;
    if batch.is_empty() {
        return Err(LearnerError::EmptyInput("loss batch"));
    }
    let rows: Vec<usize> = (0..batch.len()).collect();
    Ok(params.accumulate(batch, &rows, None) / batch.len() as f64)
}

/// Analytic gradient of [`loss`] with respect to the flat weights.
pub fn gradient(params: &ModelParams, batch: &Dataset) -> Result<Vec<f64>> {
    params.check_data(batch)?;
    if batch.is_empty() {
        return Err(LearnerError::EmptyInput("gradient batch"));
    }
    let rows: Vec<usize> = (0..batch.len()).collect();
    let mut g = vec![0.0; params.len()];
    params.accumulate(batch, &rows, Some(&mut g));
    let scale = 1.0 / batch.len() as f64;
    g.iter_mut().for_each(|v| *v *= scale);
    Ok(g)
}

/// `E` epochs of mini-batch SGD.  Each epoch reshuffles the sample order
/// with a generator seeded by `h.seed`; the final short batch is kept.
pub fn local_train(init: &ModelParams, data: &Dataset, h: &Hyperparams) -> Result<ModelParams> {
    h.validate()?;
    init.check_data(data)?;
    if data.is_empty() {
        return Err(LearnerError::EmptyInput("local training data"));
    }
    let mut model = init.clone();
    let mut order: Vec<usize> = (0..data.len()).collect();
    let mut rng = seed::rng(h.seed);
    let mut grad = vec![0.0; model.len()];
    for _ in 0..h.local_epochs {
        order.shuffle(&mut rng);
        for batch in order.chunks(h.batch_size) {
            grad.iter_mut().for_each(|g| *g = 0.0);
            model.accumulate(data, batch, Some(&mut grad));
            let step = h.learning_rate / batch.len() as f64;
            for (w, g) in model.weights.iter_mut().zip(&grad) {
                *w -= step * g;
            }
        }
    }
    if model.weights.iter().any(|w| !w.is_finite()) {
        return Err(LearnerError::InvalidModel(
            "training diverged to non-finite weights".into(),
        ));
    }
    Ok(model)
}

/// Fraction of test samples whose argmax prediction matches the label.
pub fn utility(params: &ModelParams, test: &Dataset) -> Result<UtilityScore> {
    params.check_data(test)?;
    if test.is_empty() {
        return Err(LearnerError::EmptyInput("test set"));
    }
    let mut logits = vec![0.0; params.shape.n_classes];
    let mut hidden = Vec::new();
    let correct = (0..test.len())
        .filter(|&i| {
            params.forward(test.row(i), &mut logits, &mut hidden);
            argmax_lowest(&logits) == test.labels[i]
        })
        .count();
    Ok(UtilityScore(correct as f64 / test.len() as f64))
}
