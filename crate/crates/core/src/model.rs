//! C-class linear classifier with closed-form per-sample gradients.
//!
//! The model is a single fully connected layer with a softmax head. The bias
//! is folded into the weight matrix as an appended constant-1 feature, so the
//! whole parameter set is one `classes x (features + 1)` matrix and a
//! per-sample gradient is a single flat vector that can be clipped as one.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// One labelled sample with a sensitive-group attribute.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Sample {
    pub features: Vec<f64>,
    /// Class label in `0..classes`.
    pub label: usize,
    /// Sensitive group in `0..groups`.
    pub sensitive: usize,
}

/// A dataset with fixed feature dimension and label/group cardinalities.
///
/// `classes` and `groups` are run-level constants: a client whose local data
/// happens to miss a group still carries the global cardinalities.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Dataset {
    pub samples: Vec<Sample>,
    pub features: usize,
    pub classes: usize,
    pub groups: usize,
}

impl Dataset {
    pub fn new(samples: Vec<Sample>, features: usize, classes: usize, groups: usize) -> Result<Self> {
        for (i, s) in samples.iter().enumerate() {
            if s.features.len() != features {
                return Err(Error::Shape {
                    expected: format!("{features} features"),
                    got: format!("{} features at sample {i}", s.features.len()),
                });
            }
            if s.label >= classes {
                return Err(Error::Domain(format!(
                    "label {} out of range 0..{classes} at sample {i}",
                    s.label
                )));
            }
            if s.sensitive >= groups {
                return Err(Error::Domain(format!(
                    "sensitive value {} out of range 0..{groups} at sample {i}",
                    s.sensitive
                )));
            }
        }
        Ok(Self {
            samples,
            features,
            classes,
            groups,
        })
    }

    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    /// View of the rows at `indices` as a dataset with the same shape
    /// metadata (a batch can miss classes or groups the parent has).
    pub fn subset(&self, indices: &[usize]) -> Self {
        Self {
            samples: indices.iter().map(|&i| self.samples[i].clone()).collect(),
            features: self.features,
            classes: self.classes,
            groups: self.groups,
        }
    }
}

/// Linear classifier: weight matrix of shape `classes x (features + 1)`,
/// last column is the bias.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LinearModel {
    pub classes: usize,
    pub features: usize,
    /// Row-major `classes x (features + 1)`.
    pub weights: Vec<f64>,
}

impl LinearModel {
    pub fn zeros(classes: usize, features: usize) -> Self {
        Self {
            classes,
            features,
            weights: vec![0.0; classes * (features + 1)],
        }
    }

    /// Seeded initialization, entries uniform in [-0.01, 0.01].
    pub fn init<R: Rng>(classes: usize, features: usize, rng: &mut R) -> Self {
        let weights = (0..classes * (features + 1))
            .map(|_| rng.gen_range(-0.01..=0.01))
            .collect();
        Self {
            classes,
            features,
            weights,
        }
    }

    pub fn cols(&self) -> usize {
        self.features + 1
    }

    pub fn param_len(&self) -> usize {
        self.weights.len()
    }

    pub fn weight(&self, class: usize, col: usize) -> f64 {
        self.weights[class * self.cols() + col]
    }

    fn check_sample(&self, sample: &Sample) -> Result<()> {
        if sample.features.len() != self.features {
            return Err(Error::Shape {
                expected: format!("{} features", self.features),
                got: format!("{} features", sample.features.len()),
            });
        }
        Ok(())
    }

    /// Class logits `W [x; 1]`.
    pub fn logits(&self, sample: &Sample) -> Result<Vec<f64>> {
        self.check_sample(sample)?;
        let cols = self.cols();
        let mut out = vec![0.0; self.classes];
        for (c, o) in out.iter_mut().enumerate() {
            let row = &self.weights[c * cols..(c + 1) * cols];
            let mut acc = row[self.features]; // bias
            for (w, x) in row[..self.features].iter().zip(&sample.features) {
                acc += w * x;
            }
            *o = acc;
        }
        Ok(out)
    }

    /// Softmax class probabilities.
    pub fn forward(&self, sample: &Sample) -> Result<Vec<f64>> {
        let logits = self.logits(sample)?;
        Ok(softmax(&logits))
    }

    /// Argmax class; ties broken toward the smaller class index.
    pub fn predict(&self, sample: &Sample) -> Result<usize> {
        let probs = self.forward(sample)?;
        Ok(argmax(&probs))
    }

    /// Per-sample gradient of the cross-entropy loss, flattened to match
    /// `weights`: `(softmax(logits) - onehot(y)) outer [x; 1]`.
    pub fn per_sample_loss_grad(&self, sample: &Sample) -> Result<Vec<f64>> {
        let probs = self.forward(sample)?;
        let mut grad = vec![0.0; self.param_len()];
        let cols = self.cols();
        for c in 0..self.classes {
            let coeff = probs[c] - if c == sample.label { 1.0 } else { 0.0 };
            let row = &mut grad[c * cols..(c + 1) * cols];
            for (g, x) in row[..self.features].iter_mut().zip(&sample.features) {
                *g = coeff * x;
            }
            row[self.features] = coeff;
        }
        Ok(grad)
    }

    /// Per-sample cross-entropy loss `-log p_y`.
    pub fn per_sample_loss(&self, sample: &Sample) -> Result<f64> {
        let probs = self.forward(sample)?;
        Ok(-probs[sample.label].max(f64::MIN_POSITIVE).ln())
    }

    /// Gradient of `p[target_class]` w.r.t. the weights, flattened.
    /// Row c is `p_t (delta_{c,t} - p_c) [x; 1]`.
    pub fn per_sample_prob_grad(&self, sample: &Sample, target_class: usize) -> Result<Vec<f64>> {
        let probs = self.forward(sample)?;
        let pt = probs[target_class];
        let mut grad = vec![0.0; self.param_len()];
        let cols = self.cols();
        for c in 0..self.classes {
            let coeff = pt * (if c == target_class { 1.0 } else { 0.0 } - probs[c]);
            let row = &mut grad[c * cols..(c + 1) * cols];
            for (g, x) in row[..self.features].iter_mut().zip(&sample.features) {
                *g = coeff * x;
            }
            row[self.features] = coeff;
        }
        Ok(grad)
    }

    /// Fraction of correctly predicted samples.
    pub fn accuracy(&self, dataset: &Dataset) -> Result<f64> {
        if dataset.is_empty() {
            return Err(Error::EmptyDataset);
        }
        let mut correct = 0usize;
        for s in &dataset.samples {
            if self.predict(s)? == s.label {
                correct += 1;
            }
        }
        Ok(correct as f64 / dataset.len() as f64)
    }
}

/// Numerically stable softmax.
pub fn softmax(logits: &[f64]) -> Vec<f64> {
    let max = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let exps: Vec<f64> = logits.iter().map(|&l| (l - max).exp()).collect();
    let sum: f64 = exps.iter().sum();
    exps.iter().map(|e| e / sum).collect()
}

/// Index of the maximum entry; ties go to the smaller index.
pub fn argmax(values: &[f64]) -> usize {
    let mut best = 0;
    for (i, &v) in values.iter().enumerate().skip(1) {
        if v > values[best] {
            best = i;
        }
    }
    best
}
