//! Demographic disparity metrics and the tunable-lambda controller.
//!
//! The hard disparity of a batch is the max over (class y, group z) of
//! `P(Yhat=y | Z=z) - P(Yhat=y | Z!=z)` computed from prediction counts.
//! The regularizer needs a gradient, so the soft variant replaces the
//! indicator counts with softmax probabilities and treats the argmax cell
//! as fixed within a batch (subgradient convention).

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{Dataset, LinearModel};

/// Per-(group, predicted class) sample counts, the statistics exchanged
/// between clients and server. Entries are real because noisy versions
/// are allowed.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GroupCounts {
    /// `groups x classes`, entry `[z][y]` = number of samples with
    /// sensitive value z predicted as class y.
    pub counts: Vec<Vec<f64>>,
    /// Length `groups`; total samples per sensitive value.
    pub group_totals: Vec<f64>,
}

impl GroupCounts {
    pub fn zeros(groups: usize, classes: usize) -> Self {
        Self {
            counts: vec![vec![0.0; classes]; groups],
            group_totals: vec![0.0; groups],
        }
    }

    /// Noiseless counts of the model's predictions over a dataset.
    pub fn from_predictions(model: &LinearModel, dataset: &Dataset) -> Result<Self> {
        let mut out = Self::zeros(dataset.groups, dataset.classes);
        for s in &dataset.samples {
            let pred = model.predict(s)?;
            out.counts[s.sensitive][pred] += 1.0;
            out.group_totals[s.sensitive] += 1.0;
        }
        Ok(out)
    }

    pub fn groups(&self) -> usize {
        self.counts.len()
    }

    pub fn classes(&self) -> usize {
        self.counts.first().map_or(0, Vec::len)
    }
}

/// Server-computed table of `P(Yhat=y | Z=z)`. Rows for groups the server
/// could not observe are explicit `None` so clients can distinguish
/// "no information" from "probability zero".
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ProbabilityTable {
    pub rows: Vec<Option<Vec<f64>>>,
}

impl ProbabilityTable {
    pub fn row(&self, group: usize) -> Option<&[f64]> {
        self.rows.get(group).and_then(|r| r.as_deref())
    }
}

/// Mean probability of the complement of `z` taken from fallback rows,
/// pooling the available rows with equal weight.
fn fallback_complement(fallback: Option<&ProbabilityTable>, z: usize, y: usize) -> Option<f64> {
    let table = fallback?;
    let rows: Vec<&[f64]> = (0..table.rows.len())
        .filter(|&g| g != z)
        .filter_map(|g| table.row(g))
        .collect();
    if rows.is_empty() {
        None
    } else {
        Some(rows.iter().map(|r| r[y]).sum::<f64>() / rows.len() as f64)
    }
}

/// Disparity matrix from a raw `groups x classes` count (or rate-sum) matrix.
/// Entry `[z][y]` = P(Yhat=y|Z=z) - P(Yhat=y|Z!=z); the complement pools all
/// other groups. Negative entries (possible under noise) are clamped to zero
/// before normalization. A side with no mass falls back to the table; with
/// no table coverage the whole computation is a missing-group error.
pub fn gamma_from_counts(
    counts: &[Vec<f64>],
    fallback: Option<&ProbabilityTable>,
) -> Result<Vec<Vec<f64>>> {
    let groups = counts.len();
    let classes = counts.first().map_or(0, Vec::len);
    let clamped: Vec<Vec<f64>> = counts
        .iter()
        .map(|row| row.iter().map(|&c| c.max(0.0)).collect())
        .collect();
    let row_sums: Vec<f64> = clamped.iter().map(|row| row.iter().sum()).collect();

    let mut gamma = vec![vec![0.0; classes]; groups];
    for z in 0..groups {
        let own_sum = row_sums[z];
        let comp_sum: f64 = (0..groups).filter(|&g| g != z).map(|g| row_sums[g]).sum();
        for y in 0..classes {
            let own = if own_sum > 0.0 {
                clamped[z][y] / own_sum
            } else {
                fallback
                    .and_then(|t| t.row(z))
                    .map(|r| r[y])
                    .ok_or(Error::MissingGroup { group: z })?
            };
            let comp = if comp_sum > 0.0 {
                let num: f64 = (0..groups).filter(|&g| g != z).map(|g| clamped[g][y]).sum();
                num / comp_sum
            } else {
                // every complement group is empty; report the first one
                fallback_complement(fallback, z, y).ok_or(Error::MissingGroup {
                    group: (0..groups).find(|&g| g != z).unwrap_or(z),
                })?
            };
            gamma[z][y] = own - comp;
        }
    }
    Ok(gamma)
}

/// Hard disparity matrix of prediction counts; entry `[z][y]` = Gamma(y, z).
pub fn gamma_hard(
    counts: &GroupCounts,
    fallback: Option<&ProbabilityTable>,
) -> Result<Vec<Vec<f64>>> {
    gamma_from_counts(&counts.counts, fallback)
}

/// Max of a disparity matrix over (y, z), ties broken by the smallest
/// (y, z) pair in lexicographic order.
pub fn max_gamma(gamma: &[Vec<f64>]) -> (f64, (usize, usize)) {
    let classes = gamma.first().map_or(0, Vec::len);
    let mut best = f64::NEG_INFINITY;
    let mut arg = (0, 0);
    for y in 0..classes {
        for (z, row) in gamma.iter().enumerate() {
            if row[y] > best {
                best = row[y];
                arg = (y, z);
            }
        }
    }
    (best, arg)
}

/// Hard demographic parity loss of a batch: value and (y, z) argmax.
pub fn dpl_hard(
    model: &LinearModel,
    batch: &Dataset,
    fallback: Option<&ProbabilityTable>,
) -> Result<(f64, (usize, usize))> {
    if batch.is_empty() {
        return Err(Error::EmptyDataset);
    }
    let counts = GroupCounts::from_predictions(model, batch)?;
    let gamma = gamma_hard(&counts, fallback)?;
    Ok(max_gamma(&gamma))
}

/// Hard disparity computed directly from (possibly pooled, possibly noisy)
/// counts without a model pass.
pub fn dpl_from_counts(
    counts: &GroupCounts,
    fallback: Option<&ProbabilityTable>,
) -> Result<(f64, (usize, usize))> {
    let gamma = gamma_hard(counts, fallback)?;
    Ok(max_gamma(&gamma))
}

/// Soft disparity of a batch together with its per-sample gradients.
#[derive(Debug, Clone)]
pub struct SoftDpl {
    pub value: f64,
    /// (y, z) cell realizing the max of the soft disparity.
    pub argmax: (usize, usize),
    /// One flat gradient per batch sample, aligned with `batch.samples`.
    pub per_sample_grads: Vec<Vec<f64>>,
}

/// Soft demographic parity loss: group rates are means of softmax
/// probabilities instead of indicator counts, and the per-sample gradients
/// are taken with the argmax cell held fixed. Samples of a group absent from
/// the batch contribute nothing; the fallback supplies only the scalar
/// probability, which has zero gradient.
pub fn dpl_soft(
    model: &LinearModel,
    batch: &Dataset,
    fallback: Option<&ProbabilityTable>,
) -> Result<SoftDpl> {
    if batch.is_empty() {
        return Err(Error::EmptyDataset);
    }
    let groups = batch.groups;
    let classes = batch.classes;
    let probs: Vec<Vec<f64>> = batch
        .samples
        .iter()
        .map(|s| model.forward(s))
        .collect::<Result<_>>()?;

    // soft analogue of the count matrix: sums of probabilities per group
    let mut soft_sums = vec![vec![0.0; classes]; groups];
    let mut group_sizes = vec![0.0f64; groups];
    for (s, p) in batch.samples.iter().zip(&probs) {
        for y in 0..classes {
            soft_sums[s.sensitive][y] += p[y];
        }
        group_sizes[s.sensitive] += 1.0;
    }

    let gamma = gamma_from_counts(&soft_sums, fallback)?;
    let (value, (y_star, z_star)) = max_gamma(&gamma);

    let n_own = group_sizes[z_star];
    let n_comp: f64 = (0..groups)
        .filter(|&g| g != z_star)
        .map(|g| group_sizes[g])
        .sum();

    let mut per_sample_grads = Vec::with_capacity(batch.len());
    for s in &batch.samples {
        let coeff = if s.sensitive == z_star {
            1.0 / n_own
        } else {
            -1.0 / n_comp
        };
        let mut g = model.per_sample_prob_grad(s, y_star)?;
        for gi in &mut g {
            *gi *= coeff;
        }
        per_sample_grads.push(g);
    }
    Ok(SoftDpl {
        value,
        argmax: (y_star, z_star),
        per_sample_grads,
    })
}

/// The lambda controller driving the mix between loss and disparity
/// gradients toward the target disparity T.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FairnessController {
    pub lambda: f64,
    pub velocity: f64,
    pub momentum: f64,
    /// Update step size.
    pub rho: f64,
    /// Target disparity T.
    pub target: f64,
}

impl FairnessController {
    pub fn new(momentum: f64, rho: f64, target: f64) -> Self {
        Self {
            lambda: 0.0,
            velocity: 0.0,
            momentum,
            rho,
            target,
        }
    }

    /// Round-start lambda: 0 at round 0 or when the train-set disparity
    /// already meets the target, 1 otherwise. Resets the velocity.
    pub fn lambda_init(
        &mut self,
        model: &LinearModel,
        train_set: &Dataset,
        round: usize,
        fallback: Option<&ProbabilityTable>,
    ) -> Result<f64> {
        self.velocity = 0.0;
        self.lambda = if round == 0 {
            0.0
        } else {
            let (dpl, _) = dpl_hard(model, train_set, fallback)?;
            if self.target - dpl >= 0.0 {
                0.0
            } else {
                1.0
            }
        };
        Ok(self.lambda)
    }

    /// One controller step from an observed (noisy) batch disparity:
    /// delta = T - (dpl + noise), velocity accumulates with momentum and
    /// lambda moves against the velocity, clamped to [0, 1].
    pub fn lambda_update(&mut self, batch_dpl: f64, noise: f64) {
        let delta = self.target - (batch_dpl + noise);
        self.velocity = self.momentum * self.velocity + delta;
        self.lambda = (self.lambda - self.rho * self.velocity).clamp(0.0, 1.0);
    }
}
