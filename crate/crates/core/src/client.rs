//! Client-side round logic: Poisson-batched DP-SGD over the combined
//! loss/disparity gradient, per-batch lambda controller updates, and the
//! noisy prediction statistics returned to the server.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::fairness::{dpl_hard, dpl_soft, FairnessController, GroupCounts, ProbabilityTable};
use crate::model::{Dataset, LinearModel};
use crate::privacy::{clip, gaussian_noise, gaussianize, NoisePlan};
use crate::rng::{client_rng, Stream};

/// How the loss/disparity mixing weight is driven during local training.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub enum LambdaMode {
    /// No regularizer: plain (possibly private) SGD.
    Off,
    /// Constant lambda for the whole run.
    Fixed(f64),
    /// Controller-tuned toward the target disparity.
    Tuned,
}

/// One client's fixed data plus the controller state that persists
/// across rounds.
#[derive(Debug, Clone)]
pub struct ClientState {
    pub id: usize,
    pub data: Dataset,
    pub controller: FairnessController,
}

impl ClientState {
    pub fn new(id: usize, data: Dataset, controller: FairnessController) -> Self {
        Self {
            id,
            data,
            controller,
        }
    }
}

/// Statistics wire format: noisy counts for predicted classes `1..C` per
/// group. The class-0 column is deliberately absent; the server
/// reconstructs it from the group totals shared at run start.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SharedCounts {
    /// `groups x (classes - 1)`, entry `[z][y-1]` = count of (Z=z, Yhat=y).
    pub tail: Vec<Vec<f64>>,
}

/// Everything a client sends back after one round of local training.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClientUpdate {
    pub id: usize,
    /// Local dataset size n_k, the aggregation weight.
    pub n: usize,
    pub model: LinearModel,
    /// Train accuracy of the updated local model.
    pub accuracy: f64,
    /// Final lambda after the round's controller updates.
    pub lambda: f64,
    /// Hard local disparity of the updated model; absent when a group is
    /// missing and no fallback covers it.
    pub local_dpl: Option<f64>,
    pub shared: SharedCounts,
}

/// Round-invariant training parameters handed to every client.
#[derive(Debug, Clone, Copy)]
pub struct TrainSetup<'a> {
    /// Learning rate.
    pub eta: f64,
    /// Local epochs E.
    pub epochs: usize,
    /// Poisson batch rate q.
    pub batch_rate: f64,
    pub lambda_mode: LambdaMode,
    /// Noise configuration; `None` disables clipping and noise entirely.
    pub plan: Option<&'a NoisePlan>,
    pub run_seed: u64,
}

/// Batch index sets for `epochs` local epochs: ceil(1/q) batches per
/// epoch, each sample entering each batch independently with probability
/// q. Batches may be empty; q=1 yields one full-dataset batch per epoch
/// without consuming randomness.
pub fn poisson_batches<R: Rng>(
    n: usize,
    q: f64,
    epochs: usize,
    rng: &mut R,
) -> Result<Vec<Vec<usize>>> {
    if !(q > 0.0 && q <= 1.0) {
        return Err(Error::Domain(format!("batch rate must lie in (0, 1], got {q}")));
    }
    let per_epoch = (1.0 / q).ceil() as usize;
    let mut batches = Vec::with_capacity(epochs * per_epoch);
    for _ in 0..epochs {
        for _ in 0..per_epoch {
            if q == 1.0 {
                batches.push((0..n).collect());
            } else {
                batches.push((0..n).filter(|_| rng.gen::<f64>() < q).collect());
            }
        }
    }
    Ok(batches)
}

/// Noiseless per-(group, predicted class) counts of the model over a
/// dataset, the omega statistics before privatization.
pub fn compute_statistics(model: &LinearModel, dataset: &Dataset) -> Result<GroupCounts> {
    if dataset.is_empty() {
        return Err(Error::EmptyDataset);
    }
    GroupCounts::from_predictions(model, dataset)
}

/// Privatized wire statistics: the classes `1..C` columns with
/// independent N(0, sigma3^2) noise per entry (sigma3=0 shares exact
/// counts).
pub fn share_statistics<R: Rng>(counts: &GroupCounts, sigma3: f64, rng: &mut R) -> SharedCounts {
    let tail = counts
        .counts
        .iter()
        .map(|row| row[1..].iter().map(|&c| c + gaussian_noise(sigma3, rng)).collect())
        .collect();
    SharedCounts { tail }
}

/// Per-group sample totals with N(0, sigma3^2) noise, released once at
/// run start so the server can complete the per-round partial counts.
pub fn share_totals(data: &Dataset, sigma3: f64, run_seed: u64, id: usize) -> Vec<f64> {
    let mut rng = client_rng(run_seed, Stream::StatsNoise, id as u64, u64::MAX);
    let mut totals = vec![0.0; data.groups];
    for s in &data.samples {
        totals[s.sensitive] += 1.0;
    }
    for t in totals.iter_mut() {
        *t += gaussian_noise(sigma3, &mut rng);
    }
    totals
}

/// One round of local training (Algorithm-1 client side).
///
/// Per batch: per-sample gradients are mixed as
/// `(1-lambda) * d(loss) + lambda * d(soft disparity)`, clipped to B,
/// summed, noised with sigma1*B per coordinate, and divided by the
/// expected lot size q*n_k; then the controller takes one step from the
/// soft disparity value plus N(0, sigma2^2) noise. Batches that cannot
/// evaluate the disparity (a group missing with no fallback) train on the
/// loss alone, as does the whole round when the round-start disparity
/// check itself cannot be computed.
pub fn local_train(
    state: &mut ClientState,
    global: &LinearModel,
    round: usize,
    p_table: Option<&ProbabilityTable>,
    setup: &TrainSetup,
) -> Result<ClientUpdate> {
    let data = &state.data;
    if data.is_empty() {
        return Err(Error::EmptyDataset);
    }
    if global.features != data.features || global.classes != data.classes {
        return Err(Error::Shape {
            expected: format!("{}x{} model", data.classes, data.features + 1),
            got: format!("{}x{}", global.classes, global.features + 1),
        });
    }
    let n = data.len();
    let mut model = global.clone();

    let (id, r) = (state.id as u64, round as u64);
    let mut batch_rng = client_rng(setup.run_seed, Stream::Batches, id, r);
    let mut grad_rng = client_rng(setup.run_seed, Stream::GradientNoise, id, r);
    let mut lambda_rng = client_rng(setup.run_seed, Stream::LambdaNoise, id, r);
    let mut stats_rng = client_rng(setup.run_seed, Stream::StatsNoise, id, r);

    let mut regularize = true;
    let mut lambda = match setup.lambda_mode {
        LambdaMode::Off => {
            regularize = false;
            0.0
        }
        LambdaMode::Fixed(v) => v.clamp(0.0, 1.0),
        LambdaMode::Tuned => {
            match state.controller.lambda_init(&model, data, round, p_table) {
                Ok(l) => l,
                Err(Error::MissingGroup { .. }) => {
                    regularize = false;
                    0.0
                }
                Err(e) => return Err(e),
            }
        }
    };

    let lot = setup.batch_rate * n as f64;
    for batch_idx in poisson_batches(n, setup.batch_rate, setup.epochs, &mut batch_rng)? {
        if batch_idx.is_empty() {
            // still an accounted release; nothing to update
            continue;
        }
        let batch = data.subset(&batch_idx);
        let mut grads: Vec<Vec<f64>> = batch
            .samples
            .iter()
            .map(|s| model.per_sample_loss_grad(s))
            .collect::<Result<_>>()?;

        let mut soft_value = None;
        if regularize {
            match dpl_soft(&model, &batch, p_table) {
                Ok(soft) => {
                    for (g, d) in grads.iter_mut().zip(&soft.per_sample_grads) {
                        for (gi, di) in g.iter_mut().zip(d) {
                            *gi = (1.0 - lambda) * *gi + lambda * di;
                        }
                    }
                    soft_value = Some(soft.value);
                }
                Err(Error::MissingGroup { .. }) => {} // loss-only batch
                Err(e) => return Err(e),
            }
        }

        let mut summed = vec![0.0; model.param_len()];
        for g in grads.iter_mut() {
            if let Some(plan) = setup.plan {
                clip(g, plan.clip_bound)?;
                debug_assert!(
                    g.iter().map(|x| x * x).sum::<f64>().sqrt()
                        <= plan.clip_bound * (1.0 + 1e-12)
                );
            }
            for (a, b) in summed.iter_mut().zip(g.iter()) {
                *a += b;
            }
        }
        if let Some(plan) = setup.plan {
            gaussianize(&mut summed, plan.sigma1 * plan.clip_bound, &mut grad_rng);
        }
        for (w, g) in model.weights.iter_mut().zip(&summed) {
            *w -= setup.eta * g / lot;
        }

        // controller step, with the lambda used above unchanged until now
        if let (LambdaMode::Tuned, Some(value)) = (setup.lambda_mode, soft_value) {
            let noise = match setup.plan {
                Some(plan) => gaussian_noise(plan.sigma2, &mut lambda_rng),
                None => 0.0,
            };
            state.controller.lambda_update(value, noise);
            lambda = state.controller.lambda;
        }
    }

    let accuracy = model.accuracy(data)?;
    let local_dpl = match dpl_hard(&model, data, p_table) {
        Ok((v, _)) => Some(v),
        Err(Error::MissingGroup { .. }) => None,
        Err(e) => return Err(e),
    };
    let stats = compute_statistics(&model, data)?;
    let sigma3 = setup.plan.map_or(0.0, |p| p.sigma3);
    let shared = share_statistics(&stats, sigma3, &mut stats_rng);
    Ok(ClientUpdate {
        id: state.id,
        n,
        model,
        accuracy,
        lambda,
        local_dpl,
        shared,
    })
}
