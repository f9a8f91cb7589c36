//! Seeded experiment orchestration: per seed — build data, calibrate
//! noise, execute the federated rounds — then write the run directory
//! (resolved config, sorted JSONL round log, summary).

use std::collections::BTreeMap;
use std::io::Write;
use std::path::{Path, PathBuf};

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::client::{local_train, share_totals, ClientState, LambdaMode, TrainSetup};
use crate::data::{load_csv, partition, synth_generate};
use crate::error::{Error, Result};
use crate::fairness::{dpl_hard, FairnessController, ProbabilityTable};
use crate::harness::config::{DatasetSource, ExperimentConfig, FairnessConfig, PrivacyConfig};
use crate::model::{Dataset, LinearModel};
use crate::privacy::{calibrate_sigma, default_alphas, AccountantState, NoisePlan};
use crate::rng::{client_rng, stream_rng, Stream};
use crate::server::{
    aggregate_and_table, complete_statistics, fedavg, global_disparity, local_disparity_summary,
    sample_clients, RoundReport,
};

/// Worst-case release counts used for calibration: every client is
/// assumed to participate in every round. Streams 1-2 release once per
/// batch (`ceil(1/q)` batches per epoch); the statistics stream releases
/// once per round plus the run-start totals.
pub fn worst_case_steps(rounds: usize, epochs: usize, batch_rate: f64) -> (u64, u64) {
    let per_epoch = (1.0 / batch_rate).ceil() as u64;
    let grad = rounds as u64 * epochs as u64 * per_epoch;
    let stats = rounds as u64 + 1;
    (grad, stats)
}

/// Calibrate the three noise multipliers to the split epsilon targets at
/// the worst-case step counts. The lambda stream is only calibrated when
/// the controller actually draws lambda noise; otherwise its sigma is the
/// inert 0 and only its delta share is reserved.
pub fn calibrate_plan(
    privacy: &PrivacyConfig,
    tunable: bool,
    batch_rate: f64,
    rounds: usize,
    epochs: usize,
    delta: f64,
) -> Result<NoisePlan> {
    let alphas = default_alphas();
    let (grad_steps, stats_steps) = worst_case_steps(rounds, epochs, batch_rate);
    let d_share = delta / 3.0;
    let delta_split = (d_share, d_share, delta - 2.0 * d_share);
    let eps_targets = (
        privacy.eps_split[0] * privacy.epsilon,
        privacy.eps_split[1] * privacy.epsilon,
        privacy.eps_split[2] * privacy.epsilon,
    );
    let sigma1 = calibrate_sigma(batch_rate, grad_steps, delta_split.0, eps_targets.0, &alphas)?;
    let sigma2 = if tunable {
        calibrate_sigma(batch_rate, grad_steps, delta_split.1, eps_targets.1, &alphas)?
    } else {
        0.0
    };
    let sigma3 = calibrate_sigma(1.0, stats_steps, delta_split.2, eps_targets.2, &alphas)?;
    let plan = NoisePlan {
        sigma1,
        sigma2,
        sigma3,
        clip_bound: privacy.clip_bound,
        sampling_rate: batch_rate,
        eps_targets,
        delta_split,
    };
    plan.validate()?;
    Ok(plan)
}

/// Everything one seed produced, kept in memory so callers (run writer,
/// sweep scorer, acceptance checks) can slice it without re-reading
/// files.
#[derive(Debug, Clone)]
pub struct SeedRun {
    pub seed: u64,
    pub rows: Vec<RoundReport>,
    pub final_model: LinearModel,
    pub plan: Option<NoisePlan>,
    /// Run delta (configured override or max_k 1/n_k) when privacy is on.
    pub delta: Option<f64>,
    /// Worst-case spend at the end of the run.
    pub eps_spent: f64,
    /// Spend of the most-sampled client at its actual participation
    /// counts.
    pub realized_eps_max: Option<f64>,
    pub val_accuracy: Option<f64>,
    pub val_disparity: Option<f64>,
    pub test_accuracy: Option<f64>,
    pub test_disparity: Option<f64>,
}

/// Concatenate a set of client shards into one evaluation dataset.
pub fn pool_clients(parts: &[Dataset], ids: &[usize]) -> Option<Dataset> {
    let first = parts.get(*ids.first()?)?;
    let samples: Vec<_> = ids
        .iter()
        .flat_map(|&k| parts[k].samples.iter().cloned())
        .collect();
    Dataset::new(samples, first.features, first.classes, first.groups).ok()
}

fn eval_metrics(model: &LinearModel, data: Option<&Dataset>) -> (Option<f64>, Option<f64>) {
    let Some(data) = data else {
        return (None, None);
    };
    let accuracy = model.accuracy(data).ok();
    let disparity = match dpl_hard(model, data, None) {
        Ok((v, _)) => Some(v),
        Err(_) => None,
    };
    (accuracy, disparity)
}

/// Execute all rounds for one seed.
pub fn execute_seed(config: &ExperimentConfig, seed: u64) -> Result<SeedRun> {
    let fed = &config.federation;
    let data = match &config.dataset {
        DatasetSource::Synthetic(s) => synth_generate(&s.materialize(seed))?,
        DatasetSource::Csv { path, schema } => load_csv(path, schema)?.0,
    };
    let parts = partition(&data, &config.partition.materialize(fed.clients, seed))?;
    let split = config.split.assign(fed.clients)?;
    let test_pool = pool_clients(&parts, &split.test);
    let val_pool = pool_clients(&parts, &split.validation);

    let (plan, delta) = if config.privacy.enabled {
        let min_n = split
            .train
            .iter()
            .map(|&k| parts[k].len())
            .min()
            .expect("split.assign guarantees a train client");
        let delta = config.privacy.delta.unwrap_or(1.0 / min_n as f64);
        if !(delta > 0.0 && delta < 1.0) {
            return Err(Error::Config(format!("derived delta {delta} outside (0,1)")));
        }
        let plan = calibrate_plan(
            &config.privacy,
            config.fairness.is_tunable(),
            fed.batch_rate,
            fed.rounds,
            fed.epochs,
            delta,
        )?;
        (Some(plan), Some(delta))
    } else {
        (None, None)
    };
    let sigma3 = plan.as_ref().map_or(0.0, |p| p.sigma3);

    let (lambda_mode, controller) = match config.fairness {
        FairnessConfig::Off => (LambdaMode::Off, FairnessController::new(0.0, 0.0, 0.0)),
        FairnessConfig::Fixed { lambda } => {
            (LambdaMode::Fixed(lambda), FairnessController::new(0.0, 0.0, 0.0))
        }
        FairnessConfig::Tunable {
            target,
            rho,
            momentum,
        } => (LambdaMode::Tuned, FairnessController::new(momentum, rho, target)),
    };

    let mut states: Vec<ClientState> = split
        .train
        .iter()
        .map(|&k| ClientState::new(k, parts[k].clone(), controller.clone()))
        .collect();
    // Run-start release: every training client shares its noisy group
    // totals once; the server keeps them to complete per-round counts.
    let totals: BTreeMap<usize, Vec<f64>> = split
        .train
        .iter()
        .map(|&k| (k, share_totals(&parts[k], sigma3, seed, k)))
        .collect();

    let mut accountant = match &plan {
        Some(p) => {
            let mut a = AccountantState::new();
            a.add_stream("gradient", p.sampling_rate, p.sigma1, p.delta_split.0)?;
            a.add_stream("lambda", p.sampling_rate, p.sigma2, p.delta_split.1)?;
            a.add_stream("statistics", 1.0, p.sigma3, p.delta_split.2)?;
            a.record(2, 1); // the totals release above
            Some(a)
        }
        None => None,
    };
    let (batches_per_round, _) = worst_case_steps(1, fed.epochs, fed.batch_rate);

    let mut model = LinearModel::init(
        data.classes,
        data.features,
        &mut stream_rng(seed, Stream::ModelInit),
    );
    let mut p_table: Option<ProbabilityTable> = None;
    let mut participations: BTreeMap<usize, u64> = BTreeMap::new();
    let mut rows = Vec::with_capacity(fed.rounds);

    for round in 0..fed.rounds {
        let mut sampler = client_rng(seed, Stream::ClientSampling, 0, round as u64);
        let chosen = sample_clients(states.len(), fed.client_fraction, &mut sampler)?;
        for &pos in &chosen {
            *participations.entry(states[pos].id).or_insert(0) += 1;
        }

        let setup = TrainSetup {
            eta: fed.eta,
            epochs: fed.epochs,
            batch_rate: fed.batch_rate,
            lambda_mode,
            plan: plan.as_ref(),
            run_seed: seed,
        };
        // Per-client work is independent; chosen positions are distinct,
        // so split_at_mut-style mutable access is safe via one pass over
        // the state vector.
        let mut selected: Vec<&mut ClientState> = Vec::with_capacity(chosen.len());
        {
            let mut rest = &mut states[..];
            let mut offset = 0;
            for &pos in &chosen {
                let (_, tail) = rest.split_at_mut(pos - offset);
                let (head, tail) = tail.split_at_mut(1);
                selected.push(&mut head[0]);
                offset = pos + 1;
                rest = tail;
            }
        }
        let global = model.clone();
        let mut updates = selected
            .into_par_iter()
            .map(|state| local_train(state, &global, round, p_table.as_ref(), &setup))
            .collect::<Result<Vec<_>>>()?;
        updates.sort_by_key(|u| u.id);

        let entries: Vec<(&LinearModel, f64)> =
            updates.iter().map(|u| (&u.model, u.n as f64)).collect();
        model = fedavg(&entries)?;
        let n_total: f64 = updates.iter().map(|u| u.n as f64).sum();
        let accuracy = updates
            .iter()
            .map(|u| u.accuracy * u.n as f64 / n_total)
            .sum::<f64>();
        let lambda_mean =
            updates.iter().map(|u| u.lambda).sum::<f64>() / updates.len() as f64;

        let completed = updates
            .iter()
            .map(|u| complete_statistics(&u.shared, &totals[&u.id]))
            .collect::<Result<Vec<_>>>()?;
        let (pooled, table) = aggregate_and_table(&completed)?;
        let disparity = global_disparity(&pooled);
        p_table = Some(table.clone());

        let locals: Vec<f64> = updates.iter().filter_map(|u| u.local_dpl).collect();
        let (local_mean, local_sorted) = match local_disparity_summary(&locals) {
            Ok((m, s)) => (Some(m), s),
            Err(_) => (None, Vec::new()),
        };

        if let Some(a) = accountant.as_mut() {
            a.record(0, batches_per_round);
            if matches!(lambda_mode, LambdaMode::Tuned) {
                a.record(1, batches_per_round);
            }
            a.record(2, 1);
        }
        let eps_spent = match &accountant {
            Some(a) => a.report()?.eps_total,
            None => 0.0,
        };

        let (test_accuracy, test_disparity) = eval_metrics(&model, test_pool.as_ref());
        rows.push(RoundReport {
            seed,
            round,
            accuracy,
            global_disparity: disparity,
            local_disparities: local_sorted,
            local_disparity_mean: local_mean,
            lambda_mean,
            eps_spent,
            test_accuracy,
            test_global_disparity: test_disparity,
            p_table: table,
        });
    }

    let eps_spent = rows.last().map_or(0.0, |r| r.eps_spent);
    let realized_eps_max = match (&plan, &accountant) {
        (Some(p), Some(_)) => {
            let max_p = participations.values().copied().max().unwrap_or(0);
            let mut a = AccountantState::new();
            a.add_stream("gradient", p.sampling_rate, p.sigma1, p.delta_split.0)?;
            a.add_stream("lambda", p.sampling_rate, p.sigma2, p.delta_split.1)?;
            a.add_stream("statistics", 1.0, p.sigma3, p.delta_split.2)?;
            a.record(0, max_p * batches_per_round);
            if matches!(lambda_mode, LambdaMode::Tuned) {
                a.record(1, max_p * batches_per_round);
            }
            a.record(2, max_p + 1);
            Some(a.report()?.eps_total)
        }
        _ => None,
    };
    let (val_accuracy, val_disparity) = eval_metrics(&model, val_pool.as_ref());
    let (test_accuracy, test_disparity) = eval_metrics(&model, test_pool.as_ref());
    Ok(SeedRun {
        seed,
        rows,
        final_model: model,
        plan,
        delta,
        eps_spent,
        realized_eps_max,
        val_accuracy,
        val_disparity,
        test_accuracy,
        test_disparity,
    })
}

/// Mean, standard error of the mean, and the per-seed values behind
/// them. Seeds whose value is unavailable are skipped in the moments.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SummaryStat {
    pub mean: Option<f64>,
    pub stderr: Option<f64>,
    pub per_seed: Vec<Option<f64>>,
}

impl SummaryStat {
    pub fn from_values(per_seed: Vec<Option<f64>>) -> Self {
        let present: Vec<f64> = per_seed.iter().flatten().copied().collect();
        if present.is_empty() {
            return Self {
                mean: None,
                stderr: None,
                per_seed,
            };
        }
        let n = present.len() as f64;
        let mean = present.iter().sum::<f64>() / n;
        let stderr = if present.len() < 2 {
            0.0
        } else {
            let var = present.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1.0);
            (var / n).sqrt()
        };
        Self {
            mean: Some(mean),
            stderr: Some(stderr),
            per_seed,
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct FailedSeed {
    pub seed: u64,
    pub error: String,
}

/// Cross-seed digest written as `summary.json`.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Summary {
    pub seeds: Vec<u64>,
    pub failed_seeds: Vec<FailedSeed>,
    pub rounds: usize,
    /// Final-round metrics keyed by name.
    pub metrics: BTreeMap<String, SummaryStat>,
}

/// What `run` leaves behind in memory for callers that keep going (the
/// files are the durable artifact).
#[derive(Debug)]
pub struct RunOutput {
    pub dir: PathBuf,
    pub summary: Summary,
    pub seed_runs: Vec<SeedRun>,
}

fn build_summary(config: &ExperimentConfig, runs: &[SeedRun], failures: &[FailedSeed]) -> Summary {
    let field = |f: &dyn Fn(&SeedRun) -> Option<f64>| -> SummaryStat {
        SummaryStat::from_values(runs.iter().map(f).collect())
    };
    let last = |g: &dyn Fn(&RoundReport) -> Option<f64>| -> SummaryStat {
        SummaryStat::from_values(runs.iter().map(|r| r.rows.last().and_then(g)).collect())
    };
    let mut metrics = BTreeMap::new();
    metrics.insert("accuracy".into(), last(&|r| Some(r.accuracy)));
    metrics.insert("global_disparity".into(), last(&|r| r.global_disparity));
    metrics.insert(
        "local_disparity_mean".into(),
        last(&|r| r.local_disparity_mean),
    );
    metrics.insert("lambda_mean".into(), last(&|r| Some(r.lambda_mean)));
    metrics.insert("eps_spent".into(), last(&|r| Some(r.eps_spent)));
    metrics.insert("test_accuracy".into(), field(&|r| r.test_accuracy));
    metrics.insert("test_global_disparity".into(), field(&|r| r.test_disparity));
    metrics.insert("val_accuracy".into(), field(&|r| r.val_accuracy));
    metrics.insert("val_global_disparity".into(), field(&|r| r.val_disparity));
    metrics.insert("delta".into(), field(&|r| r.delta));
    metrics.insert("realized_eps_max".into(), field(&|r| r.realized_eps_max));
    Summary {
        seeds: runs.iter().map(|r| r.seed).collect(),
        failed_seeds: failures.to_vec(),
        rounds: config.federation.rounds,
        metrics,
    }
}

/// Run every seed, then write `config.json` (the resolved config),
/// `rounds.jsonl` (rows sorted by seed then round), and `summary.json`
/// into `out_dir`. A failing seed is recorded and skipped; the run
/// errors only when no seed succeeds.
pub fn run(config: &ExperimentConfig, out_dir: &Path) -> Result<RunOutput> {
    config.validate()?;
    std::fs::create_dir_all(out_dir)?;
    std::fs::write(
        out_dir.join("config.json"),
        serde_json::to_string_pretty(config).map_err(|e| Error::Config(e.to_string()))? + "\n",
    )?;
    if let DatasetSource::Csv { path, schema } = &config.dataset {
        // Report how string labels were coded, next to the run output.
        let (_, maps) = load_csv(path, schema)?;
        std::fs::write(
            out_dir.join("code_maps.json"),
            serde_json::to_string_pretty(&maps).map_err(|e| Error::Config(e.to_string()))? + "\n",
        )?;
    }

    let outcomes: Vec<(u64, Result<SeedRun>)> = config
        .seeds
        .par_iter()
        .map(|&seed| (seed, execute_seed(config, seed)))
        .collect();
    let mut runs = Vec::new();
    let mut failures = Vec::new();
    for (seed, outcome) in outcomes {
        match outcome {
            Ok(r) => runs.push(r),
            Err(e) => {
                eprintln!("seed {seed} failed: {e}");
                failures.push(FailedSeed {
                    seed,
                    error: e.to_string(),
                });
            }
        }
    }
    if runs.is_empty() {
        let detail = failures
            .first()
            .map(|f| f.error.clone())
            .unwrap_or_else(|| "no seeds configured".into());
        return Err(Error::Aggregation(format!("every seed failed; first error: {detail}")));
    }

    // Single writer; rows already grouped per seed, order the groups.
    runs.sort_by_key(|r| r.seed);
    let mut jsonl = std::fs::File::create(out_dir.join("rounds.jsonl"))?;
    for run in &runs {
        for row in &run.rows {
            let line = serde_json::to_string(row).map_err(|e| Error::Config(e.to_string()))?;
            jsonl.write_all(line.as_bytes())?;
            jsonl.write_all(b"\n")?;
        }
    }
    jsonl.flush()?;

    let summary = build_summary(config, &runs, &failures);
    std::fs::write(
        out_dir.join("summary.json"),
        serde_json::to_string_pretty(&summary).map_err(|e| Error::Config(e.to_string()))? + "\n",
    )?;

    if !failures.is_empty() {
        eprintln!(
            "{} of {} seeds failed; see summary.json",
            failures.len(),
            config.seeds.len()
        );
    }
    Ok(RunOutput {
        dir: out_dir.to_path_buf(),
        summary,
        seed_runs: runs,
    })
}
