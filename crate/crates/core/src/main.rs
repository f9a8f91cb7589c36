//! Command-line front end: seeded experiment runs, hyperparameter
//! sweeps, noise calibration, synthetic data generation, and report
//! emission.

use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use fedfair::data::synth_generate;
use fedfair::error::{Error, Result};
use fedfair::harness::sweep::write_sweep_artifacts;
use fedfair::harness::{
    calibrate_plan, report, run, sweep, ExperimentConfig, PrivacyConfig, SweepConfig,
    SyntheticConfig,
};
use fedfair::privacy::{default_alphas, AccountantState};

#[derive(Parser)]
#[command(
    name = "fedfair",
    about = "Deterministic federated-learning simulator with differentially private, fairness-regularized training",
    version
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct CommonRunArgs {
    /// Experiment config (JSON).
    #[arg(long)]
    config: PathBuf,
    /// Output directory for run artifacts.
    #[arg(long)]
    out: PathBuf,
    /// Override the config's seed list (comma-separated).
    #[arg(long, value_delimiter = ',')]
    seed: Option<Vec<u64>>,
    /// Worker thread cap (default: all cores).
    #[arg(long)]
    threads: Option<usize>,
}

#[derive(Subcommand)]
enum Command {
    /// Draw a synthetic dataset and write it as CSV.
    GenData {
        /// Synthetic spec (JSON: n, positive_rate, ...).
        #[arg(long)]
        config: PathBuf,
        /// Output CSV path.
        #[arg(long)]
        out: PathBuf,
        /// Generator seed.
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
    /// Execute the configured experiment over its seeds.
    Run {
        #[command(flatten)]
        common: CommonRunArgs,
    },
    /// Random hyperparameter search scored on validation clients.
    Sweep {
        #[command(flatten)]
        common: CommonRunArgs,
        /// Search-space config (JSON).
        #[arg(long)]
        sweep: PathBuf,
    },
    /// Print the calibrated noise multipliers for a budget.
    Calibrate {
        /// Total epsilon target.
        #[arg(long)]
        eps: f64,
        /// Total delta.
        #[arg(long)]
        delta: f64,
        /// Poisson batch rate q.
        #[arg(long, default_value_t = 0.1)]
        q: f64,
        /// Federated rounds R.
        #[arg(long, default_value_t = 30)]
        rounds: usize,
        /// Local epochs E.
        #[arg(long, default_value_t = 1)]
        epochs: usize,
        /// Epsilon split across gradient,lambda,statistics streams.
        #[arg(long, value_delimiter = ',', num_args = 3, default_values_t = [0.8, 0.1, 0.1])]
        split: Vec<f64>,
    },
    /// Emit CSV tables from a finished run directory.
    Report {
        /// Run directory containing rounds.jsonl.
        #[arg(long)]
        run: PathBuf,
    },
}

fn init_threads(threads: Option<usize>) -> Result<()> {
    if let Some(n) = threads {
        if n == 0 {
            return Err(Error::Config("threads must be at least 1".into()));
        }
        rayon::ThreadPoolBuilder::new()
            .num_threads(n)
            .build_global()
            .map_err(|e| Error::Config(format!("thread pool: {e}")))?;
    }
    Ok(())
}

fn load_config(common: &CommonRunArgs) -> Result<ExperimentConfig> {
    let mut config = ExperimentConfig::from_path(&common.config)?;
    if let Some(seeds) = &common.seed {
        if seeds.is_empty() {
            return Err(Error::Config("--seed list must be non-empty".into()));
        }
        config.seeds = seeds.clone();
    }
    Ok(config)
}

fn cmd_gen_data(config: &PathBuf, out: &PathBuf, seed: u64) -> Result<()> {
    let text = std::fs::read_to_string(config)
        .map_err(|e| Error::Config(format!("cannot read {}: {e}", config.display())))?;
    let spec: SyntheticConfig = serde_json::from_str(&text)
        .map_err(|e| Error::Config(format!("{}: {e}", config.display())))?;
    let data = synth_generate(&spec.materialize(seed))?;
    if let Some(parent) = out.parent().filter(|p| !p.as_os_str().is_empty()) {
        std::fs::create_dir_all(parent)?;
    }
    let mut w = csv::Writer::from_path(out).map_err(|e| Error::Config(e.to_string()))?;
    let io_err = |e: csv::Error| Error::Config(e.to_string());
    let mut header: Vec<String> = (0..data.features).map(|i| format!("f{i}")).collect();
    header.push("label".into());
    header.push("sensitive".into());
    w.write_record(&header).map_err(io_err)?;
    for s in &data.samples {
        let mut row: Vec<String> = s.features.iter().map(f64::to_string).collect();
        row.push(s.label.to_string());
        row.push(s.sensitive.to_string());
        w.write_record(&row).map_err(io_err)?;
    }
    w.flush()?;
    println!("wrote {} samples to {}", data.len(), out.display());
    Ok(())
}

fn cmd_run(common: &CommonRunArgs) -> Result<()> {
    init_threads(common.threads)?;
    let config = load_config(common)?;
    let out = run(&config, &common.out)?;
    let m = &out.summary.metrics;
    let show = |key: &str| -> String {
        m.get(key)
            .and_then(|s| s.mean.map(|v| format!("{v:.4}")))
            .unwrap_or_else(|| "n/a".into())
    };
    println!(
        "{} seeds ok, {} failed | accuracy {} | global disparity {} | test disparity {} | eps {}",
        out.summary.seeds.len(),
        out.summary.failed_seeds.len(),
        show("accuracy"),
        show("global_disparity"),
        show("test_global_disparity"),
        show("eps_spent"),
    );
    println!("artifacts in {}", out.dir.display());
    if out.summary.failed_seeds.is_empty() {
        Ok(())
    } else {
        Err(Error::Aggregation(format!(
            "{} seed(s) failed; artifacts for the others were written",
            out.summary.failed_seeds.len()
        )))
    }
}

fn cmd_sweep(common: &CommonRunArgs, sweep_path: &Path) -> Result<()> {
    init_threads(common.threads)?;
    let base = load_config(common)?;
    let space = SweepConfig::from_path(sweep_path)?;
    let outcome = sweep(&space, &base)?;
    write_sweep_artifacts(&outcome, &common.out)?;
    match &outcome.best {
        Some((index, _)) => {
            let t = &outcome.trials[*index];
            println!(
                "best trial {} | val accuracy {:.4} | val disparity {:.4}",
                index,
                t.val_accuracy.unwrap_or(f64::NAN),
                t.val_disparity.unwrap_or(f64::NAN),
            );
            println!("best config: {}", common.out.join("best_config.json").display());
        }
        None => println!("no feasible trial"),
    }
    println!("trial table: {}", common.out.join("trials.csv").display());
    Ok(())
}

fn cmd_calibrate(
    eps: f64,
    delta: f64,
    q: f64,
    rounds: usize,
    epochs: usize,
    split: &[f64],
) -> Result<()> {
    let privacy = PrivacyConfig {
        enabled: true,
        epsilon: eps,
        delta: Some(delta),
        clip_bound: 1.0,
        eps_split: [split[0], split[1], split[2]],
    };
    let plan = calibrate_plan(&privacy, true, q, rounds, epochs, delta)?;
    let steps12 = rounds as u64 * epochs as u64 * (1.0 / q).ceil() as u64;
    let steps3 = rounds as u64 + 1;
    let mut accountant = AccountantState::with_alphas(default_alphas());
    accountant.add_stream("gradient", q, plan.sigma1, plan.delta_split.0)?;
    accountant.add_stream("lambda", q, plan.sigma2, plan.delta_split.1)?;
    accountant.add_stream("statistics", 1.0, plan.sigma3, plan.delta_split.2)?;
    accountant.record(0, steps12);
    accountant.record(1, steps12);
    accountant.record(2, steps3);
    let report = accountant.report()?;
    println!("stream       q       sigma        steps  eps_share  eps_spent");
    for s in &report.streams {
        println!(
            "{:<10} {:>5} {:>11.6} {:>12} {:>10.4} {:>10.4}",
            s.label,
            s.q,
            s.sigma,
            s.steps,
            match s.label.as_str() {
                "gradient" => plan.eps_targets.0,
                "lambda" => plan.eps_targets.1,
                _ => plan.eps_targets.2,
            },
            s.eps,
        );
    }
    println!(
        "total: eps {:.6} of target {eps} | delta {:.3e}",
        report.eps_total, report.delta_total
    );
    Ok(())
}

fn dispatch(cli: Cli) -> Result<()> {
    match &cli.command {
        Command::GenData { config, out, seed } => cmd_gen_data(config, out, *seed),
        Command::Run { common } => cmd_run(common),
        Command::Sweep { common, sweep } => cmd_sweep(common, sweep),
        Command::Calibrate {
            eps,
            delta,
            q,
            rounds,
            epochs,
            split,
        } => cmd_calibrate(*eps, *delta, *q, *rounds, *epochs, split),
        Command::Report { run } => {
            let paths = report(run)?;
            for p in &paths {
                println!("wrote {}", p.display());
            }
            Ok(())
        }
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match dispatch(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
