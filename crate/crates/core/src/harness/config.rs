//! Experiment configuration: JSON in, validated and fully defaulted
//! structs out. Unknown keys are rejected so a run directory's stored
//! config is exactly what executed.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::data::{CsvSchema, PartitionMode, PartitionSpec, SyntheticSpec};
use crate::error::{Error, Result};

/// Where the samples come from. CSV data is shared by all seeds; the
/// synthetic generator re-draws per seed.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", deny_unknown_fields)]
pub enum DatasetSource {
    Synthetic(SyntheticConfig),
    Csv { path: PathBuf, schema: CsvSchema },
}

/// Synthetic-data knobs; the per-run seed supplies the generator seed.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SyntheticConfig {
    pub n: usize,
    #[serde(default = "default_features")]
    pub features: usize,
    #[serde(default = "default_half")]
    pub group_mix: f64,
    pub positive_rate: [f64; 2],
    #[serde(default = "default_label_shift")]
    pub label_shift: f64,
    #[serde(default = "default_group_shift")]
    pub group_shift: f64,
    #[serde(default = "default_one")]
    pub noise: f64,
}

fn default_features() -> usize {
    5
}
fn default_half() -> f64 {
    0.5
}
fn default_label_shift() -> f64 {
    2.0
}
fn default_group_shift() -> f64 {
    0.75
}
fn default_one() -> f64 {
    1.0
}

impl SyntheticConfig {
    pub fn materialize(&self, seed: u64) -> SyntheticSpec {
        SyntheticSpec {
            n: self.n,
            features: self.features,
            group_mix: self.group_mix,
            positive_rate: self.positive_rate,
            label_shift: self.label_shift,
            group_shift: self.group_shift,
            noise: self.noise,
            seed,
        }
    }
}

/// Partition knobs; client count and seed come from the federation
/// block and the per-run seed.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PartitionConfig {
    #[serde(default)]
    pub unfair_fraction: f64,
    #[serde(default)]
    pub zeta: f64,
    #[serde(default = "default_target_group")]
    pub target_group: usize,
    #[serde(default = "default_target_class")]
    pub target_class: usize,
    #[serde(default = "default_mode")]
    pub mode: PartitionMode,
}

fn default_target_group() -> usize {
    1
}
fn default_target_class() -> usize {
    1
}
fn default_mode() -> PartitionMode {
    PartitionMode::Reduce
}

impl Default for PartitionConfig {
    fn default() -> Self {
        Self {
            unfair_fraction: 0.0,
            zeta: 0.0,
            target_group: default_target_group(),
            target_class: default_target_class(),
            mode: default_mode(),
        }
    }
}

impl PartitionConfig {
    pub fn materialize(&self, clients: usize, seed: u64) -> PartitionSpec {
        PartitionSpec {
            clients,
            unfair_fraction: self.unfair_fraction,
            zeta: self.zeta,
            target_group: self.target_group,
            target_class: self.target_class,
            mode: self.mode,
            seed,
        }
    }
}

/// Federation shape and optimizer step.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FederationConfig {
    /// Client count K.
    pub clients: usize,
    /// Rounds R.
    #[serde(default = "default_rounds")]
    pub rounds: usize,
    /// Fraction of train clients sampled per round.
    #[serde(default = "default_one")]
    pub client_fraction: f64,
    /// Local epochs E.
    #[serde(default = "default_epochs")]
    pub epochs: usize,
    /// Learning rate eta.
    #[serde(default = "default_eta")]
    pub eta: f64,
    /// Poisson batch rate q.
    #[serde(default = "default_batch_rate")]
    pub batch_rate: f64,
}

fn default_rounds() -> usize {
    30
}
fn default_epochs() -> usize {
    1
}
fn default_eta() -> f64 {
    0.5
}
fn default_batch_rate() -> f64 {
    0.1
}

/// Fairness regularization mode: off, a fixed mixing weight, or the
/// controller driving lambda toward the disparity target.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(tag = "mode", rename_all = "snake_case", deny_unknown_fields)]
pub enum FairnessConfig {
    Off,
    Fixed {
        lambda: f64,
    },
    Tunable {
        /// Disparity target T.
        target: f64,
        /// Controller step size rho.
        #[serde(default = "default_rho")]
        rho: f64,
        #[serde(default = "default_momentum")]
        momentum: f64,
    },
}

fn default_rho() -> f64 {
    0.05
}
fn default_momentum() -> f64 {
    0.5
}

impl FairnessConfig {
    pub fn target(&self) -> Option<f64> {
        match self {
            FairnessConfig::Tunable { target, .. } => Some(*target),
            _ => None,
        }
    }

    pub fn is_tunable(&self) -> bool {
        matches!(self, FairnessConfig::Tunable { .. })
    }
}

/// Differential-privacy knobs. `delta` falls back to `max_k 1/n_k` over
/// the training clients when unset. `eps_split` divides the epsilon
/// target across the gradient, lambda, and statistics streams; delta is
/// split evenly.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PrivacyConfig {
    #[serde(default)]
    pub enabled: bool,
    #[serde(default = "default_epsilon")]
    pub epsilon: f64,
    #[serde(default)]
    pub delta: Option<f64>,
    /// Clip bound B.
    #[serde(default = "default_clip")]
    pub clip_bound: f64,
    #[serde(default = "default_eps_split")]
    pub eps_split: [f64; 3],
}

fn default_epsilon() -> f64 {
    5.0
}
fn default_clip() -> f64 {
    1.0
}
fn default_eps_split() -> [f64; 3] {
    [0.8, 0.1, 0.1]
}

impl Default for PrivacyConfig {
    fn default() -> Self {
        Self {
            enabled: false,
            epsilon: default_epsilon(),
            delta: None,
            clip_bound: default_clip(),
            eps_split: default_eps_split(),
        }
    }
}

/// Holdout shape: the last `ceil(test_fraction * K)` clients are the
/// test group; the tail of the remaining clients (by
/// `validation_fraction`) is the validation group; everyone else trains.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SplitConfig {
    #[serde(default = "default_test_fraction")]
    pub test_fraction: f64,
    #[serde(default)]
    pub validation_fraction: f64,
}

fn default_test_fraction() -> f64 {
    0.2
}

impl Default for SplitConfig {
    fn default() -> Self {
        Self {
            test_fraction: default_test_fraction(),
            validation_fraction: 0.0,
        }
    }
}

/// Who plays which role, as index ranges over the K partitions.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ClientSplit {
    pub train: Vec<usize>,
    pub validation: Vec<usize>,
    pub test: Vec<usize>,
}

impl SplitConfig {
    pub fn assign(&self, clients: usize) -> Result<ClientSplit> {
        let n_test = (self.test_fraction * clients as f64).ceil() as usize;
        let non_test = clients - n_test;
        let n_val = (self.validation_fraction * non_test as f64).round() as usize;
        let n_train = non_test - n_val;
        if n_train == 0 {
            return Err(Error::Config(format!(
                "no training clients left after holding out {n_test} test and {n_val} validation clients"
            )));
        }
        Ok(ClientSplit {
            train: (0..n_train).collect(),
            validation: (n_train..n_train + n_val).collect(),
            test: (n_train + n_val..clients).collect(),
        })
    }
}

/// Everything one experiment needs, including the seeds to repeat it
/// over.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    pub dataset: DatasetSource,
    #[serde(default)]
    pub partition: PartitionConfig,
    pub federation: FederationConfig,
    pub fairness: FairnessConfig,
    #[serde(default)]
    pub privacy: PrivacyConfig,
    #[serde(default)]
    pub split: SplitConfig,
    pub seeds: Vec<u64>,
}

impl ExperimentConfig {
    pub fn from_path(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| Error::Config(format!("cannot read {}: {e}", path.display())))?;
        let config: Self = serde_json::from_str(&text)
            .map_err(|e| Error::Config(format!("{}: {e}", path.display())))?;
        config.validate()?;
        Ok(config)
    }

    pub fn validate(&self) -> Result<()> {
        let fail = |msg: String| Err(Error::Config(msg));
        if self.seeds.is_empty() {
            return fail("seeds must be non-empty".into());
        }
        let f = &self.federation;
        if f.clients < 2 {
            return fail(format!("need at least 2 clients, got {}", f.clients));
        }
        if f.rounds == 0 || f.epochs == 0 {
            return fail("rounds and epochs must be at least 1".into());
        }
        if !(f.client_fraction > 0.0 && f.client_fraction <= 1.0) {
            return fail(format!("client_fraction must lie in (0,1], got {}", f.client_fraction));
        }
        if !(f.eta > 0.0 && f.eta.is_finite()) {
            return fail(format!("eta must be positive, got {}", f.eta));
        }
        if !(f.batch_rate > 0.0 && f.batch_rate <= 1.0) {
            return fail(format!("batch_rate must lie in (0,1], got {}", f.batch_rate));
        }
        match &self.dataset {
            DatasetSource::Synthetic(s) => {
                s.materialize(0).validate().map_err(|e| Error::Config(e.to_string()))?;
                if s.n < 10 * f.clients {
                    return fail(format!(
                        "synthetic n={} too small for {} clients (need at least 10 per client)",
                        s.n, f.clients
                    ));
                }
            }
            DatasetSource::Csv { schema, .. } => {
                if schema.features.is_empty() {
                    return fail("csv schema needs at least one feature column".into());
                }
            }
        }
        let mut probe = self.partition.materialize(f.clients, 0);
        probe.seed = 0;
        probe.validate().map_err(|e| Error::Config(e.to_string()))?;
        match &self.fairness {
            FairnessConfig::Fixed { lambda } => {
                if !(0.0..=1.0).contains(lambda) {
                    return fail(format!("fixed lambda must lie in [0,1], got {lambda}"));
                }
            }
            FairnessConfig::Tunable { target, rho, momentum } => {
                if !(*target >= 0.0) {
                    return fail(format!("target must be non-negative, got {target}"));
                }
                if !(*rho > 0.0) {
                    return fail(format!("rho must be positive, got {rho}"));
                }
                if !(0.0..1.0).contains(momentum) {
                    return fail(format!("momentum must lie in [0,1), got {momentum}"));
                }
            }
            FairnessConfig::Off => {}
        }
        let p = &self.privacy;
        if p.enabled {
            if !(p.epsilon > 0.0) {
                return fail(format!("epsilon must be positive, got {}", p.epsilon));
            }
            if let Some(d) = p.delta {
                if !(d > 0.0 && d < 1.0) {
                    return fail(format!("delta must lie in (0,1), got {d}"));
                }
            }
            if !(p.clip_bound > 0.0) {
                return fail(format!("clip_bound must be positive, got {}", p.clip_bound));
            }
            let sum: f64 = p.eps_split.iter().sum();
            if p.eps_split.iter().any(|&s| !(s > 0.0)) || (sum - 1.0).abs() > 1e-9 {
                return fail(format!(
                    "eps_split must be three positive fractions summing to 1, got {:?}",
                    p.eps_split
                ));
            }
        }
        for (name, v) in [
            ("test_fraction", self.split.test_fraction),
            ("validation_fraction", self.split.validation_fraction),
        ] {
            if !(0.0..1.0).contains(&v) {
                return fail(format!("{name} must lie in [0,1), got {v}"));
            }
        }
        self.split.assign(f.clients)?;
        Ok(())
    }
}

/// The grid the full study runs over: privacy and fairness toggled
/// independently, fairness in both fixed and tunable flavours, crossed
/// with the requested disparity targets. Variants that ignore T appear
/// once.
pub fn experiment_matrix(
    base: &ExperimentConfig,
    targets: &[f64],
) -> Vec<(String, ExperimentConfig)> {
    let fixed_lambda = match base.fairness {
        FairnessConfig::Fixed { lambda } => lambda,
        _ => 0.5,
    };
    let (rho, momentum) = match base.fairness {
        FairnessConfig::Tunable { rho, momentum, .. } => (rho, momentum),
        _ => (default_rho(), default_momentum()),
    };
    let with = |privacy: bool, fairness: FairnessConfig| -> ExperimentConfig {
        let mut cfg = base.clone();
        cfg.privacy.enabled = privacy;
        cfg.fairness = fairness;
        cfg
    };
    let mut out = vec![
        ("baseline".to_string(), with(false, FairnessConfig::Off)),
        ("dp_only".to_string(), with(true, FairnessConfig::Off)),
    ];
    for &t in targets {
        let tunable = FairnessConfig::Tunable {
            target: t,
            rho,
            momentum,
        };
        out.push((
            format!("fair_fixed_t{t}"),
            with(false, FairnessConfig::Fixed { lambda: fixed_lambda }),
        ));
        out.push((format!("fair_tunable_t{t}"), with(false, tunable.clone())));
        out.push((
            format!("full_fixed_t{t}"),
            with(true, FairnessConfig::Fixed { lambda: fixed_lambda }),
        ));
        out.push((format!("full_tunable_t{t}"), with(true, tunable)));
    }
    out
}
