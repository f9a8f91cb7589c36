//! Experiment harness: configuration, seeded orchestration, sweep, and
//! report emission.

pub mod config;
pub mod report;
pub mod run;
pub mod sweep;

pub use config::{
    experiment_matrix, ClientSplit, DatasetSource, ExperimentConfig, FairnessConfig,
    FederationConfig, PartitionConfig, PrivacyConfig, SplitConfig, SyntheticConfig,
};
pub use report::report;
pub use run::{calibrate_plan, execute_seed, run, RunOutput, SeedRun, Summary, SummaryStat};
pub use sweep::{sweep, SweepConfig, SweepOutcome, TrialRecord};
