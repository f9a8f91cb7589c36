//! Error type shared across the simulator.

use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    #[error("shape mismatch: expected {expected}, got {got}")]
    Shape { expected: String, got: String },

    #[error("dataset is empty")]
    EmptyDataset,

    #[error("sensitive group {group} has no samples and no fallback probability is available")]
    MissingGroup { group: usize },

    #[error("non-finite value encountered in {context}")]
    NonFinite { context: String },

    #[error("domain error: {0}")]
    Domain(String),

    #[error(
        "calibration target eps={target} unreachable within sigma bracket [{lo}, {hi}] \
         (eps({lo})={eps_lo}, eps({hi})={eps_hi})"
    )]
    Calibration {
        target: f64,
        lo: f64,
        hi: f64,
        eps_lo: f64,
        eps_hi: f64,
    },

    #[error("partition infeasible: fair client {client} holds {available} samples of the complement cell, needs {needed}")]
    Partition {
        client: usize,
        available: usize,
        needed: usize,
    },

    #[error("ingestion error at row {row}, column {column}: {message}")]
    Ingest {
        row: usize,
        column: String,
        message: String,
    },

    #[error("aggregation error: {0}")]
    Aggregation(String),

    #[error("report error at line {line}: {message}")]
    Report { line: usize, message: String },

    #[error("config error: {0}")]
    Config(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),
}

pub type Result<T> = std::result::Result<T, Error>;

impl Error {
    /// Process exit code for the CLI: config problems are 2, everything else 3.
    pub fn exit_code(&self) -> i32 {
        match self {
            Error::Config(_) => 2,
            _ => 3,
        }
    }
}
