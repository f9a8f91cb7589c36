//! Data plumbing: the biased federated partitioner with its two removal
//! variants, a synthetic tabular generator, and CSV ingestion.

use std::collections::BTreeMap;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{Dataset, Sample};
use crate::rng::{stream_rng, Stream};

/// What happens to the unfair clients' share of the target cell after
/// the pooled samples have been traded to the fair clients.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PartitionMode {
    /// Keep whatever remains: every sample stays placed exactly once.
    Reduce,
    /// Discard all remaining (z, y*) samples from unfair clients.
    RemoveCombo,
    /// Discard every Z=z sample from unfair clients.
    RemoveSensitive,
}

/// How to split one dataset across clients and skew part of them.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct PartitionSpec {
    /// Number of clients K.
    pub clients: usize,
    /// Fraction u of clients made unfair (the first `round(u*K)` ids).
    pub unfair_fraction: f64,
    /// Fraction of each unfair client's target-cell samples to remove.
    pub zeta: f64,
    /// Sensitive value z of the targeted cell.
    pub target_group: usize,
    /// Label y* of the targeted cell.
    pub target_class: usize,
    pub mode: PartitionMode,
    pub seed: u64,
}

impl PartitionSpec {
    pub fn validate(&self) -> Result<()> {
        if self.clients < 2 {
            return Err(Error::Domain(format!(
                "need at least 2 clients, got {}",
                self.clients
            )));
        }
        for (name, v) in [("unfair_fraction", self.unfair_fraction), ("zeta", self.zeta)] {
            if !(0.0..=1.0).contains(&v) {
                return Err(Error::Domain(format!("{name} must lie in [0,1], got {v}")));
            }
        }
        Ok(())
    }

    /// Number of unfair clients U; fair clients are the remaining ids.
    pub fn unfair_count(&self) -> usize {
        ((self.unfair_fraction * self.clients as f64).round() as usize).min(self.clients)
    }
}

/// Biased two-group, two-class synthetic data: group membership follows
/// `group_mix`, labels follow per-group positive rates, and features are
/// Gaussians whose mean is shifted along axis 0 by the label and axis 1
/// by the group.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SyntheticSpec {
    pub n: usize,
    /// Feature dimension d (at least 1; the group shift shares axis 0
    /// when d = 1).
    pub features: usize,
    /// P(Z = 1).
    pub group_mix: f64,
    /// P(Y = 1 | Z = z), indexed by z.
    pub positive_rate: [f64; 2],
    /// Feature-mean shift along axis 0 for label-1 samples.
    pub label_shift: f64,
    /// Feature-mean shift along axis 1 for group-1 samples.
    pub group_shift: f64,
    /// Standard deviation of the per-feature Gaussian noise.
    pub noise: f64,
    pub seed: u64,
}

impl SyntheticSpec {
    pub fn validate(&self) -> Result<()> {
        if self.n < 10 {
            return Err(Error::Domain(format!("need at least 10 samples, got {}", self.n)));
        }
        if self.features == 0 {
            return Err(Error::Domain("need at least 1 feature".into()));
        }
        for (name, p) in [
            ("group_mix", self.group_mix),
            ("positive_rate[0]", self.positive_rate[0]),
            ("positive_rate[1]", self.positive_rate[1]),
        ] {
            if !(0.0..=1.0).contains(&p) {
                return Err(Error::Domain(format!("{name} must lie in [0,1], got {p}")));
            }
        }
        if !(self.noise >= 0.0) {
            return Err(Error::Domain(format!(
                "noise must be non-negative, got {}",
                self.noise
            )));
        }
        Ok(())
    }
}

/// Split a dataset into K client shards: a stratified equal split, then
/// a trade that concentrates the target cell on the fair clients. Each
/// unfair client pools `floor(zeta * own count)` of its (z, y*) samples;
/// every fair client receives `beta = floor(pool / F)` of them and
/// surrenders `beta` samples of the complement cell (Z != z, y*) back,
/// dealt round-robin over the unfair clients. Pool leftovers go
/// round-robin to the fair clients, so `reduce` mode places every sample
/// exactly once.
pub fn partition(dataset: &Dataset, spec: &PartitionSpec) -> Result<Vec<Dataset>> {
    spec.validate()?;
    if dataset.is_empty() {
        return Err(Error::EmptyDataset);
    }
    if spec.target_group >= dataset.groups || spec.target_class >= dataset.classes {
        return Err(Error::Domain(format!(
            "target cell ({}, {}) outside a {}x{} dataset",
            spec.target_group, spec.target_class, dataset.groups, dataset.classes
        )));
    }
    let k = spec.clients;
    let unfair = spec.unfair_count();
    let fair = k - unfair;
    let mut rng = stream_rng(spec.seed, Stream::Partition);

    // Stratified split: deal each (z, y) cell round-robin after a seeded
    // shuffle, so every client matches the global cell proportions
    // within one sample (remainders land on the lowest client ids).
    let mut cells: BTreeMap<(usize, usize), Vec<usize>> = BTreeMap::new();
    for (i, s) in dataset.samples.iter().enumerate() {
        cells.entry((s.sensitive, s.label)).or_default().push(i);
    }
    let mut shards: Vec<Vec<Sample>> = vec![Vec::new(); k];
    for indices in cells.values_mut() {
        indices.shuffle(&mut rng);
        for (j, &i) in indices.iter().enumerate() {
            shards[j % k].push(dataset.samples[i].clone());
        }
    }

    // Unfair clients pool part of their target cell.
    let mut pool: Vec<Sample> = Vec::new();
    for shard in shards.iter_mut().take(unfair) {
        let own = shard
            .iter()
            .filter(|s| s.sensitive == spec.target_group && s.label == spec.target_class)
            .count();
        let remove = (spec.zeta * own as f64).floor() as usize;
        for _ in 0..remove {
            let pos = shard
                .iter()
                .rposition(|s| s.sensitive == spec.target_group && s.label == spec.target_class)
                .expect("counted above");
            pool.push(shard.remove(pos));
        }
    }

    if !pool.is_empty() && fair == 0 {
        return Err(Error::Domain(
            "no fair clients to receive the pooled samples".into(),
        ));
    }

    // Trade: each fair client gains beta pooled samples and surrenders
    // beta complement-cell samples, returned round-robin to the unfair.
    let beta = pool.len().checked_div(fair).unwrap_or(0);
    let mut returned: Vec<Sample> = Vec::new();
    if beta > 0 {
        for (slot, shard) in shards.iter_mut().enumerate().skip(unfair) {
            let available = shard
                .iter()
                .filter(|s| s.sensitive != spec.target_group && s.label == spec.target_class)
                .count();
            if available < beta {
                return Err(Error::Partition {
                    client: slot,
                    available,
                    needed: beta,
                });
            }
            for _ in 0..beta {
                let pos = shard
                    .iter()
                    .rposition(|s| s.sensitive != spec.target_group && s.label == spec.target_class)
                    .expect("checked above");
                returned.push(shard.remove(pos));
                shard.push(pool.pop().expect("pool holds beta * fair samples"));
            }
        }
    }
    for (j, s) in pool.drain(..).enumerate() {
        shards[unfair + j % fair.max(1)].push(s);
    }
    for (j, s) in returned.drain(..).enumerate() {
        shards[j % unfair.max(1)].push(s);
    }

    // Removal variants discard from the unfair clients only.
    match spec.mode {
        PartitionMode::Reduce => {}
        PartitionMode::RemoveCombo => {
            for shard in shards.iter_mut().take(unfair) {
                shard.retain(|s| {
                    !(s.sensitive == spec.target_group && s.label == spec.target_class)
                });
            }
        }
        PartitionMode::RemoveSensitive => {
            for shard in shards.iter_mut().take(unfair) {
                shard.retain(|s| s.sensitive != spec.target_group);
            }
        }
    }

    shards
        .into_iter()
        .enumerate()
        .map(|(j, samples)| {
            if samples.is_empty() {
                return Err(Error::Domain(format!(
                    "client {j} is empty after partitioning; use more data or a smaller zeta"
                )));
            }
            Dataset::new(samples, dataset.features, dataset.classes, dataset.groups)
        })
        .collect()
}

/// Draw `spec.n` i.i.d. samples: z from `group_mix`, y from
/// `positive_rate[z]`, features from the cell-shifted Gaussian.
pub fn synth_generate(spec: &SyntheticSpec) -> Result<Dataset> {
    spec.validate()?;
    let mut rng = stream_rng(spec.seed, Stream::Synthetic);
    let group_axis = 1 % spec.features;
    let samples = (0..spec.n)
        .map(|_| {
            let z = usize::from(rng.gen::<f64>() < spec.group_mix);
            let y = usize::from(rng.gen::<f64>() < spec.positive_rate[z]);
            let mut features: Vec<f64> = (0..spec.features)
                .map(|_| spec.noise * rng.sample::<f64, _>(StandardNormal))
                .collect();
            features[0] += y as f64 * spec.label_shift;
            features[group_axis] += z as f64 * spec.group_shift;
            Sample {
                features,
                label: y,
                sensitive: z,
            }
        })
        .collect();
    Dataset::new(samples, spec.features, 2, 2)
}

/// Which CSV columns hold the features, label, and sensitive attribute.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct CsvSchema {
    pub features: Vec<String>,
    pub label: String,
    pub sensitive: String,
}

/// Original string values behind the integer codes, indexed by code.
/// Codes are assigned in lexicographic order of the distinct values.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct CodeMaps {
    pub label: Vec<String>,
    pub sensitive: Vec<String>,
}

fn column_index(headers: &csv::StringRecord, name: &str) -> Result<usize> {
    headers
        .iter()
        .position(|h| h == name)
        .ok_or_else(|| Error::Ingest {
            row: 1,
            column: name.to_string(),
            message: "column not found in header".into(),
        })
}

/// Load a comma-separated file (UTF-8, header row, '.' decimals) into a
/// dataset, preserving row order. Label and sensitive values are mapped
/// to contiguous codes; the mapping is returned for reporting.
pub fn load_csv(path: &Path, schema: &CsvSchema) -> Result<(Dataset, CodeMaps)> {
    let mut reader = csv::ReaderBuilder::new()
        .has_headers(true)
        .from_path(path)
        .map_err(|e| Error::Ingest {
            row: 0,
            column: String::new(),
            message: e.to_string(),
        })?;
    let headers = reader
        .headers()
        .map_err(|e| Error::Ingest {
            row: 1,
            column: String::new(),
            message: e.to_string(),
        })?
        .clone();
    let feature_cols: Vec<usize> = schema
        .features
        .iter()
        .map(|name| column_index(&headers, name))
        .collect::<Result<_>>()?;
    let label_col = column_index(&headers, &schema.label)?;
    let sensitive_col = column_index(&headers, &schema.sensitive)?;

    let mut rows: Vec<(Vec<f64>, String, String)> = Vec::new();
    for (i, record) in reader.records().enumerate() {
        // Row numbers are 1-based and include the header line.
        let row = i + 2;
        let record = record.map_err(|e| Error::Ingest {
            row,
            column: String::new(),
            message: e.to_string(),
        })?;
        let field = |col: usize, name: &str| -> Result<&str> {
            record.get(col).ok_or_else(|| Error::Ingest {
                row,
                column: name.to_string(),
                message: "row is shorter than the header".into(),
            })
        };
        let mut features = Vec::with_capacity(feature_cols.len());
        for (&col, name) in feature_cols.iter().zip(&schema.features) {
            let raw = field(col, name)?;
            let value: f64 = raw.trim().parse().map_err(|_| Error::Ingest {
                row,
                column: name.clone(),
                message: format!("expected a number, got {raw:?}"),
            })?;
            features.push(value);
        }
        let label = field(label_col, &schema.label)?.trim().to_string();
        let sensitive = field(sensitive_col, &schema.sensitive)?.trim().to_string();
        rows.push((features, label, sensitive));
    }
    if rows.is_empty() {
        return Err(Error::Ingest {
            row: 1,
            column: String::new(),
            message: "no data rows".into(),
        });
    }

    let codes_of = |pick: fn(&(Vec<f64>, String, String)) -> &String| -> Vec<String> {
        let mut values: Vec<String> = rows.iter().map(|r| pick(r).clone()).collect();
        values.sort();
        values.dedup();
        values
    };
    let maps = CodeMaps {
        label: codes_of(|r| &r.1),
        sensitive: codes_of(|r| &r.2),
    };
    let code = |table: &[String], value: &str| -> usize {
        table.iter().position(|v| v == value).expect("value was collected")
    };

    let features = rows[0].0.len();
    let samples = rows
        .iter()
        .map(|(f, label, sensitive)| Sample {
            features: f.clone(),
            label: code(&maps.label, label),
            sensitive: code(&maps.sensitive, sensitive),
        })
        .collect();
    let dataset = Dataset::new(samples, features, maps.label.len(), maps.sensitive.len())?;
    Ok((dataset, maps))
}
