//! Turn a run directory's JSONL round log into the plottable CSV
//! tables: accuracy and disparity trajectories (seed-averaged) and the
//! empirical CDF of the final local disparities.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use crate::error::{Error, Result};
use crate::harness::config::ExperimentConfig;
use crate::harness::run::SummaryStat;
use crate::server::RoundReport;

fn read_rows(run_dir: &Path) -> Result<Vec<RoundReport>> {
    let path = run_dir.join("rounds.jsonl");
    let text = std::fs::read_to_string(&path).map_err(|e| Error::Report {
        line: 0,
        message: format!("cannot read {}: {e}", path.display()),
    })?;
    let mut rows = Vec::new();
    for (i, line) in text.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let row: RoundReport = serde_json::from_str(line).map_err(|e| Error::Report {
            line: i + 1,
            message: e.to_string(),
        })?;
        rows.push(row);
    }
    if rows.is_empty() {
        return Err(Error::Report {
            line: 1,
            message: "round log is empty".into(),
        });
    }
    Ok(rows)
}

fn fmt(v: Option<f64>) -> String {
    v.map_or(String::new(), |x| x.to_string())
}

fn write_csv(path: &Path, header: &[&str], rows: &[Vec<String>]) -> Result<()> {
    let mut w = csv::Writer::from_path(path).map_err(|e| Error::Report {
        line: 0,
        message: format!("cannot write {}: {e}", path.display()),
    })?;
    let io_err = |e: csv::Error| Error::Report {
        line: 0,
        message: e.to_string(),
    };
    w.write_record(header).map_err(io_err)?;
    for row in rows {
        w.write_record(row).map_err(io_err)?;
    }
    w.flush().map_err(|e| Error::Report {
        line: 0,
        message: e.to_string(),
    })?;
    Ok(())
}

/// Emit `accuracy.csv`, `disparity.csv`, and `local_cdf.csv` next to
/// the round log; returns the written paths.
pub fn report(run_dir: &Path) -> Result<Vec<PathBuf>> {
    let rows = read_rows(run_dir)?;
    // The disparity target, when the stored config has one.
    let target: Option<f64> = ExperimentConfig::from_path(&run_dir.join("config.json"))
        .ok()
        .and_then(|c| c.fairness.target());

    let mut by_round: BTreeMap<usize, Vec<&RoundReport>> = BTreeMap::new();
    for row in &rows {
        by_round.entry(row.round).or_default().push(row);
    }
    let stat = |rs: &[&RoundReport], f: &dyn Fn(&RoundReport) -> Option<f64>| -> SummaryStat {
        SummaryStat::from_values(rs.iter().map(|r| f(r)).collect())
    };

    let mut accuracy_rows = Vec::new();
    let mut disparity_rows = Vec::new();
    for (&round, rs) in &by_round {
        let acc = stat(rs, &|r| Some(r.accuracy));
        let test_acc = stat(rs, &|r| r.test_accuracy);
        accuracy_rows.push(vec![
            round.to_string(),
            fmt(acc.mean),
            fmt(acc.stderr),
            fmt(test_acc.mean),
            fmt(test_acc.stderr),
        ]);
        let disp = stat(rs, &|r| r.global_disparity);
        let local = stat(rs, &|r| r.local_disparity_mean);
        disparity_rows.push(vec![
            round.to_string(),
            fmt(disp.mean),
            fmt(disp.stderr),
            fmt(local.mean),
            fmt(target),
        ]);
    }

    // CDF support: final-round local disparities pooled across seeds.
    let last_round = *by_round.keys().max().expect("rows is non-empty");
    let mut finals: Vec<f64> = by_round[&last_round]
        .iter()
        .flat_map(|r| r.local_disparities.iter().copied())
        .collect();
    finals.sort_by(|a, b| a.partial_cmp(b).unwrap());
    let n = finals.len();
    let cdf_rows: Vec<Vec<String>> = finals
        .iter()
        .enumerate()
        .map(|(i, v)| vec![v.to_string(), ((i + 1) as f64 / n as f64).to_string()])
        .collect();

    let accuracy_path = run_dir.join("accuracy.csv");
    let disparity_path = run_dir.join("disparity.csv");
    let cdf_path = run_dir.join("local_cdf.csv");
    write_csv(
        &accuracy_path,
        &[
            "round",
            "accuracy_mean",
            "accuracy_stderr",
            "test_accuracy_mean",
            "test_accuracy_stderr",
        ],
        &accuracy_rows,
    )?;
    write_csv(
        &disparity_path,
        &[
            "round",
            "global_disparity_mean",
            "global_disparity_stderr",
            "local_disparity_mean",
            "target",
        ],
        &disparity_rows,
    )?;
    write_csv(&cdf_path, &["value", "cumulative_fraction"], &cdf_rows)?;
    Ok(vec![accuracy_path, disparity_path, cdf_path])
}
