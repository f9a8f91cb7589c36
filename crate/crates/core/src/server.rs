//! Server-side round logic: sample participants, aggregate models by
//! dataset size, complete and pool the shared statistics, build the
//! probability table clients fall back on, and derive the global and
//! local disparity views.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::client::SharedCounts;
use crate::error::{Error, Result};
use crate::fairness::{dpl_from_counts, GroupCounts, ProbabilityTable};
use crate::model::LinearModel;

/// Uniform sample of `round(fraction * count)` distinct client indices
/// (at least one), returned sorted.
pub fn sample_clients<R: Rng>(count: usize, fraction: f64, rng: &mut R) -> Result<Vec<usize>> {
    if count == 0 {
        return Err(Error::Domain("cannot sample from zero clients".into()));
    }
    if !(fraction > 0.0 && fraction <= 1.0) {
        return Err(Error::Domain(format!(
            "client fraction must lie in (0, 1], got {fraction}"
        )));
    }
    let m = ((fraction * count as f64).round() as usize).clamp(1, count);
    let mut chosen = rand::seq::index::sample(rng, count, m).into_vec();
    chosen.sort_unstable();
    Ok(chosen)
}

/// Size-weighted parameter mean: `theta = sum_k (n_k / n) theta_k`.
/// Written as a weighted sum of deltas from the first model so that
/// aggregating copies of one model returns it bit-exactly.
pub fn fedavg(entries: &[(&LinearModel, f64)]) -> Result<LinearModel> {
    let (first, _) = entries
        .first()
        .ok_or_else(|| Error::Aggregation("no models to aggregate".into()))?;
    let mut total = 0.0;
    for (m, w) in entries {
        if m.classes != first.classes || m.features != first.features {
            return Err(Error::Aggregation(format!(
                "model shape {}x{} does not match {}x{}",
                m.classes,
                m.features + 1,
                first.classes,
                first.features + 1
            )));
        }
        if !(*w > 0.0) {
            return Err(Error::Aggregation(format!("client weight must be positive, got {w}")));
        }
        total += w;
    }
    let mut out = (*first).clone();
    for (m, w) in entries {
        let f = w / total;
        for (o, (wi, base)) in out.weights.iter_mut().zip(m.weights.iter().zip(&first.weights)) {
            *o += f * (wi - base);
        }
    }
    Ok(out)
}

/// Reconstruct a client's full count matrix from the shared classes-1..C
/// columns and the (run-start) group totals: the class-0 column is
/// `total - sum(shared)`, clamped at zero since noisy shares can
/// overshoot.
pub fn complete_statistics(shared: &SharedCounts, totals: &[f64]) -> Result<GroupCounts> {
    if shared.tail.len() != totals.len() {
        return Err(Error::Shape {
            expected: format!("{} group rows", totals.len()),
            got: format!("{}", shared.tail.len()),
        });
    }
    let width = shared.tail.first().map_or(0, Vec::len);
    let mut counts = Vec::with_capacity(totals.len());
    for (row, &total) in shared.tail.iter().zip(totals) {
        if row.len() != width {
            return Err(Error::Shape {
                expected: format!("{width} shared columns"),
                got: format!("{}", row.len()),
            });
        }
        let head = (total - row.iter().sum::<f64>()).max(0.0);
        let mut full = Vec::with_capacity(width + 1);
        full.push(head);
        full.extend_from_slice(row);
        counts.push(full);
    }
    Ok(GroupCounts {
        counts,
        group_totals: totals.to_vec(),
    })
}

/// Pool completed per-client counts entry-wise and derive the
/// probability table `P(Yhat=y | Z=z)` by row normalization of the
/// clamped pooled counts. Groups with no pooled mass get an explicit
/// absent row.
pub fn aggregate_and_table(completed: &[GroupCounts]) -> Result<(GroupCounts, ProbabilityTable)> {
    let first = completed
        .first()
        .ok_or_else(|| Error::Aggregation("no statistics to aggregate".into()))?;
    let groups = first.groups();
    let classes = first.classes();
    let mut pooled = GroupCounts::zeros(groups, classes);
    for c in completed {
        if c.groups() != groups || c.classes() != classes {
            return Err(Error::Aggregation(format!(
                "count shape {}x{} does not match {}x{}",
                c.groups(),
                c.classes(),
                groups,
                classes
            )));
        }
        for z in 0..groups {
            for y in 0..classes {
                pooled.counts[z][y] += c.counts[z][y];
            }
            pooled.group_totals[z] += c.group_totals[z];
        }
    }
    let rows = pooled
        .counts
        .iter()
        .map(|row| {
            let clamped: Vec<f64> = row.iter().map(|&c| c.max(0.0)).collect();
            let sum: f64 = clamped.iter().sum();
            if sum > 0.0 {
                Some(clamped.into_iter().map(|c| c / sum).collect())
            } else {
                None
            }
        })
        .collect();
    Ok((pooled, ProbabilityTable { rows }))
}

/// Hard disparity of the pooled counts, as if the server saw every
/// prediction; `None` when some group has no pooled mass (single-group
/// pool and similar degenerate rounds).
pub fn global_disparity(pooled: &GroupCounts) -> Option<f64> {
    dpl_from_counts(pooled, None).ok().map(|(v, _)| v)
}

/// Mean and ascending sort (the empirical CDF support) of per-client
/// disparities.
pub fn local_disparity_summary(values: &[f64]) -> Result<(f64, Vec<f64>)> {
    if values.is_empty() {
        return Err(Error::Domain("no local disparities to summarize".into()));
    }
    let mean = values.iter().sum::<f64>() / values.len() as f64;
    let mut sorted = values.to_vec();
    sorted.sort_by(|a, b| a.partial_cmp(b).unwrap());
    Ok((mean, sorted))
}

/// One line of the run log: everything the server knows at the end of a
/// round. Optional fields are unavailable when the relevant groups or
/// clients are missing.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RoundReport {
    pub seed: u64,
    pub round: usize,
    /// Size-weighted train accuracy over the round's participants.
    pub accuracy: f64,
    pub global_disparity: Option<f64>,
    /// Ascending per-client hard disparities (CDF support).
    pub local_disparities: Vec<f64>,
    pub local_disparity_mean: Option<f64>,
    pub lambda_mean: f64,
    /// Total epsilon spent through this round (0 when privacy is off).
    pub eps_spent: f64,
    pub test_accuracy: Option<f64>,
    pub test_global_disparity: Option<f64>,
    pub p_table: ProbabilityTable,
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::client::{compute_statistics, share_statistics};
    use crate::fairness::dpl_from_counts;
    use crate::model::{Dataset, Sample};
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn sampling_size_and_uniqueness() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let all = sample_clients(10, 1.0, &mut rng).unwrap();
        assert_eq!(all, (0..10).collect::<Vec<_>>());

        let thirty = sample_clients(100, 0.3, &mut rng).unwrap();
        assert_eq!(thirty.len(), 30);
        let mut dedup = thirty.clone();
        dedup.dedup();
        assert_eq!(dedup.len(), 30);
        assert!(thirty.windows(2).all(|w| w[0] < w[1]));

        assert_eq!(sample_clients(50, 0.001, &mut rng).unwrap().len(), 1);
        assert!(sample_clients(0, 0.5, &mut rng).is_err());
        assert!(sample_clients(5, 0.0, &mut rng).is_err());
    }

    #[test]
    fn sampling_is_deterministic_per_seed() {
        let a = sample_clients(40, 0.4, &mut ChaCha8Rng::seed_from_u64(9)).unwrap();
        let b = sample_clients(40, 0.4, &mut ChaCha8Rng::seed_from_u64(9)).unwrap();
        assert_eq!(a, b);
    }

    fn model_with(weights: Vec<f64>) -> LinearModel {
        let features = weights.len() / 2 - 1;
        LinearModel {
            classes: 2,
            features,
            weights,
        }
    }

    #[test]
    fn fedavg_hand_examples() {
        let a = model_with(vec![0.0, 2.0, 1.0, 1.0]);
        let b = model_with(vec![2.0, 0.0, 1.0, 1.0]);
        let avg = fedavg(&[(&a, 4.0), (&b, 4.0)]).unwrap();
        assert_eq!(avg.weights, vec![1.0, 1.0, 1.0, 1.0]);

        let c = LinearModel {
            classes: 2,
            features: 0,
            weights: vec![4.0, 0.0],
        };
        let d = LinearModel {
            classes: 2,
            features: 0,
            weights: vec![0.0, 0.0],
        };
        let avg = fedavg(&[(&c, 1.0), (&d, 3.0)]).unwrap();
        assert_eq!(avg.weights[0], 1.0);
    }

    #[test]
    fn fedavg_of_copies_is_bit_exact() {
        let m = model_with(vec![0.123456789, -7.5, 1e-13, 3.0]);
        let avg = fedavg(&[(&m, 17.0), (&m, 5.0), (&m, 1.0)]).unwrap();
        assert_eq!(avg.weights, m.weights);
    }

    #[test]
    fn fedavg_rejects_bad_inputs() {
        let a = model_with(vec![0.0, 2.0, 1.0, 1.0]);
        let skinny = LinearModel {
            classes: 2,
            features: 0,
            weights: vec![1.0, 2.0],
        };
        assert!(matches!(fedavg(&[]), Err(Error::Aggregation(_))));
        assert!(matches!(
            fedavg(&[(&a, 1.0), (&skinny, 1.0)]),
            Err(Error::Aggregation(_))
        ));
        assert!(matches!(fedavg(&[(&a, 0.0)]), Err(Error::Aggregation(_))));
    }

    #[test]
    fn completion_fills_the_omitted_column() {
        let shared = SharedCounts {
            tail: vec![vec![2.0], vec![5.0]],
        };
        let full = complete_statistics(&shared, &[6.0, 8.0]).unwrap();
        assert_eq!(full.counts, vec![vec![4.0, 2.0], vec![3.0, 5.0]]);
        assert_eq!(full.group_totals, vec![6.0, 8.0]);
    }

    #[test]
    fn completion_clamps_noisy_overshoot() {
        let shared = SharedCounts {
            tail: vec![vec![9.2]],
        };
        let full = complete_statistics(&shared, &[8.0]).unwrap();
        assert_eq!(full.counts, vec![vec![0.0, 9.2]]);
        assert!(complete_statistics(&shared, &[8.0, 1.0]).is_err());
    }

    #[test]
    fn noiseless_share_completes_to_the_original() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        for _ in 0..20 {
            let groups = rng.gen_range(2..=3);
            let classes = rng.gen_range(2..=4);
            let mut counts = GroupCounts::zeros(groups, classes);
            for z in 0..groups {
                for y in 0..classes {
                    let c = rng.gen_range(0..30) as f64;
                    counts.counts[z][y] = c;
                    counts.group_totals[z] += c;
                }
            }
            let shared = share_statistics(&counts, 0.0, &mut rng);
            let full = complete_statistics(&shared, &counts.group_totals).unwrap();
            assert_eq!(full, counts);
        }
    }

    #[test]
    fn pooling_scales_counts_but_not_the_table() {
        let counts = GroupCounts {
            counts: vec![vec![3.0, 1.0], vec![2.0, 6.0]],
            group_totals: vec![4.0, 8.0],
        };
        let (pooled_one, table_one) = aggregate_and_table(std::slice::from_ref(&counts)).unwrap();
        let (pooled_two, table_two) =
            aggregate_and_table(&[counts.clone(), counts.clone()]).unwrap();
        for z in 0..2 {
            for y in 0..2 {
                assert_eq!(pooled_two.counts[z][y], 2.0 * pooled_one.counts[z][y]);
            }
        }
        assert_eq!(table_one, table_two);
        assert_eq!(table_one.row(1).unwrap(), &[0.25, 0.75]);
    }

    #[test]
    fn pooled_probability_example() {
        let counts = GroupCounts {
            counts: vec![vec![1.0, 1.0], vec![2.0, 6.0]],
            group_totals: vec![2.0, 8.0],
        };
        let (_, table) = aggregate_and_table(std::slice::from_ref(&counts)).unwrap();
        assert_eq!(table.row(1).unwrap()[1], 0.75);
    }

    #[test]
    fn empty_group_row_is_marked_absent() {
        let a = GroupCounts {
            counts: vec![vec![3.0, 1.0], vec![0.0, 0.0]],
            group_totals: vec![4.0, 0.0],
        };
        let b = GroupCounts {
            counts: vec![vec![1.0, 2.0], vec![0.0, 0.0]],
            group_totals: vec![3.0, 0.0],
        };
        let (pooled, table) = aggregate_and_table(&[a, b]).unwrap();
        assert!(table.row(0).is_some());
        assert!(table.row(1).is_none());
        assert_eq!(global_disparity(&pooled), None);
    }

    #[test]
    fn global_disparity_hand_example_and_uniform_case() {
        let pooled = GroupCounts {
            counts: vec![vec![1.0, 1.0], vec![0.0, 2.0]],
            group_totals: vec![2.0, 2.0],
        };
        assert_eq!(global_disparity(&pooled), Some(0.5));

        let uniform = GroupCounts {
            counts: vec![vec![2.0, 2.0], vec![3.0, 3.0]],
            group_totals: vec![4.0, 6.0],
        };
        assert_eq!(global_disparity(&uniform), Some(0.0));
    }

    /// End-to-end statistics pipeline against the centralized oracle:
    /// per-client counts shared exactly, completed, pooled — the global
    /// disparity must equal the disparity of the union dataset.
    #[test]
    fn pooled_disparity_equals_centralized_oracle() {
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        for scenario in 0..25 {
            let groups = rng.gen_range(2..=3);
            let classes = rng.gen_range(2..=3);
            let d = 2;
            let model = LinearModel::init(classes, d, &mut rng);
            let clients = rng.gen_range(2..=5);
            let mut all_samples = Vec::new();
            let mut completed = Vec::new();
            for k in 0..clients {
                let n = rng.gen_range(3..=30);
                let samples: Vec<Sample> = (0..n)
                    .map(|_| Sample {
                        features: (0..d).map(|_| rng.gen_range(-2.0..2.0)).collect(),
                        label: rng.gen_range(0..classes),
                        // client 0 misses group 0 entirely (the edge case)
                        sensitive: if k == 0 {
                            rng.gen_range(1..groups.max(2)) % groups
                        } else {
                            rng.gen_range(0..groups)
                        },
                    })
                    .collect();
                let data = Dataset::new(samples, d, classes, groups).unwrap();
                let counts = compute_statistics(&model, &data).unwrap();
                let shared = share_statistics(&counts, 0.0, &mut rng);
                completed.push(complete_statistics(&shared, &counts.group_totals).unwrap());
                all_samples.extend(data.samples);
            }
            let (pooled, _) = aggregate_and_table(&completed).unwrap();
            let union = Dataset::new(all_samples, d, classes, groups).unwrap();
            let central = GroupCounts::from_predictions(&model, &union).unwrap();
            match dpl_from_counts(&central, None) {
                Ok((oracle, _)) => {
                    assert_eq!(global_disparity(&pooled), Some(oracle), "scenario {scenario}");
                }
                Err(_) => assert_eq!(global_disparity(&pooled), None),
            }
        }
    }

    #[test]
    fn summary_mean_and_cdf_support() {
        let (mean, sorted) = local_disparity_summary(&[0.3, 0.1]).unwrap();
        assert!((mean - 0.2).abs() < 1e-15);
        assert_eq!(sorted, vec![0.1, 0.3]);

        let values = [0.07, 0.21, 0.02, 0.4, 0.3];
        let (mean, sorted) = local_disparity_summary(&values).unwrap();
        assert!((mean - 0.2).abs() < 1e-12);
        assert_eq!(sorted, vec![0.02, 0.07, 0.21, 0.3, 0.4]);
        assert!(local_disparity_summary(&[]).is_err());
    }
}
