//! Tabular and JSON outputs: per-round metrics, run summaries and
//! cross-algorithm comparisons at equal upload budgets.

use std::collections::BTreeMap;
use std::fmt::Write as _;

use serde::Serialize;

use crate::config::Algorithm;
use crate::engine::RoundMetrics;

pub const METRICS_HEADER: &str = "round,algorithm,seed,train_loss,test_error,upload_bytes,\
download_bytes,feedback_bytes,cum_upload_bytes,cum_download_bytes,cum_feedback_bytes,\
selected_per_layer";

pub const COMPARISON_HEADER: &str = "algorithm,upload_budget_bytes,seeds,mean_round,\
mean_test_error,std_test_error,mean_train_loss,std_train_loss";

/// Floats are written with 17 significant digits so they round-trip exactly.
pub fn fmt_float(v: f64) -> String {
    format!("{v:.16e}")
}

pub fn metrics_row(m: &RoundMetrics) -> String {
    let selected: Vec<String> = m.selected_per_layer.iter().map(|s| s.to_string()).collect();
    format!(
        "{},{},{},{},{},{},{},{},{},{},{},{}",
        m.round,
        m.algorithm,
        m.seed,
        fmt_float(m.train_loss),
        fmt_float(m.test_error),
        m.upload_bytes,
        m.download_bytes,
        m.feedback_bytes,
        m.cum_upload_bytes,
        m.cum_download_bytes,
        m.cum_feedback_bytes,
        selected.join("|"),
    )
}

pub fn metrics_csv(rows: &[RoundMetrics]) -> String {
    let mut out = String::from(METRICS_HEADER);
    out.push('\n');
    for m in rows {
        out.push_str(&metrics_row(m));
        out.push('\n');
    }
    out
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct RunSummary {
    pub algorithm: Algorithm,
    pub seed: u64,
    pub rounds: usize,
    pub final_test_error: f64,
    pub final_test_loss: f64,
    pub final_train_loss: f64,
    pub best_test_error: f64,
    pub total_upload_bytes: u64,
    pub total_download_bytes: u64,
    pub total_feedback_bytes: u64,
    pub config: BTreeMap<String, String>,
}

impl RunSummary {
    /// `None` for an empty run.
    pub fn from_metrics(rows: &[RoundMetrics], config: BTreeMap<String, String>) -> Option<Self> {
        let last = rows.last()?;
        Some(Self {
            algorithm: last.algorithm,
            seed: last.seed,
            rounds: rows.len(),
            final_test_error: last.test_error,
            final_test_loss: last.test_loss,
            final_train_loss: last.train_loss,
            best_test_error: rows.iter().map(|m| m.test_error).fold(f64::INFINITY, f64::min),
            total_upload_bytes: last.cum_upload_bytes,
            total_download_bytes: last.cum_download_bytes,
            total_feedback_bytes: last.cum_feedback_bytes,
            config,
        })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ComparisonRow {
    pub algorithm: Algorithm,
    pub upload_budget_bytes: u64,
    /// Seeds that reached at least one round within the budget.
    pub seeds: usize,
    pub mean_round: f64,
    pub mean_test_error: f64,
    pub std_test_error: f64,
    pub mean_train_loss: f64,
    pub std_train_loss: f64,
}

/// Runs of one algorithm, one metrics series per seed.
#[derive(Debug, Clone)]
pub struct AlgorithmRuns {
    pub algorithm: Algorithm,
    pub seeds: Vec<Vec<RoundMetrics>>,
}

fn mean_std(values: &[f64]) -> (f64, f64) {
    let n = values.len() as f64;
    let mean = values.iter().sum::<f64>() / n;
    if values.len() < 2 {
        return (mean, 0.0);
    }
    let var = values.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / (n - 1.0);
    (mean, var.sqrt())
}

/// Upload budgets at which algorithms are compared: for each algorithm the
/// smallest final cumulative upload over its seeds, deduplicated and sorted.
pub fn upload_checkpoints(runs: &[AlgorithmRuns]) -> Vec<u64> {
    let mut out: Vec<u64> = runs
        .iter()
        .filter_map(|r| {
            r.seeds
                .iter()
                .filter_map(|s| s.last().map(|m| m.cum_upload_bytes))
                .min()
        })
        .collect();
    out.sort_unstable();
    out.dedup();
    out
}

/// One row per (algorithm, budget). Each seed contributes its last round whose
/// cumulative upload does not exceed the budget; budgets that no seed of an
/// algorithm fits under are omitted for that algorithm.
pub fn compare(runs: &[AlgorithmRuns]) -> Vec<ComparisonRow> {
    let checkpoints = upload_checkpoints(runs);
    let mut rows = Vec::new();
    for run in runs {
        for &budget in &checkpoints {
            let picked: Vec<&RoundMetrics> = run
                .seeds
                .iter()
                .filter_map(|s| s.iter().take_while(|m| m.cum_upload_bytes <= budget).last())
                .collect();
            if picked.is_empty() {
                continue;
            }
            let errs: Vec<f64> = picked.iter().map(|m| m.test_error).collect();
            let losses: Vec<f64> = picked.iter().map(|m| m.train_loss).collect();
            let rounds: Vec<f64> = picked.iter().map(|m| m.round as f64).collect();
            let (mean_test_error, std_test_error) = mean_std(&errs);
            let (mean_train_loss, std_train_loss) = mean_std(&losses);
            rows.push(ComparisonRow {
                algorithm: run.algorithm,
                upload_budget_bytes: budget,
                seeds: picked.len(),
                mean_round: mean_std(&rounds).0,
                mean_test_error,
                std_test_error,
                mean_train_loss,
                std_train_loss,
            });
        }
    }
    rows
}

pub fn comparison_csv(rows: &[ComparisonRow]) -> String {
    let mut out = String::from(COMPARISON_HEADER);
    out.push('\n');
    for r in rows {
        let _ = writeln!(
            out,
            "{},{},{},{},{},{},{},{}",
            r.algorithm,
            r.upload_budget_bytes,
            r.seeds,
            fmt_float(r.mean_round),
            fmt_float(r.mean_test_error),
            fmt_float(r.std_test_error),
            fmt_float(r.mean_train_loss),
            fmt_float(r.std_train_loss),
        );
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    fn m(round: usize, alg: Algorithm, seed: u64, err: f64, cum_up: u64) -> RoundMetrics {
        RoundMetrics {
            round,
            algorithm: alg,
            seed,
            train_loss: err * 2.0,
            test_loss: err * 3.0,
            test_error: err,
            upload_bytes: 10,
            download_bytes: 20,
            feedback_bytes: 0,
            cum_upload_bytes: cum_up,
            cum_download_bytes: 20 * round as u64,
            cum_feedback_bytes: 0,
            selected_per_layer: vec![2, 3],
            participants: vec![0, 1, 2],
            shadow_gap: None,
        }
    }

    #[test]
    fn metrics_csv_layout() {
        let csv = metrics_csv(&[m(1, Algorithm::FedLdf, 7, 0.25, 10)]);
        let lines: Vec<&str> = csv.lines().collect();
        assert_eq!(lines.len(), 2);
        assert_eq!(lines[0].split(',').count(), 12);
        let cells: Vec<&str> = lines[1].split(',').collect();
        assert_eq!(cells.len(), 12);
        assert_eq!(cells[1], "fedldf");
        assert_eq!(cells[4].parse::<f64>().unwrap(), 0.25);
        assert_eq!(cells[11], "2|3");
    }

    #[test]
    fn floats_round_trip() {
        for v in [0.1, 1.0 / 3.0, 2.5e-300, 123456.789] {
            assert_eq!(fmt_float(v).parse::<f64>().unwrap(), v);
        }
    }

    #[test]
    fn single_run_comparison_has_one_row() {
        let runs = [AlgorithmRuns {
            algorithm: Algorithm::FedAvg,
            seeds: vec![vec![m(1, Algorithm::FedAvg, 0, 0.5, 10), m(2, Algorithm::FedAvg, 0, 0.4, 20)]],
        }];
        let rows = compare(&runs);
        assert_eq!(rows.len(), 1);
        assert_eq!(rows[0].upload_budget_bytes, 20);
        assert_eq!(rows[0].mean_test_error, 0.4);
        assert_eq!(rows[0].std_test_error, 0.0);
        assert_eq!(comparison_csv(&rows).lines().count(), 2);
    }

    #[test]
    fn comparison_uses_last_round_within_budget() {
        let a = Algorithm::FedLdf;
        let b = Algorithm::FedAvg;
        let runs = [
            AlgorithmRuns {
                algorithm: a,
                seeds: vec![
                    vec![m(1, a, 0, 0.6, 5), m(2, a, 0, 0.5, 10)],
                    vec![m(1, a, 1, 0.4, 5), m(2, a, 1, 0.3, 10)],
                ],
            },
            AlgorithmRuns {
                algorithm: b,
                seeds: vec![
                    vec![m(1, b, 0, 0.5, 10), m(2, b, 0, 0.2, 20)],
                    vec![m(1, b, 1, 0.5, 10), m(2, b, 1, 0.2, 20)],
                ],
            },
        ];
        assert_eq!(upload_checkpoints(&runs), vec![10, 20]);
        let rows = compare(&runs);
        assert_eq!(rows.len(), 4);
        // fedldf at budget 10: seeds at 0.5 and 0.3
        assert!((rows[0].mean_test_error - 0.4).abs() < 1e-15);
        assert!((rows[0].std_test_error - 0.02f64.sqrt()).abs() < 1e-15);
        // fedldf never exceeds 10, so budget 20 reuses the final rounds
        assert_eq!(rows[1].mean_round, 2.0);
        assert_eq!(rows[2].mean_test_error, 0.5);
        assert_eq!(rows[3].mean_test_error, 0.2);
    }

    #[test]
    fn summary_from_metrics() {
        let rows = [m(1, Algorithm::FedLdf, 3, 0.5, 10), m(2, Algorithm::FedLdf, 3, 0.6, 20)];
        let s = RunSummary::from_metrics(&rows, BTreeMap::new()).unwrap();
        assert_eq!(s.rounds, 2);
        assert_eq!(s.best_test_error, 0.5);
        assert_eq!(s.final_test_error, 0.6);
        assert_eq!(s.total_upload_bytes, 20);
        assert!(RunSummary::from_metrics(&[], BTreeMap::new()).is_none());
    }
}
