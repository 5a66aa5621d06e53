use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::export::finish;
use super::{run_al, ExperimentConfig, MetricsLog, RunOutput};
use crate::error::{DralError, Result};
use crate::strategies::StrategyName;

pub const COMPARISON_HEADER: [&str; 5] = ["strategy", "labels", "mean_acc", "std_acc", "n_seeds"];

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord)]
pub struct RunKey {
    pub strategy: StrategyName,
    pub seed: u64,
}

/// Mean and sample standard deviation of test accuracy at one label count.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ComparisonRow {
    pub strategy: StrategyName,
    pub labels: usize,
    pub mean_acc: f64,
    pub std_acc: f64,
    pub n_seeds: usize,
}

#[derive(Clone, Debug, PartialEq, Default, Serialize, Deserialize)]
pub struct ComparisonTable {
    pub rows: Vec<ComparisonRow>,
}

impl ComparisonTable {
    pub fn to_csv(&self) -> Result<String> {
        let mut w = csv::Writer::from_writer(Vec::new());
        w.write_record(COMPARISON_HEADER)?;
        for r in &self.rows {
            w.serialize((r.strategy.as_str(), r.labels, r.mean_acc, r.std_acc, r.n_seeds))?;
        }
        finish(w)
    }

    pub fn from_csv(text: &str) -> Result<Self> {
        let mut r = csv::Reader::from_reader(text.as_bytes());
        let header: Vec<String> = r.headers()?.iter().map(str::to_string).collect();
        if header != COMPARISON_HEADER {
            return Err(DralError::Param(format!("unexpected comparison header {header:?}")));
        }
        let mut rows = Vec::new();
        for rec in r.deserialize() {
            let (strategy, labels, mean_acc, std_acc, n_seeds): (String, usize, f64, f64, usize) = rec?;
            rows.push(ComparisonRow { strategy: strategy.parse()?, labels, mean_acc, std_acc, n_seeds });
        }
        Ok(ComparisonTable { rows })
    }

    /// Rows of one strategy, ordered by label count.
    pub fn strategy_rows(&self, strategy: StrategyName) -> Vec<&ComparisonRow> {
        self.rows.iter().filter(|r| r.strategy == strategy).collect()
    }

    /// Mean accuracy at the largest label count for `strategy`.
    pub fn final_mean(&self, strategy: StrategyName) -> Option<f64> {
        self.strategy_rows(strategy).last().map(|r| r.mean_acc)
    }
}

/// Runs every `(strategy, seed)` pair in parallel and aggregates them.
/// Results come back in strategy-list order, then seed-list order.
pub fn compare(
    config: &ExperimentConfig,
    strategies: &[StrategyName],
    seeds: &[u64],
) -> Result<(ComparisonTable, Vec<RunOutput>)> {
    if strategies.is_empty() || seeds.is_empty() {
        return Err(DralError::Param("compare needs at least one strategy and one seed".into()));
    }
    config.validate()?;
    let jobs: Vec<RunKey> =
        strategies.iter().flat_map(|&strategy| seeds.iter().map(move |&seed| RunKey { strategy, seed })).collect();
    let runs = jobs
        .par_iter()
        .map(|key| {
            let cfg = ExperimentConfig { strategy: key.strategy, seed: key.seed, ..config.clone() };
            run_al(&cfg)
        })
        .collect::<Result<Vec<_>>>()?;
    let logs: Vec<&MetricsLog> = runs.iter().map(|r| &r.log).collect();
    let table = compare_runs(&logs, config.seed_labeled_size, config.round_budget, config.global_budget);
    Ok((table, runs))
}

/// Test accuracy at the milestones `seed + k·b`, `k = 0..=B/b`. A run
/// contributes its last row whose label count does not exceed the
/// milestone. Strategies keep their first-appearance order.
pub fn compare_runs(logs: &[&MetricsLog], seed_size: usize, b: usize, budget: usize) -> ComparisonTable {
    let mut order: Vec<StrategyName> = Vec::new();
    for log in logs {
        if !order.contains(&log.strategy) {
            order.push(log.strategy);
        }
    }
    let steps = budget.checked_div(b).unwrap_or(0);
    let mut rows = Vec::new();
    for strategy in order {
        let runs: Vec<&&MetricsLog> = logs.iter().filter(|l| l.strategy == strategy).collect();
        for k in 0..=steps {
            let milestone = seed_size + k * b;
            let accs: Vec<f64> = runs
                .iter()
                .filter_map(|log| log.rows.iter().rev().find(|r| r.cumulative_labels <= milestone).map(|r| r.test_acc))
                .collect();
            if accs.is_empty() {
                continue;
            }
            let (mean_acc, std_acc) = mean_std(&accs);
            rows.push(ComparisonRow { strategy, labels: milestone, mean_acc, std_acc, n_seeds: accs.len() });
        }
    }
    ComparisonTable { rows }
}

/// Mean and sample standard deviation (0 for a single value).
pub fn mean_std(values: &[f64]) -> (f64, f64) {
    let n = values.len() as f64;
    let mean = values.iter().sum::<f64>() / n;
    if values.len() < 2 {
        return (mean, 0.0);
    }
    let var = values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1.0);
    (mean, var.sqrt())
}
