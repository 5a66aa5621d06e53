use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use super::{MetricsLog, MetricsRow, RunOutput};
use crate::data::Dataset;
use crate::error::{DralError, Result};
use crate::strategies::StrategyName;

pub const METRICS_HEADER: [&str; 7] =
    ["strategy", "seed", "round", "cumulative_labels", "val_acc", "test_acc", "wall_ms"];

/// All rows of the given logs, in order, under the fixed metrics header.
pub fn metrics_csv<'a>(logs: impl IntoIterator<Item = &'a MetricsLog>) -> Result<String> {
    let mut w = csv::Writer::from_writer(Vec::new());
    w.write_record(METRICS_HEADER)?;
    for log in logs {
        for row in &log.rows {
            w.write_record([
                log.strategy.as_str().to_string(),
                log.seed.to_string(),
                row.round.to_string(),
                row.cumulative_labels.to_string(),
                row.val_acc.to_string(),
                row.test_acc.to_string(),
                row.wall_ms.to_string(),
            ])?;
        }
    }
    finish(w)
}

pub(crate) fn finish(w: csv::Writer<Vec<u8>>) -> Result<String> {
    let bytes = w
        .into_inner()
        .map_err(|e| DralError::Io { path: "<memory>".into(), cause: std::io::Error::other(e.to_string()) })?;
    String::from_utf8(bytes).map_err(|e| DralError::Param(format!("csv is not utf-8: {e}")))
}

#[derive(Debug, Deserialize)]
struct MetricsRecord {
    strategy: String,
    seed: u64,
    round: usize,
    cumulative_labels: usize,
    val_acc: f64,
    test_acc: f64,
    wall_ms: u64,
}

/// Parses a metrics CSV back into logs, grouped by `(strategy, seed)` in
/// order of first appearance. Selected ids and the ledger column are not
/// part of the CSV and come back empty.
pub fn parse_metrics_csv(text: &str) -> Result<Vec<MetricsLog>> {
    let mut r = csv::Reader::from_reader(text.as_bytes());
    let header: Vec<String> = r.headers()?.iter().map(str::to_string).collect();
    if header != METRICS_HEADER {
        return Err(DralError::Param(format!("unexpected metrics header {header:?}")));
    }
    let mut logs: Vec<MetricsLog> = Vec::new();
    for rec in r.deserialize() {
        let rec: MetricsRecord = rec?;
        let strategy: StrategyName = rec.strategy.parse()?;
        let row = MetricsRow {
            round: rec.round,
            cumulative_labels: rec.cumulative_labels,
            val_acc: rec.val_acc,
            test_acc: rec.test_acc,
            wall_ms: rec.wall_ms,
            selected: Vec::new(),
            oracle_queries: 0,
        };
        match logs.iter_mut().find(|l| l.strategy == strategy && l.seed == rec.seed) {
            Some(log) => log.rows.push(row),
            None => logs.push(MetricsLog { strategy, seed: rec.seed, rows: vec![row] }),
        }
    }
    Ok(logs)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ScatterPoint {
    pub id: usize,
    pub x: f64,
    pub y: f64,
    /// Class index, used as the point colour.
    pub label: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ScatterRound {
    pub round: usize,
    pub points: Vec<ScatterPoint>,
}

/// Planar view of a run: the seed set and the samples added in each round.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ScatterExport {
    pub dataset: String,
    pub strategy: StrategyName,
    pub seed: u64,
    pub num_classes: usize,
    pub seed_points: Vec<ScatterPoint>,
    pub rounds: Vec<ScatterRound>,
}

impl ScatterExport {
    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }
}

/// 2-D position of a sample: its generating coordinates when known,
/// otherwise its first two features.
pub fn planar_position(dataset: &Dataset, id: usize) -> [f64; 2] {
    if let Some(coords) = &dataset.coords {
        return coords[id];
    }
    let row = dataset.features.row(id);
    [row[0], row.get(1).copied().unwrap_or(0.0)]
}

pub fn scatter_for(dataset: &Dataset, run: &RunOutput) -> Result<ScatterExport> {
    let point = |id: usize| -> Result<ScatterPoint> {
        let label =
            run.pool.known_label(id).ok_or_else(|| DralError::State(format!("sample {id} has no oracle label")))?;
        let [x, y] = planar_position(dataset, id);
        Ok(ScatterPoint { id, x, y, label })
    };
    let added: BTreeMap<usize, ()> = run.log.rows.iter().flat_map(|r| r.selected.iter().map(|&id| (id, ()))).collect();
    let seed_points = run
        .pool
        .labeled_ids()
        .into_iter()
        .filter(|id| !added.contains_key(id))
        .map(point)
        .collect::<Result<Vec<_>>>()?;
    let rounds = run
        .log
        .rows
        .iter()
        .filter(|r| r.round > 0)
        .map(|r| {
            Ok(ScatterRound { round: r.round, points: r.selected.iter().map(|&id| point(id)).collect::<Result<_>>()? })
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(ScatterExport {
        dataset: dataset.meta.name.clone(),
        strategy: run.log.strategy,
        seed: run.log.seed,
        num_classes: dataset.num_classes,
        seed_points,
        rounds,
    })
}
