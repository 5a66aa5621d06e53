//! The active-learning outer loop, budget accounting and multi-run comparison.

mod compare;
mod export;

use std::path::PathBuf;
use std::time::Instant;

use serde::{Deserialize, Serialize};

use crate::agent::{Agent, AgentCheckpoint, AgentConfig, StepEnv, StepLimits};
use crate::data::{BlobSpec, Dataset, Oracle, OracleKind, PoolState, SimulatedOracle};
use crate::error::{DralError, Result};
use crate::fsutil::read_to_string;
use crate::learner::{Classifier, LearnerConfig};
use crate::rng::{stream_rng, Stream};
use crate::strategies::{QueryStrategy, StrategyName};

pub use compare::{compare, compare_runs, mean_std, ComparisonRow, ComparisonTable, RunKey, COMPARISON_HEADER};
pub use export::{
    metrics_csv, parse_metrics_csv, planar_position, scatter_for, ScatterExport, ScatterPoint, ScatterRound,
    METRICS_HEADER,
};

/// Where the samples come from.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum DatasetSource {
    /// Generated with the run seed.
    Blobs(BlobSpec),
    /// A dataset JSON file.
    File(PathBuf),
}

impl Default for DatasetSource {
    fn default() -> Self {
        DatasetSource::Blobs(BlobSpec::default())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ExperimentConfig {
    pub dataset: DatasetSource,
    pub seed_labeled_size: usize,
    pub validation_size: usize,
    pub test_size: usize,
    /// `b`: labels gathered between full retrainings.
    pub round_budget: usize,
    /// `B`: oracle queries allowed beyond the seed set.
    pub global_budget: usize,
    pub strategy: StrategyName,
    pub agent: AgentConfig,
    pub learner: LearnerConfig,
    pub seed: u64,
    pub oracle: OracleKind,
    /// Steps per round are capped at `step_cap_factor · b / n`, rounded up.
    pub step_cap_factor: usize,
    pub metrics_out: Option<PathBuf>,
    pub scatter_out: Option<PathBuf>,
    pub agent_out: Option<PathBuf>,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        ExperimentConfig {
            dataset: DatasetSource::default(),
            seed_labeled_size: 100,
            validation_size: 200,
            test_size: 400,
            round_budget: 20,
            global_budget: 200,
            strategy: StrategyName::Random,
            agent: AgentConfig::default(),
            learner: LearnerConfig::default(),
            seed: 0,
            oracle: OracleKind::Simulated,
            step_cap_factor: 50,
            metrics_out: None,
            scatter_out: None,
            agent_out: None,
        }
    }
}

impl ExperimentConfig {
    pub fn from_json(text: &str) -> Result<Self> {
        Ok(serde_json::from_str(text)?)
    }

    pub fn load(path: &std::path::Path) -> Result<Self> {
        Self::from_json(&read_to_string(path)?)
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }

    /// Checks that do not need the dataset.
    pub fn validate(&self) -> Result<()> {
        if self.round_budget == 0 {
            return Err(DralError::Param("round_budget must be at least 1".into()));
        }
        if self.global_budget > 0 && self.round_budget > self.global_budget {
            return Err(DralError::Param(format!(
                "round_budget {} exceeds global_budget {}",
                self.round_budget, self.global_budget
            )));
        }
        if self.seed_labeled_size == 0 {
            return Err(DralError::Param("seed_labeled_size must be at least 1".into()));
        }
        if self.validation_size == 0 {
            return Err(DralError::Param("validation_size must be at least 1 (the reward needs it)".into()));
        }
        if self.step_cap_factor == 0 {
            return Err(DralError::Param("step_cap_factor must be at least 1".into()));
        }
        self.learner.validate()?;
        self.agent.validate()
    }

    /// Checks against the loaded dataset.
    pub fn validate_for(&self, dataset: &Dataset) -> Result<()> {
        self.validate()?;
        let fixed = self.seed_labeled_size + self.validation_size + self.test_size;
        if fixed > dataset.len() {
            return Err(DralError::Param(format!(
                "seed + validation + test = {fixed} exceeds {} samples",
                dataset.len()
            )));
        }
        let unlabeled = dataset.len() - fixed;
        if self.global_budget > unlabeled {
            return Err(DralError::Param(format!(
                "global_budget {} exceeds the unlabeled pool of {unlabeled}",
                self.global_budget
            )));
        }
        if dataset.labels.is_none() {
            return Err(DralError::Param("dataset needs labels for validation and test accuracy".into()));
        }
        Ok(())
    }

    pub fn load_dataset(&self) -> Result<Dataset> {
        match &self.dataset {
            DatasetSource::Blobs(spec) => spec.generate(self.seed),
            DatasetSource::File(path) => Dataset::load(path),
        }
    }

    pub fn step_cap(&self) -> usize {
        (self.step_cap_factor * self.round_budget).div_ceil(self.agent.n).max(1)
    }
}

/// One metrics row: the state right after a full retraining.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricsRow {
    pub round: usize,
    pub cumulative_labels: usize,
    pub val_acc: f64,
    pub test_acc: f64,
    pub wall_ms: u64,
    /// Ids that joined the labeled set this round.
    pub selected: Vec<usize>,
    /// Ledger value (seed set included) when the row was recorded.
    pub oracle_queries: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricsLog {
    pub strategy: StrategyName,
    pub seed: u64,
    pub rows: Vec<MetricsRow>,
}

impl MetricsLog {
    pub fn final_row(&self) -> Option<&MetricsRow> {
        self.rows.last()
    }
}

/// One selection event: a baseline round's pick or a single agent step.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SelectionEvent {
    pub round: usize,
    pub selected: Vec<usize>,
    pub fresh_queries: usize,
    /// Accuracy delta for agent steps; `None` for baselines.
    pub reward: Option<f64>,
    pub committed: bool,
    pub labeled_before: usize,
    pub labeled_after: usize,
}

#[derive(Clone, Debug)]
pub struct RunOutput {
    pub log: MetricsLog,
    pub events: Vec<SelectionEvent>,
    pub pool: PoolState,
    pub agent: Option<AgentCheckpoint>,
}

/// Progress callbacks, e.g. for the label service.
pub trait RunObserver {
    fn on_row(&mut self, _row: &MetricsRow) {}
    fn on_event(&mut self, _event: &SelectionEvent) {}
}

impl RunObserver for () {}

/// Runs with the simulated oracle; a config asking for a deferred oracle is
/// rejected.
pub fn run_al(config: &ExperimentConfig) -> Result<RunOutput> {
    if config.oracle != OracleKind::Simulated {
        return Err(DralError::Param("run_al needs a simulated oracle; use the label service instead".into()));
    }
    let dataset = config.load_dataset()?;
    let mut oracle = SimulatedOracle::new(&dataset)?;
    run_al_with(config, &dataset, &mut oracle, &mut ())
}

/// The full loop: split, label the seed set, train, then alternate
/// selection rounds and full retraining until the budget or pool runs out.
pub fn run_al_with(
    config: &ExperimentConfig,
    dataset: &Dataset,
    oracle: &mut dyn Oracle,
    observer: &mut dyn RunObserver,
) -> Result<RunOutput> {
    config.validate_for(dataset)?;
    let start = Instant::now();
    let seed = config.seed;
    let mut pool =
        crate::data::split_pool(dataset, config.seed_labeled_size, config.validation_size, config.test_size, seed)?;
    pool.label_seed_set(oracle, dataset.num_classes)?;
    let mut clf = Classifier::new(dataset.dims(), dataset.num_classes, config.learner.clone(), seed)?;
    clf.train_full(dataset, &pool)?;
    let seed_snapshot = clf.snapshot();

    let mut log = MetricsLog { strategy: config.strategy, seed, rows: Vec::new() };
    let mut events = Vec::new();
    let record = |clf: &Classifier, pool: &PoolState, round, selected| -> Result<MetricsRow> {
        Ok(MetricsRow {
            round,
            cumulative_labels: pool.num_labeled(),
            val_acc: clf.accuracy_on(dataset, pool.validation_ids())?,
            test_acc: if pool.test_ids().is_empty() { f64::NAN } else { clf.accuracy_on(dataset, pool.test_ids())? },
            wall_ms: start.elapsed().as_millis() as u64,
            selected,
            oracle_queries: pool.oracle_queries_spent(),
        })
    };
    let row = record(&clf, &pool, 0, Vec::new())?;
    observer.on_row(&row);
    log.rows.push(row);

    let mut agent = match config.strategy {
        StrategyName::Dral => Some(Agent::new(config.agent.clone(), clf.feature_dim(), seed)?),
        _ => None,
    };
    let mut selection_rng = stream_rng(seed, Stream::Selection);
    let b = config.round_budget;
    let spent = |pool: &PoolState| pool.oracle_queries_spent() - config.seed_labeled_size;
    let mut attempt = 0;

    loop {
        let remaining = config.global_budget - spent(&pool);
        if remaining == 0 || pool.num_unlabeled() == 0 {
            break;
        }
        attempt += 1;
        let round = log.rows.len();
        let labeled_start = pool.num_labeled();
        let spent_start = spent(&pool);
        let mut committed: Vec<usize> = Vec::new();

        match (config.strategy.baseline(), agent.as_mut()) {
            (Some(strategy), _) => {
                let k = b.min(remaining);
                let ids = strategy.select(dataset, &pool, &clf, k, &mut selection_rng)?;
                let (_, fresh) = pool.fetch_labels(oracle, &ids, dataset.num_classes)?;
                pool.commit(&ids)?;
                let event = SelectionEvent {
                    round,
                    selected: ids.clone(),
                    fresh_queries: fresh,
                    reward: None,
                    committed: true,
                    labeled_before: labeled_start,
                    labeled_after: pool.num_labeled(),
                };
                observer.on_event(&event);
                events.push(event);
                committed = ids;
            }
            (None, Some(agent)) => {
                for _ in 0..config.step_cap() {
                    let labeled_before = pool.num_labeled();
                    let limits = StepLimits {
                        budget_remaining: config.global_budget - spent(&pool),
                        round_remaining: b - committed.len(),
                    };
                    let mut env = StepEnv { dataset, pool: &mut pool, classifier: &mut clf, oracle: &mut *oracle };
                    let out = agent.dral_step(&mut env, limits)?;
                    if out.terminal {
                        break;
                    }
                    if out.committed {
                        committed.extend_from_slice(&out.selected);
                    }
                    let event = SelectionEvent {
                        round,
                        selected: out.selected,
                        fresh_queries: out.fresh_queries,
                        reward: Some(out.reward),
                        committed: out.committed,
                        labeled_before,
                        labeled_after: pool.num_labeled(),
                    };
                    observer.on_event(&event);
                    events.push(event);
                }
                agent.decay_noise();
            }
            (None, None) => unreachable!("agent exists for the dral strategy"),
        }

        if pool.num_labeled() == labeled_start {
            if spent(&pool) == spent_start {
                log::info!("attempt {attempt}: no labels gathered and no budget spent, stopping");
                break;
            }
            // only rejected queries: every fine-tune was rolled back
            continue;
        }
        clf.restore(&seed_snapshot)?;
        clf.train_full(dataset, &pool)?;
        if let Some(agent) = agent.as_mut() {
            agent.classifier_changed();
        }
        let row = record(&clf, &pool, round, committed)?;
        log::info!(
            "{} seed {seed} round {round}: {} labels, val {:.4}, test {:.4}",
            config.strategy,
            row.cumulative_labels,
            row.val_acc,
            row.test_acc
        );
        observer.on_row(&row);
        log.rows.push(row);
    }

    Ok(RunOutput { log, events, pool, agent: agent.map(|a| a.checkpoint(false)) })
}
