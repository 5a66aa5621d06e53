//! Label sessions and the deferred oracle that blocks on them.

use std::collections::{BTreeMap, BTreeSet};
use std::sync::atomic::{AtomicU64, Ordering};
use std::sync::{Arc, Condvar, Mutex, MutexGuard};

use dral_core::data::{split_pool, Dataset, Oracle, OracleKind};
use dral_core::experiment::{
    planar_position, run_al_with, ExperimentConfig, MetricsLog, MetricsRow, RunObserver, ScatterExport, ScatterPoint,
    ScatterRound,
};
use dral_core::{DralError, Result};
use serde::{Deserialize, Serialize};

/// Number of leading features shown next to a pending sample.
pub const PREVIEW_LEN: usize = 4;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum SessionStatus {
    Running,
    AwaitingLabels,
    Finished,
    /// The loop stopped with an error; see `error`.
    Failed,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PendingSample {
    pub id: usize,
    pub x: f64,
    pub y: f64,
    pub preview: Vec<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SubmitOutcome {
    /// Labels accepted by this request, repeats of earlier answers included.
    pub accepted: usize,
    pub pending_remaining: usize,
    pub status: SessionStatus,
}

#[derive(Debug, PartialEq, Eq)]
pub enum SubmitError {
    OutOfRange { id: usize, label: usize, num_classes: usize },
    NotPending(usize),
    Conflict { id: usize, existing: usize, submitted: usize },
}

impl std::fmt::Display for SubmitError {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            SubmitError::OutOfRange { id, label, num_classes } => {
                write!(f, "label {label} for sample {id} is outside 0..{num_classes}")
            }
            SubmitError::NotPending(id) => write!(f, "sample {id} is not pending"),
            SubmitError::Conflict { id, existing, submitted } => {
                write!(f, "sample {id} already labeled {existing}, got {submitted}")
            }
        }
    }
}

#[derive(Debug)]
struct SessionState {
    status: SessionStatus,
    error: Option<String>,
    /// Ids the loop is waiting on, in query order.
    pending: Vec<usize>,
    fulfilled: BTreeMap<usize, usize>,
    rows: Vec<MetricsRow>,
    /// Every id ever handed to the oracle, to catch repeated queries.
    queried: BTreeSet<usize>,
    repeated_queries: usize,
    cancelled: bool,
}

#[derive(Debug)]
pub struct Session {
    id: u64,
    config: ExperimentConfig,
    dataset: Arc<Dataset>,
    seed_ids: Vec<usize>,
    state: Mutex<SessionState>,
    fulfillment: Condvar,
}

impl Session {
    pub fn id(&self) -> u64 {
        self.id
    }

    pub fn config(&self) -> &ExperimentConfig {
        &self.config
    }

    pub fn num_classes(&self) -> usize {
        self.dataset.num_classes
    }

    fn lock(&self) -> MutexGuard<'_, SessionState> {
        // a panicking loop thread must not take the HTTP side down with it
        self.state.lock().unwrap_or_else(|e| e.into_inner())
    }

    pub fn status(&self) -> SessionStatus {
        self.lock().status
    }

    pub fn error(&self) -> Option<String> {
        self.lock().error.clone()
    }

    /// Times the oracle was asked for an id it had already been asked for.
    pub fn repeated_queries(&self) -> usize {
        self.lock().repeated_queries
    }

    pub fn pending(&self) -> Vec<PendingSample> {
        self.status_and_pending().1
    }

    /// Status and pending list read under one lock.
    pub fn status_and_pending(&self) -> (SessionStatus, Vec<PendingSample>) {
        let st = self.lock();
        let pending = st
            .pending
            .iter()
            .map(|&id| {
                let [x, y] = planar_position(&self.dataset, id);
                let row = self.dataset.features.row(id);
                PendingSample { id, x, y, preview: row[..row.len().min(PREVIEW_LEN)].to_vec() }
            })
            .collect();
        (st.status, pending)
    }

    pub fn metrics(&self) -> MetricsLog {
        MetricsLog { strategy: self.config.strategy, seed: self.config.seed, rows: self.lock().rows.clone() }
    }

    /// Labeled points so far: the seed set once answered, then one entry per
    /// recorded round.
    pub fn scatter(&self) -> ScatterExport {
        let st = self.lock();
        let point = |id: usize| {
            st.fulfilled.get(&id).map(|&label| {
                let [x, y] = planar_position(&self.dataset, id);
                ScatterPoint { id, x, y, label }
            })
        };
        ScatterExport {
            dataset: self.dataset.meta.name.clone(),
            strategy: self.config.strategy,
            seed: self.config.seed,
            num_classes: self.dataset.num_classes,
            seed_points: self.seed_ids.iter().filter_map(|&id| point(id)).collect(),
            rounds: st
                .rows
                .iter()
                .filter(|r| r.round > 0)
                .map(|r| ScatterRound {
                    round: r.round,
                    points: r.selected.iter().filter_map(|&id| point(id)).collect(),
                })
                .collect(),
        }
    }

    /// Records labels. The whole request is rejected if any entry is out of
    /// range, not pending, or contradicts an earlier answer.
    pub fn submit(&self, labels: &BTreeMap<usize, usize>) -> Result<SubmitOutcome, SubmitError> {
        let mut st = self.lock();
        let num_classes = self.dataset.num_classes;
        for (&id, &label) in labels {
            if label >= num_classes {
                return Err(SubmitError::OutOfRange { id, label, num_classes });
            }
            match st.fulfilled.get(&id) {
                Some(&existing) if existing != label => {
                    return Err(SubmitError::Conflict { id, existing, submitted: label });
                }
                Some(_) => {}
                None if st.pending.contains(&id) => {}
                None => return Err(SubmitError::NotPending(id)),
            }
        }
        for (&id, &label) in labels {
            st.fulfilled.insert(id, label);
        }
        st.pending.retain(|id| !labels.contains_key(id));
        if st.pending.is_empty() && st.status == SessionStatus::AwaitingLabels {
            st.status = SessionStatus::Running;
            self.fulfillment.notify_all();
        }
        Ok(SubmitOutcome { accepted: labels.len(), pending_remaining: st.pending.len(), status: st.status })
    }

    /// Wakes a blocked loop and makes it fail.
    pub fn cancel(&self) {
        self.lock().cancelled = true;
        self.fulfillment.notify_all();
    }
}

/// Oracle answered through [`Session::submit`]. `query` blocks until every
/// requested id has a label.
pub struct DeferredOracle {
    session: Arc<Session>,
}

impl DeferredOracle {
    pub fn new(session: Arc<Session>) -> Self {
        DeferredOracle { session }
    }
}

impl Oracle for DeferredOracle {
    fn kind(&self) -> OracleKind {
        OracleKind::Deferred
    }

    fn query(&mut self, ids: &[usize]) -> Result<Vec<usize>> {
        let session = &*self.session;
        let mut st = session.lock();
        for &id in ids {
            if !st.queried.insert(id) {
                st.repeated_queries += 1;
            }
        }
        let missing: Vec<usize> = ids.iter().copied().filter(|id| !st.fulfilled.contains_key(id)).collect();
        if !missing.is_empty() {
            st.pending = missing;
            st.status = SessionStatus::AwaitingLabels;
            log::debug!("session {}: waiting for {} labels", session.id, st.pending.len());
            while !st.pending.is_empty() && !st.cancelled {
                st = session.fulfillment.wait(st).unwrap_or_else(|e| e.into_inner());
            }
            if st.cancelled {
                return Err(DralError::Oracle(format!("session {} was cancelled", session.id)));
            }
            st.status = SessionStatus::Running;
        }
        Ok(ids.iter().map(|id| st.fulfilled[id]).collect())
    }
}

struct RowSink(Arc<Session>);

impl RunObserver for RowSink {
    fn on_row(&mut self, row: &MetricsRow) {
        self.0.lock().rows.push(row.clone());
    }
}

#[derive(Debug, PartialEq)]
pub enum CreateError {
    /// Parse or validation failure.
    Invalid(String),
    /// The config asks for the simulated oracle.
    WrongOracle,
}

impl std::fmt::Display for CreateError {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            CreateError::Invalid(msg) => write!(f, "invalid config: {msg}"),
            CreateError::WrongOracle => {
                write!(f, "config uses the simulated oracle; set \"oracle\": \"deferred\" or use the `run` command")
            }
        }
    }
}

/// All sessions of one service instance. Dropping it cancels every loop
/// still waiting for labels.
#[derive(Debug, Default)]
pub struct Registry {
    next_id: AtomicU64,
    sessions: Mutex<BTreeMap<u64, Arc<Session>>>,
}

impl Registry {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn get(&self, id: u64) -> Option<Arc<Session>> {
        self.sessions.lock().unwrap_or_else(|e| e.into_inner()).get(&id).cloned()
    }

    pub fn ids(&self) -> Vec<u64> {
        self.sessions.lock().unwrap_or_else(|e| e.into_inner()).keys().copied().collect()
    }

    /// Validates the config, then starts its loop on a new thread.
    pub fn create(&self, config: ExperimentConfig) -> Result<Arc<Session>, CreateError> {
        if config.oracle != OracleKind::Deferred {
            return Err(CreateError::WrongOracle);
        }
        let invalid = |e: DralError| CreateError::Invalid(e.to_string());
        let dataset = config.load_dataset().map_err(invalid)?;
        config.validate_for(&dataset).map_err(invalid)?;
        let seed_ids =
            split_pool(&dataset, config.seed_labeled_size, config.validation_size, config.test_size, config.seed)
                .map_err(invalid)?
                .labeled_ids();

        let id = self.next_id.fetch_add(1, Ordering::Relaxed) + 1;
        let session = Arc::new(Session {
            id,
            config,
            dataset: Arc::new(dataset),
            seed_ids,
            state: Mutex::new(SessionState {
                status: SessionStatus::Running,
                error: None,
                pending: Vec::new(),
                fulfilled: BTreeMap::new(),
                rows: Vec::new(),
                queried: BTreeSet::new(),
                repeated_queries: 0,
                cancelled: false,
            }),
            fulfillment: Condvar::new(),
        });
        self.sessions.lock().unwrap_or_else(|e| e.into_inner()).insert(id, session.clone());

        let worker = session.clone();
        let spawned = std::thread::Builder::new().name(format!("session-{id}")).spawn(move || {
            let mut oracle = DeferredOracle::new(worker.clone());
            let mut sink = RowSink(worker.clone());
            let result = run_al_with(&worker.config, &worker.dataset, &mut oracle, &mut sink);
            let mut st = worker.lock();
            st.pending.clear();
            match result {
                Ok(_) => {
                    st.status = SessionStatus::Finished;
                    log::info!("session {id} finished");
                }
                Err(e) => {
                    st.status = SessionStatus::Failed;
                    log::warn!("session {id} failed: {e}");
                    st.error = Some(e.to_string());
                }
            }
        });
        if let Err(e) = spawned {
            let mut st = session.lock();
            st.status = SessionStatus::Failed;
            st.error = Some(format!("could not start the loop: {e}"));
        }
        Ok(session)
    }
}

impl Drop for Registry {
    fn drop(&mut self) {
        for session in self.sessions.get_mut().unwrap_or_else(|e| e.into_inner()).values() {
            session.cancel();
        }
    }
}
