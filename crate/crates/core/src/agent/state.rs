use std::collections::BTreeSet;

use serde::{Deserialize, Serialize};

use crate::data::{Dataset, PoolState};
use crate::error::{DralError, Result};
use crate::learner::Classifier;
use crate::nn::Matrix;
use crate::strategies::score_margin;

/// The `n` most margin-uncertain unlabeled samples and their features,
/// most uncertain first.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct State {
    pub ids: Vec<usize>,
    pub features: Matrix,
    pub margins: Vec<f64>,
    /// `false` for rows that repeat the first sample to pad a short pool.
    pub selectable: Vec<bool>,
}

impl State {
    pub fn len(&self) -> usize {
        self.ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ids.is_empty()
    }
}

/// Margin-scores every unlabeled sample and keeps the `n` lowest margins.
///
/// Equal margins are ordered by id. When fewer than `n` samples remain the
/// most uncertain row is repeated and flagged non-selectable.
pub fn build_state(dataset: &Dataset, pool: &PoolState, classifier: &Classifier, n: usize) -> Result<State> {
    build_state_excluding(dataset, pool, classifier, n, &BTreeSet::new())
}

/// [`build_state`] over the unlabeled samples not in `excluded`. When every
/// unlabeled sample is excluded the whole pool is used.
pub fn build_state_excluding(
    dataset: &Dataset,
    pool: &PoolState,
    classifier: &Classifier,
    n: usize,
    excluded: &BTreeSet<usize>,
) -> Result<State> {
    if n == 0 {
        return Err(DralError::Param("state size n must be positive".into()));
    }
    let mut unlabeled = pool.unlabeled_ids();
    if unlabeled.is_empty() {
        return Err(DralError::State("unlabeled pool is empty".into()));
    }
    if !excluded.is_empty() && unlabeled.iter().any(|id| !excluded.contains(id)) {
        unlabeled.retain(|id| !excluded.contains(id));
    }
    let probs = classifier.predict_proba(dataset, &unlabeled)?;
    let margins = score_margin(&probs);
    let mut order: Vec<usize> = (0..unlabeled.len()).collect();
    order.sort_by(|&a, &b| margins[a].total_cmp(&margins[b]).then(unlabeled[a].cmp(&unlabeled[b])));
    order.truncate(n);

    let real = order.len();
    let mut ids: Vec<usize> = order.iter().map(|&i| unlabeled[i]).collect();
    let mut state_margins: Vec<f64> = order.iter().map(|&i| margins[i]).collect();
    let mut selectable = vec![true; real];
    while ids.len() < n {
        ids.push(ids[0]);
        state_margins.push(state_margins[0]);
        selectable.push(false);
    }
    let features = classifier.extract_features(dataset, &ids)?;
    Ok(State { ids, features, margins: state_margins, selectable })
}

/// Per-row actor outputs and the thresholded selection.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ActionVec {
    /// Actor outputs in (−1, 1), after exploration noise when training.
    pub raw: Vec<f64>,
    /// `bits[i] == (raw[i] > 0)`.
    pub bits: Vec<bool>,
}

impl ActionVec {
    pub fn from_raw(raw: Vec<f64>) -> Self {
        let bits = raw.iter().map(|&v| v > 0.0).collect();
        ActionVec { raw, bits }
    }

    pub fn popcount(&self) -> usize {
        self.bits.iter().filter(|&&b| b).count()
    }

    pub fn as_f64(&self) -> Vec<f64> {
        bits_to_f64(&self.bits)
    }
}

pub(crate) fn bits_to_f64(bits: &[bool]) -> Vec<f64> {
    bits.iter().map(|&b| if b { 1.0 } else { 0.0 }).collect()
}
