//! Uncertainty scores and the baseline query strategies.

use std::fmt;
use std::str::FromStr;

use rand::seq::SliceRandom;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::data::{Dataset, PoolState};
use crate::error::{DralError, Result};
use crate::learner::Classifier;
use crate::nn::Matrix;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum StrategyName {
    Random,
    Entropy,
    LeastConfidence,
    Margin,
    Dral,
}

impl StrategyName {
    pub const ALL: [StrategyName; 5] = [
        StrategyName::Random,
        StrategyName::Entropy,
        StrategyName::LeastConfidence,
        StrategyName::Margin,
        StrategyName::Dral,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            StrategyName::Random => "random",
            StrategyName::Entropy => "entropy",
            StrategyName::LeastConfidence => "least-confidence",
            StrategyName::Margin => "margin",
            StrategyName::Dral => "dral",
        }
    }

    /// The fixed-rule strategy behind this name, or `None` for `dral`.
    pub fn baseline(self) -> Option<Baseline> {
        match self {
            StrategyName::Random => Some(Baseline::Random),
            StrategyName::Entropy => Some(Baseline::Entropy),
            StrategyName::LeastConfidence => Some(Baseline::LeastConfidence),
            StrategyName::Margin => Some(Baseline::Margin),
            StrategyName::Dral => None,
        }
    }
}

impl fmt::Display for StrategyName {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for StrategyName {
    type Err = DralError;

    fn from_str(s: &str) -> Result<Self> {
        let s = s.trim().to_ascii_lowercase();
        StrategyName::ALL
            .into_iter()
            .find(|n| n.as_str() == s)
            .or(match s.as_str() {
                "en" => Some(StrategyName::Entropy),
                "lc" => Some(StrategyName::LeastConfidence),
                "ms" => Some(StrategyName::Margin),
                _ => None,
            })
            .ok_or_else(|| {
                DralError::Param(format!(
                    "unknown strategy '{s}' (expected one of random, entropy, least-confidence, margin, dral)"
                ))
            })
    }
}

/// Largest minus second-largest probability per row. Lower is more uncertain.
/// A single-class row scores its only probability.
pub fn score_margin(probs: &Matrix) -> Vec<f64> {
    probs
        .row_iter()
        .map(|row| {
            let mut top = [f64::NEG_INFINITY; 2];
            for &p in row {
                if p > top[0] {
                    top[1] = top[0];
                    top[0] = p;
                } else if p > top[1] {
                    top[1] = p;
                }
            }
            let second = if top[1].is_finite() { top[1] } else { 0.0 };
            top[0] - second
        })
        .collect()
}

/// Shannon entropy in nats, with `0·ln 0 = 0`. Higher is more uncertain.
pub fn score_entropy(probs: &Matrix) -> Vec<f64> {
    probs.row_iter().map(|row| row.iter().filter(|&&p| p > 0.0).map(|&p| -p * p.ln()).sum()).collect()
}

/// `1 − max p`. Higher is more uncertain.
pub fn score_least_confidence(probs: &Matrix) -> Vec<f64> {
    probs.row_iter().map(|row| 1.0 - row.iter().copied().fold(0.0f64, f64::max)).collect()
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Direction {
    /// Lowest scores first.
    Ascending,
    /// Highest scores first.
    Descending,
}

/// The `k` best candidates under `direction`; ties are broken uniformly at
/// random by `tie_rng`. Returns `min(k, candidates.len())` ids, best first.
pub fn select_top_k<R: Rng + ?Sized>(
    candidates: &[usize],
    scores: &[f64],
    k: usize,
    direction: Direction,
    tie_rng: &mut R,
) -> Result<Vec<usize>> {
    if k == 0 {
        return Err(DralError::Param("k must be positive".into()));
    }
    if candidates.len() != scores.len() {
        return Err(DralError::Shape(format!("{} candidates but {} scores", candidates.len(), scores.len())));
    }
    if let Some(i) = scores.iter().position(|s| s.is_nan()) {
        return Err(DralError::NonFinite { path: format!("scores[{i}]") });
    }
    let mut order: Vec<usize> = (0..candidates.len()).collect();
    order.shuffle(tie_rng);
    // stable sort keeps the shuffled order among equal scores
    order.sort_by(|&a, &b| {
        let ord = scores[a].total_cmp(&scores[b]);
        match direction {
            Direction::Ascending => ord,
            Direction::Descending => ord.reverse(),
        }
    });
    Ok(order.into_iter().take(k).map(|i| candidates[i]).collect())
}

/// `min(k, |candidates|)` ids drawn uniformly without replacement.
pub fn select_random<R: Rng + ?Sized>(candidates: &[usize], k: usize, rng: &mut R) -> Vec<usize> {
    let k = k.min(candidates.len());
    rand::seq::index::sample(rng, candidates.len(), k).into_iter().map(|i| candidates[i]).collect()
}

/// A rule that picks which unlabeled samples to send to the oracle.
pub trait QueryStrategy {
    fn name(&self) -> StrategyName;

    /// `min(k, |unlabeled|)` distinct unlabeled ids.
    fn select(
        &self,
        dataset: &Dataset,
        pool: &PoolState,
        classifier: &Classifier,
        k: usize,
        rng: &mut dyn rand::RngCore,
    ) -> Result<Vec<usize>>;
}

/// The four fixed-rule strategies.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Baseline {
    Random,
    Entropy,
    LeastConfidence,
    Margin,
}

impl Baseline {
    /// Per-sample scores and the direction in which they rank.
    pub fn score(self, probs: &Matrix) -> Option<(Vec<f64>, Direction)> {
        match self {
            Baseline::Random => None,
            Baseline::Entropy => Some((score_entropy(probs), Direction::Descending)),
            Baseline::LeastConfidence => Some((score_least_confidence(probs), Direction::Descending)),
            Baseline::Margin => Some((score_margin(probs), Direction::Ascending)),
        }
    }
}

impl QueryStrategy for Baseline {
    fn name(&self) -> StrategyName {
        match self {
            Baseline::Random => StrategyName::Random,
            Baseline::Entropy => StrategyName::Entropy,
            Baseline::LeastConfidence => StrategyName::LeastConfidence,
            Baseline::Margin => StrategyName::Margin,
        }
    }

    fn select(
        &self,
        dataset: &Dataset,
        pool: &PoolState,
        classifier: &Classifier,
        k: usize,
        rng: &mut dyn rand::RngCore,
    ) -> Result<Vec<usize>> {
        let unlabeled = pool.unlabeled_ids();
        if k == 0 || unlabeled.is_empty() {
            return Ok(Vec::new());
        }
        if *self == Baseline::Random {
            return Ok(select_random(&unlabeled, k, rng));
        }
        let probs = classifier.predict_proba(dataset, &unlabeled)?;
        let (scores, direction) = self.score(&probs).expect("scored strategy");
        select_top_k(&unlabeled, &scores, k, direction, rng)
    }
}
