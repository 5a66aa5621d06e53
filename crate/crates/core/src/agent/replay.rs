use std::collections::VecDeque;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::nn::Matrix;

/// One `(S, a, S′, r)` experience.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TransitionRec {
    /// `n × d_feat` state features.
    pub state: Matrix,
    /// Effective selection bits as 0.0 / 1.0, one per state row.
    pub action: Vec<f64>,
    pub next_state: Matrix,
    pub reward: f64,
}

/// Bounded FIFO of transitions with a minimum fill before sampling.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct ReplayBuffer {
    capacity: usize,
    min_fill_for_sampling: usize,
    sample_batch: usize,
    entries: VecDeque<TransitionRec>,
}

impl ReplayBuffer {
    pub fn new(capacity: usize, min_fill_for_sampling: usize, sample_batch: usize) -> Self {
        ReplayBuffer {
            capacity,
            min_fill_for_sampling,
            sample_batch,
            entries: VecDeque::with_capacity(capacity.min(4096)),
        }
    }

    pub fn capacity(&self) -> usize {
        self.capacity
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    /// Appends, evicting the oldest record once `capacity` is exceeded.
    pub fn push(&mut self, rec: TransitionRec) {
        if self.capacity == 0 {
            return;
        }
        while self.entries.len() >= self.capacity {
            self.entries.pop_front();
        }
        self.entries.push_back(rec);
    }

    /// Sampling is allowed only once the buffer holds strictly more than
    /// `min_fill_for_sampling` records.
    pub fn can_sample(&self) -> bool {
        self.entries.len() > self.min_fill_for_sampling
    }

    /// `sample_batch` distinct records drawn uniformly, or an empty batch
    /// when the buffer is not yet full enough.
    pub fn sample<R: Rng + ?Sized>(&self, rng: &mut R) -> Vec<&TransitionRec> {
        if !self.can_sample() {
            return Vec::new();
        }
        let k = self.sample_batch.min(self.entries.len());
        rand::seq::index::sample(rng, self.entries.len(), k).into_iter().map(|i| &self.entries[i]).collect()
    }

    pub fn iter(&self) -> impl Iterator<Item = &TransitionRec> {
        self.entries.iter()
    }
}
