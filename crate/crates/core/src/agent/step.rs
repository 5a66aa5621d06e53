use crate::data::{Dataset, Oracle, PoolState};
use crate::error::Result;
use crate::learner::Classifier;
use crate::nn::Matrix;

use super::state::{bits_to_f64, build_state_excluding};
use super::{compute_reward, Agent, TransitionRec};

/// Everything a step reads or mutates besides the agent itself.
pub struct StepEnv<'a> {
    pub dataset: &'a Dataset,
    pub pool: &'a mut PoolState,
    pub classifier: &'a mut Classifier,
    pub oracle: &'a mut dyn Oracle,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct StepLimits {
    /// Oracle queries still allowed in the run.
    pub budget_remaining: usize,
    /// Samples that may still be committed in the current round.
    pub round_remaining: usize,
}

#[derive(Clone, Debug, PartialEq)]
pub struct StepOutcome {
    /// Ids admitted after capping, in state order. Empty on a no-op step.
    pub selected: Vec<usize>,
    /// Number of positive actor outputs before capping.
    pub proposed: usize,
    pub reward: f64,
    pub committed: bool,
    /// Oracle queries issued by this step.
    pub fresh_queries: usize,
    pub val_before: f64,
    pub val_after: f64,
    /// `(critic_loss, actor_objective)` when a replay update ran.
    pub update: Option<(f64, f64)>,
    /// Set when the step could not run: budget spent, round full or pool empty.
    pub terminal: bool,
}

impl StepOutcome {
    fn terminal() -> Self {
        StepOutcome {
            selected: Vec::new(),
            proposed: 0,
            reward: 0.0,
            committed: false,
            fresh_queries: 0,
            val_before: 0.0,
            val_after: 0.0,
            update: None,
            terminal: true,
        }
    }
}

impl Agent {
    /// One select / query / fine-tune / gate / learn cycle.
    ///
    /// Positive actor outputs are admitted in state order while the round
    /// has room; a sample whose label is not cached also needs one unit of
    /// the remaining budget. Admitted samples are labeled, the classifier is
    /// fine-tuned on the labeled set plus them, and they join the labeled
    /// set only if validation accuracy rose. Otherwise the classifier is
    /// restored and the samples stay unlabeled with their labels cached;
    /// they are left out of later states until the classifier changes.
    pub fn dral_step(&mut self, env: &mut StepEnv<'_>, limits: StepLimits) -> Result<StepOutcome> {
        if limits.budget_remaining == 0 || limits.round_remaining == 0 || env.pool.num_unlabeled() == 0 {
            return Ok(StepOutcome::terminal());
        }
        let n = self.config.n;
        let state = build_state_excluding(env.dataset, env.pool, env.classifier, n, &self.rejected)?;
        let action = self.actor_act(&state, true)?;

        let mut bits = vec![false; n];
        let mut selected = Vec::new();
        let mut fresh_needed = 0;
        for (i, &bit) in action.bits.iter().enumerate() {
            if !bit || selected.len() == limits.round_remaining {
                continue;
            }
            let id = state.ids[i];
            if env.pool.known_label(id).is_none() {
                if fresh_needed == limits.budget_remaining {
                    continue;
                }
                fresh_needed += 1;
            }
            bits[i] = true;
            selected.push(id);
        }

        let val_ids = env.pool.validation_ids().to_vec();
        let val_before = env.classifier.accuracy_on(env.dataset, &val_ids)?;
        let mut outcome = StepOutcome {
            selected: selected.clone(),
            proposed: action.popcount(),
            reward: 0.0,
            committed: false,
            fresh_queries: 0,
            val_before,
            val_after: val_before,
            update: None,
            terminal: false,
        };

        let next_features = if selected.is_empty() {
            state.features.clone()
        } else {
            let num_classes = env.classifier.num_classes();
            let (labels, fresh) = env.pool.fetch_labels(env.oracle, &selected, num_classes)?;
            outcome.fresh_queries = fresh;
            let (lab_ids, lab_labels) = env.pool.labeled_with_labels()?;
            let labeled: Vec<(usize, usize)> = lab_ids.into_iter().zip(lab_labels).collect();
            let extra: Vec<(usize, usize)> = selected.iter().copied().zip(labels).collect();

            let snap = env.classifier.snapshot();
            let epochs = env.classifier.config().epochs_finetune;
            env.classifier.fine_tune(env.dataset, &labeled, &extra, epochs)?;
            let val_after = env.classifier.accuracy_on(env.dataset, &val_ids)?;
            outcome.val_after = val_after;
            outcome.reward = compute_reward(val_after, val_before);
            if outcome.reward > 0.0 {
                env.pool.commit(&selected)?;
                outcome.committed = true;
                self.rejected.clear();
            } else {
                env.classifier.restore(&snap)?;
                outcome.val_after = val_before;
                self.rejected.extend(selected.iter().copied());
            }
            if env.pool.num_unlabeled() == 0 {
                Matrix::zeros(n, self.feature_dim)
            } else {
                build_state_excluding(env.dataset, env.pool, env.classifier, n, &self.rejected)?.features
            }
        };

        self.replay_push(TransitionRec {
            state: state.features,
            action: bits_to_f64(&bits),
            next_state: next_features,
            reward: outcome.reward,
        })?;
        outcome.update = self.train_from_replay()?;
        Ok(outcome)
    }
}
