//! DDPG actor-critic that learns which of the most margin-uncertain
//! unlabeled samples to send to the oracle.
//!
//! The actor is a per-row network shared across the `n` state rows, so one
//! state of shape `n × d_feat` yields `n` outputs in (−1, 1); positive
//! outputs select the sample. The critic scores `flatten(S) ++ a`.
//! Target copies of both are blended towards the online networks after each
//! update and are used to form the TD target `γ·Q′(S′, π′(S′)) + r`.

mod replay;
mod state;
mod step;

use std::collections::BTreeSet;

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{DralError, Result};
use crate::nn::{Activation, DenseNet, Gradients, Matrix, Optimizer};
use crate::rng::{stream_rng, Stream};

pub use replay::{ReplayBuffer, TransitionRec};
pub use state::{build_state, build_state_excluding, ActionVec, State};
pub use step::{StepEnv, StepLimits, StepOutcome};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AgentConfig {
    /// Number of candidate samples in a state.
    pub n: usize,
    pub gamma: f64,
    pub lambda_soft: f64,
    pub actor_lr: f64,
    pub critic_lr: f64,
    pub exploration_noise_std: f64,
    /// Multiplier applied to the noise level at the end of every round.
    pub noise_decay: f64,
    /// Hidden widths; a final width-1 layer is appended to both networks.
    pub actor_hidden: Vec<usize>,
    pub critic_hidden: Vec<usize>,
    pub replay_capacity: usize,
    pub min_fill_for_sampling: usize,
    pub sample_batch: usize,
}

impl Default for AgentConfig {
    fn default() -> Self {
        AgentConfig {
            n: 10,
            gamma: 0.99,
            lambda_soft: 0.01,
            actor_lr: 1e-4,
            critic_lr: 1e-4,
            exploration_noise_std: 0.2,
            noise_decay: 0.99,
            actor_hidden: vec![64, 64, 32, 16],
            critic_hidden: vec![64, 64, 32, 16],
            replay_capacity: 3000,
            min_fill_for_sampling: 128,
            sample_batch: 64,
        }
    }
}

impl AgentConfig {
    pub fn validate(&self) -> Result<()> {
        if self.n == 0 {
            return Err(DralError::Param("agent n must be at least 1".into()));
        }
        if !(self.gamma > 0.0 && self.gamma < 1.0) {
            return Err(DralError::Param(format!("gamma {} must lie in (0, 1)", self.gamma)));
        }
        if !(self.lambda_soft > 0.0 && self.lambda_soft < 1.0) {
            return Err(DralError::Param(format!("lambda_soft {} must lie in (0, 1)", self.lambda_soft)));
        }
        if !(self.actor_lr > 0.0 && self.critic_lr > 0.0) {
            return Err(DralError::Param("agent learning rates must be positive".into()));
        }
        if self.exploration_noise_std < 0.0 || self.noise_decay < 0.0 {
            return Err(DralError::Param("exploration noise settings must be non-negative".into()));
        }
        if self.sample_batch == 0 {
            return Err(DralError::Param("sample_batch must be positive".into()));
        }
        if self.actor_hidden.contains(&0) || self.critic_hidden.contains(&0) {
            return Err(DralError::Param("hidden widths must be positive".into()));
        }
        Ok(())
    }
}

/// Serializable agent state: config and the four networks, optionally the
/// replay buffer.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct AgentCheckpoint {
    pub config: AgentConfig,
    pub feature_dim: usize,
    pub actor: DenseNet,
    pub critic: DenseNet,
    pub target_actor: DenseNet,
    pub target_critic: DenseNet,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub buffer: Option<ReplayBuffer>,
}

#[derive(Clone, Debug)]
pub struct Agent {
    pub actor: DenseNet,
    pub critic: DenseNet,
    pub target_actor: DenseNet,
    pub target_critic: DenseNet,
    pub buffer: ReplayBuffer,
    config: AgentConfig,
    feature_dim: usize,
    actor_opt: Optimizer,
    critic_opt: Optimizer,
    replay_rng: ChaCha8Rng,
    noise_rng: ChaCha8Rng,
    noise_std: f64,
    /// Samples rejected since the classifier last changed; kept out of the
    /// state because re-offering them cannot change the gate's verdict.
    rejected: BTreeSet<usize>,
}

fn layer_spec(hidden: &[usize], output: Activation) -> Vec<(usize, Activation)> {
    hidden.iter().map(|&w| (w, Activation::Relu)).chain(std::iter::once((1, output))).collect()
}

impl Agent {
    pub fn new(config: AgentConfig, feature_dim: usize, seed: u64) -> Result<Self> {
        config.validate()?;
        if feature_dim == 0 {
            return Err(DralError::Param("feature dimension must be positive".into()));
        }
        let mut init = stream_rng(seed, Stream::AgentInit);
        let actor = DenseNet::new(feature_dim, &layer_spec(&config.actor_hidden, Activation::Tanh), &mut init)?;
        let critic_in = config.n * feature_dim + config.n;
        let critic = DenseNet::new(critic_in, &layer_spec(&config.critic_hidden, Activation::Identity), &mut init)?;
        Self::from_networks(config, feature_dim, actor, critic, seed)
    }

    /// Builds an agent around given online networks; targets start as exact copies.
    pub fn from_networks(
        config: AgentConfig,
        feature_dim: usize,
        actor: DenseNet,
        critic: DenseNet,
        seed: u64,
    ) -> Result<Self> {
        config.validate()?;
        if actor.input_dim() != feature_dim || actor.output_dim() != 1 {
            return Err(DralError::Shape(format!(
                "actor must map {feature_dim} features to 1 output, maps {} to {}",
                actor.input_dim(),
                actor.output_dim()
            )));
        }
        let critic_in = config.n * feature_dim + config.n;
        if critic.input_dim() != critic_in || critic.output_dim() != 1 {
            return Err(DralError::Shape(format!(
                "critic must map {critic_in} inputs to 1 output, maps {} to {}",
                critic.input_dim(),
                critic.output_dim()
            )));
        }
        Ok(Agent {
            target_actor: actor.clone(),
            target_critic: critic.clone(),
            actor,
            critic,
            buffer: ReplayBuffer::new(config.replay_capacity, config.min_fill_for_sampling, config.sample_batch),
            actor_opt: Optimizer::adam(config.actor_lr),
            critic_opt: Optimizer::adam(config.critic_lr),
            replay_rng: stream_rng(seed, Stream::Replay),
            noise_rng: stream_rng(seed, Stream::Exploration),
            noise_std: config.exploration_noise_std,
            rejected: BTreeSet::new(),
            feature_dim,
            config,
        })
    }

    pub fn config(&self) -> &AgentConfig {
        &self.config
    }

    pub fn feature_dim(&self) -> usize {
        self.feature_dim
    }

    pub fn noise_std(&self) -> f64 {
        self.noise_std
    }

    /// Shrinks exploration noise by `noise_decay`; called once per round.
    pub fn decay_noise(&mut self) {
        self.noise_std *= self.config.noise_decay;
    }

    /// Called after the classifier is retrained, so earlier rejections may
    /// be offered again.
    pub fn classifier_changed(&mut self) {
        self.rejected.clear();
    }

    pub fn rejected_ids(&self) -> &BTreeSet<usize> {
        &self.rejected
    }

    pub fn set_gamma(&mut self, gamma: f64) {
        self.config.gamma = gamma;
    }

    pub fn set_lambda(&mut self, lambda: f64) {
        self.config.lambda_soft = lambda;
    }

    fn check_state(&self, features: &Matrix) -> Result<()> {
        if features.shape() != (self.config.n, self.feature_dim) {
            return Err(DralError::Shape(format!(
                "state is {}x{}, agent expects {}x{}",
                features.rows(),
                features.cols(),
                self.config.n,
                self.feature_dim
            )));
        }
        Ok(())
    }

    /// Thresholded actor decision for each state row. With `training`,
    /// Gaussian noise is added to the tanh output and clipped back into
    /// (−1, 1). Padded rows report a raw value of 0 and are never selected.
    pub fn actor_act(&mut self, state: &State, training: bool) -> Result<ActionVec> {
        self.check_state(&state.features)?;
        let out = self.actor.forward(&state.features)?;
        let limit = 1.0 - f64::EPSILON;
        let raw = out
            .as_slice()
            .iter()
            .zip(&state.selectable)
            .map(|(&v, &ok)| {
                if !ok {
                    return 0.0;
                }
                if training && self.noise_std > 0.0 {
                    let eps: f64 = self.noise_rng.sample(StandardNormal);
                    (v + self.noise_std * eps).clamp(-limit, limit)
                } else {
                    v
                }
            })
            .collect();
        Ok(ActionVec::from_raw(raw))
    }

    /// `[flatten(S_b) | a_b]` for each batch element, one row each.
    fn critic_input(&self, states: &[&Matrix], actions: &Matrix) -> Result<Matrix> {
        let flat: Vec<f64> = states.iter().flat_map(|s| s.as_slice().iter().copied()).collect();
        let flat = Matrix::from_vec(states.len(), self.config.n * self.feature_dim, flat)?;
        flat.hconcat(actions)
    }

    /// Policy outputs for a batch of states, shaped `batch × n`.
    fn policy_batch(net: &DenseNet, states: &[&Matrix], n: usize) -> Result<Matrix> {
        let stacked = Matrix::vstack(states)?;
        net.forward(&stacked)?.reshape(states.len(), n)
    }

    /// `γ·Q′(S′, π′(S′)) + r` for a single transition.
    pub fn td_target(&self, next_state: &Matrix, reward: f64) -> Result<f64> {
        self.check_state(next_state)?;
        Ok(self.td_targets(&[next_state], &[reward])?[0])
    }

    fn td_targets(&self, next_states: &[&Matrix], rewards: &[f64]) -> Result<Vec<f64>> {
        let actions = Self::policy_batch(&self.target_actor, next_states, self.config.n)?;
        let q = self.target_critic.forward(&self.critic_input(next_states, &actions)?)?;
        Ok(q.as_slice().iter().zip(rewards).map(|(q, r)| self.config.gamma * q + r).collect())
    }

    /// Online critic value for stored (state, action) pairs.
    pub fn q_values(&self, states: &[&Matrix], actions: &[&[f64]]) -> Result<Vec<f64>> {
        let flat: Vec<f64> = actions.iter().flat_map(|a| a.iter().copied()).collect();
        let a = Matrix::from_vec(actions.len(), self.config.n, flat)?;
        Ok(self.critic.forward(&self.critic_input(states, &a)?)?.into_vec())
    }

    fn check_batch(&self, batch: &[&TransitionRec]) -> Result<()> {
        if batch.is_empty() {
            return Err(DralError::Param("update needs a non-empty batch".into()));
        }
        for rec in batch {
            self.check_state(&rec.state)?;
            self.check_state(&rec.next_state)?;
            if rec.action.len() != self.config.n {
                return Err(DralError::Shape(format!(
                    "action has {} entries, expected {}",
                    rec.action.len(),
                    self.config.n
                )));
            }
        }
        Ok(())
    }

    /// Mean squared TD error over the batch and its gradient for the critic.
    pub fn critic_loss_and_gradient(&mut self, batch: &[&TransitionRec]) -> Result<(f64, Gradients)> {
        self.check_batch(batch)?;
        let next: Vec<&Matrix> = batch.iter().map(|t| &t.next_state).collect();
        let rewards: Vec<f64> = batch.iter().map(|t| t.reward).collect();
        let targets = self.td_targets(&next, &rewards)?;

        let states: Vec<&Matrix> = batch.iter().map(|t| &t.state).collect();
        let flat: Vec<f64> = batch.iter().flat_map(|t| t.action.iter().copied()).collect();
        let actions = Matrix::from_vec(batch.len(), self.config.n, flat)?;
        let input = self.critic_input(&states, &actions)?;
        let q = self.critic.forward_train(&input)?;
        let m = batch.len() as f64;
        let mut loss = 0.0;
        let mut upstream = Matrix::zeros(batch.len(), 1);
        for (i, (&qv, &tv)) in q.as_slice().iter().zip(&targets).enumerate() {
            let diff = qv - tv;
            loss += diff * diff / m;
            upstream.set(i, 0, 2.0 * diff / m);
        }
        if !loss.is_finite() {
            return Err(DralError::NonFinite { path: "critic loss".into() });
        }
        let grads = self.critic.backward(&upstream)?;
        self.critic.clear_cache();
        Ok((loss, grads))
    }

    /// One Adam step on the critic towards the TD targets. Returns the loss
    /// before the step.
    pub fn critic_update(&mut self, batch: &[&TransitionRec]) -> Result<f64> {
        let (loss, grads) = self.critic_loss_and_gradient(batch)?;
        self.critic_opt.step(&mut self.critic, &grads)?;
        Ok(loss)
    }

    /// Mean `Q(S, π(S))` over the batch states and its gradient with
    /// respect to the actor parameters (critic held fixed).
    pub fn actor_objective_and_gradient(&mut self, batch: &[&TransitionRec]) -> Result<(f64, Gradients)> {
        self.check_batch(batch)?;
        let states: Vec<&Matrix> = batch.iter().map(|t| &t.state).collect();
        let stacked = Matrix::vstack(&states)?;
        let raw = self.actor.forward_train(&stacked)?;
        let actions = raw.reshape(batch.len(), self.config.n)?;
        let input = self.critic_input(&states, &actions)?;

        let mut critic = self.critic.clone();
        let q = critic.forward_train(&input)?;
        let m = batch.len() as f64;
        let objective = q.as_slice().iter().sum::<f64>() / m;
        if !objective.is_finite() {
            return Err(DralError::NonFinite { path: "actor objective".into() });
        }
        let dq = critic.backward(&Matrix::filled(batch.len(), 1, 1.0 / m))?;
        let action_cols = self.config.n * self.feature_dim;
        let d_actions = dq.input.columns(action_cols, action_cols + self.config.n);
        let upstream = d_actions.reshape(batch.len() * self.config.n, 1)?;
        let grads = self.actor.backward(&upstream)?;
        self.actor.clear_cache();
        Ok((objective, grads))
    }

    /// One Adam step on the actor ascending mean `Q(S, π(S))`. Returns the
    /// objective before the step.
    pub fn actor_update(&mut self, batch: &[&TransitionRec]) -> Result<f64> {
        let (objective, mut grads) = self.actor_objective_and_gradient(batch)?;
        grads.scale(-1.0);
        self.actor_opt.step(&mut self.actor, &grads)?;
        Ok(objective)
    }

    /// `θ′ ← λθ + (1 − λ)θ′` for both target networks.
    pub fn soft_update(&mut self) -> Result<()> {
        let lambda = self.config.lambda_soft;
        self.target_actor.blend_from(&self.actor, lambda)?;
        self.target_critic.blend_from(&self.critic, lambda)?;
        Ok(())
    }

    /// Same blend with an explicit `λ`, including the limits 0 and 1.
    pub fn soft_update_with(&mut self, lambda: f64) -> Result<()> {
        if !(0.0..=1.0).contains(&lambda) {
            return Err(DralError::Param(format!("blend factor {lambda} outside [0, 1]")));
        }
        self.target_actor.blend_from(&self.actor, lambda)?;
        self.target_critic.blend_from(&self.critic, lambda)?;
        Ok(())
    }

    pub fn replay_push(&mut self, rec: TransitionRec) -> Result<()> {
        self.check_batch(&[&rec])?;
        self.buffer.push(rec);
        Ok(())
    }

    /// Critic step, actor step and target blend on a replay minibatch, if
    /// the buffer is full enough. Returns `(critic_loss, actor_objective)`.
    pub fn train_from_replay(&mut self) -> Result<Option<(f64, f64)>> {
        let batch: Vec<TransitionRec> = self.buffer.sample(&mut self.replay_rng).into_iter().cloned().collect();
        if batch.is_empty() {
            return Ok(None);
        }
        let refs: Vec<&TransitionRec> = batch.iter().collect();
        let critic_loss = self.critic_update(&refs)?;
        let objective = self.actor_update(&refs)?;
        self.soft_update()?;
        Ok(Some((critic_loss, objective)))
    }

    pub fn checkpoint(&self, include_buffer: bool) -> AgentCheckpoint {
        AgentCheckpoint {
            config: self.config.clone(),
            feature_dim: self.feature_dim,
            actor: self.actor.clone(),
            critic: self.critic.clone(),
            target_actor: self.target_actor.clone(),
            target_critic: self.target_critic.clone(),
            buffer: include_buffer.then(|| self.buffer.clone()),
        }
    }

    /// Restores networks (and buffer, when present); optimizers start fresh.
    pub fn from_checkpoint(cp: AgentCheckpoint, seed: u64) -> Result<Self> {
        let mut agent = Agent::from_networks(cp.config, cp.feature_dim, cp.actor, cp.critic, seed)?;
        if !agent.target_actor.same_architecture(&cp.target_actor)
            || !agent.target_critic.same_architecture(&cp.target_critic)
        {
            return Err(DralError::Shape("target networks do not mirror the online networks".into()));
        }
        agent.target_actor = cp.target_actor;
        agent.target_critic = cp.target_critic;
        if let Some(buffer) = cp.buffer {
            agent.buffer = buffer;
        }
        Ok(agent)
    }
}

/// Accuracy difference after minus before.
pub fn compute_reward(acc_after: f64, acc_before: f64) -> f64 {
    acc_after - acc_before
}
