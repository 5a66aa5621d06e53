//! Central finite-difference checks of the hand-written gradients.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use crate::agent::{Agent, AgentConfig, TransitionRec};
use crate::error::Result;
use crate::nn::{cross_entropy, Activation, DenseNet, Matrix};

pub const FD_EPSILON: f64 = 1e-5;
pub const LAYER_TOLERANCE: f64 = 1e-4;
pub const COMPOSED_TOLERANCE: f64 = 1e-3;

/// `|a − n| / max(|a|, |n|, 1e-6)`; the floor keeps near-zero entries from
/// dominating.
pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(1e-6)
}

#[derive(Clone, Debug, Serialize)]
pub struct CheckResult {
    pub name: String,
    pub params_checked: usize,
    pub max_rel_error: f64,
    pub tolerance: f64,
}

impl CheckResult {
    pub fn passed(&self) -> bool {
        self.max_rel_error < self.tolerance
    }
}

#[derive(Clone, Debug, Serialize)]
pub struct GradCheckReport {
    pub checks: Vec<CheckResult>,
}

impl GradCheckReport {
    pub fn passed(&self) -> bool {
        self.checks.iter().all(CheckResult::passed)
    }

    /// Worst error among the plain layer checks.
    pub fn max_layer_error(&self) -> f64 {
        self.checks.iter().filter(|c| c.tolerance == LAYER_TOLERANCE).map(|c| c.max_rel_error).fold(0.0, f64::max)
    }

    pub fn max_composed_error(&self) -> f64 {
        self.checks.iter().filter(|c| c.tolerance == COMPOSED_TOLERANCE).map(|c| c.max_rel_error).fold(0.0, f64::max)
    }
}

/// Compares `analytic` with central differences of `loss` over `params`.
fn compare(params: &[f64], analytic: &[f64], mut loss: impl FnMut(&[f64]) -> Result<f64>) -> Result<f64> {
    let mut worst: f64 = 0.0;
    let mut p = params.to_vec();
    for i in 0..p.len() {
        let orig = p[i];
        p[i] = orig + FD_EPSILON;
        let up = loss(&p)?;
        p[i] = orig - FD_EPSILON;
        let down = loss(&p)?;
        p[i] = orig;
        let numeric = (up - down) / (2.0 * FD_EPSILON);
        worst = worst.max(relative_error(analytic[i], numeric));
    }
    Ok(worst)
}

/// Loss `Σ c ⊙ net(x)` with fixed random coefficients; checks parameter
/// and input gradients.
fn check_weighted_sum(name: &str, net: &DenseNet, x: &Matrix, rng: &mut ChaCha8Rng) -> Result<CheckResult> {
    let out_dim = net.output_dim();
    let coeffs = Matrix::from_fn(x.rows(), out_dim, |_, _| rng.random_range(-1.0..1.0));
    let weighted = |out: &Matrix| out.as_slice().iter().zip(coeffs.as_slice()).map(|(a, b)| a * b).sum::<f64>();

    let mut train = net.clone();
    train.forward_train(x)?;
    let grads = train.backward(&coeffs)?;

    let mut probe = net.clone();
    let params = net.flat_params();
    let mut worst = compare(&params, &grads.flatten(), |p| {
        probe.set_flat_params(p)?;
        Ok(weighted(&probe.forward(x)?))
    })?;
    let input_err = compare(x.as_slice(), grads.input.as_slice(), |p| {
        let xi = Matrix::from_vec(x.rows(), x.cols(), p.to_vec())?;
        Ok(weighted(&net.forward(&xi)?))
    })?;
    worst = worst.max(input_err);
    Ok(CheckResult {
        name: name.into(),
        params_checked: params.len() + x.as_slice().len(),
        max_rel_error: worst,
        tolerance: LAYER_TOLERANCE,
    })
}

/// Cross-entropy on a softmax head, backpropagated from the logits.
fn check_cross_entropy(net: &DenseNet, x: &Matrix, rng: &mut ChaCha8Rng) -> Result<CheckResult> {
    let classes = net.output_dim();
    let labels: Vec<usize> = (0..x.rows()).map(|_| rng.random_range(0..classes)).collect();
    let mut train = net.clone();
    let probs = train.forward_train(x)?;
    let (_, grad) = cross_entropy(&probs, &labels)?;
    let grads = train.backward_from_logits(&grad)?;
    let mut probe = net.clone();
    let params = net.flat_params();
    let worst = compare(&params, &grads.flatten(), |p| {
        probe.set_flat_params(p)?;
        Ok(cross_entropy(&probe.forward(x)?, &labels)?.0)
    })?;
    Ok(CheckResult {
        name: "classifier cross-entropy".into(),
        params_checked: params.len(),
        max_rel_error: worst,
        tolerance: LAYER_TOLERANCE,
    })
}

/// Mean `Q(S, π(S))` against the actor parameters, through the critic.
fn check_composed(seed: u64) -> Result<Vec<CheckResult>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let (n, d) = (3, 4);
    let cfg = AgentConfig { n, actor_hidden: vec![8, 8], critic_hidden: vec![8, 8], ..AgentConfig::default() };
    let mut agent = Agent::new(cfg, d, seed)?;
    let batch: Vec<TransitionRec> = (0..4)
        .map(|_| TransitionRec {
            state: Matrix::from_fn(n, d, |_, _| rng.random_range(-1.0..1.0)),
            action: vec![0.0; n],
            next_state: Matrix::zeros(n, d),
            reward: 0.0,
        })
        .collect();
    let refs: Vec<&TransitionRec> = batch.iter().collect();
    let (_, actor_grads) = agent.actor_objective_and_gradient(&refs)?;
    let (_, critic_grads) = agent.critic_loss_and_gradient(&refs)?;

    let params = agent.actor.flat_params();
    let mut probe = agent.clone();
    let actor_err = compare(&params, &actor_grads.flatten(), |p| {
        probe.actor.set_flat_params(p)?;
        mean_q(&probe, &batch)
    })?;

    let critic_params = agent.critic.flat_params();
    let mut probe = agent.clone();
    let critic_err = compare(&critic_params, &critic_grads.flatten(), |p| {
        probe.critic.set_flat_params(p)?;
        Ok(probe.critic_loss_and_gradient(&refs)?.0)
    })?;
    Ok(vec![
        CheckResult {
            name: "critic td loss".into(),
            params_checked: critic_params.len(),
            max_rel_error: critic_err,
            tolerance: LAYER_TOLERANCE,
        },
        CheckResult {
            name: "critic∘actor objective".into(),
            params_checked: params.len(),
            max_rel_error: actor_err,
            tolerance: COMPOSED_TOLERANCE,
        },
    ])
}

fn mean_q(agent: &Agent, batch: &[TransitionRec]) -> Result<f64> {
    let n = agent.config().n;
    let mut total = 0.0;
    for t in batch {
        let a = agent.actor.forward(&t.state)?.reshape(1, n)?;
        let flat = Matrix::from_vec(1, t.state.as_slice().len(), t.state.as_slice().to_vec())?;
        total += agent.critic.forward(&flat.hconcat(&a)?)?.get(0, 0);
    }
    Ok(total / batch.len() as f64)
}

/// Every activation as hidden and output layer, a softmax/cross-entropy
/// head, the critic's TD loss and the critic∘actor path.
pub fn run_grad_check(seed: u64) -> Result<GradCheckReport> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut checks = Vec::new();
    let acts = [Activation::Tanh, Activation::Relu, Activation::Identity];
    for hidden in acts {
        for output in acts.iter().copied().chain([Activation::Softmax]) {
            let spec = [(12, hidden), (8, hidden), (5, output)];
            let net = DenseNet::new(6, &spec, &mut rng)?;
            let x = Matrix::from_fn(4, 6, |_, _| rng.random_range(-1.5..1.5));
            let name = format!("{hidden:?}->{output:?}").to_lowercase();
            checks.push(check_weighted_sum(&name, &net, &x, &mut rng)?);
        }
    }
    let net = DenseNet::new(6, &[(32, Activation::Relu), (32, Activation::Tanh), (4, Activation::Softmax)], &mut rng)?;
    let x = Matrix::from_fn(5, 6, |_, _| rng.random_range(-1.5..1.5));
    checks.push(check_cross_entropy(&net, &x, &mut rng)?);
    checks.extend(check_composed(seed)?);
    Ok(GradCheckReport { checks })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn relative_error_floor() {
        assert_eq!(relative_error(0.0, 0.0), 0.0);
        assert!((relative_error(1.0, 1.1) - 0.1 / 1.1).abs() < 1e-15);
        assert!((relative_error(1e-9, 0.0) - 1e-3).abs() < 1e-15);
    }

    #[test]
    fn suite_passes_and_covers_every_activation() {
        let report = run_grad_check(0).unwrap();
        for c in &report.checks {
            assert!(c.passed(), "{}: {}", c.name, c.max_rel_error);
        }
        for needle in ["tanh", "relu", "identity", "softmax", "cross-entropy", "critic∘actor"] {
            assert!(report.checks.iter().any(|c| c.name.contains(needle)), "{needle}");
        }
    }

    #[test]
    fn detects_a_wrong_gradient() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let net = DenseNet::new(3, &[(2, Activation::Tanh)], &mut rng).unwrap();
        let params = net.flat_params();
        let x = Matrix::filled(1, 3, 0.5);
        let mut probe = net.clone();
        let wrong = vec![1.0; params.len()];
        let err = compare(&params, &wrong, |p| {
            probe.set_flat_params(p)?;
            Ok(probe.forward(&x)?.as_slice().iter().sum())
        })
        .unwrap();
        assert!(err > LAYER_TOLERANCE);
    }
}
