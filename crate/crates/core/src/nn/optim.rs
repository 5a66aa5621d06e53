use serde::{Deserialize, Serialize};

use super::dense::{DenseNet, Gradients};
use crate::error::{DralError, Result};

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case")]
pub enum OptimKind {
    SgdMomentum { momentum: f64, weight_decay: f64 },
    Adam { beta1: f64, beta2: f64, epsilon: f64 },
}

impl OptimKind {
    pub fn adam() -> Self {
        OptimKind::Adam { beta1: 0.9, beta2: 0.999, epsilon: 1e-8 }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
struct Slots {
    /// Velocity (SGD) or first moment (Adam).
    first_w: Vec<f64>,
    first_b: Vec<f64>,
    /// Second moment, Adam only.
    second_w: Vec<f64>,
    second_b: Vec<f64>,
}

/// Optimizer state for one network. Accumulators are created on the first
/// step and mirror the network's parameter shapes from then on.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Optimizer {
    pub kind: OptimKind,
    pub learning_rate: f64,
    step: u64,
    slots: Vec<Slots>,
}

impl Optimizer {
    pub fn new(kind: OptimKind, learning_rate: f64) -> Self {
        Optimizer { kind, learning_rate, step: 0, slots: Vec::new() }
    }

    pub fn sgd(learning_rate: f64, momentum: f64, weight_decay: f64) -> Self {
        Optimizer::new(OptimKind::SgdMomentum { momentum, weight_decay }, learning_rate)
    }

    pub fn adam(learning_rate: f64) -> Self {
        Optimizer::new(OptimKind::adam(), learning_rate)
    }

    pub fn steps_taken(&self) -> u64 {
        self.step
    }

    fn check(&self, net: &DenseNet, grads: &Gradients) -> Result<()> {
        if grads.layers.len() != net.layers().len() {
            return Err(DralError::Shape(format!(
                "{} gradient layers for a {}-layer network",
                grads.layers.len(),
                net.layers().len()
            )));
        }
        for (k, (layer, g)) in net.layers().iter().zip(&grads.layers).enumerate() {
            if g.weights.shape() != layer.weights.shape() || g.bias.len() != layer.bias.len() {
                return Err(DralError::Shape(format!("gradient shape mismatch at layer {k}")));
            }
            if !g.weights.is_finite() {
                return Err(DralError::NonFinite { path: format!("layer[{k}].weights") });
            }
            if g.bias.iter().any(|v| !v.is_finite()) {
                return Err(DralError::NonFinite { path: format!("layer[{k}].bias") });
            }
        }
        Ok(())
    }

    /// Applies one descent step. The whole update is rejected if any gradient
    /// entry is non-finite.
    pub fn step(&mut self, net: &mut DenseNet, grads: &Gradients) -> Result<()> {
        self.check(net, grads)?;
        if self.slots.is_empty() {
            self.slots = net
                .layers()
                .iter()
                .map(|l| {
                    let nw = l.weights.as_slice().len();
                    let nb = l.bias.len();
                    let adam = matches!(self.kind, OptimKind::Adam { .. });
                    Slots {
                        first_w: vec![0.0; nw],
                        first_b: vec![0.0; nb],
                        second_w: if adam { vec![0.0; nw] } else { Vec::new() },
                        second_b: if adam { vec![0.0; nb] } else { Vec::new() },
                    }
                })
                .collect();
        } else if self.slots.len() != net.layers().len() {
            return Err(DralError::Shape("optimizer state belongs to another network".into()));
        }
        self.step += 1;
        let lr = self.learning_rate;
        let t = self.step as i32;
        for ((layer, g), slot) in net.layers_mut().iter_mut().zip(&grads.layers).zip(&mut self.slots) {
            match self.kind {
                OptimKind::SgdMomentum { momentum, weight_decay } => {
                    sgd_update(
                        layer.weights.as_mut_slice(),
                        g.weights.as_slice(),
                        &mut slot.first_w,
                        lr,
                        momentum,
                        weight_decay,
                    );
                    sgd_update(&mut layer.bias, &g.bias, &mut slot.first_b, lr, momentum, 0.0);
                }
                OptimKind::Adam { beta1, beta2, epsilon } => {
                    let c1 = 1.0 - beta1.powi(t);
                    let c2 = 1.0 - beta2.powi(t);
                    let hp = AdamHyper { lr, beta1, beta2, epsilon, c1, c2 };
                    adam_update(
                        layer.weights.as_mut_slice(),
                        g.weights.as_slice(),
                        &mut slot.first_w,
                        &mut slot.second_w,
                        &hp,
                    );
                    adam_update(&mut layer.bias, &g.bias, &mut slot.first_b, &mut slot.second_b, &hp);
                }
            }
        }
        Ok(())
    }
}

fn sgd_update(w: &mut [f64], g: &[f64], v: &mut [f64], lr: f64, momentum: f64, wd: f64) {
    for ((w, g), v) in w.iter_mut().zip(g).zip(v.iter_mut()) {
        *v = momentum * *v - lr * (g + wd * *w);
        *w += *v;
    }
}

struct AdamHyper {
    lr: f64,
    beta1: f64,
    beta2: f64,
    epsilon: f64,
    c1: f64,
    c2: f64,
}

fn adam_update(w: &mut [f64], g: &[f64], m: &mut [f64], v: &mut [f64], hp: &AdamHyper) {
    for (((w, &g), m), v) in w.iter_mut().zip(g).zip(m.iter_mut()).zip(v.iter_mut()) {
        *m = hp.beta1 * *m + (1.0 - hp.beta1) * g;
        *v = hp.beta2 * *v + (1.0 - hp.beta2) * g * g;
        let m_hat = *m / hp.c1;
        let v_hat = *v / hp.c2;
        *w -= hp.lr * m_hat / (v_hat.sqrt() + hp.epsilon);
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::{Activation, Layer, LayerGrad, Matrix};

    fn scalar_net(w: f64) -> DenseNet {
        DenseNet::from_layers(vec![Layer {
            weights: Matrix::from_vec(1, 1, vec![w]).unwrap(),
            bias: vec![0.0],
            activation: Activation::Identity,
        }])
        .unwrap()
    }

    fn scalar_grad(gw: f64) -> Gradients {
        Gradients {
            layers: vec![LayerGrad { weights: Matrix::from_vec(1, 1, vec![gw]).unwrap(), bias: vec![0.0] }],
            input: Matrix::zeros(1, 1),
        }
    }

    #[test]
    fn plain_sgd_step() {
        let mut net = scalar_net(1.0);
        let mut opt = Optimizer::sgd(0.1, 0.0, 0.0);
        opt.step(&mut net, &scalar_grad(0.1)).unwrap();
        assert!((net.layers()[0].weights.get(0, 0) - 0.99).abs() < 1e-15);
    }

    #[test]
    fn adam_zero_gradient_first_step_is_noop() {
        let mut net = scalar_net(0.37);
        let mut opt = Optimizer::adam(1e-3);
        opt.step(&mut net, &scalar_grad(0.0)).unwrap();
        assert_eq!(net.layers()[0].weights.get(0, 0), 0.37);
        assert_eq!(opt.steps_taken(), 1);
    }

    #[test]
    fn sgd_momentum_matches_recurrence() {
        // f(w) = 0.5·a·w², g = a·w; hand-iterated v/w recurrence.
        let (a, lr, m, wd) = (3.0, 0.05, 0.9, 5e-4);
        let mut net = scalar_net(2.0);
        let mut opt = Optimizer::sgd(lr, m, wd);
        let (mut w, mut v) = (2.0f64, 0.0f64);
        for _ in 0..5 {
            let g = a * net.layers()[0].weights.get(0, 0);
            opt.step(&mut net, &scalar_grad(g)).unwrap();
            let g_ref = a * w;
            v = m * v - lr * (g_ref + wd * w);
            w += v;
            assert!((net.layers()[0].weights.get(0, 0) - w).abs() < 1e-12);
        }
    }

    #[test]
    fn adam_matches_reference_formula() {
        let mut net = scalar_net(1.0);
        let mut opt = Optimizer::adam(0.01);
        let (b1, b2, eps) = (0.9f64, 0.999f64, 1e-8);
        let (mut w, mut m, mut v) = (1.0f64, 0.0f64, 0.0f64);
        for t in 1..=4 {
            let g = 2.0 * w;
            opt.step(&mut net, &scalar_grad(g)).unwrap();
            m = b1 * m + (1.0 - b1) * g;
            v = b2 * v + (1.0 - b2) * g * g;
            w -= 0.01 * (m / (1.0 - b1.powi(t))) / ((v / (1.0 - b2.powi(t))).sqrt() + eps);
            assert!((net.layers()[0].weights.get(0, 0) - w).abs() < 1e-15);
        }
    }

    #[test]
    fn weight_decay_skips_bias() {
        let mut net = DenseNet::from_layers(vec![Layer {
            weights: Matrix::from_vec(1, 1, vec![1.0]).unwrap(),
            bias: vec![1.0],
            activation: Activation::Identity,
        }])
        .unwrap();
        let mut opt = Optimizer::sgd(0.1, 0.0, 0.5);
        opt.step(&mut net, &scalar_grad(0.0)).unwrap();
        assert!((net.layers()[0].weights.get(0, 0) - 0.95).abs() < 1e-15);
        assert_eq!(net.layers()[0].bias[0], 1.0);
    }

    #[test]
    fn non_finite_gradient_rejected_with_path() {
        let mut net = scalar_net(1.0);
        let mut opt = Optimizer::sgd(0.1, 0.9, 0.0);
        let err = opt.step(&mut net, &scalar_grad(f64::NAN)).unwrap_err();
        match err {
            DralError::NonFinite { path } => assert_eq!(path, "layer[0].weights"),
            other => panic!("unexpected {other:?}"),
        }
        assert_eq!(net.layers()[0].weights.get(0, 0), 1.0);
        assert_eq!(opt.steps_taken(), 0);
    }
}
