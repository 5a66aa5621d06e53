use rand::Rng;
use serde::{Deserialize, Serialize};

use super::matrix::Matrix;
use crate::error::{DralError, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Activation {
    Tanh,
    Relu,
    Identity,
    /// Row-wise softmax. Only valid on the output layer.
    Softmax,
}

impl Activation {
    fn apply(self, z: &mut Matrix) {
        match self {
            Activation::Tanh => z.as_mut_slice().iter_mut().for_each(|v| *v = v.tanh()),
            Activation::Relu => z.as_mut_slice().iter_mut().for_each(|v| *v = v.max(0.0)),
            Activation::Identity => {}
            Activation::Softmax => {
                for r in 0..z.rows() {
                    softmax_in_place(z.row_mut(r));
                }
            }
        }
    }

    /// Maps `dL/d(output)` to `dL/d(pre-activation)` given the layer output `y`.
    fn backprop(self, y: &Matrix, upstream: &Matrix) -> Matrix {
        match self {
            Activation::Tanh => Matrix::from_fn(y.rows(), y.cols(), |r, c| {
                let yv = y.get(r, c);
                upstream.get(r, c) * (1.0 - yv * yv)
            }),
            Activation::Relu => {
                Matrix::from_fn(y.rows(), y.cols(), |r, c| if y.get(r, c) > 0.0 { upstream.get(r, c) } else { 0.0 })
            }
            Activation::Identity => upstream.clone(),
            Activation::Softmax => {
                let mut out = Matrix::zeros(y.rows(), y.cols());
                for r in 0..y.rows() {
                    let p = y.row(r);
                    let g = upstream.row(r);
                    let inner: f64 = p.iter().zip(g).map(|(a, b)| a * b).sum();
                    for (dst, (pv, gv)) in out.row_mut(r).iter_mut().zip(p.iter().zip(g)) {
                        *dst = pv * (gv - inner);
                    }
                }
                out
            }
        }
    }
}

fn softmax_in_place(row: &mut [f64]) {
    let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let mut sum = 0.0;
    for v in row.iter_mut() {
        *v = (*v - max).exp();
        sum += *v;
    }
    for v in row.iter_mut() {
        *v /= sum;
    }
}

/// One fully connected layer, `y = act(x·Wᵀ + b)` with `W` stored `out × in`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Layer {
    pub weights: Matrix,
    pub bias: Vec<f64>,
    pub activation: Activation,
}

impl Layer {
    pub fn input_dim(&self) -> usize {
        self.weights.cols()
    }

    pub fn output_dim(&self) -> usize {
        self.weights.rows()
    }

    pub fn num_params(&self) -> usize {
        self.weights.as_slice().len() + self.bias.len()
    }

    fn forward(&self, x: &Matrix) -> Matrix {
        let mut z = x.matmul_transposed(&self.weights);
        for r in 0..z.rows() {
            for (v, b) in z.row_mut(r).iter_mut().zip(&self.bias) {
                *v += b;
            }
        }
        self.activation.apply(&mut z);
        z
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct LayerGrad {
    pub weights: Matrix,
    pub bias: Vec<f64>,
}

/// Parameter gradients, one entry per layer, plus the gradient with respect
/// to the network input.
#[derive(Clone, Debug, PartialEq)]
pub struct Gradients {
    pub layers: Vec<LayerGrad>,
    pub input: Matrix,
}

impl Gradients {
    pub fn flatten(&self) -> Vec<f64> {
        let mut out = Vec::new();
        for g in &self.layers {
            out.extend_from_slice(g.weights.as_slice());
            out.extend_from_slice(&g.bias);
        }
        out
    }

    pub fn scale(&mut self, factor: f64) {
        for g in &mut self.layers {
            g.weights.as_mut_slice().iter_mut().for_each(|v| *v *= factor);
            g.bias.iter_mut().for_each(|v| *v *= factor);
        }
        self.input.as_mut_slice().iter_mut().for_each(|v| *v *= factor);
    }
}

#[derive(Clone, Debug)]
struct ForwardCache {
    /// `activations[0]` is the input, `activations[k + 1]` the output of layer `k`.
    activations: Vec<Matrix>,
}

/// Feedforward stack of dense layers.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct DenseNet {
    layers: Vec<Layer>,
    #[serde(skip)]
    cache: Option<ForwardCache>,
}

impl PartialEq for DenseNet {
    fn eq(&self, other: &Self) -> bool {
        self.layers == other.layers
    }
}

impl DenseNet {
    /// Builds a net with Glorot-uniform weights and zero biases.
    ///
    /// `spec` lists `(width, activation)` for each layer in order.
    pub fn new<R: Rng + ?Sized>(input_dim: usize, spec: &[(usize, Activation)], rng: &mut R) -> Result<Self> {
        let mut layers = Vec::with_capacity(spec.len());
        let mut fan_in = input_dim;
        for &(width, activation) in spec {
            let s = (6.0 / (fan_in + width) as f64).sqrt();
            let weights = Matrix::from_fn(width, fan_in, |_, _| rng.random_range(-s..s));
            layers.push(Layer { weights, bias: vec![0.0; width], activation });
            fan_in = width;
        }
        DenseNet::from_layers(layers)
    }

    pub fn from_layers(layers: Vec<Layer>) -> Result<Self> {
        if layers.is_empty() {
            return Err(DralError::Param("a network needs at least one layer".into()));
        }
        for (k, layer) in layers.iter().enumerate() {
            if layer.bias.len() != layer.output_dim() {
                return Err(DralError::Shape(format!(
                    "layer {k}: bias length {} != output width {}",
                    layer.bias.len(),
                    layer.output_dim()
                )));
            }
            if k > 0 && layers[k - 1].output_dim() != layer.input_dim() {
                return Err(DralError::LayerShape {
                    layer: k,
                    expected: layers[k - 1].output_dim(),
                    got: layer.input_dim(),
                });
            }
            if layer.activation == Activation::Softmax && k + 1 != layers.len() {
                return Err(DralError::Param(format!(
                    "softmax is only permitted on the final layer, found on layer {k}"
                )));
            }
        }
        Ok(DenseNet { layers, cache: None })
    }

    pub fn layers(&self) -> &[Layer] {
        &self.layers
    }

    /// Mutable access for in-place parameter edits. Callers must keep shapes.
    pub fn layers_mut(&mut self) -> &mut [Layer] {
        self.cache = None;
        &mut self.layers
    }

    pub fn input_dim(&self) -> usize {
        self.layers[0].input_dim()
    }

    pub fn output_dim(&self) -> usize {
        self.layers[self.layers.len() - 1].output_dim()
    }

    pub fn num_params(&self) -> usize {
        self.layers.iter().map(Layer::num_params).sum()
    }

    fn check_input(&self, layer: usize, x: &Matrix) -> Result<()> {
        let expected = self.layers[layer].input_dim();
        if x.cols() != expected {
            return Err(DralError::LayerShape { layer, expected, got: x.cols() });
        }
        Ok(())
    }

    /// Inference pass; leaves the training cache untouched.
    pub fn forward(&self, x: &Matrix) -> Result<Matrix> {
        self.forward_to(x, self.layers.len())
    }

    /// Output of the first `depth` layers (`depth = 0` returns the input).
    pub fn forward_to(&self, x: &Matrix, depth: usize) -> Result<Matrix> {
        self.forward_range(x, 0, depth)
    }

    /// Applies layers `start..end` to `x`, which must be the output of layer `start - 1`.
    pub fn forward_range(&self, x: &Matrix, start: usize, end: usize) -> Result<Matrix> {
        if start > end || end > self.layers.len() {
            return Err(DralError::Param(format!(
                "layer range {start}..{end} invalid for {} layers",
                self.layers.len()
            )));
        }
        let mut h = x.clone();
        for k in start..end {
            self.check_input(k, &h)?;
            h = self.layers[k].forward(&h);
        }
        Ok(h)
    }

    /// Forward pass that records activations for a following [`backward`](Self::backward).
    pub fn forward_train(&mut self, x: &Matrix) -> Result<Matrix> {
        let mut activations = Vec::with_capacity(self.layers.len() + 1);
        activations.push(x.clone());
        for (k, layer) in self.layers.iter().enumerate() {
            let h = activations.last().expect("non-empty");
            self.check_input(k, h)?;
            let next = layer.forward(h);
            activations.push(next);
        }
        let out = activations.last().cloned().expect("non-empty");
        self.cache = Some(ForwardCache { activations });
        Ok(out)
    }

    /// Backpropagates `dL/d(output)` through the cached forward pass.
    pub fn backward(&self, upstream: &Matrix) -> Result<Gradients> {
        self.backward_impl(upstream, false)
    }

    /// Like [`backward`](Self::backward), but `upstream` is taken with respect
    /// to the final layer's pre-activation (e.g. softmax logits), so the final
    /// activation's Jacobian is skipped.
    pub fn backward_from_logits(&self, upstream: &Matrix) -> Result<Gradients> {
        self.backward_impl(upstream, true)
    }

    fn backward_impl(&self, upstream: &Matrix, skip_last_activation: bool) -> Result<Gradients> {
        let cache =
            self.cache.as_ref().ok_or_else(|| DralError::State("backward called before forward_train".into()))?;
        let out = cache.activations.last().expect("non-empty");
        if upstream.shape() != out.shape() {
            return Err(DralError::Shape(format!(
                "upstream gradient is {}x{}, network output is {}x{}",
                upstream.rows(),
                upstream.cols(),
                out.rows(),
                out.cols()
            )));
        }
        let last = self.layers.len() - 1;
        let mut grads = Vec::with_capacity(self.layers.len());
        let mut delta_out = upstream.clone();
        for k in (0..self.layers.len()).rev() {
            let layer = &self.layers[k];
            let y = &cache.activations[k + 1];
            let x = &cache.activations[k];
            let delta =
                if k == last && skip_last_activation { delta_out } else { layer.activation.backprop(y, &delta_out) };
            let gw = delta.transpose_matmul(x);
            let gb = delta.column_sums();
            delta_out = delta.matmul(&layer.weights);
            grads.push(LayerGrad { weights: gw, bias: gb });
        }
        grads.reverse();
        Ok(Gradients { layers: grads, input: delta_out })
    }

    pub fn clear_cache(&mut self) {
        self.cache = None;
    }

    /// All parameters, layer by layer, weights (row-major) then bias.
    pub fn flat_params(&self) -> Vec<f64> {
        let mut out = Vec::with_capacity(self.num_params());
        for layer in &self.layers {
            out.extend_from_slice(layer.weights.as_slice());
            out.extend_from_slice(&layer.bias);
        }
        out
    }

    pub fn set_flat_params(&mut self, params: &[f64]) -> Result<()> {
        if params.len() != self.num_params() {
            return Err(DralError::Shape(format!("expected {} parameters, got {}", self.num_params(), params.len())));
        }
        let mut offset = 0;
        for layer in &mut self.layers {
            let nw = layer.weights.as_slice().len();
            layer.weights.as_mut_slice().copy_from_slice(&params[offset..offset + nw]);
            offset += nw;
            let nb = layer.bias.len();
            layer.bias.copy_from_slice(&params[offset..offset + nb]);
            offset += nb;
        }
        self.cache = None;
        Ok(())
    }

    /// True when both nets have identical layer shapes and activations.
    pub fn same_architecture(&self, other: &DenseNet) -> bool {
        self.layers.len() == other.layers.len()
            && self
                .layers
                .iter()
                .zip(&other.layers)
                .all(|(a, b)| a.weights.shape() == b.weights.shape() && a.activation == b.activation)
    }

    /// `self ← λ·source + (1 − λ)·self`, elementwise over every parameter.
    pub fn blend_from(&mut self, source: &DenseNet, lambda: f64) -> Result<()> {
        if !self.same_architecture(source) {
            return Err(DralError::Shape("cannot blend networks of different shapes".into()));
        }
        for (dst, src) in self.layers.iter_mut().zip(&source.layers) {
            for (d, s) in dst.weights.as_mut_slice().iter_mut().zip(src.weights.as_slice()) {
                *d = lambda * s + (1.0 - lambda) * *d;
            }
            for (d, s) in dst.bias.iter_mut().zip(&src.bias) {
                *d = lambda * s + (1.0 - lambda) * *d;
            }
        }
        self.cache = None;
        Ok(())
    }
}
