//! Small dense-network engine: layers, activations, cross-entropy, and
//! SGD-momentum / Adam optimizers with hand-derived gradients.

mod dense;
mod loss;
mod matrix;
mod optim;

pub use dense::{Activation, DenseNet, Gradients, Layer, LayerGrad};
pub use loss::{cross_entropy, PROB_FLOOR};
pub use matrix::Matrix;
pub use optim::{OptimKind, Optimizer};
