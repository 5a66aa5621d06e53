use super::matrix::Matrix;
use crate::error::{DralError, Result};

/// Probabilities are clamped here before taking the log.
pub const PROB_FLOOR: f64 = 1e-12;

/// Mean cross-entropy of softmax outputs against class labels.
///
/// The returned gradient is with respect to the softmax *logits*:
/// `(p_i − onehot(y_i)) / batch`. Feed it to
/// [`DenseNet::backward_from_logits`](super::DenseNet::backward_from_logits).
pub fn cross_entropy(probs: &Matrix, labels: &[usize]) -> Result<(f64, Matrix)> {
    if probs.rows() != labels.len() {
        return Err(DralError::Shape(format!("{} probability rows but {} labels", probs.rows(), labels.len())));
    }
    if probs.rows() == 0 {
        return Err(DralError::Param("cross-entropy over an empty batch".into()));
    }
    let n = probs.rows() as f64;
    let mut loss = 0.0;
    let mut grad = probs.clone();
    for (r, &y) in labels.iter().enumerate() {
        if y >= probs.cols() {
            return Err(DralError::Param(format!("label {y} out of range for {} classes", probs.cols())));
        }
        loss -= probs.get(r, y).max(PROB_FLOOR).ln();
        let row = grad.row_mut(r);
        row[y] -= 1.0;
        row.iter_mut().for_each(|v| *v /= n);
    }
    Ok((loss / n, grad))
}
