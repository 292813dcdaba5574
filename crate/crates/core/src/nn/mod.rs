//! Minimal reverse-mode CNN engine: tensors, a recording graph, layers and Adam.

mod graph;
pub mod kernels;
pub mod layers;
mod optim;
mod params;
mod tensor;

pub use graph::{BatchNormIds, Gradients, Graph, Mode, NodeId, StatUpdate, BN_EPSILON};
pub use optim::Adam;
pub use params::{glorot_uniform, he_normal, Param, ParamId, ParamKind, ParamStore};
pub use tensor::Tensor;

/// Row-wise softmax of `[n, k, 1, 1]` logits.
pub fn softmax(logits: &Tensor) -> Tensor {
    let mut out = logits.clone();
    let k = logits.item_len();
    for row in out.data_mut().chunks_mut(k) {
        let max = row.iter().copied().fold(f32::NEG_INFINITY, f32::max);
        let mut sum = 0.0f32;
        for v in row.iter_mut() {
            *v = (*v - max).exp();
            sum += *v;
        }
        row.iter_mut().for_each(|v| *v /= sum);
    }
    out
}

/// Mean categorical cross-entropy and its gradient with respect to the logits.
pub fn softmax_cross_entropy(logits: &Tensor, labels: &[usize]) -> (f32, Tensor) {
    let n = logits.n();
    assert_eq!(n, labels.len(), "one label per batch item");
    let k = logits.item_len();
    let probs = softmax(logits);
    let mut grad = probs.clone();
    let mut loss = 0.0f64;
    for (i, &y) in labels.iter().enumerate() {
        assert!(y < k, "label {y} out of range");
        // `f32::max` would swallow a NaN here and hide a diverged model.
        let p = probs.item(i)[y];
        let p = if p.is_nan() { p } else { p.max(1e-12) };
        loss -= (p as f64).ln();
        grad.item_mut(i)[y] -= 1.0;
    }
    grad.scale(1.0 / n as f32);
    ((loss / n as f64) as f32, grad)
}

/// Index of the largest entry; ties go to the lowest index.
pub fn argmax(row: &[f32]) -> usize {
    let mut best = 0;
    for (i, v) in row.iter().enumerate() {
        if *v > row[best] {
            best = i;
        }
    }
    best
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn softmax_rows_sum_to_one() {
        let t = Tensor::from_vec([2, 3, 1, 1], vec![1.0, 2.0, 3.0, -50.0, 0.0, 50.0]);
        let p = softmax(&t);
        for i in 0..2 {
            let s: f32 = p.item(i).iter().sum();
            assert!((s - 1.0).abs() < 1e-6);
        }
    }

    #[test]
    fn cross_entropy_gradient_matches_finite_differences() {
        let logits = Tensor::from_vec([2, 3, 1, 1], vec![0.3, -0.2, 0.9, 1.5, 0.1, -0.4]);
        let labels = [2, 0];
        let (_, grad) = softmax_cross_entropy(&logits, &labels);
        let h = 1e-3;
        for k in 0..6 {
            let mut plus = logits.clone();
            plus.data_mut()[k] += h;
            let mut minus = logits.clone();
            minus.data_mut()[k] -= h;
            let fd = (softmax_cross_entropy(&plus, &labels).0 - softmax_cross_entropy(&minus, &labels).0) / (2.0 * h);
            assert!((fd - grad.data()[k]).abs() < 1e-3);
        }
    }

    #[test]
    fn argmax_prefers_lowest_index_on_ties() {
        assert_eq!(argmax(&[0.2, 0.4, 0.4]), 1);
        assert_eq!(argmax(&[0.5, 0.5]), 0);
    }
}
