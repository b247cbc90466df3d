use ndarray::{Array2, ArrayView2};

use crate::nn::Scalar;

/// Two-class softmax cross-entropy. Returns the loss and `dL/dz`.
pub fn softmax_ce<T: Scalar>(z: [T; 2], label: usize) -> (T, [T; 2]) {
    debug_assert!(label < 2);
    let m = z[0].max(z[1]);
    let e0 = (z[0] - m).exp();
    let e1 = (z[1] - m).exp();
    let sum = e0 + e1;
    let log_sum = sum.ln();
    let loss = -(z[label] - m - log_sum);
    let mut grad = [e0 / sum, e1 / sum];
    grad[label] -= T::one();
    // Rounding can leave -0.0 style tiny negatives; the loss itself is >= 0.
    (loss.max(T::zero()), grad)
}

/// Probability of class 1 from two scores.
pub fn softmax_probability<T: Scalar>(z: [T; 2]) -> T {
    let m = z[0].max(z[1]);
    let e0 = (z[0] - m).exp();
    let e1 = (z[1] - m).exp();
    e1 / (e0 + e1)
}

/// Mean loss over a `[batch, 2]` score matrix and the gradient of that mean.
pub fn softmax_ce_batch<T: Scalar>(logits: ArrayView2<T>, labels: &[u8]) -> (T, Array2<T>) {
    assert_eq!(logits.nrows(), labels.len(), "one label per row");
    assert_eq!(logits.ncols(), 2, "two-class scores");
    let n = T::from_usize(labels.len().max(1)).unwrap();
    let mut grad = Array2::zeros(logits.raw_dim());
    let mut total = T::zero();
    for (i, (row, &y)) in logits.rows().into_iter().zip(labels).enumerate() {
        let (l, g) = softmax_ce([row[0], row[1]], y as usize);
        total += l;
        grad[[i, 0]] = g[0] / n;
        grad[[i, 1]] = g[1] / n;
    }
    (total / n, grad)
}
