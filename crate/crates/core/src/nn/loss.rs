//! Scalar losses and the small vector helpers they share.

use ndarray::{Array1, ArrayView1};

/// Probabilities are clamped to `[PROB_EPS, 1 - PROB_EPS]` before taking logs.
pub const PROB_EPS: f64 = 1e-7;

pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// `−(y·ln p + (1−y)·ln(1−p))` with `p` clamped away from 0 and 1.
pub fn binary_cross_entropy(prediction: f64, label: f64) -> f64 {
    let p = prediction.clamp(PROB_EPS, 1.0 - PROB_EPS);
    -(label * p.ln() + (1.0 - label) * (1.0 - p).ln())
}

/// d BCE(σ(z), y) / dz. Zero when the clamp is active.
pub fn bce_logit_grad(prediction: f64, label: f64) -> f64 {
    if !(PROB_EPS..=1.0 - PROB_EPS).contains(&prediction) {
        return 0.0;
    }
    prediction - label
}

/// Returns the unit vector and the original norm, or `None` for a zero vector.
pub fn l2_normalize(v: ArrayView1<f64>) -> Option<(Array1<f64>, f64)> {
    let norm = v.dot(&v).sqrt();
    if norm == 0.0 || !norm.is_finite() {
        return None;
    }
    Some((v.mapv(|x| x / norm), norm))
}

/// Backward of `n = v / |v|`: `dv = (dn − n·(n·dn)) / |v|`.
pub fn l2_normalize_backward(unit: ArrayView1<f64>, norm: f64, grad_unit: ArrayView1<f64>) -> Array1<f64> {
    let proj = unit.dot(&grad_unit);
    (&grad_unit - &(&unit * proj)) / norm
}

/// Numerically stable log-softmax over a slice.
pub fn log_softmax(logits: &[f64]) -> Vec<f64> {
    let max = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let lse = max + logits.iter().map(|l| (l - max).exp()).sum::<f64>().ln();
    logits.iter().map(|l| l - lse).collect()
}

pub fn euclidean(a: ArrayView1<f64>, b: ArrayView1<f64>) -> f64 {
    a.iter().zip(b.iter()).map(|(x, y)| (x - y) * (x - y)).sum::<f64>().sqrt()
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::array;

    #[test]
    fn bce_half_is_ln2() {
        assert!((binary_cross_entropy(0.5, 1.0) - std::f64::consts::LN_2).abs() < 1e-15);
    }

    #[test]
    fn bce_saturated_correct_is_near_zero() {
        assert!(binary_cross_entropy(1.0, 1.0) < 1e-6);
        assert!(binary_cross_entropy(1.0 - 1e-12, 1.0) < 1e-6);
    }

    #[test]
    fn bce_point_nine_label_zero() {
        // −ln(0.1) = 2.302585092994045684...
        assert!((binary_cross_entropy(0.9, 0.0) - 2.302_585_092_994_046).abs() < 1e-12);
    }

    #[test]
    fn bce_never_infinite() {
        assert!(binary_cross_entropy(0.0, 1.0).is_finite());
        assert!(binary_cross_entropy(1.0, 0.0).is_finite());
    }

    #[test]
    fn sigmoid_is_stable() {
        assert_eq!(sigmoid(0.0), 0.5);
        assert!(sigmoid(-800.0) >= 0.0 && sigmoid(800.0) <= 1.0);
    }

    #[test]
    fn normalized_has_unit_norm() {
        let (n, norm) = l2_normalize(array![3.0, 4.0].view()).unwrap();
        assert!((norm - 5.0).abs() < 1e-15);
        assert!((n.dot(&n).sqrt() - 1.0).abs() < 1e-12);
        assert!(l2_normalize(array![0.0, 0.0].view()).is_none());
    }

    #[test]
    fn log_softmax_normalizes() {
        let ls = log_softmax(&[1.0, 2.0, 3.0]);
        let total: f64 = ls.iter().map(|l| l.exp()).sum();
        assert!((total - 1.0).abs() < 1e-12);
    }
}
