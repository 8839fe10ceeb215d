//! Loss functions evaluated from logits, returning the mean loss and its
//! gradient with respect to the logits.

use super::tensor::{Real, Tensor};

/// Numerically stable `log(1 + e^x)`.
#[inline]
pub fn softplus(x: f64) -> f64 {
    if x > 0.0 {
        x + (-x).exp().ln_1p()
    } else {
        x.exp().ln_1p()
    }
}

#[inline]
pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// Row-wise softmax of `logits` (`n × classes`), computed in `f64`.
pub fn softmax_rows(logits: &[f64], classes: usize) -> Vec<f64> {
    let mut out = Vec::with_capacity(logits.len());
    for row in logits.chunks_exact(classes) {
        let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let exps: Vec<f64> = row.iter().map(|v| (v - max).exp()).collect();
        let s: f64 = exps.iter().sum();
        out.extend(exps.iter().map(|e| e / s));
    }
    out
}

/// Mean softmax cross-entropy over the batch.
///
/// `logits` is `n × (groups · classes)`: each sample carries `groups`
/// independent classification heads laid out back to back, with one target
/// per head in `targets` (sample-major). The loss sums over heads and
/// averages over samples.
pub fn softmax_cross_entropy<T: Real>(
    logits: &Tensor<T>,
    classes: usize,
    targets: &[usize],
) -> (f64, Tensor<T>) {
    let n = logits.n();
    let width = logits.sample_len();
    assert_eq!(width % classes, 0);
    let groups = width / classes;
    assert_eq!(targets.len(), n * groups, "one target per head per sample");
    let raw: Vec<f64> = logits.data.iter().map(|v| v.f64()).collect();
    let probs = softmax_rows(&raw, classes);
    let mut loss = 0.0;
    let mut grad = Tensor::zeros(logits.shape);
    let scale = 1.0 / n as f64;
    for (row, &t) in targets.iter().enumerate() {
        assert!(t < classes, "target {t} out of range");
        let p = &probs[row * classes..(row + 1) * classes];
        loss -= p[t].max(1e-300).ln();
        for c in 0..classes {
            let g = (p[c] - if c == t { 1.0 } else { 0.0 }) * scale;
            grad.data[row * classes + c] = T::of(g);
        }
    }
    (loss * scale, grad)
}

/// Mean binary cross-entropy between `sigmoid(logits)` and soft targets in `[0, 1]`.
pub fn bce_with_logits<T: Real>(logits: &Tensor<T>, targets: &[T]) -> (f64, Tensor<T>) {
    assert_eq!(logits.data.len(), targets.len());
    let count = targets.len() as f64;
    let mut loss = 0.0;
    let mut grad = Tensor::zeros(logits.shape);
    for ((z, t), g) in logits.data.iter().zip(targets).zip(grad.data.iter_mut()) {
        let z = z.f64();
        let t = t.f64();
        // -[t log s(z) + (1 - t) log(1 - s(z))] = softplus(z) - t z
        loss += softplus(z) - t * z;
        *g = T::of((sigmoid(z) - t) / count);
    }
    (loss / count, grad)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn softplus_matches_naive_in_safe_range() {
        for x in [-30.0, -2.0, 0.0, 1.5, 20.0] {
            assert!((softplus(x) - (1.0f64 + f64::exp(x)).ln()).abs() < 1e-12);
        }
        assert!(softplus(1000.0).is_finite());
        assert_eq!(softplus(-1000.0), 0.0);
    }

    #[test]
    fn cross_entropy_gradient_matches_finite_difference() {
        let logits = Tensor::<f64>::from_vec([2, 6, 1, 1], vec![0.1, -0.4, 1.2, 0.3, 0.0, -1.0, 2.0, 0.5, -0.5, 0.2, 0.1, 0.9]);
        let targets = [2, 0, 1, 2];
        let (_, g) = softmax_cross_entropy(&logits, 3, &targets);
        for i in 0..logits.data.len() {
            let mut p = logits.clone();
            let mut m = logits.clone();
            p.data[i] += 1e-6;
            m.data[i] -= 1e-6;
            let fd = (softmax_cross_entropy(&p, 3, &targets).0 - softmax_cross_entropy(&m, 3, &targets).0) / 2e-6;
            assert!((fd - g.data[i]).abs() < 1e-7);
        }
    }

    #[test]
    fn bce_gradient_matches_finite_difference() {
        let logits = Tensor::<f64>::from_vec([1, 1, 2, 2], vec![-3.0, 0.2, 1.0, 4.0]);
        let targets = vec![0.0, 1.0, 0.3, 1.0];
        let (l, g) = bce_with_logits(&logits, &targets);
        assert!(l > 0.0);
        for i in 0..4 {
            let mut p = logits.clone();
            let mut m = logits.clone();
            p.data[i] += 1e-6;
            m.data[i] -= 1e-6;
            let fd = (bce_with_logits(&p, &targets).0 - bce_with_logits(&m, &targets).0) / 2e-6;
            assert!((fd - g.data[i]).abs() < 1e-7);
        }
    }
}
