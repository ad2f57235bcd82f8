/// Smooth-L1 (Huber, transition at 1.0) summed over elements.
/// Returns the loss and its gradient with respect to `pred`.
pub fn smooth_l1(pred: &[f64], target: &[f64]) -> (f64, Vec<f64>) {
    debug_assert_eq!(pred.len(), target.len());
    let mut loss = 0.0;
    let grad = pred
        .iter()
        .zip(target)
        .map(|(p, t)| {
            let d = p - t;
            if d.abs() < 1.0 {
                loss += 0.5 * d * d;
                d
            } else {
                loss += d.abs() - 0.5;
                d.signum()
            }
        })
        .collect();
    (loss, grad)
}

pub fn softmax(logits: &[f64]) -> Vec<f64> {
    let max = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let exps: Vec<f64> = logits.iter().map(|l| (l - max).exp()).collect();
    let sum: f64 = exps.iter().sum();
    exps.into_iter().map(|e| e / sum).collect()
}

/// Softmax cross-entropy of `logits` against class `label`.
pub fn cross_entropy(logits: &[f64], label: usize) -> (f64, Vec<f64>) {
    let max = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let sum: f64 = logits.iter().map(|l| (l - max).exp()).sum();
    let log_z = max + sum.ln();
    let loss = log_z - logits[label];
    let mut grad: Vec<f64> = logits.iter().map(|l| (l - log_z).exp()).collect();
    grad[label] -= 1.0;
    (loss, grad)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn smooth_l1_zero_at_target() {
        let (l, g) = smooth_l1(&[1.0, -2.0], &[1.0, -2.0]);
        assert_eq!(l, 0.0);
        assert_eq!(g, vec![0.0, 0.0]);
    }

    #[test]
    fn smooth_l1_linear_branch() {
        // |d| - 0.5 with d = 2
        let (l, g) = smooth_l1(&[3.0], &[1.0]);
        assert_eq!(l, 1.5);
        assert_eq!(g, vec![1.0]);
        let (l, _) = smooth_l1(&[0.5], &[0.0]);
        assert_eq!(l, 0.125);
    }

    #[test]
    fn cross_entropy_saturates_on_large_margin() {
        let (l, g) = cross_entropy(&[100.0, -100.0, -100.0], 0);
        assert!(l < 1e-12);
        assert!(g.iter().all(|v| v.abs() < 1e-12));
    }

    #[test]
    fn cross_entropy_uniform_logits() {
        let (l, g) = cross_entropy(&[0.0; 4], 2);
        assert!((l - 4f64.ln()).abs() < 1e-12);
        assert!((g[2] + 0.75).abs() < 1e-12);
        assert!((g[0] - 0.25).abs() < 1e-12);
    }

    #[test]
    fn softmax_sums_to_one() {
        let p = softmax(&[1.0, 2.0, -3.0, 700.0]);
        assert!((p.iter().sum::<f64>() - 1.0).abs() < 1e-12);
    }
}
