use ndarray::{Array2, ArrayView2};

use crate::error::{validation, Result};

pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// Row-wise log-softmax, max-shifted.
pub fn log_softmax(logits: ArrayView2<'_, f64>) -> Array2<f64> {
    let mut out = logits.to_owned();
    for mut row in out.outer_iter_mut() {
        let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let lse = max + row.iter().map(|v| (v - max).exp()).sum::<f64>().ln();
        row.mapv_inplace(|v| v - lse);
    }
    out
}

pub fn softmax(logits: ArrayView2<'_, f64>) -> Array2<f64> {
    let mut out = logits.to_owned();
    for mut row in out.outer_iter_mut() {
        let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        row.mapv_inplace(|v| (v - max).exp());
        let s = row.sum();
        row /= s;
    }
    out
}

fn check_labels(n: usize, k: usize, labels: &[usize]) -> Result<()> {
    if labels.len() != n {
        return Err(validation(format!("{} labels for {n} rows", labels.len())));
    }
    if let Some(&y) = labels.iter().find(|&&y| y >= k) {
        return Err(validation(format!("label {y} out of range for {k} classes")));
    }
    Ok(())
}

/// Mean negative log-softmax probability of the labelled class, and its
/// gradient with respect to the logits.
pub fn cross_entropy(logits: ArrayView2<'_, f64>, labels: &[usize]) -> Result<(f64, Array2<f64>)> {
    let (n, k) = logits.dim();
    check_labels(n, k, labels)?;
    if n == 0 {
        return Err(validation("cross-entropy of an empty batch"));
    }
    let logp = log_softmax(logits);
    let inv_n = 1.0 / n as f64;
    let loss = -labels.iter().enumerate().map(|(i, &y)| logp[[i, y]]).sum::<f64>() * inv_n;
    let mut grad = logp.mapv(f64::exp);
    for (i, &y) in labels.iter().enumerate() {
        grad[[i, y]] -= 1.0;
    }
    grad *= inv_n;
    Ok((loss, grad))
}

/// Mean binary cross-entropy of single-column logits against targets in [0, 1].
pub fn bce_with_logits(logits: ArrayView2<'_, f64>, targets: &[f64]) -> Result<(f64, Array2<f64>)> {
    let (n, k) = logits.dim();
    if k != 1 || targets.len() != n || n == 0 {
        return Err(validation(format!("bce expects n x 1 logits and n targets, got {n}x{k} and {}", targets.len())));
    }
    let inv_n = 1.0 / n as f64;
    let mut loss = 0.0;
    let mut grad = Array2::zeros((n, 1));
    for (i, &t) in targets.iter().enumerate() {
        let x = logits[[i, 0]];
        // softplus(x) - t x, stable for both signs
        loss += x.max(0.0) + (-x.abs()).exp().ln_1p() - t * x;
        grad[[i, 0]] = (sigmoid(x) - t) * inv_n;
    }
    Ok((loss * inv_n, grad))
}

pub fn argmax_rows(scores: ArrayView2<'_, f64>) -> Vec<usize> {
    scores
        .outer_iter()
        .map(|row| {
            row.iter()
                .enumerate()
                .fold((0, f64::NEG_INFINITY), |best, (j, &v)| if v > best.1 { (j, v) } else { best })
                .0
        })
        .collect()
}

/// Fraction of rows whose arg-max matches the label.
pub fn accuracy(scores: ArrayView2<'_, f64>, labels: &[usize]) -> f64 {
    let hits = argmax_rows(scores).iter().zip(labels).filter(|(a, b)| a == b).count();
    hits as f64 / labels.len().max(1) as f64
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::array;
    use proptest::prelude::{prop, prop_assert, proptest, Strategy};

    fn logits_and_labels() -> impl Strategy<Value = (Array2<f64>, Vec<usize>)> {
        (1usize..6, 2usize..6).prop_flat_map(|(n, k)| {
            (
                prop::collection::vec(-50.0f64..50.0, n * k),
                prop::collection::vec(0..k, n),
            )
                .prop_map(move |(v, y)| (Array2::from_shape_vec((n, k), v).unwrap(), y))
        })
    }

    proptest! {
        #[test]
        fn cross_entropy_is_non_negative_with_zero_sum_gradient((logits, labels) in logits_and_labels()) {
            let (loss, grad) = cross_entropy(logits.view(), &labels).unwrap();
            prop_assert!(loss >= 0.0 && loss.is_finite());
            for row in grad.outer_iter() {
                prop_assert!(row.sum().abs() < 1e-12);
            }
        }

        #[test]
        fn log_softmax_is_shift_invariant((logits, _) in logits_and_labels(), shift in -100.0f64..100.0) {
            let a = log_softmax(logits.view());
            let b = log_softmax((&logits + shift).view());
            for (x, y) in a.iter().zip(&b) {
                prop_assert!((x - y).abs() < 1e-9);
            }
        }
    }

    #[test]
    fn uniform_logits_give_log_k() {
        let logits = Array2::from_elem((4, 5), 0.3);
        let (loss, _) = cross_entropy(logits.view(), &[0, 1, 2, 4]).unwrap();
        assert!((loss - 5f64.ln()).abs() < 1e-15);
    }

    #[test]
    fn confident_correct_logits_approach_zero() {
        for margin in [10.0, 50.0, 700.0] {
            let logits = array![[margin, 0.0], [0.0, margin]];
            let (loss, _) = cross_entropy(logits.view(), &[0, 1]).unwrap();
            assert!((0.0..1e-4).contains(&loss));
        }
        let logits = array![[1000.0, -1000.0]];
        let (loss, grad) = cross_entropy(logits.view(), &[0]).unwrap();
        assert_eq!(loss, 0.0);
        assert!(grad.iter().all(|g| g.is_finite()));
    }

    #[test]
    fn labels_checked() {
        let logits = Array2::zeros((2, 2));
        assert!(cross_entropy(logits.view(), &[0, 2]).is_err());
        assert!(cross_entropy(logits.view(), &[0]).is_err());
    }

    #[test]
    fn softmax_rows_sum_to_one() {
        let logits = array![[1e3, -1e3, 0.0], [0.1, 0.2, 0.3]];
        for row in softmax(logits.view()).outer_iter() {
            assert!((row.sum() - 1.0).abs() < 1e-12);
        }
        assert!(sigmoid(800.0) <= 1.0 && sigmoid(-800.0) >= 0.0);
        assert!(sigmoid(30.0) < 1.0 && sigmoid(-30.0) > 0.0);
    }

    #[test]
    fn bce_matches_direct_formula() {
        let logits = array![[0.3], [-1.2], [2.0]];
        let t = [1.0, 0.0, 1.0];
        let (loss, grad) = bce_with_logits(logits.view(), &t).unwrap();
        let direct: f64 = logits
            .iter()
            .zip(&t)
            .map(|(&x, &t)| -(t * sigmoid(x).ln() + (1.0 - t) * (1.0 - sigmoid(x)).ln()))
            .sum::<f64>()
            / 3.0;
        assert!((loss - direct).abs() < 1e-14);
        assert!((grad[[1, 0]] - sigmoid(-1.2) / 3.0).abs() < 1e-15);
    }
}
