//! Probability-vector primitives shared by every loss.

use crate::error::{MsfanError, Result};

const NORMALIZATION_TOL: f64 = 1e-9;

/// Max-subtracted softmax.
pub fn softmax(logits: &[f64]) -> Result<Vec<f64>> {
    if logits.is_empty() {
        return Err(MsfanError::Dimension("softmax of an empty vector".into()));
    }
    if logits.iter().any(|v| !v.is_finite()) {
        return Err(MsfanError::Numeric("softmax logits must be finite".into()));
    }
    Ok(softmax_unchecked(logits))
}

/// Softmax without input validation, for hot loops whose logits are finite by construction.
pub(crate) fn softmax_unchecked(logits: &[f64]) -> Vec<f64> {
    let max = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let mut out: Vec<f64> = logits.iter().map(|v| (v - max).exp()).collect();
    let sum: f64 = out.iter().sum();
    out.iter_mut().for_each(|v| *v /= sum);
    out
}

/// Backpropagates `grad_probs = ∂L/∂p` through `p = softmax(z)`, returning `∂L/∂z`.
pub(crate) fn softmax_backward(probs: &[f64], grad_probs: &[f64]) -> Vec<f64> {
    let inner: f64 = probs.iter().zip(grad_probs).map(|(p, g)| p * g).sum();
    probs
        .iter()
        .zip(grad_probs)
        .map(|(p, g)| p * (g - inner))
        .collect()
}

fn check_distribution(p: &[f64], what: &str) -> Result<()> {
    if p.is_empty() {
        return Err(MsfanError::Dimension(format!("{what} is empty")));
    }
    if p.iter().any(|v| !v.is_finite() || *v < 0.0) {
        return Err(MsfanError::Domain(format!(
            "{what} has a negative or non-finite entry"
        )));
    }
    let sum: f64 = p.iter().sum();
    if (sum - 1.0).abs() > NORMALIZATION_TOL {
        return Err(MsfanError::Domain(format!("{what} sums to {sum}, not 1")));
    }
    Ok(())
}

/// `−Σ_c target_c · log pred_c`. The second argument is the (pseudo-)label distribution.
///
/// Terms with a zero target weight contribute nothing, so a zero prediction is only
/// rejected where the target puts mass on it.
pub fn cross_entropy(pred: &[f64], target: &[f64]) -> Result<f64> {
    if pred.len() != target.len() {
        return Err(MsfanError::Dimension(format!(
            "prediction has {} classes, target has {}",
            pred.len(),
            target.len()
        )));
    }
    check_distribution(target, "target distribution")?;
    for (p, t) in pred.iter().zip(target) {
        if !p.is_finite() || *p < 0.0 || (*t > 0.0 && *p <= 0.0) {
            return Err(MsfanError::Domain(format!(
                "prediction entry {p} must be positive"
            )));
        }
    }
    Ok(pred
        .iter()
        .zip(target)
        .filter(|(_, t)| **t > 0.0)
        .map(|(p, t)| -t * p.ln())
        .sum())
}

/// Shannon entropy in nats with `0 · log 0 = 0`.
pub fn entropy(p: &[f64]) -> Result<f64> {
    check_distribution(p, "distribution")?;
    Ok(entropy_unchecked(p))
}

pub(crate) fn entropy_unchecked(p: &[f64]) -> f64 {
    -p.iter().filter(|v| **v > 0.0).map(|v| v * v.ln()).sum::<f64>()
}

/// Index of the largest entry; the lowest index wins ties.
pub fn argmax(values: &[f64]) -> usize {
    let mut best = 0;
    for (i, v) in values.iter().enumerate().skip(1) {
        if *v > values[best] {
            best = i;
        }
    }
    best
}

pub fn one_hot(class: usize, n: usize) -> Vec<f64> {
    let mut v = vec![0.0; n];
    v[class] = 1.0;
    v
}

#[cfg(test)]
mod tests {
    use super::*;

    fn close(a: f64, b: f64, tol: f64) -> bool {
        (a - b).abs() <= tol
    }

    #[test]
    fn softmax_symmetric_pair() {
        assert_eq!(softmax(&[0.0, 0.0]).unwrap(), vec![0.5, 0.5]);
    }

    #[test]
    fn softmax_survives_large_logits() {
        let p = softmax(&[1000.0, 0.0]).unwrap();
        assert!(p.iter().all(|v| v.is_finite()));
        assert!(close(p[0], 1.0, 1e-12));
        assert!(p[1] >= 0.0 && p[1] < 1e-300);
        assert!(close(p.iter().sum::<f64>(), 1.0, 1e-12));
    }

    #[test]
    fn softmax_one_two_three() {
        // e^x evaluated directly, then divided by the sum
        let e: Vec<f64> = [1.0f64, 2.0, 3.0].iter().map(|x| x.exp()).collect();
        let s: f64 = e.iter().sum();
        let p = softmax(&[1.0, 2.0, 3.0]).unwrap();
        for (got, num) in p.iter().zip(&e) {
            assert!(close(*got, num / s, 1e-15));
        }
        assert!(close(p[0], 0.09003, 1e-5));
        assert!(close(p[1], 0.24473, 1e-5));
        assert!(close(p[2], 0.66524, 1e-5));
    }

    #[test]
    fn softmax_rejects_empty() {
        assert!(matches!(softmax(&[]), Err(MsfanError::Dimension(_))));
    }

    #[test]
    fn cross_entropy_examples() {
        assert_eq!(cross_entropy(&[1.0, 0.0], &[1.0, 0.0]).unwrap(), 0.0);
        let ce = cross_entropy(&[0.25; 4], &one_hot(2, 4)).unwrap();
        assert!(close(ce, 4f64.ln(), 1e-15));
        let ce = cross_entropy(&[0.7, 0.3], &[0.5, 0.5]).unwrap();
        assert!(close(ce, -0.5 * (0.7f64.ln() + 0.3f64.ln()), 1e-15));
        assert!(close(ce, 0.78032, 1e-5));
    }

    #[test]
    fn cross_entropy_rejects_nonpositive_prediction() {
        assert!(matches!(
            cross_entropy(&[0.0, 1.0], &[0.5, 0.5]),
            Err(MsfanError::Domain(_))
        ));
    }

    #[test]
    fn entropy_examples() {
        assert_eq!(entropy(&[0.0, 1.0, 0.0]).unwrap(), 0.0);
        assert!(close(entropy(&[1.0 / 3.0; 3]).unwrap(), 3f64.ln(), 1e-12));
        let direct = -(0.75 * 0.75f64.ln() + 0.25 * 0.25f64.ln());
        assert!(close(entropy(&[0.75, 0.25]).unwrap(), direct, 1e-15));
        assert!(close(direct, 0.56234, 1e-5));
    }

    #[test]
    fn entropy_rejects_unnormalized() {
        assert!(entropy(&[0.5, 0.6]).is_err());
    }

    #[test]
    fn argmax_prefers_lowest_index_on_ties() {
        assert_eq!(argmax(&[0.2, 0.4, 0.4]), 1);
    }
}
