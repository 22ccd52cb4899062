//! Cascade losses: KL divergence to the two-points target with an L1 penalty
//! on the distribution layer, MAE on the regressed age, and their weighted sum.
//!
//! Both losses average over the batch so that `alpha` keeps its meaning at
//! any batch size. Logarithms are natural.

use crate::error::{Error, Result};
use crate::tensor::Tensor;

pub const DEFAULT_ALPHA: f64 = 10.0;
pub const DEFAULT_LAMBDA: f64 = 1e-3;

/// Per-term breakdown of one evaluation of the total loss.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LossReport {
    pub kl: f64,
    pub l1_reg: f64,
    pub mae: f64,
    pub total: f64,
    pub alpha: f64,
    pub lambda: f64,
}

impl LossReport {
    pub fn new(kl: f64, l1_reg: f64, mae: f64, alpha: f64, lambda: f64) -> Self {
        LossReport {
            kl,
            l1_reg,
            mae,
            total: total_loss(kl + lambda * l1_reg, mae, alpha),
            alpha,
            lambda,
        }
    }

    /// `kl + lambda · l1_reg`, the regularized distribution loss.
    pub fn kl_term(&self) -> f64 {
        self.kl + self.lambda * self.l1_reg
    }
}

/// Mean KL divergence over rows of length `n`.
pub(crate) fn kl_divergence_flat(target: &[f64], predicted: &[f64], n: usize) -> Result<f64> {
    if target.len() != predicted.len() || n == 0 || !target.len().is_multiple_of(n) {
        return Err(Error::shape(format!(
            "kl: {} target values vs {} predicted (rows of {n})",
            target.len(),
            predicted.len()
        )));
    }
    let rows = target.len() / n;
    let mut total = 0.0;
    for (i, (&t, &p)) in target.iter().zip(predicted).enumerate() {
        if t > 0.0 {
            if p <= 0.0 {
                return Err(Error::invalid(format!(
                    "kl: predicted probability {p} at index {i} where target is {t}"
                )));
            }
            total += t * (t / p).ln();
        }
    }
    Ok(total / rows as f64)
}

/// Batch-mean KL divergence between row distributions of equal shape.
pub fn kl_divergence(target: &Tensor, predicted: &Tensor) -> Result<f64> {
    if target.shape() != predicted.shape() {
        return Err(Error::shape(format!(
            "kl: target {:?} vs predicted {:?}",
            target.shape(),
            predicted.shape()
        )));
    }
    let n = *target
        .shape()
        .last()
        .ok_or_else(|| Error::shape("kl: scalar distribution"))?;
    kl_divergence_flat(target.data(), predicted.data(), n)
}

/// Regularized distribution loss: mean KL plus `lambda · ‖w1‖₁`.
pub fn kl_loss(target: &Tensor, predicted: &Tensor, w1: &Tensor, lambda: f64) -> Result<f64> {
    if lambda < 0.0 || lambda.is_nan() {
        return Err(Error::invalid(format!(
            "lambda must be nonnegative, got {lambda}"
        )));
    }
    Ok(kl_divergence(target, predicted)? + lambda * l1_norm(w1.data()))
}

pub fn l1_norm(values: &[f64]) -> f64 {
    values.iter().map(|v| v.abs()).sum()
}

/// Mean absolute error over a batch.
pub fn mae_loss(y_true: &[f64], y_pred: &[f64]) -> Result<f64> {
    if y_true.is_empty() {
        return Err(Error::invalid("mae: empty batch"));
    }
    if y_true.len() != y_pred.len() {
        return Err(Error::shape(format!(
            "mae: {} targets vs {} predictions",
            y_true.len(),
            y_pred.len()
        )));
    }
    let sum: f64 = y_true.iter().zip(y_pred).map(|(t, p)| (t - p).abs()).sum();
    Ok(sum / y_true.len() as f64)
}

/// `alpha · kl + mae`.
pub fn total_loss(kl: f64, mae: f64, alpha: f64) -> f64 {
    alpha * kl + mae
}

#[cfg(test)]
mod tests {
    use super::*;

    fn dist(v: &[f64]) -> Tensor {
        Tensor::new([v.len()], v.to_vec()).unwrap()
    }

    #[test]
    fn kl_of_identical_distributions_is_zero() {
        let p = dist(&[0.1, 0.2, 0.7]);
        let w = Tensor::zeros([2, 3]).unwrap();
        assert_eq!(kl_loss(&p, &p, &w, 0.0).unwrap(), 0.0);
    }

    #[test]
    fn kl_one_hot_against_uniform() {
        let v = kl_divergence(&dist(&[1.0, 0.0]), &dist(&[0.5, 0.5])).unwrap();
        assert!((v - std::f64::consts::LN_2).abs() < 1e-15);
    }

    #[test]
    fn kl_two_points_against_uniform() {
        // direct evaluation: 0.2 ln 0.4 + 0.8 ln 1.6
        let expected = 0.2 * 0.4f64.ln() + 0.8 * 1.6f64.ln();
        let v = kl_divergence(&dist(&[0.2, 0.8]), &dist(&[0.5, 0.5])).unwrap();
        assert!((v - expected).abs() < 1e-15);
        assert!((v - 0.19274).abs() < 1e-5);
    }

    #[test]
    fn kl_penalty_uses_absolute_weights() {
        let p = dist(&[0.5, 0.5]);
        let w = Tensor::new([2, 2], vec![1.0, -2.0, 0.5, -0.5]).unwrap();
        assert!((kl_loss(&p, &p, &w, 0.1).unwrap() - 0.4).abs() < 1e-15);
        assert!(matches!(
            kl_loss(&p, &p, &w, -1.0),
            Err(Error::InvalidArgument(_))
        ));
    }

    #[test]
    fn kl_rejects_zero_prediction_under_mass() {
        let err = kl_divergence(&dist(&[0.5, 0.5]), &dist(&[1.0, 0.0]));
        assert!(matches!(err, Err(Error::InvalidArgument(_))));
        // zero where the target is zero is fine
        assert!(kl_divergence(&dist(&[1.0, 0.0]), &dist(&[1.0, 0.0])).is_ok());
    }

    #[test]
    fn kl_averages_over_rows() {
        let t = Tensor::new([2, 2], vec![1.0, 0.0, 0.5, 0.5]).unwrap();
        let p = Tensor::new([2, 2], vec![0.5, 0.5, 0.5, 0.5]).unwrap();
        let v = kl_divergence(&t, &p).unwrap();
        assert!((v - std::f64::consts::LN_2 / 2.0).abs() < 1e-15);
    }

    #[test]
    fn mae_examples() {
        assert_eq!(mae_loss(&[1.0, 2.0], &[1.0, 2.0]).unwrap(), 0.0);
        assert_eq!(mae_loss(&[68.0], &[70.0]).unwrap(), 2.0);
        let v = mae_loss(&[10.0, 20.0, 30.0], &[12.0, 18.0, 33.0]).unwrap();
        assert!((v - 7.0 / 3.0).abs() < 1e-15);
        assert!(mae_loss(&[], &[]).is_err());
        assert!(mae_loss(&[1.0], &[1.0, 2.0]).is_err());
    }

    #[test]
    fn total_examples() {
        assert_eq!(total_loss(0.5, 2.0, 10.0), 7.0);
        assert_eq!(total_loss(0.5, 2.0, 0.0), 2.0);
        let kl = 0.2 * 0.4f64.ln() + 0.8 * 1.6f64.ln();
        let v = total_loss(kl, 7.0 / 3.0, 10.0);
        assert!((v - 4.2607).abs() < 1e-4, "{v}");
    }

    #[test]
    fn report_identity() {
        let r = LossReport::new(0.3, 12.0, 4.0, 10.0, 1e-3);
        assert!((r.total - (10.0 * (0.3 + 1e-3 * 12.0) + 4.0)).abs() < 1e-12);
        assert!((r.kl_term() - 0.312).abs() < 1e-15);
    }
}
