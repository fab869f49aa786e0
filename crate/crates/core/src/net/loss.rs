//! Soft-label cross-entropy.
//!
//! Targets are arbitrary real vectors: bridged labels carry Gaussian noise and
//! may leave the simplex. The loss is `-sum_i t_i log p_i`, linear in `t`, and
//! its logit gradient is `p * sum(t) - t`.

use super::Matrix;
use crate::error::{shape_err, Result};

/// Floor applied to probabilities before taking logs.
pub const LOG_FLOOR: f64 = 1e-12;

fn check(logits: &Matrix, targets: &Matrix) -> Result<()> {
    if logits.shape() != targets.shape() {
        return Err(shape_err!(
            "logits {:?} and targets {:?} differ",
            logits.shape(),
            targets.shape()
        ));
    }
    Ok(())
}

/// Per-row loss and `p * sum(t) - t` (unweighted) for one row.
fn row_loss_grad(z: &[f64], t: &[f64], grad: Option<&mut [f64]>) -> f64 {
    let max = z.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let sum_exp: f64 = z.iter().map(|v| (v - max).exp()).sum();
    let log_norm = sum_exp.ln();
    let floor = LOG_FLOOR.ln();
    let mut loss = 0.0;
    for (zi, ti) in z.iter().zip(t) {
        let logp = (zi - max - log_norm).max(floor);
        loss -= ti * logp;
    }
    if let Some(g) = grad {
        let tsum: f64 = t.iter().sum();
        for ((gi, zi), ti) in g.iter_mut().zip(z).zip(t) {
            let p = (zi - max).exp() / sum_exp;
            *gi = p * tsum - ti;
        }
    }
    loss
}

/// Loss of every row, without gradients.
pub fn per_row_soft_cross_entropy(logits: &Matrix, targets: &Matrix) -> Result<Vec<f64>> {
    check(logits, targets)?;
    Ok(logits
        .iter_rows()
        .zip(targets.iter_rows())
        .map(|(z, t)| row_loss_grad(z, t, None))
        .collect())
}

/// `sum_r w_r * loss_r` and its gradient with respect to the logits.
pub fn weighted_soft_cross_entropy(logits: &Matrix, targets: &Matrix, weights: &[f64]) -> Result<(f64, Matrix)> {
    check(logits, targets)?;
    if weights.len() != logits.rows() {
        return Err(shape_err!("{} row weights for {} rows", weights.len(), logits.rows()));
    }
    let mut grad = Matrix::zeros(logits.rows(), logits.cols());
    let mut total = 0.0;
    for (r, &w) in weights.iter().enumerate() {
        let g = grad.row_mut(r);
        total += w * row_loss_grad(logits.row(r), targets.row(r), Some(g));
        g.iter_mut().for_each(|v| *v *= w);
    }
    Ok((total, grad))
}

/// Batch-mean soft cross-entropy and its logit gradient.
pub fn soft_cross_entropy(logits: &Matrix, targets: &Matrix) -> Result<(f64, Matrix)> {
    let n = logits.rows();
    if n == 0 {
        return Err(shape_err!("empty batch"));
    }
    let w = vec![1.0 / n as f64; n];
    weighted_soft_cross_entropy(logits, targets, &w)
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;

    #[test]
    fn uniform_softmax_gives_ln2() {
        let z = Matrix::from_rows(&[[0.0, 0.0]]).unwrap();
        let hard = Matrix::from_rows(&[[1.0, 0.0]]).unwrap();
        let soft = Matrix::from_rows(&[[0.5, 0.5]]).unwrap();
        assert_relative_eq!(soft_cross_entropy(&z, &hard).unwrap().0, 2f64.ln(), epsilon = 1e-15);
        assert_relative_eq!(soft_cross_entropy(&z, &soft).unwrap().0, 2f64.ln(), epsilon = 1e-15);
    }

    #[test]
    fn saturated_softmax_is_floored() {
        let z = Matrix::from_rows(&[[1000.0, -1000.0]]).unwrap();
        let t = Matrix::from_rows(&[[0.0, 1.0]]).unwrap();
        let (l, g) = soft_cross_entropy(&z, &t).unwrap();
        assert_relative_eq!(l, -LOG_FLOOR.ln(), epsilon = 1e-9);
        assert!(g.is_finite());
    }

    #[test]
    fn shape_mismatch_is_rejected() {
        let z = Matrix::zeros(2, 3);
        let t = Matrix::zeros(2, 2);
        assert!(soft_cross_entropy(&z, &t).is_err());
        assert!(weighted_soft_cross_entropy(&z, &Matrix::zeros(2, 3), &[1.0]).is_err());
    }

    #[test]
    fn off_simplex_targets_are_linear() {
        let z = Matrix::from_rows(&[[0.3, -1.2, 0.5]]).unwrap();
        let a = Matrix::from_rows(&[[1.2, -0.1, -0.1]]).unwrap();
        let b = Matrix::from_rows(&[[-0.4, 0.7, 0.2]]).unwrap();
        let ab = Matrix::from_rows(&[[0.8, 0.6, 0.1]]).unwrap();
        let la = soft_cross_entropy(&z, &a).unwrap().0;
        let lb = soft_cross_entropy(&z, &b).unwrap().0;
        let lab = soft_cross_entropy(&z, &ab).unwrap().0;
        assert_relative_eq!(la + lb, lab, epsilon = 1e-12);
    }
}
