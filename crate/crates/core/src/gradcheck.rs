//! Central-difference gradient oracle.
//!
//! Kept independent of the graph machinery so it can check it.

use rand_distr::{Distribution, Normal};
use rand::Rng as _;

use crate::error::{Error, Result};
use crate::labels::softmax_rows;
use crate::losses::{loss_with_grad, LossId};
use crate::rng::{self, derive_seed};
use crate::tensor::Tensor;

/// Central-difference estimate `(f(x + h e_i) - f(x - h e_i)) / 2h` for every
/// coordinate of `x`.
pub fn finite_diff_grad(mut f: impl FnMut(&Tensor) -> f64, x: &Tensor, h: f64) -> Result<Tensor> {
    if !(h > 0.0) {
        return Err(Error::invalid(format!("step h must be positive, got {h}")));
    }
    let mut probe = x.clone();
    let mut grad = vec![0.0; x.len()];
    for i in 0..x.len() {
        let orig = probe.data()[i];
        probe.data_mut()[i] = orig + h;
        let plus = f(&probe);
        probe.data_mut()[i] = orig - h;
        let minus = f(&probe);
        probe.data_mut()[i] = orig;
        if plus.is_nan() || minus.is_nan() {
            return Err(Error::NonFinite(format!("objective at coordinate {i}")));
        }
        grad[i] = (plus - minus) / (2.0 * h);
    }
    Tensor::new(x.shape().to_vec(), grad)
}

/// `||a - b|| / max(||a||, ||b||, 1e-6)` over flattened slices.
pub fn relative_error(a: &[f64], b: &[f64]) -> f64 {
    assert_eq!(a.len(), b.len(), "relative_error on different lengths");
    let diff = a.iter().zip(b).map(|(x, y)| (x - y).powi(2)).sum::<f64>().sqrt();
    let na = a.iter().map(|x| x * x).sum::<f64>().sqrt();
    let nb = b.iter().map(|x| x * x).sum::<f64>().sqrt();
    diff / na.max(nb).max(1e-6)
}

/// Worst relative error between reverse-mode and central-difference
/// gradients of `loss` over `instances` random `[batch, classes]` problems.
/// Distribution targets are softmaxes of random logits; other targets are
/// standard normal.
pub fn check_loss_gradient(loss: &LossId, instances: usize, batch: usize, classes: usize, seed: u64) -> Result<f64> {
    let normal = Normal::new(0.0, 1.0).expect("unit normal");
    let mut worst: f64 = 0.0;
    for i in 0..instances {
        let mut r = rng::rng(derive_seed(seed, "gradcheck", &[i as u64]));
        let mut draw = |scale: f64| {
            Tensor::new(
                vec![batch, classes],
                (0..batch * classes).map(|_| scale * normal.sample(&mut r)).collect(),
            )
        };
        let logits = draw(2.0)?;
        let raw = draw(2.0)?;
        let target = if loss.needs_distribution() { softmax_rows(&raw) } else { raw };
        let mut hard = Tensor::zeros(&[batch, classes]);
        for row in 0..batch {
            let c = r.gen_range(0..classes);
            hard.row_mut(row)[c] = 1.0;
        }
        let (_, analytic) = loss_with_grad(loss, &logits, Some(&hard), Some(&target))?;
        let numeric = finite_diff_grad(
            |z| {
                loss_with_grad(loss, z, Some(&hard), Some(&target))
                    .map(|(v, _)| v)
                    .unwrap_or(f64::NAN)
            },
            &logits,
            1e-5,
        )?;
        worst = worst.max(relative_error(analytic.data(), numeric.data()));
    }
    Ok(worst)
}

/// The loss configurations covered by the gradient check: every stable id,
/// with KL at temperatures 1, 2 and 4.
pub fn gradcheck_losses() -> Vec<LossId> {
    let mut out = Vec::new();
    for id in crate::losses::LOSS_IDS {
        let loss: LossId = id.parse().expect("stable id parses");
        if id == "kl" {
            out.extend([1.0, 2.0, 4.0].map(|t| loss.clone().with_temperature(t)));
        } else {
            out.push(loss);
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn square_at_three() {
        let g = finite_diff_grad(|t| t.data()[0].powi(2), &Tensor::scalar(3.0), 1e-5).unwrap();
        assert!((g.data()[0] - 6.0).abs() < 1e-6);
    }

    #[test]
    fn constant_gives_zero() {
        let x = Tensor::from_vec(vec![1.0, -4.0, 2.5]);
        let g = finite_diff_grad(|_| 7.0, &x, 1e-5).unwrap();
        assert!(g.data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn linear_recovers_coefficients() {
        let a = [0.5, -2.0, 3.0];
        let x = Tensor::from_vec(vec![0.1, 0.2, 0.3]);
        let g = finite_diff_grad(|t| t.data().iter().zip(a).map(|(x, c)| x * c).sum(), &x, 1e-5).unwrap();
        assert!(relative_error(g.data(), &a) < 1e-9);
    }

    #[test]
    fn nan_probe_is_an_error() {
        let x = Tensor::scalar(0.0);
        assert!(finite_diff_grad(|t| t.data()[0].ln().sqrt() * f64::NAN, &x, 1e-5).is_err());
    }

    #[test]
    fn non_positive_step_rejected() {
        assert!(finite_diff_grad(|_| 0.0, &Tensor::scalar(1.0), 0.0).is_err());
    }
}
