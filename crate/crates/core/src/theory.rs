//! InfoNCE with cosine similarity, the upper bounds it is compared against,
//! label orthogonality statistics and gradient norms.

use std::collections::BTreeMap;
use std::path::Path;

use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::fsutil::write_atomic;
use crate::labels::{normalize_rows, LabelMatrix};
use crate::rng::{self, derive_seed};
use crate::tensor::Tensor;

fn check_pair(z: &Tensor, y: &Tensor, tau: f64) -> Result<()> {
    if z.ndim() != 2 || z.shape() != y.shape() {
        return Err(Error::invalid(format!(
            "z {:?} and y {:?} must be matching K x C matrices",
            z.shape(),
            y.shape()
        )));
    }
    if z.rows() == 0 {
        return Err(Error::Empty("InfoNCE batch".into()));
    }
    if !(tau > 0.0) {
        return Err(Error::invalid(format!("temperature {tau} must be positive")));
    }
    Ok(())
}

/// `K x K` matrix of `cos(z_i, y_j)`.
fn cosine_matrix(z: &Tensor, y: &Tensor) -> Result<Vec<Vec<f64>>> {
    let zn = normalize_rows(z, "z")?;
    let yn = normalize_rows(y, "y")?;
    let k = z.rows();
    Ok((0..k)
        .map(|i| {
            (0..k)
                .map(|j| zn.row(i).iter().zip(yn.row(j)).map(|(a, b)| a * b).sum())
                .collect()
        })
        .collect())
}

fn logsumexp(xs: impl Iterator<Item = f64> + Clone) -> f64 {
    let max = xs.clone().fold(f64::NEG_INFINITY, f64::max);
    max + xs.map(|x| (x - max).exp()).sum::<f64>().ln()
}

/// `-(1/K) sum_i log softmax_j(cos(z_i, y_j) / tau)[i]`.
pub fn infonce_loss(z: &Tensor, y: &Tensor, tau: f64) -> Result<f64> {
    check_pair(z, y, tau)?;
    let cos = cosine_matrix(z, y)?;
    let k = cos.len();
    let total: f64 = cos
        .iter()
        .enumerate()
        .map(|(i, row)| logsumexp(row.iter().map(|c| c / tau)) - row[i] / tau)
        .sum();
    Ok(total / k as f64)
}

/// One bound check: InfoNCE, the strict Jensen bound and the approximate
/// cosine bound with its `log K` term.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BoundReport {
    #[serde(rename = "K")]
    pub k: usize,
    pub tau: f64,
    pub infonce: f64,
    pub jensen_bound: f64,
    pub approx_bound: f64,
    pub gap_jensen: f64,
    pub gap_approx: f64,
}

pub fn check_bound(z: &Tensor, y: &Tensor, tau: f64) -> Result<BoundReport> {
    let infonce = infonce_loss(z, y, tau)?;
    let cos = cosine_matrix(z, y)?;
    let k = cos.len();
    let kf = k as f64;
    let mean_pos = (0..k).map(|i| cos[i][i]).sum::<f64>() / kf;

    // log of the mean over anchors of the partition sums, in log space
    let per_anchor: Vec<f64> = cos.iter().map(|row| logsumexp(row.iter().map(|c| c / tau))).collect();
    let log_mean_partition = logsumexp(per_anchor.iter().copied()) - kf.ln();
    let jensen_bound = -mean_pos / tau + log_mean_partition;

    let z_norms: Vec<f64> = (0..k).map(|i| norm(z.row(i))).collect();
    let mean_y_norm = (0..k).map(|j| norm(y.row(j))).sum::<f64>() / kf;
    let mut cross = 0.0;
    if k > 1 {
        for i in 0..k {
            for j in (0..k).filter(|&j| j != i) {
                let dot: f64 = z.row(i).iter().zip(y.row(j)).map(|(a, b)| a * b).sum();
                cross += dot / (z_norms[i] * mean_y_norm);
            }
        }
        cross /= (k * (k - 1)) as f64;
    }
    let approx_bound = -(mean_pos - cross) / tau + kf.ln();
    Ok(BoundReport {
        k,
        tau,
        infonce,
        jensen_bound,
        approx_bound,
        gap_jensen: jensen_bound - infonce,
        gap_approx: approx_bound - infonce,
    })
}

fn norm(row: &[f64]) -> f64 {
    row.iter().map(|v| v * v).sum::<f64>().sqrt()
}

/// `trials` checks on standard-normal `K x dim` pairs.
pub fn bound_sweep(k: usize, dim: usize, tau: f64, trials: usize, seed: u64) -> Result<Vec<BoundReport>> {
    let normal = Normal::new(0.0, 1.0).expect("unit normal");
    (0..trials)
        .map(|t| {
            let mut r = rng::rng(derive_seed(seed, "bounds", &[t as u64]));
            let mut draw = || Tensor::new(vec![k, dim], (0..k * dim).map(|_| normal.sample(&mut r)).collect());
            let z = draw()?;
            let y = draw()?;
            check_bound(&z, &y, tau)
        })
        .collect()
}

/// Writes reports as CSV with columns `K, tau, infonce, jensen_bound,
/// approx_bound, gap_jensen, gap_approx`.
pub fn write_bound_reports(path: &Path, reports: &[BoundReport]) -> Result<()> {
    let mut w = csv::Writer::from_writer(Vec::new());
    for r in reports {
        w.serialize(r)?;
    }
    let bytes = w.into_inner().map_err(|e| Error::io(path, e.into_error()))?;
    write_atomic(path, &bytes)
}

/// Mean and max of `|cos(row_a, row_b)|` over unordered row pairs.
pub fn orthogonality_stats(labels: &LabelMatrix) -> Result<(f64, f64)> {
    row_orthogonality(labels.values())
}

pub fn row_orthogonality(rows: &Tensor) -> Result<(f64, f64)> {
    let n = rows.rows();
    if n < 2 {
        return Err(Error::invalid("orthogonality needs at least 2 rows"));
    }
    let u = normalize_rows(rows, "label rows")?;
    let (mut sum, mut max, mut pairs) = (0.0, 0.0f64, 0usize);
    for a in 0..n {
        for b in a + 1..n {
            let c: f64 = u.row(a).iter().zip(u.row(b)).map(|(x, y)| x * y).sum::<f64>().abs();
            sum += c;
            max = max.max(c);
            pairs += 1;
        }
    }
    Ok((sum / pairs as f64, max))
}

/// Global L2 norm over every gradient tensor.
pub fn gradient_norm(param_grads: &BTreeMap<String, Tensor>) -> f64 {
    param_grads
        .values()
        .flat_map(|t| t.data())
        .map(|v| v * v)
        .sum::<f64>()
        .sqrt()
}
