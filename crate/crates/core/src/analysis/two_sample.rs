//! Two-sample discrepancies between point clouds.

use nalgebra::{DMatrix, DVector, SymmetricEigen};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Ridge added to a fitted covariance that is not positive definite.
pub const COVARIANCE_RIDGE: f64 = 1e-8;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TwoSampleMetrics {
    pub energy_distance: f64,
    /// Squared MMD, biased estimator.
    pub mmd_rbf: f64,
    /// Kernel bandwidth used for `mmd_rbf`.
    pub bandwidth: f64,
    /// 2-Wasserstein distance between Gaussian fits.
    pub gauss_w2: f64,
    /// Set when a covariance had to be regularized.
    pub ridge_applied: bool,
}

fn check(a: &[Vec<f64>], b: &[Vec<f64>]) -> Result<usize> {
    if a.is_empty() || b.is_empty() {
        return Err(Error::Config(
            "two-sample metrics need nonempty sets".into(),
        ));
    }
    let d = a[0].len();
    if a.iter().chain(b).any(|x| x.len() != d) {
        return Err(Error::dim("samples differ in dimension"));
    }
    Ok(d)
}

fn dist2(x: &[f64], y: &[f64]) -> f64 {
    x.iter().zip(y).map(|(a, b)| (a - b).powi(2)).sum()
}

fn mean_pairwise(a: &[Vec<f64>], b: &[Vec<f64>], f: impl Fn(f64) -> f64) -> f64 {
    let mut total = 0.0;
    for x in a {
        for y in b {
            total += f(dist2(x, y));
        }
    }
    total / (a.len() * b.len()) as f64
}

/// `2 E|X - Y| - E|X - X'| - E|Y - Y'|` over all pairs, diagonals included,
/// which keeps the estimate nonnegative.
pub fn energy_distance(a: &[Vec<f64>], b: &[Vec<f64>]) -> Result<f64> {
    check(a, b)?;
    let xy = mean_pairwise(a, b, f64::sqrt);
    let xx = mean_pairwise(a, a, f64::sqrt);
    let yy = mean_pairwise(b, b, f64::sqrt);
    Ok((2.0 * xy - xx - yy).max(0.0))
}

/// Median of the nonzero pairwise distances in the pooled sample.
pub fn median_bandwidth(a: &[Vec<f64>], b: &[Vec<f64>]) -> f64 {
    let pooled: Vec<&Vec<f64>> = a.iter().chain(b).collect();
    let mut d: Vec<f64> = Vec::new();
    for i in 0..pooled.len() {
        for j in i + 1..pooled.len() {
            let v = dist2(pooled[i], pooled[j]).sqrt();
            if v > 0.0 {
                d.push(v);
            }
        }
    }
    if d.is_empty() {
        return 1.0;
    }
    d.sort_by(f64::total_cmp);
    let m = d.len() / 2;
    if d.len() % 2 == 1 {
        d[m]
    } else {
        0.5 * (d[m - 1] + d[m])
    }
}

pub fn mmd_rbf(a: &[Vec<f64>], b: &[Vec<f64>], bandwidth: f64) -> Result<f64> {
    check(a, b)?;
    if bandwidth <= 0.0 {
        return Err(Error::Config("bandwidth must be positive".into()));
    }
    let g = 0.5 / (bandwidth * bandwidth);
    let k = |r2: f64| (-g * r2).exp();
    let xy = mean_pairwise(a, b, k);
    let xx = mean_pairwise(a, a, k);
    let yy = mean_pairwise(b, b, k);
    Ok((xx + yy - 2.0 * xy).max(0.0))
}

struct GaussFit {
    mean: DVector<f64>,
    cov: DMatrix<f64>,
}

fn fit(x: &[Vec<f64>], d: usize) -> GaussFit {
    let n = x.len();
    let mut mean = DVector::zeros(d);
    for r in x {
        mean += DVector::from_column_slice(r);
    }
    mean /= n as f64;
    let mut cov = DMatrix::zeros(d, d);
    for r in x {
        let c = DVector::from_column_slice(r) - &mean;
        cov += &c * c.transpose();
    }
    if n > 1 {
        cov /= (n - 1) as f64;
    }
    GaussFit { mean, cov }
}

fn sqrtm(m: &DMatrix<f64>) -> DMatrix<f64> {
    let e = SymmetricEigen::new(m.clone());
    let s = e.eigenvalues.map(|v| v.max(0.0).sqrt());
    &e.eigenvectors * DMatrix::from_diagonal(&s) * e.eigenvectors.transpose()
}

/// Returns the covariance, ridged if its smallest eigenvalue is not safely
/// positive, and whether the ridge was applied.
fn regularize(cov: DMatrix<f64>) -> (DMatrix<f64>, bool) {
    let min = SymmetricEigen::new(cov.clone())
        .eigenvalues
        .iter()
        .copied()
        .fold(f64::INFINITY, f64::min);
    let scale = cov.diagonal().amax().max(1.0);
    if min > 1e-12 * scale {
        (cov, false)
    } else {
        let d = cov.nrows();
        (cov + DMatrix::identity(d, d) * COVARIANCE_RIDGE, true)
    }
}

/// `W2^2 = |m1 - m2|^2 + tr(S1 + S2 - 2 (S2^1/2 S1 S2^1/2)^1/2)`.
pub fn gauss_w2(a: &[Vec<f64>], b: &[Vec<f64>]) -> Result<(f64, bool)> {
    let d = check(a, b)?;
    let (fa, fb) = (fit(a, d), fit(b, d));
    let (ca, ra) = regularize(fa.cov);
    let (cb, rb) = regularize(fb.cov);
    let mean_term = (&fa.mean - &fb.mean).norm_squared();
    let cov_term = if ca == cb {
        0.0
    } else {
        let r = sqrtm(&cb);
        let cross = sqrtm(&(&r * &ca * &r));
        (ca.trace() + cb.trace() - 2.0 * cross.trace()).max(0.0)
    };
    Ok(((mean_term + cov_term).sqrt(), ra || rb))
}

pub fn two_sample_metrics(a: &[Vec<f64>], b: &[Vec<f64>]) -> Result<TwoSampleMetrics> {
    let bandwidth = median_bandwidth(a, b);
    let (w2, ridge_applied) = gauss_w2(a, b)?;
    Ok(TwoSampleMetrics {
        energy_distance: energy_distance(a, b)?,
        mmd_rbf: mmd_rbf(a, b, bandwidth)?,
        bandwidth,
        gauss_w2: w2,
        ridge_applied,
    })
}
