use serde::{Deserialize, Serialize};

use super::mat::Mat;
use super::rng::Rng;
use crate::error::{Error, Result};

/// Ridge levels tried in order when factorizing a covariance.
pub const RIDGE_SCHEDULE: [f64; 5] = [0.0, 1e-10, 1e-8, 1e-6, 1e-4];

/// A pivot below this fraction of `max(1, max diagonal)` counts as a
/// failed factorization.
const PIVOT_RTOL: f64 = 1e-12;

/// Cholesky factor `L` with `L·Lᵀ = S + ridge·I`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SpdFactor {
    lower: Mat,
    ridge: f64,
}

impl SpdFactor {
    pub fn dim(&self) -> usize {
        self.lower.rows()
    }

    pub fn ridge(&self) -> f64 {
        self.ridge
    }

    pub fn lower(&self) -> &Mat {
        &self.lower
    }

    /// `L·Lᵀ`.
    pub fn reconstruct(&self) -> Mat {
        let n = self.dim();
        Mat::from_fn(n, n, |i, j| {
            let k = i.min(j) + 1;
            (0..k).map(|p| self.lower[(i, p)] * self.lower[(j, p)]).sum()
        })
    }

    /// Solves `L·y = b` in place.
    fn forward_solve(&self, b: &mut [f64]) {
        let n = self.dim();
        for i in 0..n {
            let row = self.lower.row(i);
            let mut s = b[i];
            for (j, bj) in b.iter().enumerate().take(i) {
                s -= row[j] * bj;
            }
            b[i] = s / row[i];
        }
    }
}

/// Factorizes a symmetric matrix with the smallest ridge in
/// [`RIDGE_SCHEDULE`] that yields a well-conditioned Cholesky factor.
pub fn spd_factorize(s: &Mat) -> Result<SpdFactor> {
    spd_factorize_with(s, &RIDGE_SCHEDULE)
}

pub fn spd_factorize_with(s: &Mat, schedule: &[f64]) -> Result<SpdFactor> {
    let (n, c) = s.dims();
    if n != c {
        return Err(Error::dim(format!("{n}x{c} matrix is not square")));
    }
    if !s.is_finite() {
        return Err(Error::Input("matrix has non-finite entries".into()));
    }
    let max_diag = (0..n).fold(0.0f64, |m, i| m.max(s[(i, i)].abs()));
    let mut last = 0.0;
    for &ridge in schedule {
        last = ridge;
        if let Some(lower) = cholesky(s, ridge, PIVOT_RTOL * max_diag.max(1.0)) {
            return Ok(SpdFactor { lower, ridge });
        }
    }
    Err(Error::Singular { last_ridge: last })
}

fn cholesky(s: &Mat, ridge: f64, min_pivot: f64) -> Option<Mat> {
    let n = s.rows();
    let mut l = Mat::zeros(n, n);
    for j in 0..n {
        let mut d = s[(j, j)] + ridge;
        for p in 0..j {
            d -= l[(j, p)] * l[(j, p)];
        }
        if !(d > min_pivot) || !d.is_finite() {
            return None;
        }
        let djj = d.sqrt();
        l[(j, j)] = djj;
        for i in j + 1..n {
            // symmetric input: read the lower triangle only
            let mut v = s[(i, j)];
            for p in 0..j {
                v -= l[(i, p)] * l[(j, p)];
            }
            l[(i, j)] = v / djj;
        }
    }
    Some(l)
}

/// `(z − mu)ᵀ Σ⁻¹ (z − mu)` with `Σ = F·Fᵀ`.
pub fn mahalanobis_sq(z: &[f64], mu: &[f64], factor: &SpdFactor) -> Result<f64> {
    let n = factor.dim();
    if z.len() != n || mu.len() != n {
        return Err(Error::dim(format!(
            "point dim {} / mean dim {} against covariance dim {n}",
            z.len(),
            mu.len()
        )));
    }
    let mut y: Vec<f64> = z.iter().zip(mu).map(|(a, b)| a - b).collect();
    factor.forward_solve(&mut y);
    Ok(y.iter().map(|v| v * v).sum())
}

/// Draws `n` samples `mu + F·η`, `η ~ N(0, I)`.
pub fn gaussian_sample(mu: &[f64], factor: &SpdFactor, n: usize, rng: &mut Rng) -> Result<Vec<Vec<f64>>> {
    let d = factor.dim();
    if mu.len() != d {
        return Err(Error::dim(format!("mean dim {} vs factor dim {d}", mu.len())));
    }
    let l = factor.lower();
    let mut eta = vec![0.0; d];
    Ok((0..n)
        .map(|_| {
            for e in eta.iter_mut() {
                *e = rng.normal();
            }
            (0..d)
                .map(|i| {
                    let row = l.row(i);
                    mu[i] + (0..=i).map(|j| row[j] * eta[j]).sum::<f64>()
                })
                .collect()
        })
        .collect())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn identity_needs_no_ridge() {
        let f = spd_factorize(&Mat::identity(3)).unwrap();
        assert_eq!(f.ridge(), 0.0);
        assert_eq!(f.lower(), &Mat::identity(3));
    }

    #[test]
    fn diagonal_factor_is_sqrt() {
        let f = spd_factorize(&Mat::diag(&[4.0, 9.0])).unwrap();
        assert_eq!(f.lower(), &Mat::diag(&[2.0, 3.0]));
    }

    #[test]
    fn zero_matrix_forces_smallest_ridge() {
        let f = spd_factorize(&Mat::zeros(2, 2)).unwrap();
        assert_eq!(f.ridge(), 1e-10);
        let s = 1e-10f64.sqrt();
        assert!(f.lower().max_abs_diff(&Mat::diag(&[s, s])) < 1e-20);
    }

    #[test]
    fn indefinite_matrix_is_singular() {
        let s = Mat::diag(&[1.0, -1.0]);
        assert!(matches!(spd_factorize(&s), Err(Error::Singular { .. })));
    }

    #[test]
    fn non_square_rejected() {
        assert!(matches!(spd_factorize(&Mat::zeros(2, 3)), Err(Error::Dimension(_))));
    }

    #[test]
    fn mahalanobis_examples() {
        let eye = spd_factorize(&Mat::identity(2)).unwrap();
        assert_eq!(mahalanobis_sq(&[1.0, 2.0], &[1.0, 2.0], &eye).unwrap(), 0.0);
        assert!((mahalanobis_sq(&[3.0, 4.0], &[0.0, 0.0], &eye).unwrap() - 25.0).abs() < 1e-12);
        let f = spd_factorize(&Mat::diag(&[4.0, 1.0])).unwrap();
        assert!((mahalanobis_sq(&[2.0, 0.0], &[0.0, 0.0], &f).unwrap() - 1.0).abs() < 1e-15);
        assert!(mahalanobis_sq(&[1.0], &[0.0, 0.0], &f).is_err());
    }

    #[test]
    fn ridge_only_samples_collapse_to_mean() {
        let f = spd_factorize(&Mat::zeros(3, 3)).unwrap();
        let mu = [1.0, -2.0, 0.5];
        let xs = gaussian_sample(&mu, &f, 200, &mut Rng::new(9)).unwrap();
        for x in xs {
            for (a, b) in x.iter().zip(&mu) {
                assert!((a - b).abs() < 1e-4);
            }
        }
    }

    #[test]
    fn sampling_is_deterministic() {
        let f = spd_factorize(&Mat::diag(&[2.0, 0.5])).unwrap();
        let a = gaussian_sample(&[0.0, 1.0], &f, 20, &mut Rng::new(5)).unwrap();
        let b = gaussian_sample(&[0.0, 1.0], &f, 20, &mut Rng::new(5)).unwrap();
        assert_eq!(a, b);
    }

    // Law of large numbers: 10^5 draws of N(0, I) reproduce the moments.
    #[test]
    fn standard_normal_moments() {
        let d = 3;
        let n = 100_000;
        let f = spd_factorize(&Mat::identity(d)).unwrap();
        let xs = gaussian_sample(&vec![0.0; d], &f, n, &mut Rng::new(2024)).unwrap();
        let mut mean = vec![0.0; d];
        for x in &xs {
            for (m, v) in mean.iter_mut().zip(x) {
                *m += v / n as f64;
            }
        }
        let bound = 4.0 / (n as f64).sqrt();
        assert!(mean.iter().all(|m| m.abs() < bound), "{mean:?}");
        let mut cov = Mat::zeros(d, d);
        for x in &xs {
            for i in 0..d {
                for j in 0..d {
                    cov[(i, j)] += (x[i] - mean[i]) * (x[j] - mean[j]) / n as f64;
                }
            }
        }
        assert!(cov.max_abs_diff(&Mat::identity(d)) < 0.05);
    }
}
