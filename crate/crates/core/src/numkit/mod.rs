//! Dense double-precision kernels shared by every other module.

mod mat;
mod rng;
mod spd;

pub use mat::{dot, matvec, norm, Mat};
pub(crate) use mat::{matmul_into, matmul_nt_into, matmul_tn_acc};
pub use rng::Rng;
pub use spd::{gaussian_sample, mahalanobis_sq, spd_factorize, spd_factorize_with, SpdFactor, RIDGE_SCHEDULE};

use crate::error::{Error, Result};

/// Max-shifted softmax.
pub fn softmax(v: &[f64]) -> Result<Vec<f64>> {
    if v.is_empty() {
        return Err(Error::dim("softmax of an empty vector"));
    }
    let mut out = v.to_vec();
    softmax_in_place(&mut out);
    Ok(out)
}

pub(crate) fn softmax_in_place(v: &mut [f64]) {
    let max = v.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let mut sum = 0.0;
    for x in v.iter_mut() {
        *x = (*x - max).exp();
        sum += *x;
    }
    for x in v.iter_mut() {
        *x /= sum;
    }
}

/// `ln Σ exp(v)`, stable.
pub fn log_sum_exp(v: &[f64]) -> f64 {
    let max = v.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    if max == f64::NEG_INFINITY {
        return max;
    }
    max + v.iter().map(|x| (x - max).exp()).sum::<f64>().ln()
}

/// Indices of the `k` largest entries, largest first. Equal values keep
/// ascending index order.
pub fn topk(v: &[f64], k: usize) -> Result<Vec<usize>> {
    if k == 0 || k > v.len() {
        return Err(Error::Parameter(format!("top-{k} of {} entries", v.len())));
    }
    let mut idx: Vec<usize> = (0..v.len()).collect();
    // stable sort keeps lower indices first among ties
    idx.sort_by(|&a, &b| v[b].total_cmp(&v[a]));
    idx.truncate(k);
    Ok(idx)
}

/// Indices of the `k` smallest entries, smallest first, ties to the lower index.
pub fn bottomk(v: &[f64], k: usize) -> Result<Vec<usize>> {
    let neg: Vec<f64> = v.iter().map(|x| -x).collect();
    topk(&neg, k)
}

/// `1 − cos(a, b)`, in `[0, 2]`.
pub fn cosine_distance(a: &[f64], b: &[f64]) -> Result<f64> {
    if a.len() != b.len() {
        return Err(Error::dim(format!("cosine of {} vs {} dims", a.len(), b.len())));
    }
    let (na, nb) = (norm(a), norm(b));
    if na == 0.0 || nb == 0.0 {
        return Err(Error::DegenerateInput("cosine distance with a zero vector".into()));
    }
    let cos = (dot(a, b) / (na * nb)).clamp(-1.0, 1.0);
    Ok(1.0 - cos)
}

/// Gradient of `cosine_distance(q, k)` with respect to `k`.
pub fn cosine_distance_grad_wrt_b(a: &[f64], b: &[f64]) -> Vec<f64> {
    let (na, nb) = (norm(a), norm(b));
    let ab = dot(a, b);
    a.iter()
        .zip(b)
        .map(|(x, y)| -(x / (na * nb) - ab * y / (na * nb * nb * nb)))
        .collect()
}
