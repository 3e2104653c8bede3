//! Salient/common weight classification.
//!
//! A weight survives soft-thresholding at level `lambda_prime` exactly when
//! `w^2 > lambda_prime`, so choosing the level that keeps the top fraction
//! `alpha` of weights reduces to an order-statistic computation on the
//! squared magnitudes: no iterative search is needed. Classification is
//! per-tensor, fully deterministic, and never modifies a weight value.

use thiserror::Error;

use crate::tensor::WeightTensor;

#[derive(Debug, Error)]
pub enum SaliencyError {
    #[error("alpha must lie in [0, 1], got {0}")]
    BadAlpha(f64),
}

/// Per-weight salient/common classification and the threshold that made it.
#[derive(Debug, Clone, PartialEq)]
pub struct SaliencyMask {
    salient: Vec<bool>,
    lambda_prime: f64,
    alpha_requested: f64,
    salient_count: usize,
}

impl SaliencyMask {
    /// Flags aligned with the tensor's row-major data.
    pub fn salient(&self) -> &[bool] {
        &self.salient
    }

    pub fn is_salient(&self, flat: usize) -> bool {
        self.salient[flat]
    }

    /// The effective soft-threshold level that produced this mask.
    pub fn lambda_prime(&self) -> f64 {
        self.lambda_prime
    }

    pub fn alpha_requested(&self) -> f64 {
        self.alpha_requested
    }

    /// Number of salient weights, always `ceil(alpha * n)`.
    pub fn salient_count(&self) -> usize {
        self.salient_count
    }
}

/// Weight-adaptive soft-thresholding: `sign(w) * max(|w| - lambda'/|w|, 0)`.
///
/// Returns `w` unchanged when `lambda_prime == 0` and `0` for `w == 0` (the
/// limit convention; the rule is otherwise undefined at zero). For `w != 0`
/// the result is zero exactly when `w^2 <= lambda_prime`.
pub fn soft_threshold(w: f64, lambda_prime: f64) -> f64 {
    debug_assert!(lambda_prime >= 0.0);
    if lambda_prime == 0.0 {
        return w;
    }
    if w == 0.0 {
        return 0.0;
    }
    let mag = w.abs();
    w.signum() * (mag - lambda_prime / mag).max(0.0)
}

/// Number of salient weights for a requested fraction: `ceil(alpha * n)`.
pub fn salient_count_for(alpha: f64, n: usize) -> usize {
    ((alpha * n as f64).ceil() as usize).min(n)
}

/// The threshold level at which exactly `ceil(alpha * n)` weights survive.
///
/// Equals the `(k+1)`-th largest squared magnitude (`0` when `k == n`), so
/// strictly-larger squared weights survive and ties at the boundary are
/// decided by the mask's index rule.
pub fn lambda_for_alpha(tensor: &WeightTensor, alpha: f64) -> Result<f64, SaliencyError> {
    check_alpha(alpha)?;
    let data = tensor.data();
    let k = salient_count_for(alpha, data.len());
    Ok(boundary_lambda(data, k))
}

/// Classifies the top `ceil(alpha * n)` weights by magnitude as salient,
/// breaking magnitude ties in favor of the lower flat index.
pub fn select_salient(tensor: &WeightTensor, alpha: f64) -> Result<SaliencyMask, SaliencyError> {
    check_alpha(alpha)?;
    let data = tensor.data();
    let n = data.len();
    let k = salient_count_for(alpha, n);

    let mut salient = vec![false; n];
    let lambda_prime;
    if k == n {
        salient.fill(true);
        lambda_prime = 0.0;
    } else if k == 0 {
        lambda_prime = data.iter().fold(0.0f64, |m, &v| m.max(sq(v)));
    } else {
        // Selecting on packed (magnitude, index) pairs keeps the partition
        // walking contiguous memory instead of gathering from the tensor.
        let mut pairs: Vec<(f32, u32)> = data
            .iter()
            .enumerate()
            .map(|(i, v)| (v.abs(), i as u32))
            .collect();
        let by_rank =
            |a: &(f32, u32), b: &(f32, u32)| b.0.total_cmp(&a.0).then(a.1.cmp(&b.1));
        let (_, boundary, _) = pairs.select_nth_unstable_by(k, by_rank);
        lambda_prime = sq(boundary.0);
        for &(_, i) in &pairs[..k] {
            salient[i as usize] = true;
        }
    }

    Ok(SaliencyMask {
        salient,
        lambda_prime,
        alpha_requested: alpha,
        salient_count: k,
    })
}

fn check_alpha(alpha: f64) -> Result<(), SaliencyError> {
    if !(0.0..=1.0).contains(&alpha) {
        return Err(SaliencyError::BadAlpha(alpha));
    }
    Ok(())
}

fn sq(v: f32) -> f64 {
    let v = v as f64;
    v * v
}

fn boundary_lambda(data: &[f32], k: usize) -> f64 {
    let n = data.len();
    if k == n {
        return 0.0;
    }
    if k == 0 {
        return data.iter().fold(0.0f64, |m, &v| m.max(sq(v)));
    }
    let mut mags: Vec<f32> = data.iter().map(|v| v.abs()).collect();
    let (_, boundary, _) = mags.select_nth_unstable_by(k, |a, b| b.total_cmp(a));
    sq(*boundary)
}
