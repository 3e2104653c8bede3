//! Numerical verification of the two divergence-approximation claims.
//!
//! Claim 1 approximates the plug-in divergence between the original and
//! quantized weight densities by a derivative-weighted sum scaled by the
//! error mean. Claim 2 bounds that sum's second term by the weight-adaptive
//! penalty. Both are checked on Gaussian densities, where the distribution
//! of weight-plus-error is available in closed form and no quadrature noise
//! enters the measurement.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution as _, Normal, Uniform};
use serde::{Deserialize, Serialize};

use super::density::{DensityModel, ErrorModel};
use super::{plugin_kl, DiagError};

/// The two-term approximation:
/// `mu_delta * sum_i d1(w_i) + mu_delta * sum_i d2(w_i) * (qw_i - w_i)`.
pub fn claim1_approx(
    density: &DensityModel,
    weights: &[f64],
    qweights: &[f64],
    mu_delta: f64,
) -> Result<f64, DiagError> {
    if weights.len() != qweights.len() {
        return Err(DiagError::LengthMismatch(weights.len(), qweights.len()));
    }
    let first: f64 = weights.iter().map(|&w| density.d1(w)).sum();
    let second: f64 = weights
        .iter()
        .zip(qweights)
        .map(|(&w, &qw)| density.d2(w) * (qw - w))
        .sum();
    Ok(mu_delta * first + mu_delta * second)
}

/// One point of a claim-1 experiment.
#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
pub struct Claim1Point {
    pub mu_delta: f64,
    pub sigma_delta: f64,
    pub plugin_kl: f64,
    pub approx: f64,
    pub gap: f64,
}

/// Outcome of [`verify_claim1`]: the gap at the requested error scale and at
/// half that scale, with the same weights and error draws.
#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
pub struct Claim1Record {
    pub n: usize,
    pub seed: u64,
    pub full: Claim1Point,
    pub halved: Claim1Point,
    /// `halved.gap / full.gap`; absent when the full gap is exactly zero.
    pub gap_ratio: Option<f64>,
}

/// Runs the claim-1 experiment along a schedule of error scales.
///
/// Draws `n` weights from the density and a shared set of standardized
/// errors once; each schedule entry then forms `qw_i = w_i + mu + sigma*e_i`
/// and compares the exact plug-in divergence (using the closed-form
/// convolved density) against [`claim1_approx`]. Sharing draws across
/// entries couples the points, so gap ratios measure the scale dependence
/// alone.
pub fn claim1_gap_schedule(
    density: &DensityModel,
    schedule: &[ErrorModel],
    n: usize,
    seed: u64,
) -> Result<Vec<Claim1Point>, DiagError> {
    let (mean, std_dev) = density.gaussian_params();
    for e in schedule {
        if e.mu_delta.abs() > 0.1 * std_dev || e.sigma_delta > 0.1 * std_dev {
            return Err(DiagError::BadScale(format!(
                "error moments ({}, {}) exceed a tenth of the density scale {std_dev}",
                e.mu_delta, e.sigma_delta
            )));
        }
    }
    if n == 0 {
        return Err(DiagError::EmptySamples);
    }

    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let weight_dist = Normal::new(mean, std_dev).expect("validated params");
    let unit = Normal::new(0.0, 1.0).unwrap();
    let weights: Vec<f64> = (0..n).map(|_| weight_dist.sample(&mut rng)).collect();
    let unit_errors: Vec<f64> = (0..n).map(|_| unit.sample(&mut rng)).collect();

    schedule
        .iter()
        .map(|error| {
            let qweights: Vec<f64> = weights
                .iter()
                .zip(&unit_errors)
                .map(|(&w, &e)| w + error.mu_delta + error.sigma_delta * e)
                .collect();
            let convolved = density.convolved_with_error(error);
            let plugin = plugin_kl(&weights, &qweights, density, &convolved)?;
            let approx = claim1_approx(density, &weights, &qweights, error.mu_delta)?;
            Ok(Claim1Point {
                mu_delta: error.mu_delta,
                sigma_delta: error.sigma_delta,
                plugin_kl: plugin,
                approx,
                gap: (plugin - approx).abs(),
            })
        })
        .collect()
}

/// Measures the approximation gap at one error scale and at half that scale.
/// Halving both error moments should shrink the gap roughly fourfold; the
/// record carries the observed ratio.
pub fn verify_claim1(
    density: &DensityModel,
    error: &ErrorModel,
    n: usize,
    seed: u64,
) -> Result<Claim1Record, DiagError> {
    let points = claim1_gap_schedule(density, &[*error, error.halved()], n, seed)?;
    let (full, halved) = (points[0], points[1]);
    let gap_ratio = (full.gap != 0.0).then(|| halved.gap / full.gap);
    Ok(Claim1Record {
        n,
        seed,
        full,
        halved,
        gap_ratio,
    })
}

/// Both sides of the penalty-ratio bound, with the constant
/// `C = |mu_delta| * max|w_i| * max|d2(w_i)|` derived from the inputs.
#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
pub struct Claim2Outcome {
    pub lhs: f64,
    pub rhs: f64,
    pub holds: bool,
}

/// Checks `|mu_delta * sum_i d2(w_i)(qw_i - w_i)| <= C (sum_i |qw_i/w_i| + 1)`.
pub fn claim2_check(
    density: &DensityModel,
    weights: &[f64],
    qweights: &[f64],
    mu_delta: f64,
) -> Result<Claim2Outcome, DiagError> {
    if weights.len() != qweights.len() {
        return Err(DiagError::LengthMismatch(weights.len(), qweights.len()));
    }
    if weights.contains(&0.0) {
        return Err(DiagError::ZeroWeight);
    }
    let bound_a = weights.iter().fold(0.0f64, |m, &w| m.max(w.abs()));
    let bound_b = weights.iter().fold(0.0f64, |m, &w| m.max(density.d2(w).abs()));
    let c = mu_delta.abs() * bound_a * bound_b;
    let lhs = (mu_delta
        * weights
            .iter()
            .zip(qweights)
            .map(|(&w, &qw)| density.d2(w) * (qw - w))
            .sum::<f64>())
    .abs();
    let penalty: f64 = weights
        .iter()
        .zip(qweights)
        .map(|(&w, &qw)| (qw / w).abs())
        .sum();
    let rhs = c * (penalty + 1.0);
    Ok(Claim2Outcome {
        lhs,
        rhs,
        holds: lhs <= rhs,
    })
}

/// Result of fuzzing [`claim2_check`] over random instances.
#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
pub struct Claim2FuzzSummary {
    pub instances: usize,
    pub violations: usize,
    /// Largest observed `lhs / rhs` (1.0 is the boundary).
    pub worst_ratio: f64,
}

impl Claim2FuzzSummary {
    pub fn holds(&self) -> bool {
        self.violations == 0
    }
}

/// Fuzzes the bound over random Gaussian instances drawn from the claim's
/// regime: error moments within two percent of the density scale and weights
/// bounded away from zero, so the quantized-to-original ratios stay near one
/// (weights are classified, never shrunk).
pub fn fuzz_claim2(instances: usize, seed: u64) -> Claim2FuzzSummary {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let unit = Normal::<f64>::new(0.0, 1.0).unwrap();
    let size_dist = Uniform::new_inclusive(1usize, 256).unwrap();
    let mut violations = 0;
    let mut worst_ratio: f64 = 0.0;
    for _ in 0..instances {
        let mean = Uniform::new_inclusive(-0.5, 0.5).unwrap().sample(&mut rng);
        let std_dev = Uniform::new_inclusive(0.5f64, 2.0).unwrap().sample(&mut rng);
        let density = DensityModel::gaussian(mean, std_dev);
        let n = size_dist.sample(&mut rng);
        let mu_delta = std_dev
            * Uniform::new_inclusive(-0.02, 0.02)
                .unwrap()
                .sample(&mut rng);
        let sigma_delta = mu_delta.abs() / 2.0;
        let mut weights = Vec::with_capacity(n);
        while weights.len() < n {
            let w = mean + std_dev * unit.sample(&mut rng);
            if w.abs() >= 0.2 * std_dev {
                weights.push(w);
            }
        }
        let qweights: Vec<f64> = weights
            .iter()
            .map(|&w| w + mu_delta + sigma_delta * unit.sample(&mut rng))
            .collect();
        let outcome =
            claim2_check(&density, &weights, &qweights, mu_delta).expect("weights are non-zero");
        if !outcome.holds {
            violations += 1;
        }
        if outcome.rhs > 0.0 {
            worst_ratio = worst_ratio.max(outcome.lhs / outcome.rhs);
        }
    }
    Claim2FuzzSummary {
        instances,
        violations,
        worst_ratio,
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn approx_is_zero_when_mean_error_is_zero() {
        let d = DensityModel::gaussian(0.0, 1.0);
        let w = [0.5, -1.0, 2.0];
        let qw = [0.55, -0.9, 2.2];
        assert_eq!(claim1_approx(&d, &w, &qw, 0.0).unwrap(), 0.0);
    }

    #[test]
    fn approx_reduces_to_first_term_when_unquantized() {
        let d = DensityModel::gaussian(0.0, 1.0);
        let w = [0.5, -1.0, 2.0];
        let expected: f64 = 0.01 * w.iter().map(|&x| d.d1(x)).sum::<f64>();
        let got = claim1_approx(&d, &w, &w, 0.01).unwrap();
        assert!((got - expected).abs() < 1e-15);
    }

    #[test]
    fn approx_cancels_on_symmetric_grid() {
        let d = DensityModel::gaussian(0.0, 1.0);
        let w: Vec<f64> = (1..=50)
            .flat_map(|i| {
                let x = i as f64 * 0.05;
                [x, -x]
            })
            .collect();
        let got = claim1_approx(&d, &w, &w, 0.03).unwrap();
        assert!(got.abs() < 1e-12, "odd first derivative must cancel: {got}");
    }

    #[test]
    fn zero_error_gives_zero_gap() {
        let d = DensityModel::gaussian(0.0, 1.0);
        let e = ErrorModel::new(0.0, 0.0).unwrap();
        let rec = verify_claim1(&d, &e, 1000, 42).unwrap();
        assert_eq!(rec.full.plugin_kl, 0.0);
        assert_eq!(rec.full.approx, 0.0);
        assert_eq!(rec.full.gap, 0.0);
        assert!(rec.gap_ratio.is_none());
    }

    #[test]
    fn halving_the_error_shrinks_the_gap_second_order() {
        let d = DensityModel::gaussian(0.0, 1.0);
        let e = ErrorModel::new(0.02, 0.01).unwrap();
        let rec = verify_claim1(&d, &e, 100_000, 7).unwrap();
        let ratio = rec.gap_ratio.expect("nonzero gap");
        assert!(
            (0.15..=0.6).contains(&ratio),
            "gap ratio {ratio}, gaps {} -> {}",
            rec.full.gap,
            rec.halved.gap
        );
    }

    #[test]
    fn verify_is_deterministic() {
        let d = DensityModel::gaussian(0.0, 1.0);
        let e = ErrorModel::new(0.03, 0.015).unwrap();
        let a = verify_claim1(&d, &e, 5000, 11).unwrap();
        let b = verify_claim1(&d, &e, 5000, 11).unwrap();
        assert_eq!(a.full.plugin_kl, b.full.plugin_kl);
        assert_eq!(a.full.approx, b.full.approx);
        assert_eq!(a.halved.gap, b.halved.gap);
    }

    #[test]
    fn oversized_error_rejected() {
        let d = DensityModel::gaussian(0.0, 1.0);
        let e = ErrorModel::new(0.5, 0.01).unwrap();
        assert!(matches!(
            verify_claim1(&d, &e, 100, 0),
            Err(DiagError::BadScale(_))
        ));
    }

    #[test]
    fn claim2_trivial_cases() {
        let d = DensityModel::gaussian(0.0, 1.0);
        let w = [0.5, -1.2, 2.0];
        // mu_delta = 0: both sides zero
        let o = claim2_check(&d, &w, &[0.6, -1.1, 2.1], 0.0).unwrap();
        assert_eq!(o.lhs, 0.0);
        assert_eq!(o.rhs, 0.0);
        assert!(o.holds);
        // qw == w: lhs zero, rhs positive
        let o = claim2_check(&d, &w, &w, 0.02).unwrap();
        assert_eq!(o.lhs, 0.0);
        assert!(o.rhs > 0.0);
        assert!(o.holds);
    }

    #[test]
    fn claim2_rejects_zero_weights() {
        let d = DensityModel::gaussian(0.0, 1.0);
        assert!(matches!(
            claim2_check(&d, &[0.0, 1.0], &[0.1, 1.0], 0.01),
            Err(DiagError::ZeroWeight)
        ));
    }

    #[test]
    fn claim2_fuzz_small_run_has_no_violations() {
        let summary = fuzz_claim2(500, 13);
        assert_eq!(summary.violations, 0, "worst ratio {}", summary.worst_ratio);
        assert!(summary.worst_ratio <= 1.0);
    }
}
