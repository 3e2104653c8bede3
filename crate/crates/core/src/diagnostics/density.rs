//! Analytic density models with first and second derivatives.

use super::DiagError;

/// An analytic pdf together with its first two derivatives and a support
/// hint for quadrature. Claim verification needs densities whose
/// convolution with a Gaussian error is closed-form, so the Gaussian family
/// is the one on offer.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct DensityModel {
    kind: DensityKind,
    support: (f64, f64),
}

#[derive(Debug, Clone, Copy, PartialEq)]
enum DensityKind {
    Gaussian { mean: f64, std_dev: f64 },
}

impl DensityModel {
    pub fn gaussian(mean: f64, std_dev: f64) -> Self {
        assert!(std_dev > 0.0 && std_dev.is_finite(), "std_dev must be positive");
        Self {
            kind: DensityKind::Gaussian { mean, std_dev },
            support: (mean - 8.0 * std_dev, mean + 8.0 * std_dev),
        }
    }

    pub fn support(&self) -> (f64, f64) {
        self.support
    }

    /// `(mean, std_dev)` of the underlying Gaussian.
    pub fn gaussian_params(&self) -> (f64, f64) {
        match self.kind {
            DensityKind::Gaussian { mean, std_dev } => (mean, std_dev),
        }
    }

    pub fn pdf(&self, x: f64) -> f64 {
        match self.kind {
            DensityKind::Gaussian { mean, std_dev } => {
                let z = (x - mean) / std_dev;
                (-0.5 * z * z).exp() / (std_dev * (2.0 * std::f64::consts::PI).sqrt())
            }
        }
    }

    /// First derivative of the pdf.
    pub fn d1(&self, x: f64) -> f64 {
        match self.kind {
            DensityKind::Gaussian { mean, std_dev } => {
                let z = (x - mean) / std_dev;
                -z / std_dev * self.pdf(x)
            }
        }
    }

    /// Second derivative of the pdf.
    pub fn d2(&self, x: f64) -> f64 {
        match self.kind {
            DensityKind::Gaussian { mean, std_dev } => {
                let z = (x - mean) / std_dev;
                (z * z - 1.0) / (std_dev * std_dev) * self.pdf(x)
            }
        }
    }

    /// The density this one becomes after adding an independent Gaussian
    /// error with the given moments.
    pub fn convolved_with_error(&self, error: &ErrorModel) -> DensityModel {
        let (mean, std_dev) = self.gaussian_params();
        DensityModel::gaussian(
            mean + error.mu_delta,
            (std_dev * std_dev + error.sigma_delta * error.sigma_delta).sqrt(),
        )
    }

    /// Simpson-rule integral of the pdf over the support hint.
    pub fn integral_over_support(&self, intervals: usize) -> f64 {
        let n = intervals.max(2) & !1; // even
        let (lo, hi) = self.support;
        let h = (hi - lo) / n as f64;
        let mut total = self.pdf(lo) + self.pdf(hi);
        for i in 1..n {
            let w = if i % 2 == 1 { 4.0 } else { 2.0 };
            total += w * self.pdf(lo + i as f64 * h);
        }
        total * h / 3.0
    }

    /// Worst mismatch between the analytic derivatives and central finite
    /// differences of the pdf, normalized by each derivative's peak over the
    /// probe set. Probes cover the middle half of the support hint.
    pub fn derivative_mismatch(&self, probes: usize) -> f64 {
        let (lo, hi) = self.support;
        let span = hi - lo;
        let (plo, phi) = (lo + span * 0.25, hi - span * 0.25);
        let h = span * 1e-5;
        let mut d1_err: Vec<(f64, f64)> = Vec::with_capacity(probes);
        let mut d2_err: Vec<(f64, f64)> = Vec::with_capacity(probes);
        for i in 0..probes {
            let x = plo + (phi - plo) * i as f64 / (probes - 1) as f64;
            let fd1 = (self.pdf(x + h) - self.pdf(x - h)) / (2.0 * h);
            let fd2 = (self.pdf(x + h) - 2.0 * self.pdf(x) + self.pdf(x - h)) / (h * h);
            d1_err.push((self.d1(x), fd1));
            d2_err.push((self.d2(x), fd2));
        }
        let worst = |pairs: &[(f64, f64)]| {
            let peak = pairs.iter().fold(0.0f64, |m, &(a, _)| m.max(a.abs()));
            pairs
                .iter()
                .fold(0.0f64, |m, &(a, fd)| m.max((a - fd).abs() / peak))
        };
        worst(&d1_err).max(worst(&d2_err))
    }
}

/// First two moments of the quantization error.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ErrorModel {
    pub mu_delta: f64,
    pub sigma_delta: f64,
}

impl ErrorModel {
    pub fn new(mu_delta: f64, sigma_delta: f64) -> Result<Self, DiagError> {
        if sigma_delta < 0.0 || !sigma_delta.is_finite() || !mu_delta.is_finite() {
            return Err(DiagError::BadScale(format!(
                "invalid error moments mu={mu_delta} sigma={sigma_delta}"
            )));
        }
        Ok(Self {
            mu_delta,
            sigma_delta,
        })
    }

    pub fn halved(&self) -> ErrorModel {
        ErrorModel {
            mu_delta: self.mu_delta / 2.0,
            sigma_delta: self.sigma_delta / 2.0,
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn pdf_integrates_to_one() {
        for (mu, sigma) in [(0.0, 1.0), (2.0, 0.5), (-1.0, 3.0)] {
            let d = DensityModel::gaussian(mu, sigma);
            let integral = d.integral_over_support(4096);
            assert!((integral - 1.0).abs() < 1e-6, "integral = {integral}");
        }
    }

    #[test]
    fn derivatives_match_finite_differences() {
        for (mu, sigma) in [(0.0, 1.0), (1.5, 0.7), (-0.3, 2.0)] {
            let d = DensityModel::gaussian(mu, sigma);
            let mismatch = d.derivative_mismatch(100);
            assert!(mismatch < 1e-4, "mismatch = {mismatch}");
        }
    }

    #[test]
    fn pdf_is_nonnegative_everywhere() {
        let d = DensityModel::gaussian(0.0, 1.0);
        for i in -100..=100 {
            assert!(d.pdf(i as f64 * 0.1) >= 0.0);
        }
    }

    #[test]
    fn convolution_grows_variance() {
        let d = DensityModel::gaussian(0.0, 1.0);
        let e = ErrorModel::new(0.02, 0.01).unwrap();
        let c = d.convolved_with_error(&e);
        let (mean, sd) = c.gaussian_params();
        assert_eq!(mean, 0.02);
        assert!((sd - (1.0f64 + 0.0001).sqrt()).abs() < 1e-12);
    }

    #[test]
    fn error_model_validation() {
        assert!(ErrorModel::new(0.0, -0.1).is_err());
        assert!(ErrorModel::new(f64::NAN, 0.1).is_err());
        assert!(ErrorModel::new(-0.05, 0.0).is_ok());
    }
}
