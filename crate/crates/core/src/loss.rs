//! Convolution-smoothed check loss.
//!
//! For a symmetric kernel `K` with CDF `G` and partial first moment
//! `M(v) = ∫_v^∞ z K(z) dz`, the smoothed loss has the closed form
//!
//! ```text
//! (ρ_τ * K_h)(u) = τ u - u G(-u/h) + h M(u/h)
//! ```
//!
//! which for the Gaussian kernel is `(h/2) l_G(u/h) + (τ - 1/2) u`.

use serde::{Deserialize, Serialize};

use crate::error::{FqrError, Result};

const FRAC_1_SQRT_2PI: f64 = 0.398_942_280_401_432_7;

/// Standard normal CDF.
pub fn norm_cdf(x: f64) -> f64 {
    0.5 * libm::erfc(-x * std::f64::consts::FRAC_1_SQRT_2)
}

/// Standard normal density.
pub fn norm_pdf(x: f64) -> f64 {
    FRAC_1_SQRT_2PI * (-0.5 * x * x).exp()
}

/// Check loss `ρ_τ(u) = u (τ - 1{u < 0})`.
pub fn check_loss(tau: f64, u: f64) -> f64 {
    if u < 0.0 {
        u * (tau - 1.0)
    } else {
        u * tau
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "lowercase")]
pub enum Kernel {
    #[default]
    Gaussian,
    Uniform,
    Epanechnikov,
}

impl Kernel {
    pub fn density(self, z: f64) -> f64 {
        match self {
            Kernel::Gaussian => norm_pdf(z),
            Kernel::Uniform => {
                if z.abs() <= 1.0 {
                    0.5
                } else {
                    0.0
                }
            }
            Kernel::Epanechnikov => {
                if z.abs() <= 1.0 {
                    0.75 * (1.0 - z * z)
                } else {
                    0.0
                }
            }
        }
    }

    pub fn cdf(self, z: f64) -> f64 {
        match self {
            Kernel::Gaussian => norm_cdf(z),
            Kernel::Uniform => ((z + 1.0) * 0.5).clamp(0.0, 1.0),
            Kernel::Epanechnikov => {
                if z <= -1.0 {
                    0.0
                } else if z >= 1.0 {
                    1.0
                } else {
                    0.5 + 0.75 * (z - z * z * z / 3.0)
                }
            }
        }
    }

    /// `∫_v^∞ z K(z) dz`.
    fn upper_first_moment(self, v: f64) -> f64 {
        match self {
            Kernel::Gaussian => norm_pdf(v),
            Kernel::Uniform => {
                if v.abs() >= 1.0 {
                    0.0
                } else {
                    0.25 * (1.0 - v * v)
                }
            }
            Kernel::Epanechnikov => {
                if v.abs() >= 1.0 {
                    0.0
                } else {
                    let v2 = v * v;
                    0.75 * (0.5 * (1.0 - v2) - 0.25 * (1.0 - v2 * v2))
                }
            }
        }
    }
}

/// Quantile level, bandwidth and kernel of the smoothed loss.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SmoothedLossSpec {
    pub tau: f64,
    pub bandwidth: f64,
    #[serde(default)]
    pub kernel: Kernel,
}

impl SmoothedLossSpec {
    pub fn new(tau: f64, bandwidth: f64, kernel: Kernel) -> Result<Self> {
        if !(tau > 0.0 && tau < 1.0) {
            return Err(FqrError::InvalidInput(format!("tau = {tau} must lie in (0, 1)")));
        }
        if !(bandwidth > 0.0 && bandwidth.is_finite()) {
            return Err(FqrError::InvalidInput(format!(
                "bandwidth h = {bandwidth} must be positive"
            )));
        }
        Ok(Self {
            tau,
            bandwidth,
            kernel,
        })
    }

    pub fn gaussian(tau: f64, bandwidth: f64) -> Result<Self> {
        Self::new(tau, bandwidth, Kernel::Gaussian)
    }

    /// `(ρ_τ * K_h)(u)`.
    pub fn smoothed_check(&self, u: f64) -> f64 {
        let h = self.bandwidth;
        let v = u / h;
        self.tau * u - u * self.kernel.cdf(-v) + h * self.kernel.upper_first_moment(v)
    }

    /// `G_h(u) - τ`: the loss gradient with respect to the fitted value when
    /// `u` is fitted minus response. Equals `d/du smoothed_check(-u)`.
    pub fn smoothed_grad_scalar(&self, u: f64) -> f64 {
        self.kernel.cdf(u / self.bandwidth) - self.tau
    }

    /// `K_h(u) = K(u/h) / h`, the second derivative of the smoothed loss.
    pub fn smoothed_hess_scalar(&self, u: f64) -> f64 {
        self.kernel.density(u / self.bandwidth) / self.bandwidth
    }
}

/// Plug-in bandwidth `((K + p + d) / n)^{2/5}`.
pub fn default_bandwidth(k: usize, p: usize, d: usize, n: usize) -> Result<f64> {
    if n == 0 {
        return Err(FqrError::InvalidInput("sample size must be positive".into()));
    }
    Ok(((k + p + d) as f64 / n as f64).powf(0.4))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn gaussian_value_at_zero() {
        let s = SmoothedLossSpec::gaussian(0.3, 0.1).unwrap();
        let expect = 0.05 * (2.0 / std::f64::consts::PI).sqrt();
        assert!((s.smoothed_check(0.0) - expect).abs() < 1e-15);
        assert!((s.smoothed_check(0.0) - 0.0398942).abs() < 1e-7);
    }

    #[test]
    fn median_loss_is_even() {
        let s = SmoothedLossSpec::gaussian(0.5, 0.7).unwrap();
        for u in [0.1, 0.9, 3.0, 12.0] {
            assert!((s.smoothed_check(u) - s.smoothed_check(-u)).abs() < 1e-14);
        }
    }

    #[test]
    fn small_bandwidth_recovers_check_loss() {
        let s = SmoothedLossSpec::gaussian(0.3, 0.01).unwrap();
        assert!((s.smoothed_check(5.0) - 1.5).abs() < 1e-6);
        assert!((s.smoothed_check(-5.0) - 3.5).abs() < 1e-6);
    }

    #[test]
    fn gradient_values() {
        let s = SmoothedLossSpec::gaussian(0.5, 1.0).unwrap();
        assert_eq!(s.smoothed_grad_scalar(0.0), 0.0);
        assert!((s.smoothed_grad_scalar(1.0) - 0.341_344_746_068_542_9).abs() < 1e-14);
        let q = SmoothedLossSpec::gaussian(0.25, 0.3).unwrap();
        assert!((q.smoothed_grad_scalar(0.0) - 0.25).abs() < 1e-15);
    }

    #[test]
    fn hessian_values() {
        let s = SmoothedLossSpec::gaussian(0.5, 1.0).unwrap();
        assert!((s.smoothed_hess_scalar(0.0) - 0.398_942_280_401_432_7).abs() < 1e-15);
        let s = SmoothedLossSpec::gaussian(0.5, 0.5).unwrap();
        assert!((s.smoothed_hess_scalar(0.5) - 0.483_941_449_038_286_7).abs() < 1e-14);
        for k in [Kernel::Gaussian, Kernel::Uniform, Kernel::Epanechnikov] {
            let s = SmoothedLossSpec::new(0.4, 0.8, k).unwrap();
            for u in [0.1, 0.5, 0.79, 2.0] {
                assert_eq!(s.smoothed_hess_scalar(u), s.smoothed_hess_scalar(-u));
            }
        }
    }

    #[test]
    fn majorizes_check_loss() {
        for k in [Kernel::Gaussian, Kernel::Uniform, Kernel::Epanechnikov] {
            let s = SmoothedLossSpec::new(0.2, 0.4, k).unwrap();
            for i in -50..=50 {
                let u = i as f64 * 0.05;
                assert!(s.smoothed_check(u) >= check_loss(0.2, u) - 1e-15);
            }
        }
    }

    #[test]
    fn bandwidth_rule() {
        let h500 = default_bandwidth(50, 3, 3, 500).unwrap();
        let h1000 = default_bandwidth(50, 3, 3, 1000).unwrap();
        assert!((h500 - 0.416_569_250_672_577_55).abs() < 1e-14);
        assert!((h1000 - 0.315_700_457_171_624_3).abs() < 1e-14);
        assert!((h500 - 0.4164).abs() < 5e-4 && (h1000 - 0.3156).abs() < 5e-4);
        assert_eq!(default_bandwidth(4, 3, 3, 10).unwrap(), 1.0);
        assert!(default_bandwidth(4, 3, 3, 0).is_err());
    }

    #[test]
    fn spec_validation() {
        assert!(SmoothedLossSpec::gaussian(0.0, 1.0).is_err());
        assert!(SmoothedLossSpec::gaussian(1.0, 1.0).is_err());
        assert!(SmoothedLossSpec::gaussian(0.5, 0.0).is_err());
    }
}
