//! Maximum-likelihood estimation of the channel with Gaussian worst-case
//! bounds.
//!
//! Estimation works on the effective slope `tau = t / sqrt(mu)`; the gain
//! `t` and its lower bound are recovered by multiplying by `sqrt(mu)`.

use serde::{Deserialize, Serialize};

use crate::channel::{Detection, SampleMoments};
use crate::error::{domain, Error, Result};
pub use crate::stats::gaussian_quantile;

/// Which estimator produced a set of bounds.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Method {
    /// Ground-truth parameters, no estimation.
    True,
    Mle,
    Nn,
}

impl Method {
    pub fn tag(self) -> &'static str {
        match self {
            Method::True => "true",
            Method::Mle => "mle",
            Method::Nn => "nn",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MleEstimate {
    pub tau_hat: f64,
    /// `sqrt(mu) * tau_hat`
    pub t_hat: f64,
    pub sigma2_hat: f64,
    pub m: usize,
    pub detection: Detection,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct WorstCaseBounds {
    pub t_min: f64,
    pub sigma2_max: f64,
    pub epsilon_pe: f64,
    pub method: Method,
}

impl WorstCaseBounds {
    /// Clamps the bounds into the physical range `t in [0, 1]`,
    /// `sigma^2 >= 1`. Both clamps keep a valid bound valid, since the true
    /// parameters always lie in that range.
    pub fn physical(self) -> Self {
        Self {
            t_min: self.t_min.clamp(0.0, 1.0),
            sigma2_max: self.sigma2_max.max(1.0),
            ..self
        }
    }
}

fn check_pairs(x: &[f64], y: &[f64]) -> Result<()> {
    if x.len() != y.len() {
        return Err(domain(format!("x has {} samples, y has {}", x.len(), y.len())));
    }
    if x.len() < 2 {
        return Err(domain(format!("need at least 2 pairs, got {}", x.len())));
    }
    Ok(())
}

/// Least-squares slope `sum(x y) / sum(x^2)`.
pub fn estimate_gain(x: &[f64], y: &[f64]) -> Result<f64> {
    check_pairs(x, y)?;
    let sxx: f64 = x.iter().map(|a| a * a).sum();
    if sxx == 0.0 {
        return Err(Error::Degenerate("all of Alice's samples are zero".into()));
    }
    let sxy: f64 = x.iter().zip(y).map(|(a, b)| a * b).sum();
    Ok(sxy / sxx)
}

/// Mean squared residual `(1/m) sum (y - tau x)^2`.
pub fn estimate_noise_variance(x: &[f64], y: &[f64], tau_hat: f64) -> Result<f64> {
    check_pairs(x, y)?;
    if x.iter().all(|&a| a == 0.0) {
        return Err(Error::Degenerate("all of Alice's samples are zero".into()));
    }
    let rss: f64 = x.iter().zip(y).map(|(a, b)| (b - tau_hat * a).powi(2)).sum();
    Ok(rss / x.len() as f64)
}

impl MleEstimate {
    pub fn from_samples(x: &[f64], y: &[f64], detection: Detection) -> Result<Self> {
        let tau_hat = estimate_gain(x, y)?;
        let sigma2_hat = estimate_noise_variance(x, y, tau_hat)?;
        Ok(Self::assemble(tau_hat, sigma2_hat, x.len(), detection))
    }

    pub fn from_moments(s: &SampleMoments, detection: Detection) -> Result<Self> {
        if s.m < 2 {
            return Err(domain(format!("need at least 2 pairs, got {}", s.m)));
        }
        if s.sum_xx <= 0.0 {
            return Err(Error::Degenerate("all of Alice's samples are zero".into()));
        }
        let tau_hat = s.sum_xy / s.sum_xx;
        // RSS = Syy - 2 tau Sxy + tau^2 Sxx = Syy - tau Sxy at the optimum.
        let rss = (s.sum_yy - tau_hat * s.sum_xy).max(0.0);
        Ok(Self::assemble(tau_hat, rss / s.m as f64, s.m, detection))
    }

    fn assemble(tau_hat: f64, sigma2_hat: f64, m: usize, detection: Detection) -> Self {
        Self {
            tau_hat,
            t_hat: detection.mu().sqrt() * tau_hat,
            sigma2_hat,
            m,
            detection,
        }
    }

    /// Lower gain bound for an explicit critical value `z`.
    pub fn t_min_at(&self, v_a: f64, z: f64) -> f64 {
        let sd_tau = (self.sigma2_hat / (self.m as f64 * v_a)).sqrt();
        self.detection.mu().sqrt() * (self.tau_hat - z * sd_tau)
    }

    /// Upper noise-variance bound for an explicit critical value `z`.
    pub fn sigma2_max_at(&self, z: f64) -> f64 {
        self.sigma2_hat + z * self.sigma2_hat * std::f64::consts::SQRT_2 / (self.m as f64).sqrt()
    }

    pub fn bounds(&self, v_a: f64, epsilon_pe: f64) -> Result<WorstCaseBounds> {
        Ok(WorstCaseBounds {
            t_min: worst_case_t_min(self, v_a, epsilon_pe)?,
            sigma2_max: worst_case_sigma2_max(self, epsilon_pe)?,
            epsilon_pe,
            method: Method::Mle,
        })
    }
}

/// `t_min = sqrt(mu) (tau_hat - z sqrt(sigma2_hat / (m V_A)))`, which fails
/// (`t_min > t`) with probability `epsilon_pe / 2`.
pub fn worst_case_t_min(est: &MleEstimate, v_a: f64, epsilon_pe: f64) -> Result<f64> {
    if est.m < 2 {
        return Err(domain(format!("need m >= 2, got {}", est.m)));
    }
    if !(v_a > 0.0) {
        return Err(domain(format!("modulation variance must be > 0, got {v_a}")));
    }
    Ok(est.t_min_at(v_a, gaussian_quantile(epsilon_pe)?))
}

/// `sigma2_max = sigma2_hat (1 + z sqrt(2 / m))`.
pub fn worst_case_sigma2_max(est: &MleEstimate, epsilon_pe: f64) -> Result<f64> {
    if est.m < 2 {
        return Err(domain(format!("need m >= 2, got {}", est.m)));
    }
    Ok(est.sigma2_max_at(gaussian_quantile(epsilon_pe)?))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn est(tau_hat: f64, sigma2_hat: f64, m: usize, detection: Detection) -> MleEstimate {
        MleEstimate::assemble(tau_hat, sigma2_hat, m, detection)
    }

    #[test]
    fn exact_linear_data() {
        let x = [0.3, -1.2, 2.5, 0.7];
        let y: Vec<f64> = x.iter().map(|a| 2.0 * a).collect();
        assert_eq!(estimate_gain(&x, &y).unwrap(), 2.0);
        let neg: Vec<f64> = x.iter().map(|a| -a).collect();
        assert_eq!(estimate_gain(&x, &neg).unwrap(), -1.0);
        assert_eq!(estimate_noise_variance(&x, &y, 2.0).unwrap(), 0.0);
    }

    #[test]
    fn constant_residual() {
        let x = [0.3, -1.2, 2.5, 0.7];
        let y: Vec<f64> = x.iter().map(|a| 0.5 * a + 0.25).collect();
        let s2 = estimate_noise_variance(&x, &y, 0.5).unwrap();
        assert!((s2 - 0.0625).abs() < 1e-15);
    }

    #[test]
    fn degenerate_inputs() {
        assert!(matches!(estimate_gain(&[0.0, 0.0], &[1.0, 2.0]), Err(Error::Degenerate(_))));
        assert!(estimate_gain(&[1.0], &[1.0]).is_err());
        assert!(estimate_gain(&[1.0, 2.0], &[1.0]).is_err());
        assert!(estimate_noise_variance(&[0.0, 0.0], &[1.0, 2.0], 1.0).is_err());
    }

    #[test]
    fn noiseless_estimate_from_moments() {
        let x = [0.3, -1.2, 2.5, 0.7, -0.1];
        let y: Vec<f64> = x.iter().map(|a| 0.316 * a).collect();
        let e = MleEstimate::from_moments(&SampleMoments::from_samples(&x, &y), Detection::Homodyne).unwrap();
        assert!((e.tau_hat - 0.316).abs() < 1e-15);
        assert!(e.sigma2_hat >= 0.0 && e.sigma2_hat < 1e-15);
    }

    #[test]
    fn heterodyne_conversion() {
        let e = est(0.3, 1.0, 100, Detection::Heterodyne);
        assert!((e.t_hat - 0.3 * 2f64.sqrt()).abs() < 1e-15);
    }

    #[test]
    fn zero_width_when_noise_vanishes() {
        let e = est(0.4472, 0.0, 1_000_000, Detection::Homodyne);
        assert_eq!(worst_case_t_min(&e, 5.0, 1e-10).unwrap(), e.t_hat);
        assert_eq!(worst_case_sigma2_max(&e, 1e-10).unwrap(), 0.0);
    }

    #[test]
    fn table1_bound_values() {
        // With mu = 1 the slope and the gain coincide.
        let e = est(0.4472, 1.002, 1_000_000, Detection::Homodyne);
        let t_min = worst_case_t_min(&e, 5.0, 1e-10).unwrap();
        let z = 6.466_951_087_240_516; // frozen from the quadrature oracle in tests/quantiles.rs
        assert!((t_min - (0.4472 - z * (1.002f64 / 5e6).sqrt())).abs() < 1e-9);
        assert!((t_min - 0.444_305).abs() < 1e-6);
        let s_max = worst_case_sigma2_max(&e, 1e-10).unwrap();
        assert!((s_max - 1.002 * (1.0 + z * 2f64.sqrt() / 1e3)).abs() < 1e-9);
        assert!((s_max - 1.01116).abs() < 1e-5);
    }

    #[test]
    fn bounds_have_strict_sign() {
        let e = est(0.2, 1.01, 10_000, Detection::Heterodyne);
        for eps in [0.9, 0.05, 1e-10] {
            let b = e.bounds(5.0, eps).unwrap();
            assert!(b.t_min < e.t_hat);
            assert!(b.sigma2_max > e.sigma2_hat);
        }
    }

    #[test]
    fn physical_clamp() {
        let b = WorstCaseBounds { t_min: -0.1, sigma2_max: 0.98, epsilon_pe: 0.05, method: Method::Mle };
        let p = b.physical();
        assert_eq!((p.t_min, p.sigma2_max), (0.0, 1.0));
    }
}
