use serde::{Deserialize, Serialize};

use crate::channel::SampleMoments;
use crate::error::{domain, Error, Result};

pub const N_FEATURES: usize = 6;

/// Summary statistics of one estimation set, fed to the network.
///
/// `y'` is Bob's data with all but a `1/a` share of the fitted signal
/// removed, `y' = y - tau_hat x + (tau_hat / a) x`, so that
/// `a^2 (Var(y') - 1) ~ tau_hat^2 V_A + a^2 t^2 xi` exposes the noise term.
/// Variances and the covariance use the `m - 1` denominator.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct FeatureVector {
    pub tau_hat_mle: f64,
    pub mean_x: f64,
    pub mean_y: f64,
    pub var_x: f64,
    pub amplified_noise: f64,
    pub cov_x_yprime: f64,
    pub amplification: f64,
}

impl FeatureVector {
    pub fn as_array(&self) -> [f64; N_FEATURES] {
        [
            self.tau_hat_mle,
            self.mean_x,
            self.mean_y,
            self.var_x,
            self.amplified_noise,
            self.cov_x_yprime,
        ]
    }

    pub fn is_finite(&self) -> bool {
        self.as_array().iter().all(|v| v.is_finite())
    }

    /// Same statistics computed from running sums.
    pub fn from_moments(s: &SampleMoments, a: f64) -> Result<Self> {
        check_args(s.m, a)?;
        let m = s.m as f64;
        let sxx_c = s.sum_xx - s.sum_x * s.sum_x / m;
        if !(sxx_c > 0.0) || s.sum_xx <= 0.0 {
            return Err(Error::Degenerate("Alice's samples have zero variance".into()));
        }
        let tau = s.sum_xy / s.sum_xx;
        let c = tau * (1.0 - 1.0 / a);
        let sum_yp = s.sum_y - c * s.sum_x;
        let sum_ypyp = s.sum_yy - 2.0 * c * s.sum_xy + c * c * s.sum_xx;
        let sum_xyp = s.sum_xy - c * s.sum_xx;
        let var_yp = (sum_ypyp - sum_yp * sum_yp / m) / (m - 1.0);
        Ok(Self {
            tau_hat_mle: tau,
            mean_x: s.sum_x / m,
            mean_y: s.sum_y / m,
            var_x: sxx_c / (m - 1.0),
            amplified_noise: a * a * (var_yp - 1.0),
            cov_x_yprime: (sum_xyp - s.sum_x * sum_yp / m) / (m - 1.0),
            amplification: a,
        })
    }
}

fn check_args(m: usize, a: f64) -> Result<()> {
    if m < 3 {
        return Err(domain(format!("feature extraction needs m >= 3, got {m}")));
    }
    if !(a > 1.0 && a.is_finite()) {
        return Err(domain(format!("amplification must be > 1, got {a}")));
    }
    Ok(())
}

/// Computes the feature vector directly from the estimation pairs.
pub fn extract_features(x: &[f64], y: &[f64], a: f64) -> Result<FeatureVector> {
    if x.len() != y.len() {
        return Err(domain(format!("x has {} samples, y has {}", x.len(), y.len())));
    }
    check_args(x.len(), a)?;
    let m = x.len() as f64;
    let tau = crate::mle::estimate_gain(x, y)?;
    let c = tau * (1.0 - 1.0 / a);
    let mean_x = x.iter().sum::<f64>() / m;
    let mean_y = y.iter().sum::<f64>() / m;
    let mean_yp = mean_y - c * mean_x;
    let (mut sxx, mut sypyp, mut sxyp) = (0.0, 0.0, 0.0);
    for (&xi, &yi) in x.iter().zip(y) {
        let dx = xi - mean_x;
        let dyp = (yi - c * xi) - mean_yp;
        sxx += dx * dx;
        sypyp += dyp * dyp;
        sxyp += dx * dyp;
    }
    if sxx == 0.0 {
        return Err(Error::Degenerate("Alice's samples have zero variance".into()));
    }
    Ok(FeatureVector {
        tau_hat_mle: tau,
        mean_x,
        mean_y,
        var_x: sxx / (m - 1.0),
        amplified_noise: a * a * (sypyp / (m - 1.0) - 1.0),
        cov_x_yprime: sxyp / (m - 1.0),
        amplification: a,
    })
}
