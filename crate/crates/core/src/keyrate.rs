//! Composable finite-size secret-key rate under collective attacks.
//!
//! The entanglement-based picture uses the two-mode covariance matrix
//!
//! ```text
//! [ a I    c Z ]     a = V_A + 1
//! [ c Z    b I ]     b = t^2 V_A + sigma^2,  c = t sqrt(V_A^2 + 2 V_A)
//! ```
//!
//! with `Z = diag(1, -1)`. Eve's information is bounded by the Holevo
//! quantity `g(nu1) + g(nu2) - g(nu3)` for reverse reconciliation.

use serde::{Deserialize, Serialize};

use crate::channel::{ChannelParams, Detection};
use crate::error::{domain, Error, Result};
use crate::mle::{Method, WorstCaseBounds};

/// Slack allowed below 1 for symplectic eigenvalues, absorbing rounding.
pub const PHYSICALITY_TOLERANCE: f64 = 1e-9;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SecurityParams {
    pub epsilon_pe: f64,
    pub epsilon_cor: f64,
    /// Smoothing parameter.
    pub epsilon_bar: f64,
    pub epsilon_pa: f64,
    pub p_ec: f64,
    pub beta: f64,
    pub dim_hx: u32,
    pub n_key: u64,
    pub n_total: u64,
}

impl SecurityParams {
    pub fn validate(&self) -> Result<()> {
        for (name, e) in [
            ("epsilon_pe", self.epsilon_pe),
            ("epsilon_cor", self.epsilon_cor),
            ("epsilon_bar", self.epsilon_bar),
            ("epsilon_pa", self.epsilon_pa),
        ] {
            if !(e > 0.0 && e < 1.0) {
                return Err(domain(format!("{name} must lie in (0, 1), got {e}")));
            }
        }
        if !(0.0..=1.0).contains(&self.p_ec) {
            return Err(domain(format!("p_ec must lie in [0, 1], got {}", self.p_ec)));
        }
        if !(0.0..=1.0).contains(&self.beta) {
            return Err(domain(format!("beta must lie in [0, 1], got {}", self.beta)));
        }
        if self.dim_hx == 0 {
            return Err(domain("dim_hx must be positive"));
        }
        if self.n_key == 0 || self.n_key > self.n_total {
            return Err(domain(format!(
                "need 1 <= n_key <= N, got n_key = {}, N = {}",
                self.n_key, self.n_total
            )));
        }
        Ok(())
    }

    /// `p_ec eps_pe + eps_cor + eps_bar + eps_pa`
    pub fn total_epsilon(&self) -> f64 {
        self.p_ec * self.epsilon_pe + self.epsilon_cor + self.epsilon_bar + self.epsilon_pa
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CovarianceMatrix {
    pub a: f64,
    pub b: f64,
    pub c: f64,
}

impl CovarianceMatrix {
    /// Quadrature order `(x_A, p_A, x_B, p_B)`.
    pub fn to_dense(&self) -> [[f64; 4]; 4] {
        let (a, b, c) = (self.a, self.b, self.c);
        [
            [a, 0.0, c, 0.0],
            [0.0, a, 0.0, -c],
            [c, 0.0, b, 0.0],
            [0.0, -c, 0.0, b],
        ]
    }

    /// `a^2 + b^2 - 2 c^2`
    pub fn delta(&self) -> f64 {
        self.a * self.a + self.b * self.b - 2.0 * self.c * self.c
    }

    /// Determinant of the 2x2 block form, `a b - c^2`.
    pub fn d(&self) -> f64 {
        self.a * self.b - self.c * self.c
    }
}

pub fn build_covariance(v_a: f64, t: f64, sigma2: f64) -> Result<CovarianceMatrix> {
    if !(v_a > 0.0) || !v_a.is_finite() {
        return Err(domain(format!("V_A must be positive, got {v_a}")));
    }
    if !(0.0..=1.0).contains(&t) {
        return Err(domain(format!("t must lie in [0, 1], got {t}")));
    }
    if !(sigma2 >= 1.0) || !sigma2.is_finite() {
        return Err(domain(format!("sigma^2 must be at least 1, got {sigma2}")));
    }
    let gamma = CovarianceMatrix {
        a: v_a + 1.0,
        b: t * t * v_a + sigma2,
        c: t * (v_a * v_a + 2.0 * v_a).sqrt(),
    };
    let (_, nu2) = symplectic_eigenvalues(&gamma)?;
    if nu2 < 1.0 - PHYSICALITY_TOLERANCE {
        return Err(Error::Unphysical { nu: nu2 });
    }
    Ok(gamma)
}

/// `(nu1, nu2)` with `nu1 >= nu2`.
pub fn symplectic_eigenvalues(gamma: &CovarianceMatrix) -> Result<(f64, f64)> {
    let delta = gamma.delta();
    let d = gamma.d();
    let disc = delta * delta - 4.0 * d * d;
    let scale = (delta * delta).max(1.0);
    if disc < -PHYSICALITY_TOLERANCE * scale {
        return Err(Error::Numerical(format!("negative symplectic discriminant {disc:e}")));
    }
    let root = disc.max(0.0).sqrt();
    let nu1_sq = (delta + root) / 2.0;
    // nu1^2 nu2^2 = D^2 avoids cancellation in (delta - root) / 2.
    let nu2_sq = if nu1_sq > 0.0 { d * d / nu1_sq } else { 0.0 };
    Ok((nu1_sq.sqrt(), nu2_sq.sqrt()))
}

/// Symplectic eigenvalue of Alice's mode conditioned on Bob's heterodyne
/// outcome, `a - c^2 / (b + 1)`.
pub fn conditional_eigenvalue(gamma: &CovarianceMatrix, detection: Detection) -> Result<f64> {
    match detection {
        Detection::Heterodyne => Ok(gamma.a - gamma.c * gamma.c / (gamma.b + 1.0)),
        Detection::Homodyne => Err(domain("conditional eigenvalue is only implemented for heterodyne detection")),
    }
}

/// Von Neumann entropy in bits of a thermal mode with symplectic eigenvalue
/// `nu`.
pub fn g_function(nu: f64) -> Result<f64> {
    if !(nu >= 1.0 - PHYSICALITY_TOLERANCE) || !nu.is_finite() {
        return Err(Error::Unphysical { nu });
    }
    let nu = nu.max(1.0);
    let plus = (nu + 1.0) / 2.0;
    let minus = (nu - 1.0) / 2.0;
    let tail = if minus > 0.0 { minus * minus.log2() } else { 0.0 };
    Ok(plus * plus.log2() - tail)
}

/// `g(nu1) + g(nu2) - g(nu3)`
pub fn holevo_bound(gamma: &CovarianceMatrix, detection: Detection) -> Result<f64> {
    let (nu1, nu2) = symplectic_eigenvalues(gamma)?;
    let nu3 = conditional_eigenvalue(gamma, detection)?;
    Ok(g_function(nu1)? + g_function(nu2)? - g_function(nu3)?)
}

/// Alice-Bob mutual information per symbol in bits.
pub fn mutual_information(v_a: f64, t: f64, sigma2: f64, detection: Detection) -> f64 {
    let mu = detection.mu();
    mu / 2.0 * (1.0 + t * t * v_a / (mu * sigma2)).log2()
}

pub fn finite_size_delta(n_key: u64, epsilon_bar: f64, epsilon_pa: f64, dim_hx: u32) -> Result<f64> {
    if n_key == 0 {
        return Err(domain("n_key must be positive"));
    }
    for (name, e) in [("epsilon_bar", epsilon_bar), ("epsilon_pa", epsilon_pa)] {
        if !(e > 0.0 && e < 1.0) {
            return Err(domain(format!("{name} must lie in (0, 1), got {e}")));
        }
    }
    let n = n_key as f64;
    Ok((2.0 * dim_hx as f64 + 3.0) * ((2.0 / epsilon_bar).log2() / n).sqrt() + 2.0 / n * (1.0 / epsilon_pa).log2())
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct KeyRateReport {
    pub i_ab: f64,
    pub holevo: f64,
    pub delta_n: f64,
    /// Signed; negative means no key.
    pub k_eps: f64,
    /// `n_key p_ec / N`
    pub prefactor: f64,
    pub v_a: f64,
    pub t: f64,
    pub sigma2: f64,
    pub method: Method,
    pub total_epsilon: f64,
}

impl KeyRateReport {
    /// Rate floored at zero, for display.
    pub fn k_eps_display(&self) -> f64 {
        self.k_eps.max(0.0)
    }
}

/// Rate evaluated at the given (worst-case or true) channel parameters.
pub fn secret_key_rate(
    v_a: f64,
    detection: Detection,
    bounds: &WorstCaseBounds,
    sec: &SecurityParams,
) -> Result<KeyRateReport> {
    sec.validate()?;
    let (t, sigma2) = (bounds.t_min, bounds.sigma2_max);
    let gamma = build_covariance(v_a, t, sigma2)?;
    let holevo = holevo_bound(&gamma, detection)?;
    let i_ab = mutual_information(v_a, t, sigma2, detection);
    let delta_n = finite_size_delta(sec.n_key, sec.epsilon_bar, sec.epsilon_pa, sec.dim_hx)?;
    let prefactor = sec.n_key as f64 * sec.p_ec / sec.n_total as f64;
    Ok(KeyRateReport {
        i_ab,
        holevo,
        delta_n,
        k_eps: prefactor * (sec.beta * i_ab - holevo - delta_n),
        prefactor,
        v_a,
        t,
        sigma2,
        method: bounds.method,
        total_epsilon: sec.total_epsilon(),
    })
}

/// Rate at the true channel parameters.
pub fn true_key_rate(params: &ChannelParams, sec: &SecurityParams) -> Result<KeyRateReport> {
    let bounds = WorstCaseBounds {
        t_min: params.gain(),
        sigma2_max: params.noise_variance(),
        epsilon_pe: sec.epsilon_pe,
        method: Method::True,
    };
    secret_key_rate(params.v_a, params.detection, &bounds, sec)
}
