//! Gaussian and Student-t upper-tail quantiles.

use statrs::function::{beta::beta_reg, erf::erfc_inv};

use crate::error::{domain, Result};

/// Returns `z` with `P(Z > z) = epsilon / 2` for a standard normal `Z`.
///
/// This is the two-sided critical value at level `epsilon`; it equals
/// `sqrt(2) * erfc^-1(epsilon)`. `epsilon = 1` gives the median, 0.
pub fn gaussian_quantile(epsilon: f64) -> Result<f64> {
    if !(epsilon > 0.0 && epsilon <= 1.0) {
        return Err(domain(format!("epsilon must lie in (0, 1], got {epsilon}")));
    }
    Ok(std::f64::consts::SQRT_2 * erfc_inv(epsilon))
}

/// The literal `erf^-1(1 - epsilon/2)` critical value, without the `sqrt(2)`
/// scaling. Exposed only so the two conventions can be compared; its
/// coverage is not `epsilon / 2`.
pub fn erf_inv_quantile(epsilon: f64) -> Result<f64> {
    if !(epsilon > 0.0 && epsilon <= 1.0) {
        return Err(domain(format!("epsilon must lie in (0, 1], got {epsilon}")));
    }
    Ok(statrs::function::erf::erf_inv(1.0 - epsilon / 2.0))
}

/// Upper-tail probability `P(T > t)` of a Student-t variable, `t >= 0`.
pub fn student_t_tail(t: f64, dof: f64) -> f64 {
    debug_assert!(t >= 0.0);
    let x = dof / (dof + t * t);
    0.5 * beta_reg(0.5 * dof, 0.5, x)
}

fn student_t_density(t: f64, dof: f64) -> f64 {
    let ln_norm = statrs::function::gamma::ln_gamma(0.5 * (dof + 1.0))
        - statrs::function::gamma::ln_gamma(0.5 * dof)
        - 0.5 * (dof * std::f64::consts::PI).ln();
    (ln_norm - 0.5 * (dof + 1.0) * (1.0 + t * t / dof).ln()).exp()
}

/// Returns `t_q` with `P(T > t_q) = epsilon / 2` for `T ~ Student-t(dof)`.
///
/// Newton iteration on the log tail, safeguarded by a bracket, starting from
/// the Cornish-Fisher expansion around the Gaussian quantile.
pub fn student_t_quantile(epsilon: f64, dof: u64) -> Result<f64> {
    if !(epsilon > 0.0 && epsilon < 1.0) {
        return Err(domain(format!("epsilon must lie in (0, 1), got {epsilon}")));
    }
    if dof == 0 {
        return Err(domain("Student-t needs at least one degree of freedom"));
    }
    let nu = dof as f64;
    if dof == 1 {
        // Cauchy: closed form.
        return Ok((std::f64::consts::FRAC_PI_2 * (1.0 - epsilon)).tan());
    }
    let target = (0.5 * epsilon).ln();
    let z = gaussian_quantile(epsilon)?;
    let mut t = z + (z.powi(3) + z) / (4.0 * nu) + (5.0 * z.powi(5) + 16.0 * z.powi(3) + 3.0 * z) / (96.0 * nu * nu);
    if !t.is_finite() || t <= 0.0 {
        t = z.max(1e-3);
    }

    let (mut lo, mut hi) = (0.0_f64, f64::INFINITY);
    for _ in 0..200 {
        let tail = student_t_tail(t, nu);
        let resid = tail.ln() - target;
        if resid > 0.0 {
            lo = t;
        } else {
            hi = t;
        }
        // d(ln tail)/dt = -density / tail
        let step = resid * tail / student_t_density(t, nu);
        let mut next = t + step;
        if !(next > lo && next < hi) || !next.is_finite() {
            next = if hi.is_finite() { 0.5 * (lo + hi) } else { 2.0 * t.max(1.0) };
        }
        if (next - t).abs() <= 1e-15 * t.max(1.0) {
            return Ok(next);
        }
        t = next;
    }
    Ok(t)
}
