//! Gaussian-modulated trial generation over the linear AWGN channel.
//!
//! Bob's sample is `y = tau * x + z` with `tau = t / sqrt(mu)` and
//! `z ~ N(0, 1 + t^2 xi)`, all in shot-noise units. Two generators are
//! provided: [`make_trial`] draws every pair explicitly, while
//! [`StandardMoments::sample`] draws the five running sums that every
//! estimator in this crate depends on directly from their exact joint law,
//! which makes trials with `m = 10^8` as cheap as trials with `m = 10^3`.

use std::io::{BufRead, Write};

use rand::Rng;
use rand_distr::{ChiSquared, Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{domain, Error, Result};
use crate::rng::StreamKey;

/// Fiber attenuation in dB/km.
pub const FIBER_LOSS_DB_PER_KM: f64 = 0.2;

/// Receiver type. The discriminant is the quantum duty `mu`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Detection {
    Homodyne,
    Heterodyne,
}

impl Detection {
    pub fn mu(self) -> f64 {
        match self {
            Detection::Homodyne => 1.0,
            Detection::Heterodyne => 2.0,
        }
    }

    pub fn from_mu(mu: u32) -> Result<Self> {
        match mu {
            1 => Ok(Detection::Homodyne),
            2 => Ok(Detection::Heterodyne),
            _ => Err(domain(format!("quantum duty must be 1 or 2, got {mu}"))),
        }
    }
}

/// `eta_eff * 10^(-0.02 d)`.
pub fn transmittance_from_distance(distance_km: f64, eta_eff: f64) -> Result<f64> {
    if !(distance_km >= 0.0) || !distance_km.is_finite() {
        return Err(domain(format!("distance must be >= 0, got {distance_km}")));
    }
    if !(eta_eff > 0.0 && eta_eff <= 1.0) {
        return Err(domain(format!("detector efficiency must lie in (0, 1], got {eta_eff}")));
    }
    Ok(eta_eff * 10f64.powf(-FIBER_LOSS_DB_PER_KM / 10.0 * distance_km))
}

/// Inverse of [`transmittance_from_distance`].
pub fn distance_from_transmittance(transmittance: f64, eta_eff: f64) -> Result<f64> {
    if !(transmittance > 0.0 && transmittance <= eta_eff) {
        return Err(domain(format!(
            "transmittance must lie in (0, eta_eff = {eta_eff}], got {transmittance}"
        )));
    }
    Ok(-(transmittance / eta_eff).log10() * 10.0 / FIBER_LOSS_DB_PER_KM)
}

/// Ground-truth physical channel.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ChannelParams {
    /// Modulation variance `V_A` (SNU).
    pub v_a: f64,
    /// Excess noise `xi` (SNU).
    pub xi: f64,
    pub eta_eff: f64,
    pub distance_km: f64,
    pub detection: Detection,
}

impl ChannelParams {
    pub fn new(v_a: f64, xi: f64, eta_eff: f64, distance_km: f64, detection: Detection) -> Result<Self> {
        if !(v_a > 0.0 && v_a.is_finite()) {
            return Err(domain(format!("modulation variance must be > 0, got {v_a}")));
        }
        if !(xi >= 0.0 && xi.is_finite()) {
            return Err(domain(format!("excess noise must be >= 0, got {xi}")));
        }
        transmittance_from_distance(distance_km, eta_eff)?;
        Ok(Self {
            v_a,
            xi,
            eta_eff,
            distance_km,
            detection,
        })
    }

    /// Same channel at another distance.
    pub fn at_distance(&self, distance_km: f64) -> Result<Self> {
        Self::new(self.v_a, self.xi, self.eta_eff, distance_km, self.detection)
    }

    /// Same channel at the distance that yields `transmittance`.
    pub fn at_transmittance(&self, transmittance: f64) -> Result<Self> {
        self.at_distance(distance_from_transmittance(transmittance, self.eta_eff)?)
    }

    pub fn mu(&self) -> f64 {
        self.detection.mu()
    }

    /// `T`
    pub fn transmittance(&self) -> f64 {
        self.eta_eff * 10f64.powf(-FIBER_LOSS_DB_PER_KM / 10.0 * self.distance_km)
    }

    /// `t = sqrt(T)`
    pub fn gain(&self) -> f64 {
        self.transmittance().sqrt()
    }

    /// Regression slope `tau = t / sqrt(mu)` of `y` on `x`.
    pub fn effective_gain(&self) -> f64 {
        self.gain() / self.mu().sqrt()
    }

    /// `sigma^2 = 1 + t^2 xi`
    pub fn noise_variance(&self) -> f64 {
        1.0 + self.transmittance() * self.xi
    }

    /// `t^2 xi`, the quantity the network learns (before amplification).
    pub fn scaled_excess_noise(&self) -> f64 {
        self.transmittance() * self.xi
    }
}

/// `m` draws from `N(0, v_a)`.
pub fn sample_alice<R: Rng + ?Sized>(m: usize, v_a: f64, rng: &mut R) -> Vec<f64> {
    assert!(m >= 1 && v_a > 0.0, "sample_alice needs m >= 1 and v_a > 0");
    let sd = v_a.sqrt();
    (0..m)
        .map(|_| sd * rng.sample::<f64, _>(StandardNormal))
        .collect()
}

/// Passes Alice's symbols through the channel.
pub fn apply_channel<R: Rng + ?Sized>(x: &[f64], params: &ChannelParams, rng: &mut R) -> Vec<f64> {
    let tau = params.effective_gain();
    let sd = params.noise_variance().sqrt();
    x.iter()
        .map(|&xi| tau * xi + sd * rng.sample::<f64, _>(StandardNormal))
        .collect()
}

/// Paired quadratures of one protocol run. The first `n_est` pairs are
/// disclosed for parameter estimation, the rest form the raw key.
#[derive(Debug, Clone, PartialEq)]
pub struct TrialDataset {
    pub x: Vec<f64>,
    pub y: Vec<f64>,
    pub n_total: usize,
    pub n_est: usize,
    pub seed: StreamKey,
}

impl TrialDataset {
    pub fn estimation_set(&self) -> (&[f64], &[f64]) {
        (&self.x[..self.n_est], &self.y[..self.n_est])
    }

    pub fn key_set(&self) -> (&[f64], &[f64]) {
        (&self.x[self.n_est..], &self.y[self.n_est..])
    }

    pub fn n_key(&self) -> usize {
        self.n_total - self.n_est
    }

    /// Writes the `cvqkd-trial v1` text dump.
    pub fn write_dump<W: Write>(&self, mut w: W) -> Result<()> {
        writeln!(
            w,
            "cvqkd-trial v1, N={}, m={}, seed={}",
            self.n_total, self.n_est, self.seed
        )?;
        for (x, y) in self.x.iter().zip(&self.y) {
            writeln!(w, "{x:.16e},{y:.16e}")?;
        }
        Ok(())
    }

    pub fn read_dump<R: BufRead>(r: R) -> Result<Self> {
        let mut lines = r.lines();
        let header = lines
            .next()
            .ok_or_else(|| Error::Format("empty dataset dump".into()))??;
        let mut fields = header.split(',').map(str::trim);
        if fields.next() != Some("cvqkd-trial v1") {
            return Err(Error::Format(format!("unrecognized header `{header}`")));
        }
        let (mut n_total, mut n_est, mut seed) = (None, None, None);
        for field in fields {
            match field.split_once('=') {
                Some(("N", v)) => n_total = v.parse::<usize>().ok(),
                Some(("m", v)) => n_est = v.parse::<usize>().ok(),
                Some(("seed", v)) => seed = StreamKey::from_hex(v),
                _ => return Err(Error::Format(format!("unexpected header field `{field}`"))),
            }
        }
        let (Some(n_total), Some(n_est), Some(seed)) = (n_total, n_est, seed) else {
            return Err(Error::Format(format!("incomplete header `{header}`")));
        };
        let mut x = Vec::with_capacity(n_total);
        let mut y = Vec::with_capacity(n_total);
        for (i, line) in lines.enumerate() {
            let line = line?;
            if line.is_empty() {
                continue;
            }
            let parsed = line
                .split_once(',')
                .and_then(|(a, b)| Some((a.parse::<f64>().ok()?, b.parse::<f64>().ok()?)));
            let (a, b) = parsed.ok_or_else(|| Error::Format(format!("bad row {}: `{line}`", i + 2)))?;
            x.push(a);
            y.push(b);
        }
        if x.len() != n_total || n_est > n_total {
            return Err(Error::Format(format!(
                "header announces N={n_total}, m={n_est} but {} rows follow",
                x.len()
            )));
        }
        Ok(Self {
            x,
            y,
            n_total,
            n_est,
            seed,
        })
    }
}

/// Generates a full trial of `n_total` pairs, `round(fraction_est * n_total)`
/// of which are reserved for estimation.
pub fn make_trial(
    params: &ChannelParams,
    n_total: usize,
    fraction_est: f64,
    seed: StreamKey,
) -> Result<TrialDataset> {
    if n_total < 2 {
        return Err(domain(format!("a trial needs N >= 2, got {n_total}")));
    }
    if !(fraction_est > 0.0 && fraction_est < 1.0) {
        return Err(domain(format!("estimation fraction must lie in (0, 1), got {fraction_est}")));
    }
    let n_est = (fraction_est * n_total as f64).round() as usize;
    if n_est < 2 {
        return Err(Error::Degenerate(format!(
            "estimation set of {n_est} pairs leaves the variance undefined"
        )));
    }
    if n_est >= n_total {
        return Err(Error::Degenerate("estimation set leaves no key pairs".into()));
    }
    let mut rng = seed.rng();
    let x = sample_alice(n_total, params.v_a, &mut rng);
    let y = apply_channel(&x, params, &mut rng);
    Ok(TrialDataset {
        x,
        y,
        n_total,
        n_est,
        seed,
    })
}

/// Running sums over an estimation set. Every estimator in the crate is a
/// function of these five sums and `m`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SampleMoments {
    pub m: usize,
    pub sum_x: f64,
    pub sum_y: f64,
    pub sum_xx: f64,
    pub sum_xy: f64,
    pub sum_yy: f64,
}

impl SampleMoments {
    pub fn from_samples(x: &[f64], y: &[f64]) -> Self {
        assert_eq!(x.len(), y.len(), "x and y must have equal length");
        let mut s = Self {
            m: x.len(),
            sum_x: 0.0,
            sum_y: 0.0,
            sum_xx: 0.0,
            sum_xy: 0.0,
            sum_yy: 0.0,
        };
        for (&a, &b) in x.iter().zip(y) {
            s.sum_x += a;
            s.sum_y += b;
            s.sum_xx += a * a;
            s.sum_xy += a * b;
            s.sum_yy += b * b;
        }
        s
    }
}

/// Sums of `m` i.i.d. pairs `(u, w)` of independent standard normals.
///
/// Sampled through the exact decomposition `sums = centered scatter + mean
/// outer product`, where the centered scatter is `Wishart(I_2, m - 1)`
/// (Bartlett factor: two chi-square diagonals and one normal off-diagonal)
/// and is independent of the sample mean. Mapping the standardized sums
/// onto a channel with [`StandardMoments::for_channel`] reuses the same draw
/// for every channel, so parameter sweeps see common random numbers.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct StandardMoments {
    pub m: usize,
    pub sum_u: f64,
    pub sum_w: f64,
    pub sum_uu: f64,
    pub sum_uw: f64,
    pub sum_ww: f64,
}

impl StandardMoments {
    pub fn sample<R: Rng + ?Sized>(m: usize, rng: &mut R) -> Result<Self> {
        if m < 2 {
            return Err(domain(format!("moment sampling needs m >= 2, got {m}")));
        }
        let chi2 = |k: usize, rng: &mut R| -> f64 {
            if k == 0 {
                0.0
            } else {
                ChiSquared::new(k as f64).expect("positive dof").sample(rng)
            }
        };
        let root_m = (m as f64).sqrt();
        let g1: f64 = rng.sample(StandardNormal);
        let g2: f64 = rng.sample(StandardNormal);
        let c1 = chi2(m - 1, rng);
        let c2 = chi2(m - 2, rng);
        let n21: f64 = rng.sample(StandardNormal);
        Ok(Self {
            m,
            sum_u: root_m * g1,
            sum_w: root_m * g2,
            sum_uu: c1 + g1 * g1,
            sum_uw: c1.sqrt() * n21 + g1 * g2,
            sum_ww: n21 * n21 + c2 + g2 * g2,
        })
    }

    /// Sums of `x = sqrt(V_A) u` and `y = tau x + sigma w`.
    pub fn for_channel(&self, params: &ChannelParams) -> SampleMoments {
        let sa = params.v_a.sqrt();
        let tau = params.effective_gain();
        let sigma = params.noise_variance().sqrt();
        SampleMoments {
            m: self.m,
            sum_x: sa * self.sum_u,
            sum_y: tau * sa * self.sum_u + sigma * self.sum_w,
            sum_xx: params.v_a * self.sum_uu,
            sum_xy: tau * params.v_a * self.sum_uu + sigma * sa * self.sum_uw,
            sum_yy: tau * tau * params.v_a * self.sum_uu
                + 2.0 * tau * sigma * sa * self.sum_uw
                + sigma * sigma * self.sum_ww,
        }
    }
}

/// One estimation set's sums drawn directly for `params`.
pub fn sample_moments(params: &ChannelParams, m: usize, seed: StreamKey) -> Result<SampleMoments> {
    Ok(StandardMoments::sample(m, &mut seed.rng())?.for_channel(params))
}
