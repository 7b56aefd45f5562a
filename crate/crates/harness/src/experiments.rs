//! Experiment drivers. Each writes one CSV (plus a crossings table for the
//! distance sweep) and returns an in-memory summary.

use std::fs;
use std::path::{Path, PathBuf};

use cvqkd_core::channel::{make_trial, ChannelParams, StandardMoments};
use cvqkd_core::delta::{NnBound, NnWorstCase};
use cvqkd_core::keyrate::{secret_key_rate, true_key_rate, KeyRateReport};
use cvqkd_core::mle::{Method, MleEstimate, WorstCaseBounds};
use cvqkd_core::nn::FeatureVector;
use cvqkd_core::rng::{StreamKey, Substream};
use rayon::prelude::*;
use serde::Serialize;

use crate::config::{ExperimentConfig, ExperimentId};
use crate::data::{draw_trials, trial_key};
use crate::error::{io_err, Result};
use crate::pipeline::{NnArtifacts, Pipeline};

/// Estimates and worst-case bounds of one estimation set.
#[derive(Debug, Clone, Copy)]
pub struct TrialEstimate {
    pub mle: MleEstimate,
    pub mle_bounds: WorstCaseBounds,
    pub nn: Option<NnWorstCase>,
    /// `t_min` from the MLE, `sigma^2_max` from the network.
    pub nn_bounds: Option<WorstCaseBounds>,
}

/// Bounds for a batch of estimation sets of a common size.
pub fn estimate_batch(
    cfg: &ExperimentConfig,
    moments: &[cvqkd_core::channel::SampleMoments],
    nn: Option<&NnBound<'_>>,
) -> Result<Vec<TrialEstimate>> {
    let detection = cfg.detection();
    let mle: Vec<MleEstimate> = moments
        .iter()
        .map(|s| MleEstimate::from_moments(s, detection))
        .collect::<cvqkd_core::Result<_>>()?;
    let nn_out = match nn {
        Some(bound) => {
            let features: Vec<FeatureVector> = moments
                .iter()
                .map(|s| FeatureVector::from_moments(s, cfg.amplification))
                .collect::<cvqkd_core::Result<_>>()?;
            Some(bound.evaluate_many(&features)?)
        }
        None => None,
    };
    mle.into_iter()
        .enumerate()
        .map(|(i, e)| {
            let mle_bounds = e.bounds(cfg.v_a, cfg.eps_pe)?;
            let nn = nn_out.as_ref().map(|v| v[i]);
            let nn_bounds = nn.map(|b| WorstCaseBounds {
                t_min: mle_bounds.t_min,
                sigma2_max: b.sigma2_max_nn,
                epsilon_pe: cfg.eps_pe,
                method: Method::Nn,
            });
            Ok(TrialEstimate {
                mle: e,
                mle_bounds,
                nn,
                nn_bounds,
            })
        })
        .collect()
}

fn rate(cfg: &ExperimentConfig, bounds: &WorstCaseBounds, n_key: u64, n_total: u64) -> Result<KeyRateReport> {
    let sec = cfg.security(n_key, n_total)?;
    Ok(secret_key_rate(cfg.v_a, cfg.detection(), &bounds.physical(), &sec)?)
}

fn open_csv(cfg: &ExperimentConfig, name: &str) -> Result<(csv::Writer<fs::File>, PathBuf)> {
    fs::create_dir_all(&cfg.output_dir).map_err(io_err(&cfg.output_dir))?;
    let path = cfg.output_dir.join(name);
    let file = fs::File::create(&path).map_err(io_err(&path))?;
    Ok((csv::Writer::from_writer(file), path))
}

fn finish_csv(mut w: csv::Writer<fs::File>, path: &Path) -> Result<()> {
    w.flush().map_err(io_err(path))
}

fn nn_for<'p>(cfg: &ExperimentConfig, pipe: &mut Pipeline<'p>, m: usize) -> Result<Option<NnArtifacts>> {
    if cfg.estimator.nn() {
        Ok(Some(pipe.ensure_nn(m)?))
    } else {
        Ok(None)
    }
}

fn nn_bound<'a>(cfg: &ExperimentConfig, nn: &'a Option<NnArtifacts>) -> Result<Option<NnBound<'a>>> {
    nn.as_ref()
        .map(|a| NnBound::new(&a.model, &a.calibration, cfg.eps_pe, cfg.interval_form))
        .transpose()
        .map_err(Into::into)
}

fn methods(cfg: &ExperimentConfig) -> Vec<Method> {
    let mut v = Vec::new();
    if cfg.estimator.mle() {
        v.push(Method::Mle);
    }
    if cfg.estimator.nn() {
        v.push(Method::Nn);
    }
    v
}

fn mean(v: impl IntoIterator<Item = f64>) -> f64 {
    let (s, n) = v.into_iter().fold((0.0, 0usize), |(s, n), x| (s + x, n + 1));
    s / n as f64
}

fn median(mut v: Vec<f64>) -> f64 {
    v.sort_by(f64::total_cmp);
    let n = v.len();
    if n % 2 == 1 {
        v[n / 2]
    } else {
        0.5 * (v[n / 2 - 1] + v[n / 2])
    }
}

// ---------------------------------------------------------------- rmse_vs_m

#[derive(Debug, Serialize)]
struct RmseRow<'a> {
    m: usize,
    method: &'a str,
    rmse: f64,
    mean_bound_gap: f64,
    trials: usize,
    seed: u64,
    config_hash: &'a str,
}

#[derive(Debug, Clone, PartialEq)]
pub struct RmsePoint {
    pub m: usize,
    pub method: Method,
    pub rmse: f64,
    pub mean_bound_gap: f64,
    /// Fraction of trials with `sigma2_max < sigma2`.
    pub sigma2_undercoverage: f64,
    /// Fraction of trials with `t_min > t` (MLE only; the network bound
    /// reuses the MLE gain).
    pub t_overcoverage: f64,
    pub trials: usize,
}

/// Point-estimate RMSE and bound behavior of each estimator over held-out
/// trials with gains drawn from the operating range.
pub fn rmse_at(cfg: &ExperimentConfig, m: usize, nn: Option<&NnBound<'_>>, trials: usize) -> Result<Vec<RmsePoint>> {
    let held_out = draw_trials(cfg, m, Substream::Evaluation, trials)?;
    let moments: Vec<_> = held_out.iter().map(|t| t.moments).collect();
    let est = estimate_batch(cfg, &moments, nn)?;
    let truth: Vec<(f64, f64)> = held_out
        .iter()
        .map(|t| (t.channel.gain(), t.channel.noise_variance()))
        .collect();
    let n = trials as f64;
    let mut out = Vec::new();
    let summarize = |point: &dyn Fn(&TrialEstimate) -> f64, bound: &dyn Fn(&TrialEstimate) -> WorstCaseBounds| {
        let mut se = 0.0;
        let mut gap = 0.0;
        let mut under = 0usize;
        let mut over = 0usize;
        for (e, &(t, s2)) in est.iter().zip(&truth) {
            se += (point(e) - s2).powi(2);
            let b = bound(e);
            gap += b.sigma2_max - s2;
            under += (b.sigma2_max < s2) as usize;
            over += (b.t_min > t) as usize;
        }
        ((se / n).sqrt(), gap / n, under as f64 / n, over as f64 / n)
    };
    if cfg.estimator.mle() {
        let (rmse, gap, under, over) = summarize(&|e| e.mle.sigma2_hat, &|e| e.mle_bounds);
        out.push(RmsePoint {
            m,
            method: Method::Mle,
            rmse,
            mean_bound_gap: gap,
            sigma2_undercoverage: under,
            t_overcoverage: over,
            trials,
        });
    }
    if nn.is_some() {
        let (rmse, gap, under, over) =
            summarize(&|e| e.nn.unwrap().sigma2_hat_nn, &|e| e.nn_bounds.unwrap());
        out.push(RmsePoint {
            m,
            method: Method::Nn,
            rmse,
            mean_bound_gap: gap,
            sigma2_undercoverage: under,
            t_overcoverage: over,
            trials,
        });
    }
    Ok(out)
}

pub fn run_rmse_vs_m(cfg: &ExperimentConfig, pipe: &mut Pipeline<'_>) -> Result<Vec<RmsePoint>> {
    let hash = cfg.hash();
    let (mut w, path) = open_csv(cfg, "rmse_vs_m.csv")?;
    let mut all = Vec::new();
    for &m in &cfg.m_list {
        let nn = nn_for(cfg, pipe, m)?;
        let bound = nn_bound(cfg, &nn)?;
        for p in rmse_at(cfg, m, bound.as_ref(), cfg.trials)? {
            w.serialize(RmseRow {
                m,
                method: p.method.tag(),
                rmse: p.rmse,
                mean_bound_gap: p.mean_bound_gap,
                trials: p.trials,
                seed: cfg.seed(),
                config_hash: &hash,
            })?;
            all.push(p);
        }
    }
    finish_csv(w, &path)?;
    Ok(all)
}

// ------------------------------------------------------- keyrate_vs_distance

#[derive(Debug, Serialize)]
struct DistanceRow<'a> {
    #[serde(rename = "N")]
    n: u64,
    distance_km: f64,
    method: &'a str,
    i_ab: f64,
    holevo: f64,
    delta_n: f64,
    k_eps: f64,
    seed: u64,
    config_hash: &'a str,
}

#[derive(Debug, Serialize)]
struct CrossingRow<'a> {
    #[serde(rename = "N")]
    n: u64,
    method: &'a str,
    crossing_km: Option<f64>,
    gain_km_vs_mle: Option<f64>,
    seed: u64,
    config_hash: &'a str,
}

/// Trial-averaged key-rate terms at one distance.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RatePoint {
    pub i_ab: f64,
    pub holevo: f64,
    pub delta_n: f64,
    pub k_eps: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct DistanceSweep {
    pub n_total: u64,
    pub distances: Vec<f64>,
    /// One curve per method, `True` first.
    pub curves: Vec<(Method, Vec<RatePoint>)>,
    pub crossings: Vec<(Method, Option<f64>)>,
    /// `(trial, distance)` pairs where an estimated rate exceeded the
    /// true rate, per method.
    pub ordering_violations: Vec<(Method, usize)>,
    pub evaluations: usize,
}

impl DistanceSweep {
    pub fn crossing(&self, method: Method) -> Option<f64> {
        self.crossings.iter().find(|(m, _)| *m == method).and_then(|(_, c)| *c)
    }
}

type Violations = Vec<(Method, usize)>;

/// Shared standardized trials of one distance sweep.
struct SweepContext<'a> {
    cfg: &'a ExperimentConfig,
    n_total: u64,
    n_key: u64,
    standard: Vec<StandardMoments>,
    nn: Option<NnBound<'a>>,
}

impl SweepContext<'_> {
    /// Per-method trial averages at distance `d`, and the number of trials
    /// whose estimated rate exceeds the true one.
    fn at(&self, d: f64) -> Result<(Vec<(Method, RatePoint)>, Violations)> {
        let channel: ChannelParams = self.cfg.channel(d)?;
        let truth = true_key_rate(&channel, &self.cfg.security(self.n_key, self.n_total)?)?;
        let moments: Vec<_> = self.standard.iter().map(|s| s.for_channel(&channel)).collect();
        let est = estimate_batch(self.cfg, &moments, self.nn.as_ref())?;
        let mut points = vec![(
            Method::True,
            RatePoint {
                i_ab: truth.i_ab,
                holevo: truth.holevo,
                delta_n: truth.delta_n,
                k_eps: truth.k_eps,
            },
        )];
        let mut violations = Vec::new();
        for method in methods(self.cfg) {
            let reports: Vec<KeyRateReport> = est
                .par_iter()
                .map(|e| {
                    let b = match method {
                        Method::Nn => e.nn_bounds.expect("network bounds requested"),
                        _ => e.mle_bounds,
                    };
                    rate(self.cfg, &b, self.n_key, self.n_total)
                })
                .collect::<Result<_>>()?;
            violations.push((method, reports.iter().filter(|r| r.k_eps > truth.k_eps).count()));
            points.push((
                method,
                RatePoint {
                    i_ab: mean(reports.iter().map(|r| r.i_ab)),
                    holevo: mean(reports.iter().map(|r| r.holevo)),
                    delta_n: truth.delta_n,
                    k_eps: mean(reports.iter().map(|r| r.k_eps)),
                },
            ));
        }
        Ok((points, violations))
    }

    fn mean_rate(&self, d: f64, method: Method) -> Result<f64> {
        let (points, _) = self.at(d)?;
        Ok(points.into_iter().find(|(m, _)| *m == method).unwrap().1.k_eps)
    }
}

/// First zero crossing of the mean rate: the grid locates the sign change,
/// bisection refines it to `resolution`. `None` if the rate stays positive.
fn find_crossing(
    grid: &[f64],
    values: &[f64],
    resolution: f64,
    mut f: impl FnMut(f64) -> Result<f64>,
) -> Result<Option<f64>> {
    let Some(i) = values.iter().position(|&k| k <= 0.0) else {
        return Ok(None);
    };
    if i == 0 {
        return Ok(Some(grid[0]));
    }
    let (mut lo, mut hi) = (grid[i - 1], grid[i]);
    while hi - lo > resolution {
        let mid = 0.5 * (lo + hi);
        if f(mid)? > 0.0 {
            lo = mid;
        } else {
            hi = mid;
        }
    }
    Ok(Some(0.5 * (lo + hi)))
}

pub fn sweep_distance(cfg: &ExperimentConfig, n_total: u64, nn: Option<&NnArtifacts>, trials: usize) -> Result<DistanceSweep> {
    let (m, n_key) = cfg.split(n_total)?;
    let seed = cfg.seed();
    let standard: Vec<StandardMoments> = (0..trials as u64)
        .map(|i| StandardMoments::sample(m, &mut trial_key(seed, Substream::Sweep, m, i).rng()))
        .collect::<cvqkd_core::Result<_>>()?;
    let nn = nn
        .map(|a| NnBound::new(&a.model, &a.calibration, cfg.eps_pe, cfg.interval_form))
        .transpose()?;
    let ctx = SweepContext {
        cfg,
        n_total,
        n_key,
        standard,
        nn,
    };
    let distances = cfg.distance_grid();
    let mut curves: Vec<(Method, Vec<RatePoint>)> = Vec::new();
    let mut violations: Vec<(Method, usize)> = Vec::new();
    for &d in &distances {
        let (points, v) = ctx.at(d)?;
        for (method, p) in points {
            match curves.iter_mut().find(|(m, _)| *m == method) {
                Some((_, c)) => c.push(p),
                None => curves.push((method, vec![p])),
            }
        }
        for (method, count) in v {
            match violations.iter_mut().find(|(m, _)| *m == method) {
                Some((_, c)) => *c += count,
                None => violations.push((method, count)),
            }
        }
    }
    let mut crossings = Vec::new();
    for (method, curve) in &curves {
        let values: Vec<f64> = curve.iter().map(|p| p.k_eps).collect();
        let c = find_crossing(&distances, &values, cfg.crossing_resolution_km, |d| ctx.mean_rate(d, *method))?;
        crossings.push((*method, c));
    }
    Ok(DistanceSweep {
        n_total,
        evaluations: trials * distances.len(),
        distances,
        curves,
        crossings,
        ordering_violations: violations,
    })
}

pub fn run_keyrate_vs_distance(cfg: &ExperimentConfig, pipe: &mut Pipeline<'_>) -> Result<Vec<DistanceSweep>> {
    let hash = cfg.hash();
    let seed = cfg.seed();
    let (mut w, path) = open_csv(cfg, "keyrate_vs_distance.csv")?;
    let (mut wc, cpath) = open_csv(cfg, "keyrate_vs_distance_crossings.csv")?;
    let mut sweeps = Vec::new();
    for &n_total in &cfg.n_list {
        let (m, _) = cfg.split(n_total)?;
        let nn = nn_for(cfg, pipe, m)?;
        let sweep = sweep_distance(cfg, n_total, nn.as_ref(), cfg.trials)?;
        for (method, curve) in &sweep.curves {
            for (d, p) in sweep.distances.iter().zip(curve) {
                w.serialize(DistanceRow {
                    n: n_total,
                    distance_km: *d,
                    method: method.tag(),
                    i_ab: p.i_ab,
                    holevo: p.holevo,
                    delta_n: p.delta_n,
                    k_eps: p.k_eps,
                    seed,
                    config_hash: &hash,
                })?;
            }
        }
        let mle = sweep.crossing(Method::Mle);
        for (method, c) in &sweep.crossings {
            let gain = match (method, c, mle) {
                (Method::Nn, Some(c), Some(base)) => Some(c - base),
                _ => None,
            };
            wc.serialize(CrossingRow {
                n: n_total,
                method: method.tag(),
                crossing_km: *c,
                gain_km_vs_mle: gain,
                seed,
                config_hash: &hash,
            })?;
        }
        sweeps.push(sweep);
    }
    finish_csv(w, &path)?;
    finish_csv(wc, &cpath)?;
    Ok(sweeps)
}

// --------------------------------------------------------------- keyrate_vs_n

#[derive(Debug, Serialize)]
struct KeyrateNRow<'a> {
    #[serde(rename = "N")]
    n: u64,
    method: &'a str,
    k_eps: f64,
    seed: u64,
    config_hash: &'a str,
}

/// Median rate per method at each `N` for the fixed transmittance.
pub fn run_keyrate_vs_n(cfg: &ExperimentConfig, pipe: &mut Pipeline<'_>) -> Result<Vec<(u64, Method, f64)>> {
    let hash = cfg.hash();
    let seed = cfg.seed();
    let channel = cfg.channel_at_transmittance(cfg.fixed_transmittance)?;
    let (mut w, path) = open_csv(cfg, "keyrate_vs_n.csv")?;
    let mut out = Vec::new();
    for &n_total in &cfg.n_list {
        let (m, n_key) = cfg.split(n_total)?;
        let nn = nn_for(cfg, pipe, m)?;
        let bound = nn_bound(cfg, &nn)?;
        let moments: Vec<_> = (0..cfg.trials as u64)
            .map(|i| {
                let mut rng = trial_key(seed, Substream::Evaluation, m, i).rng();
                StandardMoments::sample(m, &mut rng).map(|s| s.for_channel(&channel))
            })
            .collect::<cvqkd_core::Result<_>>()?;
        let est = estimate_batch(cfg, &moments, bound.as_ref())?;
        let truth = true_key_rate(&channel, &cfg.security(n_key, n_total)?)?;
        let mut rows = vec![(Method::True, truth.k_eps)];
        for method in methods(cfg) {
            let ks: Vec<f64> = est
                .iter()
                .map(|e| {
                    let b = if method == Method::Nn { e.nn_bounds.unwrap() } else { e.mle_bounds };
                    rate(cfg, &b, n_key, n_total).map(|r| r.k_eps)
                })
                .collect::<Result<_>>()?;
            rows.push((method, median(ks)));
        }
        for (method, k) in rows {
            w.serialize(KeyrateNRow {
                n: n_total,
                method: method.tag(),
                k_eps: k,
                seed,
                config_hash: &hash,
            })?;
            out.push((n_total, method, k));
        }
    }
    finish_csv(w, &path)?;
    Ok(out)
}

// --------------------------------------------------------------- single_trial

#[derive(Debug, Serialize)]
struct SingleRow<'a> {
    #[serde(rename = "N")]
    n: u64,
    distance_km: f64,
    method: &'a str,
    t_bound: f64,
    sigma2_bound: f64,
    i_ab: f64,
    holevo: f64,
    delta_n: f64,
    k_eps: f64,
    seed: u64,
    config_hash: &'a str,
}

/// One full protocol run on raw simulated pairs. Also dumps the pairs.
pub fn run_single_trial(cfg: &ExperimentConfig, pipe: &mut Pipeline<'_>) -> Result<Vec<KeyRateReport>> {
    let hash = cfg.hash();
    let seed = cfg.seed();
    let n_total = cfg.single_trial_n;
    let (m, n_key) = cfg.split(n_total)?;
    let channel = cfg.channel(cfg.single_trial_distance_km)?;
    let trial = make_trial(&channel, n_total as usize, cfg.fraction_est, StreamKey::new(seed, Substream::Dataset, 0))?;
    debug_assert_eq!(trial.n_est, m);

    fs::create_dir_all(&cfg.output_dir).map_err(io_err(&cfg.output_dir))?;
    let dump = cfg.output_dir.join("single_trial_dump.csv");
    let file = fs::File::create(&dump).map_err(io_err(&dump))?;
    trial.write_dump(std::io::BufWriter::new(file))?;

    let (x, y) = trial.estimation_set();
    let moments = cvqkd_core::channel::SampleMoments::from_samples(x, y);
    let nn = nn_for(cfg, pipe, m)?;
    let bound = nn_bound(cfg, &nn)?;
    let est = estimate_batch(cfg, &[moments], bound.as_ref())?[0];

    let mut reports = vec![true_key_rate(&channel, &cfg.security(n_key, n_total)?)?];
    if cfg.estimator.mle() {
        reports.push(rate(cfg, &est.mle_bounds, n_key, n_total)?);
    }
    if let Some(b) = est.nn_bounds {
        reports.push(rate(cfg, &b, n_key, n_total)?);
    }
    let (mut w, path) = open_csv(cfg, "single_trial.csv")?;
    for r in &reports {
        w.serialize(SingleRow {
            n: n_total,
            distance_km: cfg.single_trial_distance_km,
            method: r.method.tag(),
            t_bound: r.t,
            sigma2_bound: r.sigma2,
            i_ab: r.i_ab,
            holevo: r.holevo,
            delta_n: r.delta_n,
            k_eps: r.k_eps,
            seed,
            config_hash: &hash,
        })?;
    }
    finish_csv(w, &path)?;
    Ok(reports)
}

/// Output files written by an experiment.
pub fn outputs(id: ExperimentId) -> &'static [&'static str] {
    match id {
        ExperimentId::RmseVsM => &["rmse_vs_m.csv"],
        ExperimentId::KeyrateVsDistance => &["keyrate_vs_distance.csv", "keyrate_vs_distance_crossings.csv"],
        ExperimentId::KeyrateVsN => &["keyrate_vs_n.csv"],
        ExperimentId::SingleTrial => &["single_trial.csv", "single_trial_dump.csv"],
    }
}

pub fn run(cfg: &ExperimentConfig, id: ExperimentId, pipe: &mut Pipeline<'_>) -> Result<()> {
    match id {
        ExperimentId::RmseVsM => run_rmse_vs_m(cfg, pipe).map(drop),
        ExperimentId::KeyrateVsDistance => run_keyrate_vs_distance(cfg, pipe).map(drop),
        ExperimentId::KeyrateVsN => run_keyrate_vs_n(cfg, pipe).map(drop),
        ExperimentId::SingleTrial => run_single_trial(cfg, pipe).map(drop),
    }
}
