//! Acceptance suite. Prints one PASS/FAIL line per criterion and exits
//! non-zero if any criterion fails. Trained models and calibrations are
//! cached under the cargo target tmpdir, so reruns are much faster.

use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::time::Instant;

use cvqkd_core::channel::{apply_channel, sample_alice, sample_moments};
use cvqkd_core::delta::{calibrate, student_t_quantile, worst_case_sigma2_max_nn, IntervalForm, NnBound, RidgeSpec};
use cvqkd_core::keyrate::{build_covariance, finite_size_delta, g_function, holevo_bound, symplectic_eigenvalues};
use cvqkd_core::mle::{Method, MleEstimate};
use cvqkd_core::nn::{Activation, Architecture, FeatureVector, MlpModel, Sample};
use cvqkd_core::rng::{StreamKey, Substream};
use cvqkd_harness::data::{draw_trials, trial_key};
use cvqkd_harness::experiments::{self, rmse_at, sweep_distance};
use cvqkd_harness::{ExperimentConfig, ExperimentId, Pipeline};
use nalgebra::linalg::Schur;
use nalgebra::{DMatrix, DVector, Matrix4};
use rand::Rng;
use rand_distr::StandardNormal;
use statrs::distribution::{Binomial, ChiSquared, ContinuousCDF, DiscreteCDF};

type Outcome = Result<(bool, String), Box<dyn std::error::Error>>;
type Check = fn() -> Outcome;

const SEED: u64 = 20_240_501;
const RETRY_SEED: u64 = 20_240_502;

fn binomial_limit(p: f64, n: usize) -> f64 {
    p + 3.0 * (p * (1.0 - p) / n as f64).sqrt()
}

fn cache_dir() -> PathBuf {
    Path::new(env!("CARGO_TARGET_TMPDIR")).join("acceptance")
}

fn config(seed: u64) -> ExperimentConfig {
    ExperimentConfig {
        seed: Some(seed),
        artifact_dir: cache_dir().join("artifacts"),
        output_dir: cache_dir().join("results"),
        ..ExperimentConfig::default()
    }
}

fn pipeline(cfg: &ExperimentConfig) -> Pipeline<'_> {
    let mut p = Pipeline::new(cfg);
    p.quiet = true;
    p
}

fn parameter_count() -> Outcome {
    let p = Architecture::estimator().n_params();
    let model = MlpModel::zeros(Architecture::estimator(), 10.0)?;
    let ok = p == 4450 && model.params().len() == 4450;
    Ok((ok, format!("p = {p}, stored = {}", model.params().len())))
}

fn gradient_check() -> Outcome {
    let mut worst: f64 = 0.0;
    for i in 0..100u64 {
        let model = MlpModel::init(Architecture::estimator(), 10.0, StreamKey::new(i, Substream::Init, 0))?;
        let mut rng = StreamKey::new(i, Substream::Evaluation, 0).rng();
        let x = [
            rng.random_range(0.05..0.7),
            rng.random_range(-0.02..0.02),
            rng.random_range(-0.02..0.02),
            rng.random_range(4.9..5.1),
            rng.random_range(0.0..2.0),
            rng.random_range(0.0..0.7),
        ];
        let analytic = model.output_gradient(&x);
        let mut m = model.clone();
        let h = 1e-6;
        let numeric: Vec<f64> = (0..m.n_params())
            .map(|k| {
                let orig = m.params()[k];
                m.params_mut()[k] = orig + h;
                let up = m.forward_raw(&x);
                m.params_mut()[k] = orig - h;
                let down = m.forward_raw(&x);
                m.params_mut()[k] = orig;
                (up - down) / (2.0 * h)
            })
            .collect();
        let diff = analytic.iter().zip(&numeric).map(|(a, b)| (a - b).powi(2)).sum::<f64>().sqrt();
        let norm = numeric.iter().map(|b| b * b).sum::<f64>().sqrt();
        worst = worst.max(diff / norm);
    }
    Ok((worst < 1e-4, format!("max relative error {worst:.2e} over 100 pairs (< 1e-4)")))
}

/// Symplectic eigenvalues from a general (non-symmetric) eigensolver. The
/// eigenvalues of `i Omega Gamma` are `+-nu_k`, so those of `-(Omega Gamma)^2`
/// are `nu_k^2`, each twice. The squared form keeps the spectrum real, which
/// the real Schur iteration needs to converge on this
/// input.
fn omega_gamma_spectrum(v_a: f64, t: f64, sigma2: f64) -> (f64, f64) {
    let dense = build_covariance(v_a, t, sigma2).unwrap().to_dense();
    let g = Matrix4::from_fn(|i, j| dense[i][j]);
    let omega = Matrix4::new(
        0.0, 1.0, 0.0, 0.0, //
        -1.0, 0.0, 0.0, 0.0, //
        0.0, 0.0, 0.0, 1.0, //
        0.0, 0.0, -1.0, 0.0,
    );
    let og = omega * g;
    let schur = Schur::try_new(-(og * og), f64::EPSILON, 10_000).expect("Schur iteration converges");
    // Each eigenvalue is double, so rounding can split a pair into
    // `lambda +- i delta`; the real part stays accurate.
    let mut nu: Vec<f64> = schur.complex_eigenvalues().iter().map(|e| e.re.max(0.0).sqrt()).collect();
    nu.sort_by(|a, b| b.total_cmp(a));
    (nu[0], nu[3])
}

fn holevo_sanity() -> Outcome {
    let det = cvqkd_core::channel::Detection::Heterodyne;
    let chi = holevo_bound(&build_covariance(5.0, 1.0, 1.0)?, det)?;
    let g1 = g_function(1.0)?;
    let g3 = g_function(3.0)?;
    let mut rng = StreamKey::new(SEED, Substream::Sweep, 0).rng();
    let mut worst: f64 = 0.0;
    for _ in 0..1000 {
        let v_a = rng.random_range(0.1..20.0);
        let t = rng.random_range(0.0..=1.0);
        let sigma2 = 1.0 + rng.random_range(0.0..2.0f64).powi(3);
        let (n1, n2) = symplectic_eigenvalues(&build_covariance(v_a, t, sigma2)?)?;
        let (o1, o2) = omega_gamma_spectrum(v_a, t, sigma2);
        worst = worst.max((n1 - o1).abs() / o1).max((n2 - o2).abs() / o2);
    }
    let ok = chi.abs() <= 1e-9 && g1.abs() <= 1e-12 && (g3 - 2.0).abs() <= 1e-12 && worst <= 1e-10;
    Ok((
        ok,
        format!(
            "chi = {chi:.1e}, g(1) = {g1:.1e}, g(3) - 2 = {:.1e}, eigen-oracle max rel. error {worst:.1e} over 1000",
            g3 - 2.0
        ),
    ))
}

fn delta_value() -> Outcome {
    let d = finite_size_delta(1_000_000, 1e-10, 1e-10, 2)?;
    Ok(((d - 0.04102).abs() <= 1e-5, format!("Delta(1e6) = {d:.8}")))
}

fn mle_coverage() -> Outcome {
    let cfg = ExperimentConfig {
        eps_pe: 0.05,
        ..config(SEED)
    };
    let (m, trials) = (10_000usize, 10_000u64);
    let limit = binomial_limit(0.025, trials as usize);
    let mut ok = true;
    let mut detail = Vec::new();
    for d in [0.0, 50.0, 100.0] {
        let channel = cfg.channel(d)?;
        let (mut under, mut over) = (0usize, 0usize);
        for i in 0..trials {
            let mut rng = trial_key(SEED, Substream::Evaluation, m, i).rng();
            let x = sample_alice(m, cfg.v_a, &mut rng);
            let y = apply_channel(&x, &channel, &mut rng);
            let b = MleEstimate::from_samples(&x, &y, cfg.detection())?.bounds(cfg.v_a, cfg.eps_pe)?;
            under += (b.sigma2_max < channel.noise_variance()) as usize;
            over += (b.t_min > channel.gain()) as usize;
        }
        let (fu, fo) = (under as f64 / trials as f64, over as f64 / trials as f64);
        ok &= fu <= limit && fo <= limit;
        detail.push(format!("{d} km: sigma2 {fu:.4}, t {fo:.4}"));
    }
    // The sigma2 bound is first order: RSS / sigma2 is chi-square with m - 1
    // degrees of freedom, so its exact miss probability exceeds eps / 2.
    let z = cvqkd_core::stats::gaussian_quantile(cfg.eps_pe)?;
    let threshold = m as f64 / (1.0 + z * std::f64::consts::SQRT_2 / (m as f64).sqrt());
    let exact = ChiSquared::new((m - 1) as f64)?.cdf(threshold);
    let chance = Binomial::new(exact, trials)?.sf((limit * trials as f64).floor() as u64);
    println!(
        "  info: exact sigma2 miss probability at m = {m}: {exact:.5}; chance of exceeding the limit over {trials} trials: {chance:.3}"
    );
    println!("  info: sigma2_hat / sigma2 and the t pivot do not depend on the channel, so shared draws give equal rates per distance");
    Ok((ok, format!("{} (limit {limit:.4})", detail.join("; "))))
}

fn nn_coverage() -> Outcome {
    let cfg = ExperimentConfig {
        eps_pe: 0.05,
        ..config(SEED)
    };
    let m = 10_000;
    let nn = pipeline(&cfg).ensure_nn(m)?;
    let bound = NnBound::new(&nn.model, &nn.calibration, cfg.eps_pe, cfg.interval_form)?;
    let n = 4000;
    let points = rmse_at(&cfg, m, Some(&bound), n)?;
    let point = points.iter().find(|p| p.method == Method::Nn).unwrap();
    let limit = binomial_limit(0.025, n);

    // Coverage conditional on the channel is not part of the claim; it is
    // reported for information.
    let mut conditional = Vec::new();
    for d in [0.0, 50.0, 100.0, 150.0] {
        let channel = cfg.channel(d)?;
        let k = 1000;
        let feats: Vec<FeatureVector> = (0..k as u64)
            .map(|i| {
                let s = sample_moments(&channel, m, trial_key(SEED, Substream::Sweep, m, i))?;
                FeatureVector::from_moments(&s, cfg.amplification)
            })
            .collect::<cvqkd_core::Result<_>>()?;
        let under = bound
            .evaluate_many(&feats)?
            .iter()
            .filter(|b| b.sigma2_max_nn < channel.noise_variance())
            .count();
        conditional.push(format!("{d} km {:.3}", under as f64 / k as f64));
    }
    println!("  info: conditional NN under-coverage at eps 0.05: {}", conditional.join(", "));
    Ok((
        point.sigma2_undercoverage <= limit,
        format!(
            "m = {m}: sigma2_max_nn < sigma2 in {:.4} of {n} held-out trials (limit {limit:.4})",
            point.sigma2_undercoverage
        ),
    ))
}

fn rmse_pair(seed: u64, m: usize) -> Result<(f64, f64), Box<dyn std::error::Error>> {
    let cfg = config(seed);
    let model = pipeline(&cfg).ensure_model(m)?;
    let trials = draw_trials(&cfg, m, Substream::Evaluation, 2000)?;
    let (mut se_mle, mut se_nn) = (0.0, 0.0);
    for t in &trials {
        let s2 = t.channel.noise_variance();
        let mle = MleEstimate::from_moments(&t.moments, cfg.detection())?;
        let nn = model.predict_sigma2(&t.features(cfg.amplification)?);
        se_mle += (mle.sigma2_hat - s2).powi(2);
        se_nn += (nn - s2).powi(2);
    }
    let n = trials.len() as f64;
    Ok(((se_nn / n).sqrt(), (se_mle / n).sqrt()))
}

fn precision_ordering() -> Outcome {
    let mut ok = true;
    let mut detail = Vec::new();
    for m in [10_000, 100_000, 1_000_000] {
        let (nn, mle) = rmse_pair(SEED, m)?;
        let mut line = format!("m = {m}: nn {nn:.3e} vs mle {mle:.3e} (seed {SEED})");
        let mut pass = nn < mle;
        if !pass {
            let (nn2, mle2) = rmse_pair(RETRY_SEED, m)?;
            line.push_str(&format!(", retry nn {nn2:.3e} vs mle {mle2:.3e} (seed {RETRY_SEED})"));
            pass = nn2 < mle2;
        }
        ok &= pass;
        detail.push(line);
    }
    Ok((ok, detail.join("; ")))
}

fn keyrate_ordering() -> Outcome {
    let cfg = ExperimentConfig {
        distance_points: 61,
        ..config(SEED)
    };
    let n_total = 2_000_000;
    let (m, _) = cfg.split(n_total)?;
    let nn = pipeline(&cfg).ensure_nn(m)?;
    let sweep = sweep_distance(&cfg, n_total, Some(&nn), 50)?;
    let violations: usize = sweep.ordering_violations.iter().map(|(_, v)| v).sum();
    let (c_mle, c_nn) = (sweep.crossing(Method::Mle), sweep.crossing(Method::Nn));
    let ok = violations == 0 && matches!((c_nn, c_mle), (Some(a), Some(b)) if a > b);
    Ok((
        ok,
        format!(
            "{violations} violations over {} (trial, distance) pairs per method; crossing true {:?}, mle {c_mle:?}, nn {c_nn:?} km",
            sweep.evaluations,
            sweep.crossing(Method::True)
        ),
    ))
}

/// Centered inputs of unit scale. Inputs that saturate the tanh units make
/// `F^T F` too ill-conditioned for any double-precision comparison.
fn random_features(rng: &mut impl Rng, a: f64) -> FeatureVector {
    let mut u = || rng.random_range(-1.0..1.0);
    FeatureVector {
        tau_hat_mle: u(),
        mean_x: u(),
        mean_y: u(),
        var_x: u(),
        amplified_noise: u(),
        cov_x_yprime: u(),
        amplification: a,
    }
}

fn delta_oracle() -> Outcome {
    let a = 10.0;
    let arch = Architecture {
        dims: vec![6, 4, 4, 1],
        hidden: vec![Activation::Tanh, Activation::Tanh],
        learnable_shift: false,
    };
    let model = MlpModel::init(arch, a, StreamKey::new(SEED, Substream::Init, 0))?;
    let p = model.n_params();
    let mut rng = StreamKey::new(SEED, Substream::Calibration, 0).rng();
    let data: Vec<Sample> = (0..800)
        .map(|_| {
            let f = random_features(&mut rng, a);
            let e: f64 = rng.sample(StandardNormal);
            Sample {
                features: f,
                target: model.forward(&f) + 0.1 * e,
            }
        })
        .collect();
    let calib = calibrate(&model, &data, RidgeSpec::Absolute(0.0))?;

    let mut f = DMatrix::zeros(data.len(), p);
    for (i, s) in data.iter().enumerate() {
        for (j, v) in model.output_gradient(&s.features.as_array()).into_iter().enumerate() {
            f[(i, j)] = v;
        }
    }
    let resid = DVector::from_iterator(data.len(), data.iter().map(|s| s.target - model.forward(&s.features)));
    let dof = data.len() - p;
    let s = (resid.norm_squared() / dof as f64).sqrt();
    let gram = f.transpose() * &f;
    let spectrum = gram.clone().symmetric_eigenvalues();
    let cond = spectrum.max() / spectrum.min();
    let inv = gram.try_inverse().ok_or("F^T F is singular")?;
    let eps = 0.05;
    let tq = student_t_quantile(eps, dof as u64)?;

    let mut worst: f64 = 0.0;
    for _ in 0..50 {
        let q = random_features(&mut rng, a);
        let f0 = DVector::from_vec(model.output_gradient(&q.as_array()));
        let h = tq * s * (1.0 + (f0.transpose() * &inv * &f0)[(0, 0)]).sqrt();
        let want = 1.0 + (model.forward(&q) + h) / (a * a);
        let got = worst_case_sigma2_max_nn(&model, &calib, &q, eps, IntervalForm::Sqrt)?;
        worst = worst
            .max((got.halfwidth - h).abs() / h)
            .max((got.sigma2_max_nn - want).abs() / want);
    }
    Ok((worst <= 1e-8, format!("p = {p}, cond(F^T F) = {cond:.1e}, max relative deviation {worst:.1e} over 50 queries (<= 1e-8)")))
}

fn read_outputs(dir: &Path) -> Vec<(String, Vec<u8>)> {
    let mut files: Vec<_> = fs::read_dir(dir)
        .unwrap()
        .map(|e| e.unwrap().path())
        .filter(|p| p.extension().is_some_and(|e| e == "csv" || e == "bin"))
        .collect();
    files.sort();
    files
        .into_iter()
        .map(|p| (p.file_name().unwrap().to_string_lossy().into_owned(), fs::read(&p).unwrap()))
        .collect()
}

fn determinism() -> Outcome {
    let mut runs = Vec::new();
    for run in ["a", "b"] {
        let root = cache_dir().join("determinism").join(run);
        if root.exists() {
            fs::remove_dir_all(&root)?;
        }
        let cfg = ExperimentConfig {
            seed: Some(11),
            trials: 8,
            m_list: vec![1000],
            n_list: vec![200_000],
            single_trial_n: 200_000,
            distance_points: 6,
            epochs: 4,
            training_set_size: 600,
            n_cal: Some(4500),
            artifact_dir: root.join("artifacts"),
            output_dir: root.join("results"),
            ..ExperimentConfig::default()
        };
        let mut pipe = pipeline(&cfg);
        for id in ExperimentId::ALL {
            experiments::run(&cfg, id, &mut pipe)?;
        }
        let mut files = read_outputs(&cfg.output_dir);
        files.extend(read_outputs(&cfg.artifact_dir));
        runs.push(files);
    }
    let names: Vec<&str> = runs[0].iter().map(|(n, _)| n.as_str()).collect();
    let ok = runs[0] == runs[1] && names.iter().filter(|n| n.ends_with(".csv")).count() >= 6;
    Ok((ok, format!("{} files compared: {}", names.len(), names.join(", "))))
}

fn main() -> ExitCode {
    let criteria: [(&str, Check); 10] = [
        ("parameter count", parameter_count),
        ("gradient correctness", gradient_check),
        ("holevo sanity", holevo_sanity),
        ("finite-size delta", delta_value),
        ("mle coverage", mle_coverage),
        ("nn coverage", nn_coverage),
        ("precision ordering", precision_ordering),
        ("key-rate ordering", keyrate_ordering),
        ("delta-method oracle", delta_oracle),
        ("determinism", determinism),
    ];
    let mut failed = 0;
    for (name, check) in criteria {
        let start = Instant::now();
        let (ok, detail) = match check() {
            Ok(r) => r,
            Err(e) => (false, format!("error: {e}")),
        };
        failed += !ok as usize;
        println!(
            "{} {name}: {detail} [{:.1}s]",
            if ok { "PASS" } else { "FAIL" },
            start.elapsed().as_secs_f64()
        );
    }
    println!("{} of {} criteria passed", criteria.len() - failed, criteria.len());
    if failed == 0 {
        ExitCode::SUCCESS
    } else {
        ExitCode::FAILURE
    }
}
