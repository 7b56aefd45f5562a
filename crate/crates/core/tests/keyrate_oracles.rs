use cvqkd_core::channel::{sample_moments, ChannelParams, Detection};
use cvqkd_core::keyrate::{
    build_covariance, conditional_eigenvalue, holevo_bound, mutual_information, secret_key_rate,
    symplectic_eigenvalues, true_key_rate, SecurityParams,
};
use cvqkd_core::mle::{Method, MleEstimate, WorstCaseBounds};
use cvqkd_core::rng::{StreamKey, Substream};
use nalgebra::{Matrix4, SymmetricEigen};
use rand::Rng;
use rand_distr::StandardNormal;

fn sec(n_key: u64, n_total: u64) -> SecurityParams {
    SecurityParams {
        epsilon_pe: 1e-10,
        epsilon_cor: 1e-10,
        epsilon_bar: 1e-10,
        epsilon_pa: 1e-10,
        p_ec: 0.9,
        beta: 0.95,
        dim_hx: 2,
        n_key,
        n_total,
    }
}

/// Symplectic spectrum from the eigenvalues of the symmetric matrix
/// `G^1/2 Omega^T G Omega G^1/2`, which equal `nu_k^2`, each twice.
fn eigen_oracle(v_a: f64, t: f64, sigma2: f64) -> (f64, f64) {
    let dense = build_covariance(v_a, t, sigma2).unwrap().to_dense();
    let g = Matrix4::from_fn(|i, j| dense[i][j]);
    let omega = Matrix4::new(
        0.0, 1.0, 0.0, 0.0, //
        -1.0, 0.0, 0.0, 0.0, //
        0.0, 0.0, 0.0, 1.0, //
        0.0, 0.0, -1.0, 0.0,
    );
    let eig = SymmetricEigen::new(g);
    let root = eig.eigenvectors * Matrix4::from_diagonal(&eig.eigenvalues.map(f64::sqrt)) * eig.eigenvectors.transpose();
    let m = root * omega.transpose() * g * omega * root;
    let m = (m + m.transpose()) * 0.5;
    let mut ev: Vec<f64> = SymmetricEigen::new(m).eigenvalues.iter().map(|v| v.sqrt()).collect();
    ev.sort_by(|a, b| b.total_cmp(a));
    (ev[0], ev[3])
}

fn random_params(rng: &mut impl Rng) -> (f64, f64, f64) {
    let v_a = rng.random_range(0.1..20.0);
    let t = rng.random_range(0.0..=1.0);
    let sigma2 = 1.0 + rng.random_range(0.0..2.0f64).powi(3);
    (v_a, t, sigma2)
}

#[test]
fn symplectic_eigenvalues_match_eigen_oracle() {
    let mut rng = StreamKey::new(1, Substream::Sweep, 0).rng();
    for _ in 0..500 {
        let (v_a, t, s2) = random_params(&mut rng);
        let (n1, n2) = symplectic_eigenvalues(&build_covariance(v_a, t, s2).unwrap()).unwrap();
        let (o1, o2) = eigen_oracle(v_a, t, s2);
        assert!((n1 - o1).abs() <= 1e-10 * o1, "{v_a} {t} {s2}: {n1} vs {o1}");
        assert!((n2 - o2).abs() <= 1e-10 * o1, "{v_a} {t} {s2}: {n2} vs {o2}");
    }
    // Default operating point.
    let (n1, n2) = symplectic_eigenvalues(&build_covariance(5.0, 0.6, 1.0036).unwrap()).unwrap();
    let (o1, o2) = eigen_oracle(5.0, 0.6, 1.0036);
    assert!((n1 - o1).abs() < 1e-10 && (n2 - o2).abs() < 1e-10);
}

#[test]
fn physicality_over_random_draws() {
    let mut rng = StreamKey::new(2, Substream::Sweep, 0).rng();
    for _ in 0..10_000 {
        let (v_a, t, s2) = random_params(&mut rng);
        let g = build_covariance(v_a, t, s2).unwrap();
        let (n1, n2) = symplectic_eigenvalues(&g).unwrap();
        let n3 = conditional_eigenvalue(&g, Detection::Heterodyne).unwrap();
        assert!(n1 >= n2 && n2 >= 1.0 - 1e-9 && n3 >= 1.0 - 1e-9, "{v_a} {t} {s2}");
        assert!(holevo_bound(&g, Detection::Heterodyne).unwrap() >= -1e-9);
    }
}

/// Plug-in mutual information of one quadrature from a 2-D histogram.
fn histogram_mi(x: &[f64], y: &[f64], bins: usize) -> f64 {
    let range = |v: &[f64]| {
        let sd = (v.iter().map(|a| a * a).sum::<f64>() / v.len() as f64).sqrt();
        (-5.0 * sd, 5.0 * sd)
    };
    let (xl, xh) = range(x);
    let (yl, yh) = range(y);
    let idx = |v: f64, lo: f64, hi: f64| (((v - lo) / (hi - lo) * bins as f64) as usize).min(bins - 1);
    let mut joint = vec![0.0; bins * bins];
    let mut px = vec![0.0; bins];
    let mut py = vec![0.0; bins];
    let n = x.len() as f64;
    for (&a, &b) in x.iter().zip(y) {
        if a < xl || a > xh || b < yl || b > yh {
            continue;
        }
        let (i, j) = (idx(a, xl, xh), idx(b, yl, yh));
        joint[i * bins + j] += 1.0 / n;
        px[i] += 1.0 / n;
        py[j] += 1.0 / n;
    }
    let mut mi = 0.0;
    for i in 0..bins {
        for j in 0..bins {
            let pxy = joint[i * bins + j];
            if pxy > 0.0 {
                mi += pxy * (pxy / (px[i] * py[j])).log2();
            }
        }
    }
    mi
}

#[test]
fn mutual_information_matches_histogram_estimate() {
    for (t, sigma2) in [(0.8f64, 1.01f64), (0.4, 1.2)] {
        let v_a = 5.0f64;
        let tau = t / 2f64.sqrt();
        let mut rng = StreamKey::new(3, Substream::Evaluation, 0).rng();
        let n = 1_000_000;
        let x: Vec<f64> = (0..n).map(|_| v_a.sqrt() * rng.sample::<f64, _>(StandardNormal)).collect();
        let y: Vec<f64> = x
            .iter()
            .map(|&a| tau * a + sigma2.sqrt() * rng.sample::<f64, _>(StandardNormal))
            .collect();
        // Heterodyne: two independent quadratures per symbol.
        let estimate = 2.0 * histogram_mi(&x, &y, 100);
        let exact = mutual_information(v_a, t, sigma2, Detection::Heterodyne);
        assert!((estimate - exact).abs() < 0.02, "{estimate} vs {exact}");
    }
}

#[test]
fn worst_case_rate_never_exceeds_true_rate() {
    let s = sec(1_000_000, 2_000_000);
    for (trial, d) in (0..1000u64).zip((0..).map(|k| (k % 10) as f64 * 5.0)) {
        let p = ChannelParams::new(5.0, 0.01, 0.8, d, Detection::Heterodyne).unwrap();
        let mom = sample_moments(&p, 1_000_000, StreamKey::new(4, Substream::Evaluation, trial)).unwrap();
        let b = MleEstimate::from_moments(&mom, Detection::Heterodyne)
            .unwrap()
            .bounds(5.0, 1e-10)
            .unwrap()
            .physical();
        let worst = secret_key_rate(5.0, Detection::Heterodyne, &b, &s).unwrap();
        let truth = true_key_rate(&p, &s).unwrap();
        assert!(worst.k_eps <= truth.k_eps, "trial {trial}");
    }
}

#[test]
fn rate_ordering_on_grid() {
    let s = sec(1_000_000, 2_000_000);
    let v_a = 5.0;
    for i in 0..=10 {
        let t = 0.1 + 0.08 * i as f64;
        for j in 0..=10 {
            let s2 = 1.0 + 0.005 * j as f64;
            let at = |t, s2| {
                let b = WorstCaseBounds {
                    t_min: t,
                    sigma2_max: s2,
                    epsilon_pe: 1e-10,
                    method: Method::Mle,
                };
                secret_key_rate(v_a, Detection::Heterodyne, &b, &s).unwrap().k_eps
            };
            let k = at(t, s2);
            assert!(at(t * 0.99, s2) <= k);
            assert!(at(t, s2 + 0.001) <= k);
        }
    }
    // Monotone in xi at fixed distance.
    let mut prev = f64::INFINITY;
    for i in 0..30 {
        let p = ChannelParams::new(5.0, 0.001 * i as f64, 0.8, 30.0, Detection::Heterodyne).unwrap();
        let k = true_key_rate(&p, &s).unwrap().k_eps;
        assert!(k <= prev);
        prev = k;
    }
}

fn synthetic_rate(p: &ChannelParams, m: f64, z: f64) -> f64 {
    // True parameters moved outward by the exact bound widths of an
    // m-sample estimation set, with an effectively infinite key.
    let (t, s2) = (p.gain(), p.noise_variance());
    let b = WorstCaseBounds {
        t_min: t - z * (p.mu() * s2 / (m * p.v_a)).sqrt(),
        sigma2_max: s2 * (1.0 + z * 2f64.sqrt() / m.sqrt()),
        epsilon_pe: 0.0,
        method: Method::Mle,
    };
    let n = u64::MAX / 4;
    let mut s = sec(n, n);
    s.p_ec = 1.0;
    secret_key_rate(p.v_a, Detection::Heterodyne, &b, &s).unwrap().k_eps
}

fn asymptotic_rate(p: &ChannelParams) -> f64 {
    let g = build_covariance(p.v_a, p.gain(), p.noise_variance()).unwrap();
    0.95 * mutual_information(p.v_a, p.gain(), p.noise_variance(), Detection::Heterodyne)
        - holevo_bound(&g, Detection::Heterodyne).unwrap()
}

#[test]
fn asymptotic_consistency() {
    let z05 = cvqkd_core::stats::gaussian_quantile(0.05).unwrap();
    let z10 = cvqkd_core::stats::gaussian_quantile(1e-10).unwrap();
    for d in [0.0, 20.0, 50.0, 100.0] {
        let p = ChannelParams::new(5.0, 0.01, 0.8, d, Detection::Heterodyne).unwrap();
        let k_inf = asymptotic_rate(&p);
        let gap = k_inf - synthetic_rate(&p, 1e9, z05);
        assert!((0.0..1e-3).contains(&gap), "d = {d}: gap {gap}");
        // At eps = 1e-10 the gap is a few 1e-3 at m = 1e9 and shrinks as
        // 1 / sqrt(m).
        let g9 = k_inf - synthetic_rate(&p, 1e9, z10);
        let g11 = k_inf - synthetic_rate(&p, 1e11, z10);
        assert!(g11 > 0.0 && g11 < 1e-3, "d = {d}: gap {g11}");
        assert!((8.0..12.0).contains(&(g9 / g11)), "d = {d}: {g9} / {g11}");
    }
}
