//! Experiment configuration: a flat TOML file whose keys mirror the
//! protocol parameters.

use std::fmt;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use cvqkd_core::channel::{distance_from_transmittance, transmittance_from_distance, ChannelParams, Detection};
use cvqkd_core::delta::{IntervalForm, RidgeSpec};
use cvqkd_core::keyrate::SecurityParams;
use cvqkd_core::nn::TrainConfig;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{io_err, HarnessError, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ExperimentId {
    RmseVsM,
    KeyrateVsDistance,
    KeyrateVsN,
    SingleTrial,
}

impl ExperimentId {
    pub const ALL: [ExperimentId; 4] = [
        ExperimentId::RmseVsM,
        ExperimentId::KeyrateVsDistance,
        ExperimentId::KeyrateVsN,
        ExperimentId::SingleTrial,
    ];

    pub fn name(self) -> &'static str {
        match self {
            ExperimentId::RmseVsM => "rmse_vs_m",
            ExperimentId::KeyrateVsDistance => "keyrate_vs_distance",
            ExperimentId::KeyrateVsN => "keyrate_vs_n",
            ExperimentId::SingleTrial => "single_trial",
        }
    }
}

impl fmt::Display for ExperimentId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for ExperimentId {
    type Err = HarnessError;

    fn from_str(s: &str) -> Result<Self> {
        Self::ALL
            .into_iter()
            .find(|e| e.name() == s)
            .ok_or_else(|| HarnessError::Config(format!("unknown experiment `{s}`")))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum EstimatorSelection {
    Mle,
    Nn,
    #[default]
    Both,
}

impl EstimatorSelection {
    pub fn mle(self) -> bool {
        matches!(self, Self::Mle | Self::Both)
    }

    pub fn nn(self) -> bool {
        matches!(self, Self::Nn | Self::Both)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ExperimentConfig {
    pub experiment: Option<ExperimentId>,

    pub v_a: f64,
    pub xi: f64,
    pub eta_eff: f64,
    pub mu: u32,
    pub beta: f64,
    pub p_ec: f64,
    pub dim_hx: u32,
    pub fraction_est: f64,
    pub eps_pe: f64,
    pub eps_cor: f64,
    pub eps_bar: f64,
    pub eps_pa: f64,

    /// Master seed. Required; there is no clock-based fallback.
    pub seed: Option<u64>,
    pub trials: usize,
    pub estimator: EstimatorSelection,

    /// Estimation-set sizes for `rmse_vs_m`.
    pub m_list: Vec<usize>,
    /// Total signal counts for the key-rate experiments.
    pub n_list: Vec<u64>,
    pub distance_min_km: f64,
    pub distance_max_km: f64,
    pub distance_points: usize,
    /// Crossing distances are refined to this resolution.
    pub crossing_resolution_km: f64,
    /// Fixed transmittance of `keyrate_vs_n`.
    pub fixed_transmittance: f64,
    pub single_trial_distance_km: f64,
    pub single_trial_n: u64,

    /// Training and evaluation channels draw `t` uniformly between
    /// this distance and zero.
    pub max_distance_km: f64,
    pub amplification: f64,
    pub learning_rate: f64,
    pub weight_decay: f64,
    pub batch_size: usize,
    pub epochs: usize,
    pub patience: usize,
    pub training_set_size: usize,
    pub validation_fraction: f64,

    /// Calibration trials; defaults to four times the parameter count.
    pub n_cal: Option<usize>,
    pub ridge_relative: f64,
    pub interval_form: IntervalForm,

    pub artifact_dir: PathBuf,
    pub output_dir: PathBuf,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        let train = TrainConfig::default();
        Self {
            experiment: None,
            v_a: 5.0,
            xi: 0.01,
            eta_eff: 0.8,
            mu: 2,
            beta: 0.95,
            p_ec: 0.9,
            dim_hx: 2,
            fraction_est: 0.5,
            eps_pe: 1e-10,
            eps_cor: 1e-10,
            eps_bar: 1e-10,
            eps_pa: 1e-10,
            seed: None,
            trials: 100,
            estimator: EstimatorSelection::Both,
            m_list: vec![10_000, 100_000, 1_000_000],
            n_list: vec![2_000_000, 20_000_000, 200_000_000],
            distance_min_km: 0.0,
            distance_max_km: 120.0,
            distance_points: 200,
            crossing_resolution_km: 0.1,
            fixed_transmittance: 0.2,
            single_trial_distance_km: 20.0,
            single_trial_n: 2_000_000,
            max_distance_km: 200.0,
            amplification: train.amplification,
            learning_rate: train.learning_rate,
            weight_decay: train.weight_decay,
            batch_size: train.batch_size,
            epochs: train.epochs,
            patience: train.patience,
            training_set_size: train.training_set_size,
            validation_fraction: train.validation_fraction,
            n_cal: None,
            ridge_relative: cvqkd_core::delta::DEFAULT_RELATIVE_RIDGE,
            interval_form: IntervalForm::Sqrt,
            artifact_dir: PathBuf::from("artifacts"),
            output_dir: PathBuf::from("results"),
        }
    }
}

fn bad(msg: impl Into<String>) -> HarnessError {
    HarnessError::Config(msg.into())
}

impl ExperimentConfig {
    pub fn from_toml_str(text: &str) -> Result<Self> {
        let cfg: Self = toml::from_str(text).map_err(|source| HarnessError::ConfigParse {
            path: PathBuf::from("<string>"),
            source,
        })?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path).map_err(io_err(path))?;
        let cfg: Self = toml::from_str(&text).map_err(|source| HarnessError::ConfigParse {
            path: path.to_path_buf(),
            source,
        })?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        if self.seed.is_none() {
            return Err(bad("`seed` is required"));
        }
        if self.m_list.is_empty() || self.n_list.is_empty() {
            return Err(bad("m_list and n_list must be non-empty"));
        }
        if self.trials == 0 {
            return Err(bad("trials must be positive"));
        }
        if self.distance_points < 2 || !(self.distance_max_km > self.distance_min_km) || self.distance_min_km < 0.0 {
            return Err(bad("distance grid needs at least two points on an increasing, non-negative range"));
        }
        if !(self.crossing_resolution_km > 0.0) {
            return Err(bad("crossing_resolution_km must be positive"));
        }
        if !(self.fraction_est > 0.0 && self.fraction_est < 1.0) {
            return Err(bad("fraction_est must lie in (0, 1)"));
        }
        if self.m_list.iter().any(|&m| m < 3) {
            return Err(bad("every m must be at least 3"));
        }
        for &n in &self.n_list {
            self.split(n)?;
        }
        Detection::from_mu(self.mu)?;
        self.channel(0.0)?;
        self.security(1, 2)?.validate()?;
        self.train_config(0).validate()?;
        if !(self.ridge_relative >= 0.0) {
            return Err(bad("ridge_relative must be non-negative"));
        }
        if !(self.fixed_transmittance > 0.0 && self.fixed_transmittance <= self.eta_eff) {
            return Err(bad("fixed_transmittance must lie in (0, eta_eff]"));
        }
        if !(self.max_distance_km > 0.0) {
            return Err(bad("max_distance_km must be positive"));
        }
        Ok(())
    }

    pub fn seed(&self) -> u64 {
        self.seed.expect("validated config has a seed")
    }

    pub fn detection(&self) -> Detection {
        Detection::from_mu(self.mu).expect("validated")
    }

    pub fn channel(&self, distance_km: f64) -> Result<ChannelParams> {
        Ok(ChannelParams::new(self.v_a, self.xi, self.eta_eff, distance_km, Detection::from_mu(self.mu)?)?)
    }

    pub fn channel_at_transmittance(&self, transmittance: f64) -> Result<ChannelParams> {
        self.channel(distance_from_transmittance(transmittance, self.eta_eff)?)
    }

    /// Gain range `[t(max_distance), t(0)]` for training and held-out trials.
    pub fn gain_range(&self) -> (f64, f64) {
        let lo = transmittance_from_distance(self.max_distance_km, self.eta_eff).expect("validated").sqrt();
        (lo, self.eta_eff.sqrt())
    }

    /// `(m, n_key)` for a total of `n` signals.
    pub fn split(&self, n: u64) -> Result<(usize, u64)> {
        let m = (self.fraction_est * n as f64).round() as u64;
        if m < 3 || m >= n {
            return Err(bad(format!("N = {n} with fraction_est = {} leaves no usable split", self.fraction_est)));
        }
        Ok((m as usize, n - m))
    }

    pub fn security(&self, n_key: u64, n_total: u64) -> Result<SecurityParams> {
        Ok(SecurityParams {
            epsilon_pe: self.eps_pe,
            epsilon_cor: self.eps_cor,
            epsilon_bar: self.eps_bar,
            epsilon_pa: self.eps_pa,
            p_ec: self.p_ec,
            beta: self.beta,
            dim_hx: self.dim_hx,
            n_key,
            n_total,
        })
    }

    /// Training settings for the model of estimation-set size `m`.
    pub fn train_config(&self, m: usize) -> TrainConfig {
        TrainConfig {
            learning_rate: self.learning_rate,
            weight_decay: self.weight_decay,
            batch_size: self.batch_size,
            epochs: self.epochs,
            patience: self.patience,
            seed: self.seed.unwrap_or(0) ^ (m as u64).rotate_left(32),
            amplification: self.amplification,
            training_set_size: self.training_set_size,
            validation_fraction: self.validation_fraction,
        }
    }

    pub fn ridge(&self) -> RidgeSpec {
        RidgeSpec::Relative(self.ridge_relative)
    }

    pub fn distance_grid(&self) -> Vec<f64> {
        let n = self.distance_points;
        (0..n)
            .map(|i| self.distance_min_km + (self.distance_max_km - self.distance_min_km) * i as f64 / (n - 1) as f64)
            .collect()
    }

    /// First 16 hex digits of the SHA-256 of the canonical JSON form of
    /// every key that affects results (paths are excluded).
    pub fn hash(&self) -> String {
        hash_value(self.result_keys())
    }

    fn result_keys(&self) -> serde_json::Value {
        let mut v = serde_json::to_value(self).expect("config serializes");
        let map = v.as_object_mut().expect("object");
        map.remove("artifact_dir");
        map.remove("output_dir");
        v
    }

    /// Hash of the keys that determine the model trained for size `m`.
    pub fn training_key(&self, m: usize) -> String {
        let keys = [
            "v_a",
            "xi",
            "eta_eff",
            "mu",
            "seed",
            "max_distance_km",
            "amplification",
            "learning_rate",
            "weight_decay",
            "batch_size",
            "epochs",
            "patience",
            "training_set_size",
            "validation_fraction",
        ];
        let all = self.result_keys();
        let mut sub = serde_json::Map::new();
        for k in keys {
            sub.insert(k.into(), all[k].clone());
        }
        sub.insert("m".into(), m.into());
        hash_value(serde_json::Value::Object(sub))
    }

    /// Hash of the keys that determine the calibration for size `m`.
    pub fn calibration_key(&self, m: usize) -> String {
        let all = self.result_keys();
        let v = serde_json::json!({
            "training": self.training_key(m),
            "n_cal": all["n_cal"],
            "ridge_relative": all["ridge_relative"],
        });
        hash_value(v)
    }
}

fn hash_value(v: serde_json::Value) -> String {
    // serde_json's default map is ordered by key, so this is canonical.
    let text = serde_json::to_string(&v).expect("serializes");
    let digest = Sha256::digest(text.as_bytes());
    digest[..8].iter().map(|b| format!("{b:02x}")).collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn minimal_config_parses() {
        let cfg = ExperimentConfig::from_toml_str("seed = 7\nv_a = 5\nxi = 0.01").unwrap();
        assert_eq!(cfg.seed, Some(7));
        assert_eq!(cfg.mu, 2);
        assert_eq!(cfg.hash().len(), 16);
    }

    #[test]
    fn seed_is_mandatory() {
        assert!(ExperimentConfig::from_toml_str("v_a = 5").is_err());
    }

    #[test]
    fn unknown_keys_rejected() {
        assert!(ExperimentConfig::from_toml_str("seed = 1\nvee_a = 5").is_err());
    }

    #[test]
    fn hash_tracks_results_not_paths() {
        let a = ExperimentConfig::from_toml_str("seed = 1").unwrap();
        let mut b = a.clone();
        b.output_dir = "elsewhere".into();
        assert_eq!(a.hash(), b.hash());
        b.xi = 0.02;
        assert_ne!(a.hash(), b.hash());
    }

    #[test]
    fn stage_keys() {
        let a = ExperimentConfig::from_toml_str("seed = 1").unwrap();
        let mut b = a.clone();
        b.trials = 7;
        b.ridge_relative = 1e-6;
        assert_eq!(a.training_key(10_000), b.training_key(10_000));
        assert_ne!(a.calibration_key(10_000), b.calibration_key(10_000));
        assert_ne!(a.training_key(10_000), a.training_key(100_000));
    }

    #[test]
    fn interval_form_names() {
        let c = ExperimentConfig::from_toml_str("seed = 1\ninterval_form = \"linear\"").unwrap();
        assert_eq!(c.interval_form, IntervalForm::Linear);
        assert!(ExperimentConfig::from_toml_str("seed = 1\ninterval_form = \"cubic\"").is_err());
    }

    #[test]
    fn split_and_grid() {
        let c = ExperimentConfig::from_toml_str("seed = 1\ndistance_points = 5\ndistance_max_km = 100").unwrap();
        assert_eq!(c.split(2_000_000).unwrap(), (1_000_000, 1_000_000));
        assert_eq!(c.distance_grid(), vec![0.0, 25.0, 50.0, 75.0, 100.0]);
        assert!(ExperimentConfig::from_toml_str("seed = 1\nn_list = [4]").is_err());
    }
}
