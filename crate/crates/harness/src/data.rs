//! Synthetic trials for training, calibration and evaluation.
//!
//! Each trial owns one RNG stream `(seed, substream, index)`, so the three
//! roles never share draws and any trial can be regenerated alone.

use cvqkd_core::channel::{ChannelParams, SampleMoments, StandardMoments};
use cvqkd_core::nn::{FeatureVector, Sample};
use cvqkd_core::rng::{StreamKey, Substream};
use rand::Rng;
use rayon::prelude::*;

use crate::config::ExperimentConfig;
use crate::error::Result;

/// Trial indices are `m << 32 | i`, so models for different `m` draw
/// from disjoint streams.
pub fn trial_key(seed: u64, substream: Substream, m: usize, i: u64) -> StreamKey {
    assert!(i < 1 << 32, "trial index out of range");
    StreamKey::new(seed, substream, ((m as u64) << 32) | i)
}

/// One synthetic estimation set with a channel gain drawn uniformly from
/// the configured range.
#[derive(Debug, Clone, Copy)]
pub struct Trial {
    pub channel: ChannelParams,
    pub moments: SampleMoments,
}

impl Trial {
    /// `a^2 t^2 xi`, the network's regression target.
    pub fn target(&self, amplification: f64) -> f64 {
        amplification * amplification * self.channel.scaled_excess_noise()
    }

    pub fn features(&self, amplification: f64) -> Result<FeatureVector> {
        Ok(FeatureVector::from_moments(&self.moments, amplification)?)
    }

    pub fn sample(&self, amplification: f64) -> Result<Sample> {
        Ok(Sample {
            features: self.features(amplification)?,
            target: self.target(amplification),
        })
    }
}

pub fn draw_trial(cfg: &ExperimentConfig, m: usize, key: StreamKey) -> Result<Trial> {
    let mut rng = key.rng();
    let (lo, hi) = cfg.gain_range();
    let t: f64 = rng.random_range(lo..=hi);
    let channel = cfg.channel_at_transmittance(t * t)?;
    let moments = StandardMoments::sample(m, &mut rng)?.for_channel(&channel);
    Ok(Trial { channel, moments })
}

pub fn draw_trials(cfg: &ExperimentConfig, m: usize, substream: Substream, count: usize) -> Result<Vec<Trial>> {
    let seed = cfg.seed();
    (0..count as u64)
        .into_par_iter()
        .map(|i| draw_trial(cfg, m, trial_key(seed, substream, m, i)))
        .collect()
}

pub fn samples(cfg: &ExperimentConfig, trials: &[Trial]) -> Result<Vec<Sample>> {
    trials.iter().map(|t| t.sample(cfg.amplification)).collect()
}

pub fn training_samples(cfg: &ExperimentConfig, m: usize) -> Result<Vec<Sample>> {
    samples(cfg, &draw_trials(cfg, m, Substream::Training, cfg.training_set_size)?)
}

pub fn calibration_samples(cfg: &ExperimentConfig, m: usize, n_cal: usize) -> Result<Vec<Sample>> {
    samples(cfg, &draw_trials(cfg, m, Substream::Calibration, n_cal)?)
}

/// Writes samples as CSV for inspection.
pub fn write_samples_csv<W: std::io::Write>(samples: &[Sample], w: W) -> Result<()> {
    let mut out = csv::Writer::from_writer(w);
    out.write_record([
        "tau_hat_mle",
        "mean_x",
        "mean_y",
        "var_x",
        "amplified_noise",
        "cov_x_yprime",
        "target",
    ])?;
    for s in samples {
        let f = s.features.as_array();
        out.serialize((f[0], f[1], f[2], f[3], f[4], f[5], s.target))?;
    }
    out.flush().map_err(|e| crate::error::HarnessError::Io {
        path: "<samples>".into(),
        source: e,
    })?;
    Ok(())
}
