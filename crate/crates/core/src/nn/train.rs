use rand::seq::SliceRandom;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::features::FeatureVector;
use super::model::{Architecture, MlpModel};
use crate::error::{domain, Error, Result};
use crate::rng::{StreamKey, Substream};

/// Samples per gradient chunk. Chunk gradients are summed in chunk order,
/// so results do not depend on the thread count.
const CHUNK: usize = 32;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Sample {
    pub features: FeatureVector,
    /// `a^2 t^2 xi`
    pub target: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub learning_rate: f64,
    pub weight_decay: f64,
    pub batch_size: usize,
    pub epochs: usize,
    /// Epochs without validation improvement before stopping.
    pub patience: usize,
    pub seed: u64,
    pub amplification: f64,
    /// Number of synthetic trials generated for training + validation.
    pub training_set_size: usize,
    pub validation_fraction: f64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            learning_rate: 1e-3,
            weight_decay: 1e-4,
            batch_size: 256,
            epochs: 200,
            patience: 20,
            seed: 0,
            amplification: 10.0,
            training_set_size: 10_000,
            validation_fraction: 0.1,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let positive = self.learning_rate > 0.0
            && self.weight_decay >= 0.0
            && self.batch_size > 0
            && self.epochs > 0
            && self.patience > 0
            && self.training_set_size > 1;
        if !positive {
            return Err(domain(format!("training hyperparameters must be positive: {self:?}")));
        }
        if !(self.amplification > 1.0) {
            return Err(domain(format!("amplification must be > 1, got {}", self.amplification)));
        }
        if !(self.validation_fraction > 0.0 && self.validation_fraction < 1.0) {
            return Err(domain(format!(
                "validation fraction must lie in (0, 1), got {}",
                self.validation_fraction
            )));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub train_mse: f64,
    pub val_mse: f64,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct TrainingLog {
    pub epochs: Vec<EpochRecord>,
    pub best_epoch: usize,
    pub best_val_mse: f64,
    pub stopped_early: bool,
}

/// AdamW with decoupled weight decay:
/// `theta <- theta - lr (m_hat / (sqrt(v_hat) + eps) + lambda theta)`.
#[derive(Debug, Clone)]
pub struct AdamW {
    pub learning_rate: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
    m: Vec<f64>,
    v: Vec<f64>,
    step: u32,
}

impl AdamW {
    pub fn new(n_params: usize, learning_rate: f64, weight_decay: f64) -> Self {
        Self {
            learning_rate,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay,
            m: vec![0.0; n_params],
            v: vec![0.0; n_params],
            step: 0,
        }
    }

    pub fn step(&mut self, params: &mut [f64], grad: &[f64]) {
        assert_eq!(params.len(), self.m.len());
        assert_eq!(grad.len(), self.m.len());
        self.step += 1;
        let bc1 = 1.0 - self.beta1.powi(self.step as i32);
        let bc2 = 1.0 - self.beta2.powi(self.step as i32);
        let lr = self.learning_rate;
        for i in 0..params.len() {
            let g = grad[i];
            self.m[i] = self.beta1 * self.m[i] + (1.0 - self.beta1) * g;
            self.v[i] = self.beta2 * self.v[i] + (1.0 - self.beta2) * g * g;
            let m_hat = self.m[i] / bc1;
            let v_hat = self.v[i] / bc2;
            params[i] -= lr * (m_hat / (v_hat.sqrt() + self.eps) + self.weight_decay * params[i]);
        }
    }
}

/// Mean squared error of the model over `batch`.
pub fn loss(model: &MlpModel, batch: &[Sample]) -> f64 {
    assert!(!batch.is_empty(), "loss of an empty batch");
    let sse: f64 = batch
        .par_chunks(CHUNK)
        .map(|chunk| {
            let mut tape = model.new_tape();
            chunk
                .iter()
                .map(|s| (model.forward_tape(&s.features.as_array(), &mut tape) - s.target).powi(2))
                .sum::<f64>()
        })
        .collect::<Vec<_>>()
        .into_iter()
        .sum();
    sse / batch.len() as f64
}

/// Mean gradient of the squared error over `batch`; returns the batch MSE.
fn batch_gradient(model: &MlpModel, batch: &[&Sample], grad: &mut [f64]) -> f64 {
    let p = model.n_params();
    let parts: Vec<(Vec<f64>, f64)> = batch
        .par_chunks(CHUNK)
        .map(|chunk| {
            let mut g = vec![0.0; p];
            let mut tape = model.new_tape();
            let mut sse = 0.0;
            for s in chunk {
                let out = model.forward_tape(&s.features.as_array(), &mut tape);
                let resid = out - s.target;
                model.backward_tape(&mut tape, 2.0 * resid, &mut g);
                sse += resid * resid;
            }
            (g, sse)
        })
        .collect();
    grad.iter_mut().for_each(|g| *g = 0.0);
    let mut sse = 0.0;
    for (g, s) in parts {
        for (acc, v) in grad.iter_mut().zip(g) {
            *acc += v;
        }
        sse += s;
    }
    let inv = 1.0 / batch.len() as f64;
    grad.iter_mut().for_each(|g| *g *= inv);
    sse * inv
}

/// Trains a fresh network on `data`.
///
/// A seeded shuffle holds out `validation_fraction` of the samples; the
/// returned model carries the parameters of the best validation epoch.
pub fn train(data: &[Sample], arch: Architecture, config: &TrainConfig) -> Result<(MlpModel, TrainingLog)> {
    config.validate()?;
    let n_val = ((data.len() as f64) * config.validation_fraction).round() as usize;
    if n_val == 0 || n_val >= data.len() {
        return Err(domain(format!(
            "{} samples cannot be split with validation fraction {}",
            data.len(),
            config.validation_fraction
        )));
    }
    let mut order: Vec<usize> = (0..data.len()).collect();
    order.shuffle(&mut StreamKey::new(config.seed, Substream::Shuffle, u64::MAX).rng());
    let (val_idx, train_idx) = order.split_at(n_val);
    let val: Vec<Sample> = val_idx.iter().map(|&i| data[i]).collect();
    let mut train_set: Vec<&Sample> = train_idx.iter().map(|&i| &data[i]).collect();

    let mut model = MlpModel::init(arch, config.amplification, StreamKey::new(config.seed, Substream::Init, 0))?;
    let mut opt = AdamW::new(model.n_params(), config.learning_rate, config.weight_decay);
    let mut grad = vec![0.0; model.n_params()];
    let mut log = TrainingLog {
        best_val_mse: f64::INFINITY,
        ..Default::default()
    };
    let mut best = model.params().to_vec();

    for epoch in 0..config.epochs {
        train_set.shuffle(&mut StreamKey::new(config.seed, Substream::Shuffle, epoch as u64).rng());
        let mut sse = 0.0;
        for batch in train_set.chunks(config.batch_size) {
            let mse = batch_gradient(&model, batch, &mut grad);
            sse += mse * batch.len() as f64;
            opt.step(model.params_mut(), &grad);
        }
        let train_mse = sse / train_set.len() as f64;
        let val_mse = loss(&model, &val);
        if !train_mse.is_finite() || !val_mse.is_finite() {
            return Err(Error::Divergence { epoch });
        }
        log.epochs.push(EpochRecord {
            epoch,
            train_mse,
            val_mse,
        });
        if val_mse < log.best_val_mse {
            log.best_val_mse = val_mse;
            log.best_epoch = epoch;
            best.copy_from_slice(model.params());
        } else if epoch - log.best_epoch >= config.patience {
            log.stopped_early = true;
            break;
        }
    }
    model.set_params(&best)?;
    Ok((model, log))
}
