//! Train -> calibrate staging with on-disk caching.
//!
//! Artifacts are named after the hash of the config keys that determine
//! them, so a rerun with the same config reuses them and changing e.g. the
//! ridge only invalidates the calibration.

use std::fs;
use std::path::{Path, PathBuf};

use cvqkd_core::delta::{calibrate, load_calibration, save_calibration, CalibrationRecord};
use cvqkd_core::nn::{load_model, save_model, train, Architecture, MlpModel, TrainingLog};

use crate::config::ExperimentConfig;
use crate::data::{calibration_samples, training_samples};
use crate::error::{io_err, HarnessError, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Stage {
    Train,
    Calibrate,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct StageEvent {
    pub stage: Stage,
    pub m: usize,
    pub cached: bool,
    pub path: PathBuf,
}

/// A trained model with its calibration, ready for bounds.
#[derive(Debug, Clone)]
pub struct NnArtifacts {
    pub model: MlpModel,
    pub calibration: CalibrationRecord,
}

pub struct Pipeline<'a> {
    cfg: &'a ExperimentConfig,
    pub events: Vec<StageEvent>,
    pub quiet: bool,
}

fn write_atomic(path: &Path, f: impl FnOnce(&Path) -> cvqkd_core::Result<()>) -> Result<()> {
    if let Some(dir) = path.parent() {
        fs::create_dir_all(dir).map_err(io_err(dir))?;
    }
    let tmp = path.with_extension("partial");
    f(&tmp)?;
    fs::rename(&tmp, path).map_err(io_err(path))?;
    Ok(())
}

impl<'a> Pipeline<'a> {
    pub fn new(cfg: &'a ExperimentConfig) -> Self {
        Self {
            cfg,
            events: Vec::new(),
            quiet: false,
        }
    }

    fn note(&self, msg: impl AsRef<str>) {
        if !self.quiet {
            eprintln!("{}", msg.as_ref());
        }
    }

    pub fn n_cal(&self) -> usize {
        self.cfg.n_cal.unwrap_or(4 * Architecture::estimator().n_params())
    }

    pub fn model_path(&self, m: usize) -> PathBuf {
        self.cfg
            .artifact_dir
            .join(format!("model_m{m}_{}.bin", self.cfg.training_key(m)))
    }

    pub fn training_log_path(&self, m: usize) -> PathBuf {
        self.model_path(m).with_extension("log.json")
    }

    pub fn calibration_path(&self, m: usize) -> PathBuf {
        self.cfg
            .artifact_dir
            .join(format!("calib_m{m}_{}.bin", self.cfg.calibration_key(m)))
    }

    /// Loads the model for `m`, training it first if it is not cached.
    pub fn ensure_model(&mut self, m: usize) -> Result<MlpModel> {
        let path = self.model_path(m);
        if path.exists() {
            let model = load_model(&path)?;
            self.events.push(StageEvent {
                stage: Stage::Train,
                m,
                cached: true,
                path,
            });
            return Ok(model);
        }
        self.note(format!(
            "training model for m = {m} on {} trials",
            self.cfg.training_set_size
        ));
        let data = training_samples(self.cfg, m)?;
        let (model, log) = train(&data, Architecture::estimator(), &self.cfg.train_config(m))?;
        self.note(format!(
            "  best validation MSE {:.3e} at epoch {} ({} epochs run)",
            log.best_val_mse,
            log.best_epoch,
            log.epochs.len()
        ));
        write_atomic(&path, |p| save_model(&model, p))?;
        let log_path = self.training_log_path(m);
        let json = serde_json::to_vec_pretty(&log).expect("log serializes");
        fs::write(&log_path, json).map_err(io_err(&log_path))?;
        self.events.push(StageEvent {
            stage: Stage::Train,
            m,
            cached: false,
            path,
        });
        Ok(model)
    }

    pub fn training_log(&self, m: usize) -> Result<TrainingLog> {
        let path = self.training_log_path(m);
        let bytes = fs::read(&path).map_err(io_err(&path))?;
        serde_json::from_slice(&bytes).map_err(|e| HarnessError::Config(format!("{}: {e}", path.display())))
    }

    /// Loads the model for `m` without training.
    pub fn require_model(&self, m: usize) -> Result<MlpModel> {
        let path = self.model_path(m);
        if !path.exists() {
            return Err(HarnessError::MissingArtifact {
                stage: "estimation",
                artifact: "a trained model",
                path,
                hint: "train",
            });
        }
        Ok(load_model(&path)?)
    }

    pub fn require_calibration(&self, m: usize, model: &MlpModel) -> Result<CalibrationRecord> {
        let path = self.calibration_path(m);
        if !path.exists() {
            return Err(HarnessError::MissingArtifact {
                stage: "estimation",
                artifact: "a calibration",
                path,
                hint: "calibrate",
            });
        }
        let calib = load_calibration(&path)?;
        calib.check_model(model)?;
        Ok(calib)
    }

    /// Loads the calibration for `m`, computing it first if needed. A
    /// cached calibration of a different model is recomputed.
    pub fn ensure_calibration(&mut self, m: usize, model: &MlpModel) -> Result<CalibrationRecord> {
        let path = self.calibration_path(m);
        if path.exists() {
            let calib = load_calibration(&path)?;
            if calib.check_model(model).is_ok() {
                self.events.push(StageEvent {
                    stage: Stage::Calibrate,
                    m,
                    cached: true,
                    path,
                });
                return Ok(calib);
            }
            self.note(format!("{} belongs to another model; recalibrating", path.display()));
        }
        let n_cal = self.n_cal();
        self.note(format!("calibrating model for m = {m} on {n_cal} trials"));
        let data = calibration_samples(self.cfg, m, n_cal)?;
        let calib = calibrate(model, &data, self.cfg.ridge())?;
        self.note(format!(
            "  s^2 = {:.3e}, ridge = {:.3e}; writing {:.1} MB calibration file",
            calib.s2,
            calib.ridge,
            calib.file_size() as f64 / 1e6
        ));
        write_atomic(&path, |p| save_calibration(&calib, p))?;
        self.events.push(StageEvent {
            stage: Stage::Calibrate,
            m,
            cached: false,
            path,
        });
        Ok(calib)
    }

    pub fn ensure_nn(&mut self, m: usize) -> Result<NnArtifacts> {
        let model = self.ensure_model(m)?;
        let calibration = self.ensure_calibration(m, &model)?;
        Ok(NnArtifacts { model, calibration })
    }
}
