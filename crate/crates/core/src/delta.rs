//! Delta-method prediction bounds for the network estimator.
//!
//! A calibration pass over held-out trials collects the residual variance
//! `s^2` and the Gram matrix `F^T F` of output Jacobian rows. A query at
//! features `f0` then gets the one-sided bound
//!
//! ```text
//! H = t_{n_cal - p}(eps / 2) * s * sqrt(1 + f0^T (F^T F + lambda I)^-1 f0)
//! sigma2_max = 1 + (upsilon_hat + H) / a^2
//! ```

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{domain, Error, Result};
use crate::linalg::{GramAccumulator, LowerFactor};
use crate::nn::{model_checksum, read_f64s, sigma2_from_output, split_payload, verify_container};
use crate::nn::{FeatureVector, MlpModel, Sample};

pub use crate::stats::student_t_quantile;

pub const CALIBRATION_FORMAT_VERSION: u32 = 1;
const MAGIC: &[u8; 8] = b"CVQKDCAL";
/// Relative ridge used when none is configured.
pub const DEFAULT_RELATIVE_RIDGE: f64 = 1e-8;
/// Rows whose Jacobians are computed in parallel before a Gram update.
const JACOBIAN_BATCH: usize = 256;

/// Gradient of the raw network output with respect to every parameter.
pub fn output_jacobian_row(model: &MlpModel, features: &FeatureVector) -> Vec<f64> {
    model.output_gradient(&features.as_array())
}

/// How the ridge term added to `F^T F` is chosen.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", content = "value", rename_all = "lowercase")]
pub enum RidgeSpec {
    /// `lambda = r * trace(F^T F) / p`
    Relative(f64),
    Absolute(f64),
}

impl Default for RidgeSpec {
    fn default() -> Self {
        RidgeSpec::Relative(DEFAULT_RELATIVE_RIDGE)
    }
}

impl RidgeSpec {
    fn resolve(self, trace: f64, p: usize) -> Result<f64> {
        let lambda = match self {
            RidgeSpec::Relative(r) => r * trace / p as f64,
            RidgeSpec::Absolute(l) => l,
        };
        if !(lambda >= 0.0) || !lambda.is_finite() {
            return Err(domain(format!("ridge must be finite and non-negative, got {lambda}")));
        }
        Ok(lambda)
    }
}

/// Shape of the interval around the network prediction.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum IntervalForm {
    /// `t s sqrt(1 + q)`
    #[default]
    Sqrt,
    /// `t s (1 + q)`
    Linear,
}

impl IntervalForm {
    fn scale(self, q: f64) -> f64 {
        match self {
            IntervalForm::Sqrt => (1.0 + q).sqrt(),
            IntervalForm::Linear => 1.0 + q,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct CalibrationRecord {
    pub n_cal: usize,
    pub p: usize,
    pub s2: f64,
    pub ridge: f64,
    pub gram_factor: LowerFactor,
    pub model_checksum: String,
}

impl CalibrationRecord {
    pub fn dof(&self) -> u64 {
        (self.n_cal - self.p) as u64
    }

    pub fn s(&self) -> f64 {
        self.s2.sqrt()
    }

    /// `f^T (F^T F + lambda I)^-1 f`
    pub fn leverage(&self, f: &[f64]) -> f64 {
        self.gram_factor.quadratic_form(f)
    }

    /// Size of the serialized record in bytes.
    pub fn file_size(&self) -> usize {
        16 + 256 + 8 * self.gram_factor.packed.len() + 32
    }

    pub fn check_model(&self, model: &MlpModel) -> Result<()> {
        let found = model_checksum(model);
        if found != self.model_checksum {
            return Err(Error::ModelMismatch {
                expected: self.model_checksum.clone(),
                found,
            });
        }
        Ok(())
    }
}

/// Computes `s^2` and the factored Gram matrix on a calibration set that
/// was not used for training.
pub fn calibrate(model: &MlpModel, data: &[Sample], ridge: RidgeSpec) -> Result<CalibrationRecord> {
    let p = model.n_params();
    let n_cal = data.len();
    if n_cal <= p {
        return Err(Error::InsufficientCalibration { n_cal, p });
    }
    if let Some(bad) = data.iter().position(|s| !s.features.is_finite() || !s.target.is_finite()) {
        return Err(domain(format!("calibration sample {bad} is not finite")));
    }

    let mut gram = GramAccumulator::new(p);
    let mut rss = 0.0;
    let mut block = vec![0.0; JACOBIAN_BATCH * p];
    for batch in data.chunks(JACOBIAN_BATCH) {
        let rows = &mut block[..batch.len() * p];
        let residuals: Vec<f64> = rows
            .par_chunks_mut(p)
            .zip(batch.par_iter())
            .map(|(row, sample)| {
                let mut tape = model.new_tape();
                let out = model.forward_tape(&sample.features.as_array(), &mut tape);
                row.iter_mut().for_each(|v| *v = 0.0);
                model.backward_tape(&mut tape, 1.0, row);
                sample.target - out
            })
            .collect();
        rss += residuals.iter().map(|r| r * r).sum::<f64>();
        gram.push_block(rows);
    }

    let mut gram = gram.finish();
    let lambda = ridge.resolve(gram.trace(), p)?;
    gram.add_diagonal(lambda);
    let gram_factor = gram.cholesky()?;
    Ok(CalibrationRecord {
        n_cal,
        p,
        s2: rss / (n_cal - p) as f64,
        ridge: lambda,
        gram_factor,
        model_checksum: model_checksum(model),
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct NnWorstCase {
    pub upsilon_hat: f64,
    pub halfwidth: f64,
    pub leverage: f64,
    pub t_quantile: f64,
    /// Point estimate `1 + upsilon_hat / a^2`.
    pub sigma2_hat_nn: f64,
    pub sigma2_max_nn: f64,
    pub epsilon_pe: f64,
}

/// A model and its calibration, checked against each other once, with the
/// Student-t quantile fixed for one `epsilon_pe`.
#[derive(Debug, Clone)]
pub struct NnBound<'a> {
    model: &'a MlpModel,
    calib: &'a CalibrationRecord,
    epsilon_pe: f64,
    t_quantile: f64,
    form: IntervalForm,
}

impl<'a> NnBound<'a> {
    pub fn new(
        model: &'a MlpModel,
        calib: &'a CalibrationRecord,
        epsilon_pe: f64,
        form: IntervalForm,
    ) -> Result<Self> {
        calib.check_model(model)?;
        let t_quantile = student_t_quantile(epsilon_pe, calib.dof())?;
        Ok(Self {
            model,
            calib,
            epsilon_pe,
            t_quantile,
            form,
        })
    }

    pub fn t_quantile(&self) -> f64 {
        self.t_quantile
    }

    fn output_and_jacobian(&self, features: &FeatureVector) -> Result<(f64, Vec<f64>)> {
        if !features.is_finite() {
            return Err(domain("features are not finite"));
        }
        let a = self.model.amplification;
        if features.amplification != a {
            return Err(domain(format!(
                "features use amplification {} but the model was trained with {a}",
                features.amplification
            )));
        }
        let mut tape = self.model.new_tape();
        let upsilon_hat = self.model.forward_tape(&features.as_array(), &mut tape);
        let mut f0 = vec![0.0; self.calib.p];
        self.model.backward_tape(&mut tape, 1.0, &mut f0);
        Ok((upsilon_hat, f0))
    }

    fn finish(&self, upsilon_hat: f64, leverage: f64) -> NnWorstCase {
        let a = self.model.amplification;
        let halfwidth = self.t_quantile * self.calib.s() * self.form.scale(leverage);
        NnWorstCase {
            upsilon_hat,
            halfwidth,
            leverage,
            t_quantile: self.t_quantile,
            sigma2_hat_nn: sigma2_from_output(upsilon_hat, a),
            sigma2_max_nn: sigma2_from_output(upsilon_hat + halfwidth, a),
            epsilon_pe: self.epsilon_pe,
        }
    }

    pub fn evaluate(&self, features: &FeatureVector) -> Result<NnWorstCase> {
        let (upsilon_hat, f0) = self.output_and_jacobian(features)?;
        Ok(self.finish(upsilon_hat, self.calib.leverage(&f0)))
    }

    /// Same as [`evaluate`](Self::evaluate) for many queries, sharing one
    /// pass over the Gram factor per block of queries.
    pub fn evaluate_many(&self, features: &[FeatureVector]) -> Result<Vec<NnWorstCase>> {
        const BLOCK: usize = 32;
        let prepared: Vec<(f64, Vec<f64>)> = features
            .par_iter()
            .map(|f| self.output_and_jacobian(f))
            .collect::<Result<_>>()?;
        let mut out = Vec::with_capacity(features.len());
        for block in prepared.chunks(BLOCK) {
            let (ups, jac): (Vec<f64>, Vec<Vec<f64>>) = block.iter().cloned().unzip();
            let lev = self.calib.gram_factor.quadratic_forms(&jac);
            out.extend(ups.into_iter().zip(lev).map(|(u, q)| self.finish(u, q)));
        }
        Ok(out)
    }
}

/// One-off bound; prefer [`NnBound`] when querying many feature vectors.
pub fn worst_case_sigma2_max_nn(
    model: &MlpModel,
    calib: &CalibrationRecord,
    features: &FeatureVector,
    epsilon_pe: f64,
    form: IntervalForm,
) -> Result<NnWorstCase> {
    NnBound::new(model, calib, epsilon_pe, form)?.evaluate(features)
}

#[derive(Debug, Serialize, Deserialize)]
struct CalibrationHeader {
    format_version: u32,
    model_checksum: String,
    n_cal: usize,
    p: usize,
    ridge: f64,
    s2: f64,
    factor_layout: String,
}

const FACTOR_LAYOUT: &str = "lower triangle, packed by rows";

pub fn write_calibration<W: Write>(calib: &CalibrationRecord, mut w: W) -> Result<()> {
    let header = CalibrationHeader {
        format_version: CALIBRATION_FORMAT_VERSION,
        model_checksum: calib.model_checksum.clone(),
        n_cal: calib.n_cal,
        p: calib.p,
        ridge: calib.ridge,
        s2: calib.s2,
        factor_layout: FACTOR_LAYOUT.into(),
    };
    let json = serde_json::to_vec(&header).expect("header serializes");
    let mut hasher = Sha256::new();
    let mut emit = |bytes: &[u8], w: &mut W| -> Result<()> {
        hasher.update(bytes);
        w.write_all(bytes)?;
        Ok(())
    };
    emit(MAGIC, &mut w)?;
    emit(&CALIBRATION_FORMAT_VERSION.to_le_bytes(), &mut w)?;
    emit(&(json.len() as u32).to_le_bytes(), &mut w)?;
    emit(&json, &mut w)?;
    let mut buf = Vec::with_capacity(8 * 4096);
    for chunk in calib.gram_factor.packed.chunks(4096) {
        buf.clear();
        chunk.iter().for_each(|v| buf.extend_from_slice(&v.to_le_bytes()));
        emit(&buf, &mut w)?;
    }
    w.write_all(&hasher.finalize())?;
    w.flush()?;
    Ok(())
}

pub fn read_calibration<R: Read>(mut r: R) -> Result<CalibrationRecord> {
    let mut bytes = Vec::new();
    r.read_to_end(&mut bytes)?;
    let payload = verify_container(&bytes, MAGIC, "calibration")?;
    let (header, body) = split_payload(payload, CALIBRATION_FORMAT_VERSION)?;
    let header: CalibrationHeader =
        serde_json::from_slice(header).map_err(|e| Error::Format(format!("calibration header: {e}")))?;
    if header.n_cal <= header.p {
        return Err(Error::InsufficientCalibration {
            n_cal: header.n_cal,
            p: header.p,
        });
    }
    if !(header.s2 >= 0.0) {
        return Err(Error::Format(format!("negative residual variance {}", header.s2)));
    }
    let packed = read_f64s(body, header.p * (header.p + 1) / 2)?;
    Ok(CalibrationRecord {
        n_cal: header.n_cal,
        p: header.p,
        s2: header.s2,
        ridge: header.ridge,
        gram_factor: LowerFactor::from_packed(header.p, packed)?,
        model_checksum: header.model_checksum,
    })
}

pub fn save_calibration(calib: &CalibrationRecord, path: impl AsRef<Path>) -> Result<()> {
    write_calibration(calib, BufWriter::new(File::create(path)?))
}

pub fn load_calibration(path: impl AsRef<Path>) -> Result<CalibrationRecord> {
    read_calibration(BufReader::new(File::open(path)?))
}
