use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use super::features::{FeatureVector, N_FEATURES};
use crate::error::{domain, Result};
use crate::rng::StreamKey;

/// Initial value of the learnable softplus shift.
pub const SHIFT_INIT: f64 = 0.1;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Activation {
    Relu,
    Identity,
    Tanh,
}

impl Activation {
    #[inline]
    fn apply(self, v: f64) -> f64 {
        match self {
            Activation::Relu => v.max(0.0),
            Activation::Identity => v,
            Activation::Tanh => v.tanh(),
        }
    }

    /// Derivative expressed through the activation's output.
    #[inline]
    fn derivative_from_output(self, out: f64) -> f64 {
        match self {
            Activation::Relu => {
                if out > 0.0 {
                    1.0
                } else {
                    0.0
                }
            }
            Activation::Identity => 1.0,
            Activation::Tanh => 1.0 - out * out,
        }
    }
}

/// Layer widths and hidden activations. The output layer is always a single
/// unit followed by the shifted softplus `log(1 + exp(z + b))`.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Architecture {
    pub dims: Vec<usize>,
    pub hidden: Vec<Activation>,
    /// Whether `b` is a trained parameter (stored last in the flat vector).
    pub learnable_shift: bool,
}

impl Architecture {
    /// 6 -> 32 (ReLU) -> 64 (ReLU) -> 32 (linear) -> 1 (shifted softplus).
    pub fn estimator() -> Self {
        Self {
            dims: vec![N_FEATURES, 32, 64, 32, 1],
            hidden: vec![Activation::Relu, Activation::Relu, Activation::Identity],
            learnable_shift: true,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.dims.len() < 2 || self.dims.contains(&0) {
            return Err(domain(format!("bad layer dims {:?}", self.dims)));
        }
        if *self.dims.last().unwrap() != 1 {
            return Err(domain("the output layer must have exactly one unit"));
        }
        if self.hidden.len() != self.dims.len() - 2 {
            return Err(domain(format!(
                "{} hidden layers need {} activations, got {}",
                self.dims.len() - 2,
                self.dims.len() - 2,
                self.hidden.len()
            )));
        }
        Ok(())
    }

    pub fn n_layers(&self) -> usize {
        self.dims.len() - 1
    }

    pub fn input_dim(&self) -> usize {
        self.dims[0]
    }

    /// Number of trainable parameters.
    pub fn n_params(&self) -> usize {
        let dense: usize = self.dims.windows(2).map(|w| w[0] * w[1] + w[1]).sum();
        dense + usize::from(self.learnable_shift)
    }

    /// Offset of layer `l`'s weight block; its biases follow immediately.
    fn layer_offsets(&self) -> Vec<usize> {
        let mut offsets = Vec::with_capacity(self.n_layers());
        let mut at = 0;
        for w in self.dims.windows(2) {
            offsets.push(at);
            at += w[0] * w[1] + w[1];
        }
        offsets
    }
}

/// Network parameters in the canonical flat order: for each layer the
/// `out x in` weight matrix in row-major order, then its biases; the
/// softplus shift `b` comes last.
#[derive(Debug, Clone, PartialEq)]
pub struct MlpModel {
    arch: Architecture,
    offsets: Vec<usize>,
    params: Vec<f64>,
    fixed_shift: f64,
    /// Amplification factor `a` the model was trained with.
    pub amplification: f64,
}

/// Per-layer activations kept for backpropagation.
#[derive(Debug, Clone, Default)]
pub struct Tape {
    acts: Vec<Vec<f64>>,
    deltas: Vec<Vec<f64>>,
    z: f64,
}

impl Tape {
    /// Output pre-activation `z` of the last forward pass.
    pub fn pre_activation(&self) -> f64 {
        self.z
    }
}

#[inline]
pub fn sigmoid(v: f64) -> f64 {
    if v >= 0.0 {
        1.0 / (1.0 + (-v).exp())
    } else {
        let e = v.exp();
        e / (1.0 + e)
    }
}

/// `log(1 + e^v)`, evaluated without overflow.
#[inline]
pub fn softplus(v: f64) -> f64 {
    if v > 0.0 {
        v + (-v).exp().ln_1p()
    } else {
        v.exp().ln_1p()
    }
}

/// Maps a network output back to SNU: `1 + upsilon / a^2`.
pub fn sigma2_from_output(upsilon: f64, amplification: f64) -> f64 {
    1.0 + upsilon / (amplification * amplification)
}

impl MlpModel {
    /// All weights and biases zero, shift at its initial value.
    pub fn zeros(arch: Architecture, amplification: f64) -> Result<Self> {
        arch.validate()?;
        let offsets = arch.layer_offsets();
        let mut params = vec![0.0; arch.n_params()];
        if arch.learnable_shift {
            *params.last_mut().unwrap() = SHIFT_INIT;
        }
        Ok(Self {
            arch,
            offsets,
            params,
            fixed_shift: SHIFT_INIT,
            amplification,
        })
    }

    /// He-normal weights for layers feeding a ReLU, Glorot-style
    /// `1/fan_in` variance otherwise; zero biases.
    pub fn init(arch: Architecture, amplification: f64, seed: StreamKey) -> Result<Self> {
        let mut model = Self::zeros(arch, amplification)?;
        let mut rng = seed.rng();
        for l in 0..model.arch.n_layers() {
            let (fan_in, fan_out) = (model.arch.dims[l], model.arch.dims[l + 1]);
            let gain = match model.arch.hidden.get(l) {
                Some(Activation::Relu) => 2.0,
                _ => 1.0,
            };
            let sd = (gain / fan_in as f64).sqrt();
            let off = model.offsets[l];
            for w in &mut model.params[off..off + fan_in * fan_out] {
                *w = sd * rng.sample::<f64, _>(StandardNormal);
            }
        }
        Ok(model)
    }

    pub fn from_params(arch: Architecture, params: Vec<f64>, amplification: f64) -> Result<Self> {
        let mut model = Self::zeros(arch, amplification)?;
        model.set_params(&params)?;
        Ok(model)
    }

    pub fn architecture(&self) -> &Architecture {
        &self.arch
    }

    pub fn n_params(&self) -> usize {
        self.params.len()
    }

    pub fn params(&self) -> &[f64] {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut [f64] {
        &mut self.params
    }

    pub fn set_params(&mut self, params: &[f64]) -> Result<()> {
        if params.len() != self.params.len() {
            return Err(domain(format!(
                "expected {} parameters, got {}",
                self.params.len(),
                params.len()
            )));
        }
        self.params.copy_from_slice(params);
        Ok(())
    }

    pub fn shift(&self) -> f64 {
        if self.arch.learnable_shift {
            *self.params.last().unwrap()
        } else {
            self.fixed_shift
        }
    }

    /// Value of `b` when it is not trained.
    pub fn set_fixed_shift(&mut self, b: f64) {
        self.fixed_shift = b;
    }

    /// `(weights, biases)` of layer `l`.
    pub fn layer(&self, l: usize) -> (&[f64], &[f64]) {
        let (n_in, n_out) = (self.arch.dims[l], self.arch.dims[l + 1]);
        let off = self.offsets[l];
        let (w, rest) = self.params[off..].split_at(n_in * n_out);
        (w, &rest[..n_out])
    }

    pub fn layer_mut(&mut self, l: usize) -> (&mut [f64], &mut [f64]) {
        let (n_in, n_out) = (self.arch.dims[l], self.arch.dims[l + 1]);
        let off = self.offsets[l];
        let (w, rest) = self.params[off..].split_at_mut(n_in * n_out);
        (w, &mut rest[..n_out])
    }

    pub fn new_tape(&self) -> Tape {
        Tape {
            acts: self.arch.dims.iter().map(|&d| vec![0.0; d]).collect(),
            deltas: self.arch.dims.iter().map(|&d| vec![0.0; d]).collect(),
            z: 0.0,
        }
    }

    /// Forward pass recording activations; returns the network output.
    pub fn forward_tape(&self, input: &[f64], tape: &mut Tape) -> f64 {
        assert_eq!(input.len(), self.arch.input_dim(), "input width mismatch");
        tape.acts[0].copy_from_slice(input);
        let n_layers = self.arch.n_layers();
        for l in 0..n_layers {
            let (w, b) = self.layer(l);
            let n_in = self.arch.dims[l];
            let (head, tail) = tape.acts.split_at_mut(l + 1);
            let inp = &head[l];
            let out = &mut tail[0];
            for (j, o) in out.iter_mut().enumerate() {
                let row = &w[j * n_in..(j + 1) * n_in];
                *o = b[j] + dot(row, inp);
            }
            if let Some(act) = self.arch.hidden.get(l) {
                for o in out.iter_mut() {
                    *o = act.apply(*o);
                }
            }
        }
        tape.z = tape.acts[n_layers][0];
        softplus(tape.z + self.shift())
    }

    pub fn forward_raw(&self, input: &[f64]) -> f64 {
        self.forward_tape(input, &mut self.new_tape())
    }

    /// Network output `upsilon_hat > 0` for one feature vector.
    pub fn forward(&self, features: &FeatureVector) -> f64 {
        self.forward_raw(&features.as_array())
    }

    /// `sigma2_nn = 1 + upsilon_hat / a^2`.
    pub fn predict_sigma2(&self, features: &FeatureVector) -> f64 {
        sigma2_from_output(self.forward(features), self.amplification)
    }

    /// Accumulates `seed * d(upsilon)/d(theta)` into `grad` for the input
    /// last passed to [`forward_tape`](Self::forward_tape).
    ///
    /// With `seed = 1` this is a row of the output Jacobian; with
    /// `seed = 2 (upsilon - target)` it is the squared-error gradient.
    pub fn backward_tape(&self, tape: &mut Tape, seed: f64, grad: &mut [f64]) {
        assert_eq!(grad.len(), self.params.len(), "gradient length mismatch");
        let n_layers = self.arch.n_layers();
        let d_out = seed * sigmoid(tape.z + self.shift());
        if self.arch.learnable_shift {
            *grad.last_mut().unwrap() += d_out;
        }
        tape.deltas[n_layers][0] = d_out;
        for l in (0..n_layers).rev() {
            let (n_in, n_out) = (self.arch.dims[l], self.arch.dims[l + 1]);
            let off = self.offsets[l];
            let (w, _) = self.layer(l);
            let (d_head, d_tail) = tape.deltas.split_at_mut(l + 1);
            let delta_out = &d_tail[0];
            let inp = &tape.acts[l];
            {
                let (gw, gb) = grad[off..off + n_in * n_out + n_out].split_at_mut(n_in * n_out);
                for j in 0..n_out {
                    let dj = delta_out[j];
                    if dj == 0.0 {
                        continue;
                    }
                    gb[j] += dj;
                    for (g, &a) in gw[j * n_in..(j + 1) * n_in].iter_mut().zip(inp) {
                        *g += dj * a;
                    }
                }
            }
            if l == 0 {
                break;
            }
            // Propagate to the previous layer's pre-activations.
            let delta_in = &mut d_head[l];
            delta_in.iter_mut().for_each(|d| *d = 0.0);
            for j in 0..n_out {
                let dj = delta_out[j];
                if dj == 0.0 {
                    continue;
                }
                for (d, &wij) in delta_in.iter_mut().zip(&w[j * n_in..(j + 1) * n_in]) {
                    *d += dj * wij;
                }
            }
            let act = self.arch.hidden[l - 1];
            for (d, &a) in delta_in.iter_mut().zip(inp) {
                *d *= act.derivative_from_output(a);
            }
        }
    }

    /// Gradient of the raw output with respect to every parameter.
    pub fn output_gradient(&self, input: &[f64]) -> Vec<f64> {
        let mut tape = self.new_tape();
        let mut grad = vec![0.0; self.params.len()];
        self.forward_tape(input, &mut tape);
        self.backward_tape(&mut tape, 1.0, &mut grad);
        grad
    }

    /// Gradient of `(upsilon - target)^2`; returns the squared error.
    pub fn squared_error_gradient(&self, input: &[f64], target: f64, grad: &mut [f64]) -> f64 {
        let mut tape = self.new_tape();
        let out = self.forward_tape(input, &mut tape);
        let resid = out - target;
        self.backward_tape(&mut tape, 2.0 * resid, grad);
        resid * resid
    }
}

#[inline]
fn dot(a: &[f64], b: &[f64]) -> f64 {
    let mut acc = [0.0f64; 4];
    let chunks = a.len() / 4;
    for c in 0..chunks {
        for k in 0..4 {
            acc[k] += a[4 * c + k] * b[4 * c + k];
        }
    }
    let mut s = (acc[0] + acc[1]) + (acc[2] + acc[3]);
    for i in 4 * chunks..a.len() {
        s += a[i] * b[i];
    }
    s
}
