//! Multilayer perceptrons over flat parameter slices.

use nalgebra::DVector;
use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::gradients::tape::{NodeId, Tape};
use crate::params::ParamLayout;

pub fn softplus(x: f64) -> f64 {
    if x > 30.0 {
        x
    } else {
        x.exp().ln_1p()
    }
}

pub fn sigmoid(x: f64) -> f64 {
    1.0 / (1.0 + (-x).exp())
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum Activation {
    Tanh,
    Relu,
}

impl Activation {
    fn apply(self, x: f64) -> f64 {
        match self {
            Activation::Tanh => x.tanh(),
            Activation::Relu => x.max(0.0),
        }
    }
}

/// Layer sizes `[in, hidden.., out]`; hidden layers use `activation`, the last
/// layer is linear.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct MlpArch {
    pub sizes: Vec<usize>,
    pub activation: Activation,
}

/// Offsets of one MLP inside a flat parameter vector.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct MlpParams {
    pub arch: MlpArch,
    /// `(weight offset, bias offset)` per layer.
    pub layers: Vec<(usize, usize)>,
}

impl MlpArch {
    pub fn new(sizes: Vec<usize>, activation: Activation) -> Self {
        assert!(sizes.len() >= 2, "an MLP needs input and output sizes");
        Self { sizes, activation }
    }

    pub fn input_dim(&self) -> usize {
        self.sizes[0]
    }

    pub fn output_dim(&self) -> usize {
        *self.sizes.last().expect("non-empty")
    }

    pub fn num_params(&self) -> usize {
        self.sizes.windows(2).map(|w| w[0] * w[1] + w[1]).sum()
    }

    /// Registers `prefix.{k}.w` and `prefix.{k}.b` slices.
    pub fn register(&self, layout: &mut ParamLayout, prefix: &str) -> MlpParams {
        let layers = self
            .sizes
            .windows(2)
            .enumerate()
            .map(|(k, w)| {
                let wo = layout.push(format!("{prefix}.{k}.w"), &[w[1], w[0]]);
                let bo = layout.push(format!("{prefix}.{k}.b"), &[w[1]]);
                (wo, bo)
            })
            .collect();
        MlpParams {
            arch: self.clone(),
            layers,
        }
    }
}

impl MlpParams {
    /// Glorot-style Gaussian init of weights scaled by `gain`; biases zero.
    pub fn init<R: Rng + ?Sized>(&self, flat: &mut [f64], gain: f64, rng: &mut R) {
        self.init_with_output_gain(flat, gain, gain, rng);
    }

    /// As `init`, but the last layer uses `out_gain`. A small output gain
    /// starts the network close to its zero-output default.
    pub fn init_with_output_gain<R: Rng + ?Sized>(
        &self,
        flat: &mut [f64],
        gain: f64,
        out_gain: f64,
        rng: &mut R,
    ) {
        let last = self.layers.len() - 1;
        for (k, &(wo, bo)) in self.layers.iter().enumerate() {
            let (fan_in, fan_out) = (self.arch.sizes[k], self.arch.sizes[k + 1]);
            let g = if k == last { out_gain } else { gain };
            let sd = g * (2.0 / (fan_in + fan_out) as f64).sqrt();
            for v in &mut flat[wo..wo + fan_in * fan_out] {
                *v = sd * rng.sample::<f64, _>(StandardNormal);
            }
            for v in &mut flat[bo..bo + fan_out] {
                *v = 0.0;
            }
        }
    }

    pub fn forward(&self, flat: &[f64], x: &DVector<f64>) -> DVector<f64> {
        let n = self.layers.len();
        let mut h = x.clone();
        for (k, &(wo, bo)) in self.layers.iter().enumerate() {
            let (cols, rows) = (self.arch.sizes[k], self.arch.sizes[k + 1]);
            let mut out = DVector::from_column_slice(&flat[bo..bo + rows]);
            for c in 0..cols {
                let hc = h[c];
                let col = &flat[wo + c * rows..wo + (c + 1) * rows];
                for r in 0..rows {
                    out[r] += col[r] * hc;
                }
            }
            if k + 1 < n {
                out.apply(|v| *v = self.arch.activation.apply(*v));
            }
            h = out;
        }
        h
    }

    pub fn on_tape(&self, tape: &mut Tape<'_>, x: NodeId) -> NodeId {
        let n = self.layers.len();
        let mut h = x;
        for (k, &(wo, bo)) in self.layers.iter().enumerate() {
            let (cols, rows) = (self.arch.sizes[k], self.arch.sizes[k + 1]);
            h = tape.affine(h, wo, Some(bo), rows, cols);
            if k + 1 < n {
                h = match self.arch.activation {
                    Activation::Tanh => tape.tanh(h),
                    Activation::Relu => tape.relu(h),
                };
            }
        }
        h
    }
}
