//! Fully connected ReLU networks with hand-derived gradients.
//!
//! `Mlp` applies `Dense -> ReLU -> Dense -> ... -> Dense`; the last layer is
//! linear. Gradients come back in an `Mlp`-shaped container so optimizers can
//! walk parameters and gradients in lock-step.

use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{shape, Result};
use crate::rng::rng_from_seed;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Dense {
    pub inputs: usize,
    pub outputs: usize,
    /// Row-major `outputs x inputs`.
    pub weights: Vec<f64>,
    pub bias: Vec<f64>,
}

impl Dense {
    pub fn zeros(inputs: usize, outputs: usize) -> Self {
        Self { inputs, outputs, weights: vec![0.0; inputs * outputs], bias: vec![0.0; outputs] }
    }

    fn apply(&self, x: &[f64], out: &mut Vec<f64>) {
        out.clear();
        for o in 0..self.outputs {
            let row = &self.weights[o * self.inputs..(o + 1) * self.inputs];
            out.push(self.bias[o] + row.iter().zip(x).map(|(w, v)| w * v).sum::<f64>());
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Mlp {
    pub layers: Vec<Dense>,
}

/// Per-layer inputs recorded by [`Mlp::forward_trace`].
#[derive(Debug, Clone)]
pub struct MlpTrace {
    /// `inputs[l]` is what layer `l` consumed (post-ReLU for `l > 0`).
    inputs: Vec<Vec<f64>>,
    /// Pre-activation of each hidden layer, used for the ReLU mask.
    pre: Vec<Vec<f64>>,
    pub output: Vec<f64>,
}

impl Mlp {
    pub fn zeros(sizes: &[usize]) -> Self {
        assert!(sizes.len() >= 2, "an MLP needs at least an input and an output size");
        Self { layers: sizes.windows(2).map(|p| Dense::zeros(p[0], p[1])).collect() }
    }

    /// He-normal weights with zero biases; the final layer is scaled by
    /// `output_scale` (0 gives a network that starts out emitting zeros).
    pub fn random(sizes: &[usize], seed: u64, output_scale: f64) -> Self {
        let mut rng = rng_from_seed(seed);
        let mut net = Self::zeros(sizes);
        let last = net.layers.len() - 1;
        for (i, layer) in net.layers.iter_mut().enumerate() {
            let std = (2.0 / layer.inputs as f64).sqrt() * if i == last { output_scale } else { 1.0 };
            for w in &mut layer.weights {
                *w = std * rng.sample::<f64, _>(StandardNormal);
            }
        }
        net
    }

    pub fn input_len(&self) -> usize {
        self.layers[0].inputs
    }

    pub fn output_len(&self) -> usize {
        self.layers.last().map_or(0, |l| l.outputs)
    }

    pub fn depth(&self) -> usize {
        self.layers.len()
    }

    pub fn sizes(&self) -> Vec<usize> {
        let mut s = vec![self.input_len()];
        s.extend(self.layers.iter().map(|l| l.outputs));
        s
    }

    pub fn forward(&self, x: &[f64]) -> Result<Vec<f64>> {
        Ok(self.forward_trace(x)?.output)
    }

    pub fn forward_trace(&self, x: &[f64]) -> Result<MlpTrace> {
        if x.len() != self.input_len() {
            return Err(shape(format!("network expects {} inputs, got {}", self.input_len(), x.len())));
        }
        let last = self.layers.len() - 1;
        let mut inputs = Vec::with_capacity(self.layers.len());
        let mut pre = Vec::with_capacity(last);
        let mut current = x.to_vec();
        let mut buf = Vec::new();
        for (i, layer) in self.layers.iter().enumerate() {
            layer.apply(&current, &mut buf);
            inputs.push(std::mem::take(&mut current));
            if i < last {
                current = buf.iter().map(|&v| v.max(0.0)).collect();
                pre.push(buf.clone());
            } else {
                current = buf.clone();
            }
        }
        Ok(MlpTrace { inputs, pre, output: current })
    }

    /// Backpropagates `d_output` through a recorded pass. Returns parameter
    /// gradients and the gradient with respect to the network input.
    pub fn backward(&self, trace: &MlpTrace, d_output: &[f64]) -> (Mlp, Vec<f64>) {
        let mut grads = self.zeros_like();
        let d_in = self.backward_into(trace, d_output, &mut grads);
        (grads, d_in)
    }

    /// Like [`Mlp::backward`] but accumulates into `grads`.
    pub fn backward_into(&self, trace: &MlpTrace, d_output: &[f64], grads: &mut Mlp) -> Vec<f64> {
        let mut delta = d_output.to_vec();
        for l in (0..self.layers.len()).rev() {
            let layer = &self.layers[l];
            let input = &trace.inputs[l];
            let g = &mut grads.layers[l];
            for o in 0..layer.outputs {
                let d = delta[o];
                if d == 0.0 {
                    continue;
                }
                g.bias[o] += d;
                let row = &mut g.weights[o * layer.inputs..(o + 1) * layer.inputs];
                for (gw, x) in row.iter_mut().zip(input) {
                    *gw += d * x;
                }
            }
            let mut d_input = vec![0.0; layer.inputs];
            for o in 0..layer.outputs {
                let d = delta[o];
                if d == 0.0 {
                    continue;
                }
                let row = &layer.weights[o * layer.inputs..(o + 1) * layer.inputs];
                for (di, w) in d_input.iter_mut().zip(row) {
                    *di += d * w;
                }
            }
            if l > 0 {
                for (di, p) in d_input.iter_mut().zip(&trace.pre[l - 1]) {
                    if *p <= 0.0 {
                        *di = 0.0;
                    }
                }
            }
            delta = d_input;
        }
        delta
    }

    pub fn zeros_like(&self) -> Mlp {
        Mlp { layers: self.layers.iter().map(|l| Dense::zeros(l.inputs, l.outputs)).collect() }
    }

    pub fn param_count(&self) -> usize {
        self.layers.iter().map(|l| l.weights.len() + l.bias.len()).sum()
    }

    /// Parameters in a fixed order: per layer, weights then bias.
    pub fn params(&self) -> Vec<f64> {
        let mut v = Vec::with_capacity(self.param_count());
        for l in &self.layers {
            v.extend_from_slice(&l.weights);
            v.extend_from_slice(&l.bias);
        }
        v
    }

    pub fn params_mut(&mut self) -> impl Iterator<Item = &mut f64> {
        self.layers.iter_mut().flat_map(|l| l.weights.iter_mut().chain(l.bias.iter_mut()))
    }

    pub fn set_params(&mut self, flat: &[f64]) -> Result<()> {
        if flat.len() != self.param_count() {
            return Err(shape(format!("{} values for {} parameters", flat.len(), self.param_count())));
        }
        for (p, v) in self.params_mut().zip(flat) {
            *p = *v;
        }
        Ok(())
    }

    pub fn is_finite(&self) -> bool {
        self.layers.iter().all(|l| l.weights.iter().chain(&l.bias).all(|v| v.is_finite()))
    }

    /// `self += scale * other`, shapes assumed identical.
    pub fn add_scaled(&mut self, other: &Mlp, scale: f64) {
        for (a, b) in self.layers.iter_mut().zip(&other.layers) {
            for (x, y) in a.weights.iter_mut().zip(&b.weights) {
                *x += scale * y;
            }
            for (x, y) in a.bias.iter_mut().zip(&b.bias) {
                *x += scale * y;
            }
        }
    }
}

#[inline]
pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}
