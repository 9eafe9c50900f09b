//! Feedback encoder and adaptive blocks.
//!
//! A `(point, label)` signal becomes a raw feature vector
//! `[h/H, w/W, sin(pi h/H), sin(2 pi h/H), sin(pi w/W), sin(2 pi w/W), fg, bg]`,
//! which a two-layer ReLU network maps to the interaction embedding `e_p`.
//! Six dense layers then map `e_p` together with the current mixture
//! (means, log-variances, centered log-weights) to a [`GmmDelta`].

use std::f64::consts::PI;

use serde::{Deserialize, Serialize};

use crate::error::{invalid, shape, Result};
use crate::mixture::{GaussianMixture, GmmDelta};
use crate::nn::{Mlp, MlpTrace};
use crate::proposals::{FeedbackSignal, Label};

pub const RAW_FEATURE_DIM: usize = 8;
pub const ADAPTIVE_LAYERS: usize = 6;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(transparent)]
pub struct InteractionEmbedding(Vec<f64>);

impl InteractionEmbedding {
    pub fn new(values: Vec<f64>) -> Result<Self> {
        if values.iter().any(|v| !v.is_finite()) {
            return Err(invalid("interaction embedding has non-finite entries"));
        }
        Ok(Self(values))
    }

    pub fn zeros(len: usize) -> Self {
        Self(vec![0.0; len])
    }

    pub fn values(&self) -> &[f64] {
        &self.0
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FeedbackEncoderParams {
    pub net: Mlp,
}

impl FeedbackEncoderParams {
    pub fn random(embed_dim: usize, hidden: usize, seed: u64) -> Self {
        Self { net: Mlp::random(&[RAW_FEATURE_DIM, hidden, embed_dim], seed, 1.0) }
    }

    pub fn zeros(embed_dim: usize, hidden: usize) -> Self {
        Self { net: Mlp::zeros(&[RAW_FEATURE_DIM, hidden, embed_dim]) }
    }

    pub fn embed_dim(&self) -> usize {
        self.net.output_len()
    }

    pub fn validate(&self) -> Result<()> {
        if self.net.depth() != 2 || self.net.input_len() != RAW_FEATURE_DIM {
            return Err(shape(format!(
                "feedback encoder must be two layers over {RAW_FEATURE_DIM} features, got sizes {:?}",
                self.net.sizes()
            )));
        }
        if !self.net.is_finite() {
            return Err(invalid("feedback encoder has non-finite weights"));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AdaptiveBlockParams {
    pub components: usize,
    pub latent_dim: usize,
    pub net: Mlp,
}

impl AdaptiveBlockParams {
    pub fn input_len(components: usize, latent_dim: usize, embed_dim: usize) -> usize {
        embed_dim + 2 * components * latent_dim + components
    }

    fn sizes(components: usize, latent_dim: usize, embed_dim: usize, hidden: usize) -> Vec<usize> {
        let mut sizes = vec![Self::input_len(components, latent_dim, embed_dim)];
        sizes.extend(std::iter::repeat_n(hidden, ADAPTIVE_LAYERS - 1));
        sizes.push(GmmDelta::flat_len(components, latent_dim));
        sizes
    }

    /// He-initialized hidden layers; the output layer is scaled by
    /// `output_scale` so a fresh adapter starts near the identity update.
    pub fn random(components: usize, latent_dim: usize, embed_dim: usize, hidden: usize, seed: u64, output_scale: f64) -> Self {
        let net = Mlp::random(&Self::sizes(components, latent_dim, embed_dim, hidden), seed, output_scale);
        Self { components, latent_dim, net }
    }

    pub fn zeros(components: usize, latent_dim: usize, embed_dim: usize, hidden: usize) -> Self {
        Self { components, latent_dim, net: Mlp::zeros(&Self::sizes(components, latent_dim, embed_dim, hidden)) }
    }

    pub fn embed_dim(&self) -> usize {
        self.net.input_len() - 2 * self.components * self.latent_dim - self.components
    }

    pub fn validate(&self) -> Result<()> {
        if self.net.depth() != ADAPTIVE_LAYERS {
            return Err(shape(format!("adaptive blocks need {ADAPTIVE_LAYERS} layers, got {}", self.net.depth())));
        }
        let (m, d) = (self.components, self.latent_dim);
        if self.net.input_len() < 2 * m * d + m || self.net.output_len() != GmmDelta::flat_len(m, d) {
            return Err(shape(format!("adaptive block sizes {:?} do not fit M={m}, D={d}", self.net.sizes())));
        }
        if !self.net.is_finite() {
            return Err(invalid("adaptive blocks have non-finite weights"));
        }
        Ok(())
    }
}

pub fn raw_features(signal: &FeedbackSignal, height: usize, width: usize) -> Result<[f64; RAW_FEATURE_DIM]> {
    let (h, w) = signal.point;
    if h >= height || w >= width {
        return Err(invalid(format!("feedback point ({h}, {w}) outside {height}x{width}")));
    }
    let (u, v) = (h as f64 / height as f64, w as f64 / width as f64);
    let fg = signal.label == Label::Foreground;
    Ok([
        u,
        v,
        (PI * u).sin(),
        (2.0 * PI * u).sin(),
        (PI * v).sin(),
        (2.0 * PI * v).sin(),
        fg as u8 as f64,
        (!fg) as u8 as f64,
    ])
}

pub fn encode_feedback(signal: &FeedbackSignal, height: usize, width: usize, params: &FeedbackEncoderParams) -> Result<InteractionEmbedding> {
    Ok(encode_feedback_trace(signal, height, width, params)?.0)
}

/// Forward pass that also keeps what [`encoder_backward`] needs.
pub fn encode_feedback_trace(
    signal: &FeedbackSignal,
    height: usize,
    width: usize,
    params: &FeedbackEncoderParams,
) -> Result<(InteractionEmbedding, MlpTrace)> {
    let x = raw_features(signal, height, width)?;
    let trace = params.net.forward_trace(&x)?;
    Ok((InteractionEmbedding::new(trace.output.clone())?, trace))
}

/// Encoder parameter gradients for an upstream `d_e`.
pub fn encoder_backward(params: &FeedbackEncoderParams, trace: &MlpTrace, d_e: &[f64]) -> Mlp {
    params.net.backward(trace, d_e).0
}

/// `e_p | means | log-variances | log-weights minus their mean`.
pub fn adapter_input(gmm: &GaussianMixture, e_p: &InteractionEmbedding) -> Vec<f64> {
    let logits = gmm.weight_logits();
    let centre = logits.iter().sum::<f64>() / logits.len() as f64;
    let mut x = Vec::with_capacity(e_p.len() + 2 * gmm.means_flat().len() + logits.len());
    x.extend_from_slice(e_p.values());
    x.extend_from_slice(gmm.means_flat());
    x.extend(gmm.log_variances());
    x.extend(logits.iter().map(|l| l - centre));
    x
}

fn check_adapt_shapes(gmm: &GaussianMixture, e_p: &InteractionEmbedding, params: &AdaptiveBlockParams) -> Result<()> {
    if gmm.components() != params.components || gmm.dim() != params.latent_dim {
        return Err(shape(format!(
            "adapter built for M={}, D={} applied to M={}, D={}",
            params.components,
            params.latent_dim,
            gmm.components(),
            gmm.dim()
        )));
    }
    if e_p.len() != params.embed_dim() {
        return Err(shape(format!("adapter expects e_p of length {}, got {}", params.embed_dim(), e_p.len())));
    }
    Ok(())
}

pub fn adapt(gmm: &GaussianMixture, e_p: &InteractionEmbedding, params: &AdaptiveBlockParams) -> Result<GmmDelta> {
    Ok(adapt_trace(gmm, e_p, params)?.0)
}

pub fn adapt_trace(gmm: &GaussianMixture, e_p: &InteractionEmbedding, params: &AdaptiveBlockParams) -> Result<(GmmDelta, MlpTrace)> {
    check_adapt_shapes(gmm, e_p, params)?;
    let trace = params.net.forward_trace(&adapter_input(gmm, e_p))?;
    let delta = GmmDelta::from_flat(gmm.components(), gmm.dim(), &trace.output)?;
    if !delta.is_finite() {
        return Err(invalid("adaptive blocks produced a non-finite delta"));
    }
    Ok((delta, trace))
}

/// Gradients flowing out of the adaptive blocks.
#[derive(Debug, Clone)]
pub struct AdaptGrads {
    pub params: Mlp,
    pub d_e: Vec<f64>,
    pub d_means: Vec<f64>,
    pub d_log_variances: Vec<f64>,
    /// With respect to the raw log-weights (centering already undone).
    pub d_weight_logits: Vec<f64>,
}

/// Backpropagates `d_delta` (flattened like [`GmmDelta::to_flat`]) through
/// the blocks to their parameters and to every input.
pub fn adapt_backward(params: &AdaptiveBlockParams, trace: &MlpTrace, d_delta: &[f64]) -> AdaptGrads {
    let (grads, d_in) = params.net.backward(trace, d_delta);
    let l = params.embed_dim();
    let md = params.components * params.latent_dim;
    let d_e = d_in[..l].to_vec();
    let d_means = d_in[l..l + md].to_vec();
    let d_log_variances = d_in[l + md..l + 2 * md].to_vec();
    let d_centered = &d_in[l + 2 * md..];
    let mean = d_centered.iter().sum::<f64>() / d_centered.len() as f64;
    let d_weight_logits = d_centered.iter().map(|g| g - mean).collect();
    AdaptGrads { params: grads, d_e, d_means, d_log_variances, d_weight_logits }
}

/// Order-dependent checksum of a delta (entries quantized to 1e-12).
pub fn delta_checksum(delta: &GmmDelta) -> u64 {
    delta
        .to_flat()
        .iter()
        .enumerate()
        .fold(0u64, |acc, (i, &v)| crate::rng::derive_seed(acc, &[i as u64, (v * 1e12).round() as i64 as u64]))
}
