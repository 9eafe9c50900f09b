//! Preference-conditioned per-pixel segmentation and majority-vote
//! aggregation.
//!
//! Two interchangeable heads share one contract, `(image, z, e_p) -> SoftMask`:
//!
//! * `Analytic`: `sigmoid((intensity - (w_z.z + w_e.e_p + b)) / T)`. The
//!   latent shifts the intensity threshold, so `z` carries the boundary
//!   preference directly.
//! * `Trainable`: a two-layer per-pixel network on
//!   `[features | z | e_p]`.
//!
//! Both expose input gradients (for adapting the latent) and the trainable
//! head also exposes parameter gradients.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::adapter::InteractionEmbedding;
use crate::error::{invalid, shape, Error, Result};
use crate::mask::{BinaryMask, SoftMask};
use crate::mixture::LatentSample;
use crate::nn::{sigmoid, Dense, Mlp};
use crate::phantom::PhantomImage;
use crate::rng::derive_seed;

pub const FEATURE_DIM: usize = 3;

/// Per-pixel `[intensity, radial distance to centroid / half-diagonal,
/// gradient magnitude]`.
#[derive(Debug, Clone, PartialEq)]
pub struct FeatureMap {
    pub height: usize,
    pub width: usize,
    pub data: Vec<[f64; FEATURE_DIM]>,
}

impl FeatureMap {
    pub fn from_image(image: &PhantomImage) -> Self {
        let (h, w) = (image.height, image.width);
        let total: f64 = image.intensities.iter().sum();
        let (ch, cw) = if total > 0.0 {
            let mut ch = 0.0;
            let mut cw = 0.0;
            for r in 0..h {
                for c in 0..w {
                    let v = image.get(r, c);
                    ch += v * r as f64;
                    cw += v * c as f64;
                }
            }
            (ch / total, cw / total)
        } else {
            ((h as f64 - 1.0) / 2.0, (w as f64 - 1.0) / 2.0)
        };
        let half_diag = ((h as f64 / 2.0).powi(2) + (w as f64 / 2.0).powi(2)).sqrt();
        let at = |r: isize, c: isize| {
            let r = r.clamp(0, h as isize - 1) as usize;
            let c = c.clamp(0, w as isize - 1) as usize;
            image.get(r, c)
        };
        let mut data = Vec::with_capacity(h * w);
        for r in 0..h {
            for c in 0..w {
                let (ri, ci) = (r as isize, c as isize);
                let gy = (at(ri + 1, ci) - at(ri - 1, ci)) / 2.0;
                let gx = (at(ri, ci + 1) - at(ri, ci - 1)) / 2.0;
                let dist = ((r as f64 - ch).powi(2) + (c as f64 - cw).powi(2)).sqrt() / half_diag;
                data.push([image.get(r, c), dist, (gx * gx + gy * gy).sqrt()]);
            }
        }
        Self { height: h, width: w, data }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AnalyticSegmenter {
    pub w_z: Vec<f64>,
    pub w_e: Vec<f64>,
    pub bias: f64,
    pub temperature: f64,
}

impl AnalyticSegmenter {
    /// Threshold `bias + spread * z[0]`: the first latent axis is the
    /// boundary-preference axis, the embedding does not move the threshold.
    pub fn preference_axis(latent_dim: usize, embed_dim: usize, bias: f64, spread: f64, temperature: f64) -> Self {
        let mut w_z = vec![0.0; latent_dim];
        if latent_dim > 0 {
            w_z[0] = spread;
        }
        Self { w_z, w_e: vec![0.0; embed_dim], bias, temperature }
    }

    pub fn threshold(&self, z: &[f64], e: &[f64]) -> f64 {
        self.bias
            + self.w_z.iter().zip(z).map(|(a, b)| a * b).sum::<f64>()
            + self.w_e.iter().zip(e).map(|(a, b)| a * b).sum::<f64>()
    }
}

impl Default for AnalyticSegmenter {
    fn default() -> Self {
        Self::preference_axis(8, 16, 0.5, 0.22, 0.05)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainableSegmenter {
    pub latent_dim: usize,
    pub embed_dim: usize,
    /// Layers `[FEATURE_DIM + latent_dim + embed_dim -> hidden -> 1]`.
    pub net: Mlp,
}

impl TrainableSegmenter {
    pub fn random(latent_dim: usize, embed_dim: usize, hidden: usize, seed: u64) -> Self {
        let net = Mlp::random(&[FEATURE_DIM + latent_dim + embed_dim, hidden, 1], seed, 1.0);
        Self { latent_dim, embed_dim, net }
    }

    fn hidden(&self) -> usize {
        self.net.layers[0].outputs
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "variant", rename_all = "snake_case")]
pub enum SegmenterParams {
    Analytic(AnalyticSegmenter),
    Trainable(TrainableSegmenter),
}

impl SegmenterParams {
    pub fn validate(&self, latent_dim: usize, embed_dim: usize) -> Result<()> {
        match self {
            SegmenterParams::Analytic(a) => {
                if !(a.temperature > 0.0) {
                    return Err(invalid("segmenter temperature must be positive"));
                }
                if a.w_z.len() != latent_dim || a.w_e.len() != embed_dim {
                    return Err(shape(format!(
                        "analytic segmenter is ({}, {}), session uses ({latent_dim}, {embed_dim})",
                        a.w_z.len(),
                        a.w_e.len()
                    )));
                }
                if !(a.bias.is_finite() && a.w_z.iter().chain(&a.w_e).all(|v| v.is_finite())) {
                    return Err(invalid("non-finite segmenter weights"));
                }
            }
            SegmenterParams::Trainable(t) => {
                if t.latent_dim != latent_dim || t.embed_dim != embed_dim {
                    return Err(shape("trainable segmenter dimensions differ from the session"));
                }
                if t.net.depth() != 2
                    || t.net.input_len() != FEATURE_DIM + latent_dim + embed_dim
                    || t.net.output_len() != 1
                {
                    return Err(shape("trainable segmenter must be [features+z+e -> hidden -> 1]"));
                }
                if !t.net.is_finite() {
                    return Err(invalid("non-finite segmenter weights"));
                }
            }
        }
        Ok(())
    }

    pub fn latent_dim(&self) -> usize {
        match self {
            SegmenterParams::Analytic(a) => a.w_z.len(),
            SegmenterParams::Trainable(t) => t.latent_dim,
        }
    }

    pub fn embed_dim(&self) -> usize {
        match self {
            SegmenterParams::Analytic(a) => a.w_e.len(),
            SegmenterParams::Trainable(t) => t.embed_dim,
        }
    }

    pub fn is_trainable(&self) -> bool {
        matches!(self, SegmenterParams::Trainable(_))
    }

    /// Binds the head to one image, caching everything that does not depend
    /// on `(z, e_p)`.
    pub fn prepare<'a>(&'a self, image: &'a PhantomImage) -> PreparedSegmenter<'a> {
        let first_layer = match self {
            SegmenterParams::Analytic(_) => Vec::new(),
            SegmenterParams::Trainable(t) => {
                let features = FeatureMap::from_image(image);
                let layer = &t.net.layers[0];
                let hidden = t.hidden();
                let mut out = Vec::with_capacity(features.data.len() * hidden);
                for f in &features.data {
                    for j in 0..hidden {
                        let row = &layer.weights[j * layer.inputs..j * layer.inputs + FEATURE_DIM];
                        out.push(layer.bias[j] + row[0] * f[0] + row[1] * f[1] + row[2] * f[2]);
                    }
                }
                out
            }
        };
        PreparedSegmenter { params: self, image, first_layer }
    }
}

/// A segmenter bound to one image.
pub struct PreparedSegmenter<'a> {
    params: &'a SegmenterParams,
    image: &'a PhantomImage,
    /// Trainable head only: per-pixel `b1 + W1_f . features`, `pixels x hidden`.
    first_layer: Vec<f64>,
}

/// Gradients of a scalar loss with respect to the segmenter inputs (and,
/// for the trainable head, its parameters).
#[derive(Debug, Clone)]
pub struct SegmenterGrads {
    pub d_z: Vec<Vec<f64>>,
    pub d_e: Vec<f64>,
    pub d_params: Option<Mlp>,
}

impl PreparedSegmenter<'_> {
    fn check_dims(&self, z: &[f64], e: &[f64]) -> Result<()> {
        let (d, l) = (self.params.latent_dim(), self.params.embed_dim());
        if z.len() != d || e.len() != l {
            return Err(shape(format!(
                "segmenter expects z in R^{d} and e_p in R^{l}, got {} and {}",
                z.len(),
                e.len()
            )));
        }
        Ok(())
    }

    /// Per-pixel logits for one latent.
    pub fn logits(&self, z: &[f64], e: &[f64]) -> Result<Vec<f64>> {
        self.check_dims(z, e)?;
        Ok(match self.params {
            SegmenterParams::Analytic(a) => {
                let thr = a.threshold(z, e);
                let inv_t = 1.0 / a.temperature;
                self.image.intensities.iter().map(|&v| (v - thr) * inv_t).collect()
            }
            SegmenterParams::Trainable(t) => {
                let shift = latent_shift(t, z, e);
                let l2 = &t.net.layers[1];
                let hidden = t.hidden();
                self.first_layer
                    .chunks(hidden)
                    .map(|pre| {
                        l2.bias[0]
                            + pre
                                .iter()
                                .zip(&shift)
                                .zip(&l2.weights)
                                .map(|((p, s), w)| w * (p + s).max(0.0))
                                .sum::<f64>()
                    })
                    .collect()
            }
        })
    }

    pub fn predict(&self, z: &[f64], e: &[f64]) -> Result<SoftMask> {
        let logits = self.logits(z, e)?;
        Ok(SoftMask::from_raw(self.image.height, self.image.width, logits.into_iter().map(sigmoid).collect()))
    }

    /// Backpropagates `d_soft[n][pixel]` (gradient of a scalar loss with
    /// respect to sample `n`'s soft mask) to the latents, the embedding and,
    /// when trainable, the head's parameters.
    pub fn backward(&self, zs: &[Vec<f64>], e: &[f64], softs: &[SoftMask], d_soft: &[Vec<f64>]) -> Result<SegmenterGrads> {
        if zs.len() != softs.len() || zs.len() != d_soft.len() {
            return Err(shape("latents, predictions and upstream gradients differ in count"));
        }
        let mut d_z = Vec::with_capacity(zs.len());
        let mut d_e = vec![0.0; e.len()];
        match self.params {
            SegmenterParams::Analytic(a) => {
                let inv_t = 1.0 / a.temperature;
                for ((z, soft), ds) in zs.iter().zip(softs).zip(d_soft) {
                    self.check_dims(z, e)?;
                    // d logit / d threshold = -1/T
                    let d_thr: f64 = soft
                        .data()
                        .iter()
                        .zip(ds)
                        .map(|(p, g)| g * p * (1.0 - p))
                        .sum::<f64>()
                        * -inv_t;
                    d_z.push(a.w_z.iter().map(|w| w * d_thr).collect());
                    for (de, w) in d_e.iter_mut().zip(&a.w_e) {
                        *de += w * d_thr;
                    }
                }
                Ok(SegmenterGrads { d_z, d_e, d_params: None })
            }
            SegmenterParams::Trainable(t) => {
                let features = FeatureMap::from_image(self.image);
                let hidden = t.hidden();
                let (dim_z, dim_e) = (t.latent_dim, t.embed_dim);
                let l1 = &t.net.layers[0];
                let l2 = &t.net.layers[1];
                let mut grads = t.net.zeros_like();
                for ((z, soft), ds) in zs.iter().zip(softs).zip(d_soft) {
                    self.check_dims(z, e)?;
                    let shift = latent_shift(t, z, e);
                    let mut d_pre_sum = vec![0.0; hidden];
                    let mut d_w1_feat = vec![[0.0; FEATURE_DIM]; hidden];
                    let mut d_w2 = vec![0.0; hidden];
                    let mut d_b2 = 0.0;
                    for (px, ((pre, p), g)) in
                        self.first_layer.chunks(hidden).zip(soft.data()).zip(ds).enumerate()
                    {
                        let d_logit = g * p * (1.0 - p);
                        if d_logit == 0.0 {
                            continue;
                        }
                        d_b2 += d_logit;
                        let f = &features.data[px];
                        for j in 0..hidden {
                            let a = pre[j] + shift[j];
                            if a > 0.0 {
                                d_w2[j] += d_logit * a;
                                let d_pre = d_logit * l2.weights[j];
                                d_pre_sum[j] += d_pre;
                                d_w1_feat[j][0] += d_pre * f[0];
                                d_w1_feat[j][1] += d_pre * f[1];
                                d_w1_feat[j][2] += d_pre * f[2];
                            }
                        }
                    }
                    let g1 = &mut grads.layers[0];
                    let mut dz = vec![0.0; dim_z];
                    for j in 0..hidden {
                        let row = j * l1.inputs;
                        g1.bias[j] += d_pre_sum[j];
                        for k in 0..FEATURE_DIM {
                            g1.weights[row + k] += d_w1_feat[j][k];
                        }
                        for k in 0..dim_z {
                            g1.weights[row + FEATURE_DIM + k] += d_pre_sum[j] * z[k];
                            dz[k] += d_pre_sum[j] * l1.weights[row + FEATURE_DIM + k];
                        }
                        for k in 0..dim_e {
                            g1.weights[row + FEATURE_DIM + dim_z + k] += d_pre_sum[j] * e[k];
                            d_e[k] += d_pre_sum[j] * l1.weights[row + FEATURE_DIM + dim_z + k];
                        }
                    }
                    let g2 = &mut grads.layers[1];
                    g2.bias[0] += d_b2;
                    for j in 0..hidden {
                        g2.weights[j] += d_w2[j];
                    }
                    d_z.push(dz);
                }
                Ok(SegmenterGrads { d_z, d_e, d_params: Some(grads) })
            }
        }
    }
}

/// `W1_z . z + W1_e . e`, the per-sample part of the first-layer pre-activation.
fn latent_shift(t: &TrainableSegmenter, z: &[f64], e: &[f64]) -> Vec<f64> {
    let l1: &Dense = &t.net.layers[0];
    (0..t.hidden())
        .map(|j| {
            let row = &l1.weights[j * l1.inputs + FEATURE_DIM..(j + 1) * l1.inputs];
            row[..t.latent_dim].iter().zip(z).map(|(w, v)| w * v).sum::<f64>()
                + row[t.latent_dim..].iter().zip(e).map(|(w, v)| w * v).sum::<f64>()
        })
        .collect()
}

/// One soft segmentation for a single latent.
pub fn predict(
    params: &SegmenterParams,
    image: &PhantomImage,
    z: &LatentSample,
    e_p: &InteractionEmbedding,
) -> Result<SoftMask> {
    params.prepare(image).predict(&z.z, e_p.values())
}

/// Element-wise [`predict`], order preserved. Runs in parallel; the result
/// does not depend on the thread count.
pub fn predict_batch(
    params: &SegmenterParams,
    image: &PhantomImage,
    samples: &[LatentSample],
    e_p: &InteractionEmbedding,
) -> Result<Vec<SoftMask>> {
    let prepared = params.prepare(image);
    samples.par_iter().map(|s| prepared.predict(&s.z, e_p.values())).collect()
}

/// Per-pixel mean of the soft masks, and the strict-majority vote of their
/// binarized forms (a pixel is foreground iff more than half the masks have
/// `soft >= 0.5`; an exact tie is background).
pub fn aggregate_majority(masks: &[SoftMask]) -> Result<(SoftMask, BinaryMask)> {
    let first = masks.first().ok_or_else(|| invalid("cannot aggregate zero masks"))?;
    let (h, w) = first.shape();
    if masks.iter().any(|m| m.shape() != (h, w)) {
        return Err(Error::ShapeMismatch("aggregated masks differ in shape".into()));
    }
    let n = masks.len();
    let mut mean = vec![0.0; h * w];
    let mut votes = vec![0usize; h * w];
    for m in masks {
        for ((acc, v), &p) in mean.iter_mut().zip(votes.iter_mut()).zip(m.data()) {
            *acc += p;
            if p >= 0.5 {
                *v += 1;
            }
        }
    }
    let inv = 1.0 / n as f64;
    let mean = mean.into_iter().map(|v| (v * inv).clamp(0.0, 1.0)).collect();
    let majority = votes.into_iter().map(|v| 2 * v > n).collect();
    Ok((SoftMask::from_raw(h, w, mean), BinaryMask::new(h, w, majority)?))
}

/// `pixel = soft >= threshold`.
pub fn binarize(soft: &SoftMask, threshold: f64) -> BinaryMask {
    BinaryMask::new(soft.height(), soft.width(), soft.data().iter().map(|&p| p >= threshold).collect())
        .expect("soft mask buffer matches its shape")
}

/// Order-independent checksum of a soft mask (values quantized to 1e-12).
pub fn mask_checksum(mask: &SoftMask) -> u64 {
    mask.data()
        .iter()
        .enumerate()
        .fold(0u64, |acc, (i, &v)| derive_seed(acc, &[i as u64, (v * 1e12).round() as u64]))
}
