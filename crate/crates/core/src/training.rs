//! Two-stage alternating training.
//!
//! The segmentation stage fits the segmenter with cross-entropy between the
//! mean soft prediction of `S` sampled candidates and the fused mask (the
//! majority vote itself has no gradient). The adaptation stage keeps the
//! segmenter frozen and plays feedback rounds against a simulated clinician:
//! each round adapts the episode mixture, then
//!
//! * cross-entropy of the post-adaptation mean prediction trains the encoder,
//!   the adaptive blocks and the episode means/log-variances, and
//! * the MSE between component responsibilities of the post-adaptation
//!   aggregate and of the target trains the adaptive blocks (through the
//!   weight logits they emit) and the episode weight logits.
//!
//! All updates descend their loss.

use std::io::Write;

use rand::seq::SliceRandom;
use rand::Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::adapter::{adapt_backward, adapt_trace, encode_feedback, encode_feedback_trace, encoder_backward, InteractionEmbedding};
use crate::clinician::select_proposal;
use crate::error::{invalid, Error, Result};
use crate::mask::{BinaryMask, SoftMask};
use crate::mixture::{softmax, softmax_floored, GaussianMixture, ReparamDraw};
use crate::model::{check_architecture, Architecture, Checkpoint, ModelParams};
use crate::nn::Mlp;
use crate::optim::{step_decay, Adam};
use crate::phantom::{PhantomCase, PhantomDataset};
use crate::proposals::{initial_feedback, FeedbackSignal, DEFAULT_DIFF_QUANTILE};
use crate::rng::{derive_seed, rng_from_seed, stream};
use crate::segmenter::{aggregate_majority, SegmenterParams};
use crate::session::{feedback_for, predict_step, AdaptationMode};

/// Probabilities are clamped to `[CE_EPS, 1 - CE_EPS]` before the log.
pub const CE_EPS: f64 = 1e-7;

/// Pixel-mean binary cross-entropy.
pub fn cross_entropy_loss(pred: &SoftMask, target: &BinaryMask) -> Result<f64> {
    Ok(ce_and_grad(pred, target)?.0)
}

/// Loss and its gradient with respect to each predicted probability (zero
/// where the clamp is active).
fn ce_and_grad(pred: &SoftMask, target: &BinaryMask) -> Result<(f64, Vec<f64>)> {
    if pred.shape() != target.shape() {
        return Err(Error::ShapeMismatch(format!("prediction {:?} vs target {:?}", pred.shape(), target.shape())));
    }
    let inv = 1.0 / pred.len() as f64;
    let mut loss = 0.0;
    let mut grad = Vec::with_capacity(pred.len());
    for (&p, &y) in pred.data().iter().zip(target.data()) {
        let pc = p.clamp(CE_EPS, 1.0 - CE_EPS);
        let inside = p > CE_EPS && p < 1.0 - CE_EPS;
        if y {
            loss -= pc.ln();
            grad.push(if inside { -inv / pc } else { 0.0 });
        } else {
            loss -= (1.0 - pc).ln();
            grad.push(if inside { inv / (1.0 - pc) } else { 0.0 });
        }
    }
    Ok((loss * inv, grad))
}

/// A point on the probability simplex over mixture components.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(transparent)]
pub struct ResponsibilityTarget(Vec<f64>);

impl ResponsibilityTarget {
    pub fn new(values: Vec<f64>) -> Result<Self> {
        let total: f64 = values.iter().sum();
        if values.is_empty() || values.iter().any(|v| !(*v >= 0.0)) || (total - 1.0).abs() > 1e-9 {
            return Err(invalid("responsibilities must be a non-empty simplex vector"));
        }
        Ok(Self(values))
    }

    pub fn values(&self) -> &[f64] {
        &self.0
    }
}

/// `-CE(predict(mu_i), mask) / temperature` for every component.
pub fn component_log_scores(
    gmm: &GaussianMixture,
    mask: &BinaryMask,
    segmenter: &SegmenterParams,
    image: &crate::phantom::PhantomImage,
    e_p: &InteractionEmbedding,
    temperature: f64,
) -> Result<Vec<f64>> {
    if !(temperature.is_finite() && temperature > 0.0) {
        return Err(invalid(format!("temperature must be positive, got {temperature}")));
    }
    let prepared = segmenter.prepare(image);
    (0..gmm.components())
        .map(|i| {
            let pred = prepared.predict(gmm.mean(i), e_p.values())?;
            Ok(-cross_entropy_loss(&pred, mask)? / temperature)
        })
        .collect()
}

/// `P(I = i | mask)`: mixture weights times per-component prediction
/// quality `exp(-CE / temperature)`, normalized.
pub fn responsibility_target(
    gmm: &GaussianMixture,
    mask: &BinaryMask,
    segmenter: &SegmenterParams,
    image: &crate::phantom::PhantomImage,
    e_p: &InteractionEmbedding,
    temperature: f64,
) -> Result<ResponsibilityTarget> {
    let scores = component_log_scores(gmm, mask, segmenter, image, e_p, temperature)?;
    Ok(ResponsibilityTarget(posterior(&gmm.weight_logits(), &scores)))
}

fn posterior(logits: &[f64], log_scores: &[f64]) -> Vec<f64> {
    let joint: Vec<f64> = logits.iter().zip(log_scores).map(|(a, b)| a + b).collect();
    softmax(&joint)
}

/// Mean of squared differences.
pub fn mse(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y).powi(2)).sum::<f64>() / a.len() as f64
}

/// Gradient of `mse(r, g)` with respect to `l`, where `r = softmax(l + c)`
/// and `g`, `c` are constants.
pub fn mse_logit_grad(r: &[f64], g: &[f64]) -> Vec<f64> {
    let scale = 2.0 / r.len() as f64;
    let weighted: f64 = r.iter().zip(g).map(|(ri, gi)| (ri - gi) * ri).sum();
    r.iter().zip(g).map(|(ri, gi)| scale * ri * ((ri - gi) - weighted)).collect()
}

/// One descent step on `mse(pred, gt)` over the weight logits; `pred` is
/// read as the posterior under the current weights. Returns the updated
/// mixture and the pre-step loss.
pub fn weight_step(
    gmm: &GaussianMixture,
    pred: &ResponsibilityTarget,
    gt: &ResponsibilityTarget,
    lr: f64,
) -> Result<(GaussianMixture, f64)> {
    let m = gmm.components();
    if pred.0.len() != m || gt.0.len() != m {
        return Err(Error::ShapeMismatch(format!("responsibilities of length {} / {} for M={m}", pred.0.len(), gt.0.len())));
    }
    if !(lr.is_finite() && lr >= 0.0) {
        return Err(invalid("learning rate must be non-negative"));
    }
    let loss = mse(&pred.0, &gt.0);
    if lr == 0.0 {
        return Ok((gmm.clone(), loss));
    }
    let grad = mse_logit_grad(&pred.0, &gt.0);
    let logits: Vec<f64> = gmm.weight_logits().iter().zip(&grad).map(|(l, g)| l - lr * g).collect();
    Ok((gmm.with_weights(softmax_floored(&logits))?, loss))
}

/// The posterior `pred` would become after shifting the logits by `shift`.
pub fn reweight(pred: &ResponsibilityTarget, shift: &[f64]) -> ResponsibilityTarget {
    let logits: Vec<f64> = pred.0.iter().zip(shift).map(|(r, s)| r.ln() + s).collect();
    ResponsibilityTarget(softmax(&logits))
}

/// Latent draws for a training step.
#[derive(Debug, Clone, Copy)]
pub enum Draws<'a> {
    /// `count` draws from the relevant mixture with this seed.
    Seeded { seed: u64, count: usize },
    /// Fixed component choices and noise (gradient checks).
    Fixed(&'a [ReparamDraw]),
}

impl Draws<'_> {
    fn resolve(&self, gmm: &GaussianMixture) -> Result<Vec<ReparamDraw>> {
        match self {
            Draws::Seeded { seed, count } => gmm.draw_reparam(*count, *seed),
            Draws::Fixed(d) => {
                if d.iter().any(|d| d.component >= gmm.components() || d.eps.len() != gmm.dim()) {
                    return Err(Error::ShapeMismatch("fixed draws do not fit the mixture".into()));
                }
                Ok(d.to_vec())
            }
        }
    }
}

/// Loss and segmenter-parameter gradient of the segmentation stage.
pub fn pseg_gradient(
    segmenter: &SegmenterParams,
    image: &crate::phantom::PhantomImage,
    target: &BinaryMask,
    gmm: &GaussianMixture,
    e_p: &InteractionEmbedding,
    draws: Draws<'_>,
) -> Result<(f64, Mlp)> {
    if !segmenter.is_trainable() {
        return Err(Error::InvalidOperation("the analytic segmenter has no trainable parameters".into()));
    }
    let draws = draws.resolve(gmm)?;
    let zs: Vec<Vec<f64>> = draws.iter().map(|d| gmm.realize(d).z).collect();
    let prepared = segmenter.prepare(image);
    let softs = zs.iter().map(|z| prepared.predict(z, e_p.values())).collect::<Result<Vec<_>>>()?;
    let (mean, _) = aggregate_majority(&softs)?;
    let (loss, d_mean) = ce_and_grad(&mean, target)?;
    let inv = 1.0 / softs.len() as f64;
    let d_soft: Vec<Vec<f64>> = vec![d_mean.iter().map(|g| g * inv).collect(); softs.len()];
    let grads = prepared.backward(&zs, e_p.values(), &softs, &d_soft)?;
    Ok((loss, grads.d_params.expect("trainable head reports parameter gradients")))
}

/// Plain gradient step of size `lr` on the segmentation loss.
pub fn pseg_step(
    segmenter: &mut SegmenterParams,
    image: &crate::phantom::PhantomImage,
    target: &BinaryMask,
    gmm: &GaussianMixture,
    e_p: &InteractionEmbedding,
    draws: Draws<'_>,
    lr: f64,
) -> Result<f64> {
    let (loss, grads) = pseg_gradient(segmenter, image, target, gmm, e_p, draws)?;
    if let SegmenterParams::Trainable(t) = segmenter {
        t.net.add_scaled(&grads, -lr);
    }
    Ok(loss)
}

/// One adaptation round's inputs.
#[derive(Debug, Clone)]
pub struct PafContext<'a> {
    pub image: &'a crate::phantom::PhantomImage,
    pub target: &'a BinaryMask,
    /// Episode mixture before this round's update.
    pub gmm: &'a GaussianMixture,
    pub signal: FeedbackSignal,
    pub adapt_step: f64,
    pub variance_floor: f64,
    pub mode: AdaptationMode,
    pub temperature: f64,
}

/// Stop-gradient quantities of the responsibility loss.
#[derive(Debug, Clone, PartialEq)]
pub struct FrozenTargets {
    /// Component log-scores of the post-adaptation aggregate.
    pub pred_log_scores: Vec<f64>,
    pub gt: Vec<f64>,
}

#[derive(Debug, Clone)]
pub struct PafEval {
    pub ce: f64,
    pub mse: f64,
    pub e_p: InteractionEmbedding,
    pub adapted: GaussianMixture,
    pub pred: ResponsibilityTarget,
    pub gt: ResponsibilityTarget,
    pub frozen: FrozenTargets,
}

/// Gradients of `ce + mse` for one round.
#[derive(Debug, Clone)]
pub struct PafGrads {
    pub encoder: Mlp,
    pub adapter: Mlp,
    /// With respect to the pre-update episode parameters.
    pub d_means: Vec<f64>,
    pub d_log_variances: Vec<f64>,
    pub d_weight_logits: Vec<f64>,
    /// With respect to the post-update means and log-variances.
    pub d_adapted_means: Vec<f64>,
    pub d_adapted_log_variances: Vec<f64>,
    /// `d mse / d` post-update weight logits (drives [`weight_step`]).
    pub d_adapted_logits: Vec<f64>,
}

/// Forward and backward pass of one adaptation round. With `frozen` the
/// responsibility targets are taken as given instead of recomputed.
pub fn paf_evaluate(model: &ModelParams, ctx: &PafContext<'_>, draws: Draws<'_>, frozen: Option<&FrozenTargets>) -> Result<(PafEval, PafGrads)> {
    let (m, d) = (ctx.gmm.components(), ctx.gmm.dim());
    let (e_p, enc_trace) = encode_feedback_trace(&ctx.signal, ctx.image.height, ctx.image.width, &model.encoder)?;
    let (mut delta, ada_trace) = adapt_trace(ctx.gmm, &e_p, &model.adapter)?;
    ctx.mode.mask(&mut delta);

    let s = ctx.adapt_step;
    let means: Vec<f64> = ctx.gmm.means_flat().iter().zip(&delta.d_means).map(|(a, b)| a + s * b).collect();
    let log_vars: Vec<f64> = ctx.gmm.log_variances().iter().zip(&delta.d_log_variances).map(|(a, b)| a + s * b).collect();
    let logits: Vec<f64> = ctx.gmm.weight_logits().iter().zip(&delta.d_weight_logits).map(|(a, b)| a + s * b).collect();
    let adapted = GaussianMixture::from_unconstrained(m, d, means, &log_vars, &logits, ctx.variance_floor)?;

    // cross-entropy of the mean prediction, reparameterized
    let draws = draws.resolve(&adapted)?;
    let zs: Vec<Vec<f64>> = draws.iter().map(|dr| adapted.realize(dr).z).collect();
    let prepared = model.segmenter.prepare(ctx.image);
    let softs = zs.iter().map(|z| prepared.predict(z, e_p.values())).collect::<Result<Vec<_>>>()?;
    let (mean, majority) = aggregate_majority(&softs)?;
    let (ce, d_mean) = ce_and_grad(&mean, ctx.target)?;
    let inv = 1.0 / softs.len() as f64;
    let d_soft = vec![d_mean.iter().map(|g| g * inv).collect::<Vec<_>>(); softs.len()];
    let seg = prepared.backward(&zs, e_p.values(), &softs, &d_soft)?;

    let mut d_means_new = vec![0.0; m * d];
    let mut d_lv_new = vec![0.0; m * d];
    for ((dr, dz), _) in draws.iter().zip(&seg.d_z).zip(&zs) {
        let c = dr.component;
        for k in 0..d {
            let idx = c * d + k;
            d_means_new[idx] += dz[k];
            if log_vars[idx].exp() > ctx.variance_floor {
                d_lv_new[idx] += dz[k] * dr.eps[k] * 0.5 * adapted.variance(c)[k].sqrt();
            }
        }
    }

    // responsibility MSE with stop-gradient targets
    let frozen = match frozen {
        Some(f) => f.clone(),
        None => FrozenTargets {
            pred_log_scores: component_log_scores(&adapted, &majority, &model.segmenter, ctx.image, &e_p, ctx.temperature)?,
            gt: responsibility_target(ctx.gmm, ctx.target, &model.segmenter, ctx.image, &e_p, ctx.temperature)?.0,
        },
    };
    let r = posterior(&logits, &frozen.pred_log_scores);
    let mse_loss = mse(&r, &frozen.gt);
    let d_logits_new = mse_logit_grad(&r, &frozen.gt);

    let mut d_delta: Vec<f64> = d_means_new
        .iter()
        .chain(&d_lv_new)
        .chain(&d_logits_new)
        .map(|g| g * s)
        .collect();
    if !ctx.mode.updates_means() {
        d_delta[..2 * m * d].iter_mut().for_each(|g| *g = 0.0);
    }
    if !ctx.mode.updates_weights() {
        d_delta[2 * m * d..].iter_mut().for_each(|g| *g = 0.0);
    }
    let ada = adapt_backward(&model.adapter, &ada_trace, &d_delta);
    let d_e: Vec<f64> = ada.d_e.iter().zip(&seg.d_e).map(|(a, b)| a + b).collect();
    let encoder = encoder_backward(&model.encoder, &enc_trace, &d_e);

    let grads = PafGrads {
        encoder,
        adapter: ada.params,
        d_means: d_means_new.iter().zip(&ada.d_means).map(|(a, b)| a + b).collect(),
        d_log_variances: d_lv_new.iter().zip(&ada.d_log_variances).map(|(a, b)| a + b).collect(),
        d_weight_logits: d_logits_new.iter().zip(&ada.d_weight_logits).map(|(a, b)| a + b).collect(),
        d_adapted_means: d_means_new,
        d_adapted_log_variances: d_lv_new,
        d_adapted_logits: d_logits_new,
    };
    let eval = PafEval {
        ce,
        mse: mse_loss,
        e_p,
        pred: ResponsibilityTarget(r),
        gt: ResponsibilityTarget(frozen.gt.clone()),
        adapted,
        frozen,
    };
    Ok((eval, grads))
}

/// One adaptation round with plain gradient steps of size `lr` on the
/// encoder, the adaptive blocks and the episode mixture. Returns the next
/// episode mixture and the round's `(ce, mse)`.
pub fn paf_step(
    model: &mut ModelParams,
    ctx: &PafContext<'_>,
    draws: Draws<'_>,
    lr: f64,
) -> Result<(GaussianMixture, InteractionEmbedding, f64, f64)> {
    let frozen_segmenter = serde_json::to_vec(&model.segmenter)?;
    let (eval, grads) = paf_evaluate(model, ctx, draws, None)?;
    model.encoder.net.add_scaled(&grads.encoder, -lr);
    model.adapter.net.add_scaled(&grads.adapter, -lr);
    let next = episode_update(&eval, &grads, lr, ctx.variance_floor)?;
    if serde_json::to_vec(&model.segmenter)? != frozen_segmenter {
        return Err(Error::InvariantViolation("segmenter changed during the adaptation stage".into()));
    }
    Ok((next, eval.e_p, eval.ce, eval.mse))
}

/// Gradient step on the episode mixture after adaptation: means and
/// log-variances descend their gradient, weights take a [`weight_step`].
fn episode_update(eval: &PafEval, grads: &PafGrads, lr: f64, variance_floor: f64) -> Result<GaussianMixture> {
    let a = &eval.adapted;
    if lr == 0.0 {
        return Ok(a.clone());
    }
    let means: Vec<f64> = a.means_flat().iter().zip(&grads.d_adapted_means).map(|(m, g)| m - lr * g).collect();
    let log_vars: Vec<f64> = a.log_variances().iter().zip(&grads.d_adapted_log_variances).map(|(v, g)| v - lr * g).collect();
    let moved = GaussianMixture::from_unconstrained(a.components(), a.dim(), means, &log_vars, &a.weight_logits(), variance_floor)?
        .with_weights(a.weights().to_vec())?;
    Ok(weight_step(&moved, &eval.pred, &eval.gt, lr)?.0)
}

/// Who the adaptation stage aligns to in each episode.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PafTarget {
    /// The fused mask of all annotators.
    Fused,
    /// One annotator drawn at random per episode.
    #[default]
    RandomClinician,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub learning_rate: f64,
    pub lr_decay_factor: f64,
    pub lr_decay_period: usize,
    pub epochs: usize,
    pub batch_size: usize,
    /// Candidates per proposal round (`N`).
    pub candidates: usize,
    /// Proposals per round (`K`).
    pub proposals: usize,
    /// Latent draws per loss evaluation.
    pub train_samples: usize,
    /// Feedback rounds per adaptation episode.
    pub rounds: usize,
    pub adapt_step: f64,
    pub responsibility_temperature: f64,
    pub variance_floor: f64,
    pub diff_quantile: f64,
    pub mode: AdaptationMode,
    pub paf_target: PafTarget,
    pub arch: Architecture,
    pub mixture_seed: u64,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            learning_rate: 1e-4,
            lr_decay_factor: 0.5,
            lr_decay_period: 20,
            epochs: 10,
            batch_size: 4,
            candidates: 48,
            proposals: 4,
            train_samples: 8,
            rounds: 3,
            adapt_step: 0.1,
            responsibility_temperature: 0.1,
            variance_floor: 1e-6,
            diff_quantile: DEFAULT_DIFF_QUANTILE,
            mode: AdaptationMode::Full,
            paf_target: PafTarget::RandomClinician,
            arch: Architecture::default(),
            mixture_seed: 0,
            seed: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        check_architecture(&self.arch)?;
        if !(self.learning_rate.is_finite() && self.learning_rate > 0.0) {
            return Err(invalid("learning rate must be positive"));
        }
        if !(self.lr_decay_factor > 0.0 && self.lr_decay_factor <= 1.0) {
            return Err(invalid("decay factor must lie in (0, 1]"));
        }
        if self.batch_size == 0 || self.train_samples == 0 || self.rounds == 0 || self.lr_decay_period == 0 {
            return Err(invalid("batch size, sample count, rounds and decay period must be positive"));
        }
        if self.proposals == 0 || self.candidates < self.proposals {
            return Err(invalid("need N >= K >= 1"));
        }
        if !(self.responsibility_temperature > 0.0 && self.adapt_step > 0.0 && self.variance_floor > 0.0) {
            return Err(invalid("temperature, adapt step and variance floor must be positive"));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LossRow {
    pub step: usize,
    pub epoch: usize,
    pub lr: f64,
    pub pseg_ce: Option<f64>,
    pub paf_ce: Option<f64>,
    pub paf_mse: Option<f64>,
}

#[derive(Debug, Clone)]
pub struct TrainReport {
    pub checkpoint: Checkpoint,
    pub losses: Vec<LossRow>,
}

impl TrainReport {
    /// Mean of one loss column per epoch (epochs without values skipped).
    pub fn epoch_means(&self, column: fn(&LossRow) -> Option<f64>) -> Vec<f64> {
        let epochs = self.losses.iter().map(|r| r.epoch + 1).max().unwrap_or(0);
        (0..epochs)
            .filter_map(|e| {
                let vals: Vec<f64> = self.losses.iter().filter(|r| r.epoch == e).filter_map(column).collect();
                (!vals.is_empty()).then(|| vals.iter().sum::<f64>() / vals.len() as f64)
            })
            .collect()
    }
}

pub fn write_losses_csv<W: Write>(out: W, rows: &[LossRow]) -> Result<()> {
    let mut w = csv::Writer::from_writer(out);
    w.write_record(["step", "epoch", "lr", "pseg_ce", "paf_ce", "paf_mse"])?;
    let opt = |v: Option<f64>| v.map_or(String::new(), |x| format!("{x:.8}"));
    for r in rows {
        w.write_record([r.step.to_string(), r.epoch.to_string(), format!("{:e}", r.lr), opt(r.pseg_ce), opt(r.paf_ce), opt(r.paf_mse)])?;
    }
    w.flush()?;
    Ok(())
}

/// Trains from a fresh initialization.
pub fn train(config: &TrainConfig, dataset: &PhantomDataset) -> Result<TrainReport> {
    config.validate()?;
    let params = ModelParams::init(&config.arch, config.seed);
    train_from(params, config, dataset)
}

struct Optimizers {
    segmenter: Option<Adam>,
    encoder: Adam,
    adapter: Adam,
}

/// Continues training `params`.
pub fn train_from(mut params: ModelParams, config: &TrainConfig, dataset: &PhantomDataset) -> Result<TrainReport> {
    config.validate()?;
    params.validate()?;
    if dataset.is_empty() {
        return Err(invalid("training needs at least one case"));
    }
    if dataset.clinicians.is_empty() {
        return Err(invalid("training needs at least one annotator"));
    }
    let fused: Vec<BinaryMask> = dataset
        .cases
        .iter()
        .map(|c| crate::phantom::fuse_annotations(&c.annotations.masks.values().cloned().collect::<Vec<_>>(), None))
        .collect::<Result<_>>()?;
    let init_gmm = GaussianMixture::init_uniform(
        params.components(),
        params.latent_dim(),
        derive_seed(config.mixture_seed, &[stream::MIXTURE_INIT]),
    )?;
    let mut opt = Optimizers {
        segmenter: match &params.segmenter {
            SegmenterParams::Trainable(t) => Some(Adam::new(t.net.param_count())),
            SegmenterParams::Analytic(_) => None,
        },
        encoder: Adam::new(params.encoder.net.param_count()),
        adapter: Adam::new(params.adapter.net.param_count()),
    };
    let mut order: Vec<usize> = (0..dataset.len()).collect();
    let mut losses = Vec::new();
    let mut step = 0;
    for epoch in 0..config.epochs {
        let lr = step_decay(config.learning_rate, config.lr_decay_factor, config.lr_decay_period, epoch);
        order.shuffle(&mut rng_from_seed(derive_seed(config.seed, &[stream::TRAIN, epoch as u64])));
        for batch in order.chunks(config.batch_size) {
            let pseg_ce = match opt.segmenter.as_mut() {
                Some(adam) => Some(pseg_batch(&mut params, adam, dataset, &fused, batch, &init_gmm, config, epoch, lr)?),
                None => None,
            };
            let paf = if config.mode == AdaptationMode::Disabled {
                None
            } else {
                Some(paf_batch(&mut params, &mut opt, dataset, &fused, batch, &init_gmm, config, epoch, lr)?)
            };
            losses.push(LossRow { step, epoch, lr, pseg_ce, paf_ce: paf.map(|p| p.0), paf_mse: paf.map(|p| p.1) });
            step += 1;
        }
    }
    params.validate()?;
    let echo = serde_json::to_value(config)?;
    Ok(TrainReport { checkpoint: Checkpoint::new(params, config.seed, echo), losses })
}

fn cold_start(params: &ModelParams, case: &PhantomCase, reference: &BinaryMask, seed: u64) -> Result<InteractionEmbedding> {
    let signal = initial_feedback(&case.image, seed, Some(reference));
    encode_feedback(&signal, case.image.height, case.image.width, &params.encoder)
}

fn sum_grads(parts: Vec<Mlp>) -> Option<Mlp> {
    let mut it = parts.into_iter();
    let mut total = it.next()?;
    it.for_each(|g| total.add_scaled(&g, 1.0));
    Some(total)
}

fn adam_update(net: &mut Mlp, adam: &mut Adam, grad_sum: &Mlp, count: f64, lr: f64) -> Result<()> {
    let mut p = net.params();
    let g: Vec<f64> = grad_sum.params().iter().map(|v| v / count).collect();
    adam.step(&mut p, &g, lr);
    net.set_params(&p)
}

#[allow(clippy::too_many_arguments)]
fn pseg_batch(
    params: &mut ModelParams,
    adam: &mut Adam,
    dataset: &PhantomDataset,
    fused: &[BinaryMask],
    batch: &[usize],
    gmm: &GaussianMixture,
    config: &TrainConfig,
    epoch: usize,
    lr: f64,
) -> Result<f64> {
    let shared = &*params;
    let parts = batch
        .par_iter()
        .map(|&i| {
            let case = &dataset.cases[i];
            let seed = derive_seed(config.seed, &[stream::TRAIN, epoch as u64, i as u64, 0]);
            let e_p = cold_start(shared, case, &fused[i], derive_seed(seed, &[stream::INITIAL_FEEDBACK]))?;
            let draws = Draws::Seeded { seed: derive_seed(seed, &[stream::SAMPLE]), count: config.train_samples };
            pseg_gradient(&shared.segmenter, &case.image, &fused[i], gmm, &e_p, draws)
        })
        .collect::<Result<Vec<_>>>()?;
    let n = parts.len() as f64;
    let loss = parts.iter().map(|p| p.0).sum::<f64>() / n;
    let total = sum_grads(parts.into_iter().map(|p| p.1).collect()).expect("non-empty batch");
    if let SegmenterParams::Trainable(t) = &mut params.segmenter {
        adam_update(&mut t.net, adam, &total, n, lr)?;
    }
    Ok(loss)
}

struct EpisodeGrads {
    encoder: Mlp,
    adapter: Mlp,
    ce: f64,
    mse: f64,
    rounds: usize,
}

/// One adaptation episode on a case: rounds of proposals, simulated
/// selection and adaptation, with the episode mixture stepped each round.
fn paf_episode(
    params: &ModelParams,
    case: &PhantomCase,
    fused: &BinaryMask,
    init_gmm: &GaussianMixture,
    config: &TrainConfig,
    seed: u64,
    lr: f64,
) -> Result<EpisodeGrads> {
    let target = match config.paf_target {
        PafTarget::Fused => fused.clone(),
        PafTarget::RandomClinician => {
            let masks: Vec<&BinaryMask> = case.annotations.masks.values().collect();
            let pick = rng_from_seed(derive_seed(seed, &[stream::SUBSET])).random_range(0..masks.len());
            masks[pick].clone()
        }
    };
    let mut out = EpisodeGrads {
        encoder: params.encoder.net.zeros_like(),
        adapter: params.adapter.net.zeros_like(),
        ce: 0.0,
        mse: 0.0,
        rounds: 0,
    };
    let mut gmm = init_gmm.clone();
    let mut e_p = cold_start(params, case, &target, derive_seed(seed, &[stream::INITIAL_FEEDBACK]))?;
    for round in 0..config.rounds as u64 {
        let pred = predict_step(
            &gmm,
            params,
            &case.image,
            &e_p,
            config.candidates,
            config.proposals,
            derive_seed(seed, &[stream::SAMPLE, round]),
            derive_seed(seed, &[stream::KMEANS, round]),
        )?;
        let choice = select_proposal(&pred.proposals, &target)?;
        let signal = feedback_for(
            &pred.proposals[choice],
            &pred.mean_soft,
            config.diff_quantile,
            derive_seed(seed, &[stream::FEEDBACK, round]),
        )?;
        let ctx = PafContext {
            image: &case.image,
            target: &target,
            gmm: &gmm,
            signal,
            adapt_step: config.adapt_step,
            variance_floor: config.variance_floor,
            mode: config.mode,
            temperature: config.responsibility_temperature,
        };
        let draws = Draws::Seeded { seed: derive_seed(seed, &[stream::TRAIN, round]), count: config.train_samples };
        let (eval, grads) = paf_evaluate(params, &ctx, draws, None)?;
        out.encoder.add_scaled(&grads.encoder, 1.0);
        out.adapter.add_scaled(&grads.adapter, 1.0);
        out.ce += eval.ce;
        out.mse += eval.mse;
        out.rounds += 1;
        gmm = episode_update(&eval, &grads, lr, config.variance_floor)?;
        e_p = eval.e_p;
    }
    Ok(out)
}

#[allow(clippy::too_many_arguments)]
fn paf_batch(
    params: &mut ModelParams,
    opt: &mut Optimizers,
    dataset: &PhantomDataset,
    fused: &[BinaryMask],
    batch: &[usize],
    init_gmm: &GaussianMixture,
    config: &TrainConfig,
    epoch: usize,
    lr: f64,
) -> Result<(f64, f64)> {
    let frozen_segmenter = serde_json::to_vec(&params.segmenter)?;
    let shared = &*params;
    let parts = batch
        .par_iter()
        .map(|&i| {
            let seed = derive_seed(config.seed, &[stream::TRAIN, epoch as u64, i as u64, 1]);
            paf_episode(shared, &dataset.cases[i], &fused[i], init_gmm, config, seed, lr)
        })
        .collect::<Result<Vec<_>>>()?;
    let n = parts.iter().map(|p| p.rounds).sum::<usize>() as f64;
    let (ce, mse_loss) = (parts.iter().map(|p| p.ce).sum::<f64>() / n, parts.iter().map(|p| p.mse).sum::<f64>() / n);
    let (enc, ada): (Vec<Mlp>, Vec<Mlp>) = parts.into_iter().map(|p| (p.encoder, p.adapter)).unzip();
    adam_update(&mut params.encoder.net, &mut opt.encoder, &sum_grads(enc).expect("non-empty batch"), n, lr)?;
    adam_update(&mut params.adapter.net, &mut opt.adapter, &sum_grads(ada).expect("non-empty batch"), n, lr)?;
    if serde_json::to_vec(&params.segmenter)? != frozen_segmenter {
        return Err(Error::InvariantViolation("segmenter changed during the adaptation stage".into()));
    }
    Ok((ce, mse_loss))
}
