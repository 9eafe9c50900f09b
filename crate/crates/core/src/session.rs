//! One interactive episode: sample, aggregate, propose, take a selection,
//! adapt the mixture, repeat until approval or the iteration cap.

use serde::{Deserialize, Serialize};

use crate::adapter::{adapt, encode_feedback, InteractionEmbedding};
use crate::error::{invalid, Error, Result};
use crate::mask::{BinaryMask, Rle, SoftMask};
use crate::mixture::{GaussianMixture, GmmDelta};
use crate::model::ModelParams;
use crate::phantom::{generate_phantom, PhantomImage};
use crate::proposals::{
    build_proposals, diff_points, initial_feedback, sample_feedback, CorrectionProposal, FeedbackSignal, ProposalDoc,
    DEFAULT_DIFF_QUANTILE,
};
use crate::rng::{derive_seed, stream};
use crate::segmenter::{aggregate_majority, predict_batch};

pub const SESSION_DOC_VERSION: u32 = 1;

/// Which parts of the adaptive update reach the mixture.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AdaptationMode {
    /// Sampling only; the mixture never changes.
    Disabled,
    MeanVariance,
    Weights,
    #[default]
    Full,
}

impl AdaptationMode {
    pub const ALL: [AdaptationMode; 4] =
        [AdaptationMode::Disabled, AdaptationMode::MeanVariance, AdaptationMode::Weights, AdaptationMode::Full];

    pub fn name(self) -> &'static str {
        match self {
            AdaptationMode::Disabled => "random_only",
            AdaptationMode::MeanVariance => "gauss_mean_var",
            AdaptationMode::Weights => "mixture_weights",
            AdaptationMode::Full => "full",
        }
    }

    pub fn updates_means(self) -> bool {
        matches!(self, AdaptationMode::MeanVariance | AdaptationMode::Full)
    }

    pub fn updates_weights(self) -> bool {
        matches!(self, AdaptationMode::Weights | AdaptationMode::Full)
    }

    /// Zeroes the parts of `delta` this mode does not apply.
    pub fn mask(self, delta: &mut GmmDelta) {
        if !self.updates_means() {
            delta.d_means.iter_mut().chain(delta.d_log_variances.iter_mut()).for_each(|v| *v = 0.0);
        }
        if !self.updates_weights() {
            delta.d_weight_logits.iter_mut().for_each(|v| *v = 0.0);
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SessionConfig {
    /// Candidates sampled per iteration (`N`).
    pub candidates: usize,
    /// Mixture components (`M`).
    pub components: usize,
    /// Correction proposals per iteration (`K`).
    pub proposals: usize,
    pub latent_dim: usize,
    pub embed_dim: usize,
    pub max_iterations: usize,
    pub adapt_step: f64,
    pub variance_floor: f64,
    pub diff_quantile: f64,
    pub mode: AdaptationMode,
    /// Seeds the initial component layout. Kept apart from `seed` so every
    /// session of a model starts from the same layout the adapter saw in
    /// training.
    pub mixture_seed: u64,
    pub seed: u64,
}

impl Default for SessionConfig {
    fn default() -> Self {
        Self {
            candidates: 48,
            components: 16,
            proposals: 4,
            latent_dim: 8,
            embed_dim: 16,
            max_iterations: 10,
            adapt_step: 0.1,
            variance_floor: 1e-6,
            diff_quantile: DEFAULT_DIFF_QUANTILE,
            mode: AdaptationMode::Full,
            mixture_seed: 0,
            seed: 0,
        }
    }
}

impl SessionConfig {
    pub fn validate(&self) -> Result<()> {
        if self.proposals == 0 || self.candidates < self.proposals {
            return Err(invalid(format!("need N >= K >= 1, got N={} K={}", self.candidates, self.proposals)));
        }
        if self.components == 0 || self.latent_dim == 0 || self.embed_dim == 0 {
            return Err(invalid("M, D and L must be positive"));
        }
        if self.max_iterations == 0 {
            return Err(invalid("max_iterations must be at least 1"));
        }
        if !(self.adapt_step.is_finite() && self.adapt_step > 0.0) {
            return Err(invalid("adapt_step must be positive"));
        }
        if !(self.variance_floor.is_finite() && self.variance_floor > 0.0) {
            return Err(invalid("variance_floor must be positive"));
        }
        if !(0.0..1.0).contains(&self.diff_quantile) {
            return Err(invalid("diff_quantile must lie in [0, 1)"));
        }
        Ok(())
    }

    fn check_model(&self, model: &ModelParams) -> Result<()> {
        model.validate()?;
        if model.components() != self.components || model.latent_dim() != self.latent_dim || model.embed_dim() != self.embed_dim {
            return Err(Error::ShapeMismatch(format!(
                "model is (M={}, D={}, L={}), session wants (M={}, D={}, L={})",
                model.components(),
                model.latent_dim(),
                model.embed_dim(),
                self.components,
                self.latent_dim,
                self.embed_dim
            )));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SessionStatus {
    Active,
    Approved,
    Exhausted,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Action {
    Selected { cluster_id: usize },
    Approved,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct IterationRecord {
    pub iteration: usize,
    pub y_app: Rle,
    pub action: Action,
    /// Feedback derived from the selection; absent for approval.
    pub feedback: Option<FeedbackSignal>,
}

/// Output of one `step_segment`.
#[derive(Debug, Clone, PartialEq)]
pub struct Prediction {
    pub mean_soft: SoftMask,
    pub y_app: BinaryMask,
    pub proposals: Vec<CorrectionProposal>,
}

/// Where the session's image came from, enough to rebuild it exactly.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum ImageSource {
    Phantom { seed: u64, height: usize, width: usize },
    /// 8-bit grayscale, row-major; intensity = value / 255.
    Inline { height: usize, width: usize, pixels: Vec<u8> },
}

impl ImageSource {
    pub fn load(&self) -> Result<PhantomImage> {
        match self {
            ImageSource::Phantom { seed, height, width } => generate_phantom(*seed, *height, *width),
            ImageSource::Inline { height, width, pixels } => {
                if pixels.len() != height * width {
                    return Err(invalid(format!("{} pixels for a {height}x{width} image", pixels.len())));
                }
                PhantomImage::from_intensities(*height, *width, pixels.iter().map(|&p| p as f64 / 255.0).collect())
            }
        }
    }
}

#[derive(Debug, Clone)]
pub struct SessionState {
    pub config: SessionConfig,
    pub source: ImageSource,
    pub image: PhantomImage,
    /// Labels the cold-start feedback point when present.
    pub reference: Option<BinaryMask>,
    /// Current 1-based iteration `j`.
    pub iteration: usize,
    pub gmm: GaussianMixture,
    pub e_p: InteractionEmbedding,
    pub last_feedback: FeedbackSignal,
    pub prediction: Option<Prediction>,
    pub history: Vec<IterationRecord>,
    /// Mixture after each completed selection, starting with the initial
    /// one; the last entry is always `gmm`.
    pub mixtures: Vec<GaussianMixture>,
    pub status: SessionStatus,
}

impl SessionState {
    /// Fresh session: uniform mixture, cold-start feedback embedded.
    pub fn start(config: SessionConfig, source: ImageSource, reference: Option<BinaryMask>, model: &ModelParams) -> Result<Self> {
        config.validate()?;
        config.check_model(model)?;
        let image = source.load()?;
        if let Some(r) = &reference {
            if r.shape() != (image.height, image.width) {
                return Err(Error::ShapeMismatch("reference mask does not match the image".into()));
            }
        }
        let gmm = GaussianMixture::init_uniform(config.components, config.latent_dim, derive_seed(config.mixture_seed, &[stream::MIXTURE_INIT]))?;
        let signal = initial_feedback(&image, derive_seed(config.seed, &[stream::INITIAL_FEEDBACK]), reference.as_ref());
        let e_p = encode_feedback(&signal, image.height, image.width, &model.encoder)?;
        Ok(Self {
            config,
            source,
            image,
            reference,
            iteration: 1,
            mixtures: vec![gmm.clone()],
            gmm,
            e_p,
            last_feedback: signal,
            prediction: None,
            history: Vec::new(),
            status: SessionStatus::Active,
        })
    }

    fn ensure_active(&self) -> Result<()> {
        match self.status {
            SessionStatus::Active => Ok(()),
            s => Err(Error::InvalidState(format!("session is {s:?}"))),
        }
    }

    /// Samples `N` candidates, aggregates them and builds `K` proposals.
    /// Calling it twice in one iteration returns the cached result.
    pub fn step_segment(&mut self, model: &ModelParams) -> Result<&Prediction> {
        self.ensure_active()?;
        if self.prediction.is_none() {
            let j = self.iteration as u64;
            let pred = predict_step(
                &self.gmm,
                model,
                &self.image,
                &self.e_p,
                self.config.candidates,
                self.config.proposals,
                derive_seed(self.config.seed, &[stream::SAMPLE, j]),
                derive_seed(self.config.seed, &[stream::KMEANS, j]),
            )?;
            self.prediction = Some(pred);
        }
        Ok(self.prediction.as_ref().expect("prediction just set"))
    }

    /// Turns the chosen proposal into feedback and adapts the mixture.
    pub fn apply_selection(&mut self, choice: usize, model: &ModelParams) -> Result<()> {
        self.ensure_active()?;
        let pred = self
            .prediction
            .as_ref()
            .ok_or_else(|| Error::InvalidOperation("selection before step_segment in this iteration".into()))?;
        let chosen = pred
            .proposals
            .get(choice)
            .ok_or_else(|| invalid(format!("cluster_id {choice} outside [0, {})", pred.proposals.len())))?;
        let j = self.iteration as u64;
        let signal = feedback_for(chosen, &pred.mean_soft, self.config.diff_quantile, derive_seed(self.config.seed, &[stream::FEEDBACK, j]))?;
        let e_p = encode_feedback(&signal, self.image.height, self.image.width, &model.encoder)?;
        let gmm = if self.config.mode == AdaptationMode::Disabled {
            self.gmm.clone()
        } else {
            let mut delta = adapt(&self.gmm, &e_p, &model.adapter)?;
            self.config.mode.mask(&mut delta);
            self.gmm.apply_delta(&delta, self.config.adapt_step, self.config.variance_floor)?
        };
        gmm.check_invariants(self.config.variance_floor)?;

        self.history.push(IterationRecord {
            iteration: self.iteration,
            y_app: pred.y_app.to_rle(),
            action: Action::Selected { cluster_id: choice },
            feedback: Some(signal),
        });
        self.gmm = gmm;
        self.e_p = e_p;
        self.last_feedback = signal;
        self.prediction = None;
        self.mixtures.push(self.gmm.clone());
        if self.history.len() >= self.config.max_iterations {
            self.status = SessionStatus::Exhausted;
        } else {
            self.iteration += 1;
        }
        Ok(())
    }

    /// Accepts the current aggregate; the session is frozen afterwards.
    pub fn approve(&mut self) -> Result<BinaryMask> {
        self.ensure_active()?;
        let pred = self
            .prediction
            .as_ref()
            .ok_or_else(|| Error::InvalidOperation("nothing to approve before step_segment".into()))?;
        let y_app = pred.y_app.clone();
        self.history.push(IterationRecord {
            iteration: self.iteration,
            y_app: y_app.to_rle(),
            action: Action::Approved,
            feedback: None,
        });
        self.status = SessionStatus::Approved;
        Ok(y_app)
    }

    /// The approved mask, if any.
    pub fn final_mask(&self) -> Option<Result<BinaryMask>> {
        match (self.status, self.history.last()) {
            (SessionStatus::Approved, Some(r)) => Some(r.y_app.decode()),
            _ => None,
        }
    }

    pub fn to_doc(&self, model_hash: &str) -> SessionDoc {
        SessionDoc {
            version: SESSION_DOC_VERSION,
            config: self.config.clone(),
            image: self.source.clone(),
            reference: self.reference.as_ref().map(BinaryMask::to_rle),
            model_hash: model_hash.to_string(),
            mixtures: self.mixtures.clone(),
            history: self.history.clone(),
            status: self.status,
        }
    }
}

/// Samples `n` candidates, aggregates them and builds `k` proposals.
#[allow(clippy::too_many_arguments)]
pub fn predict_step(
    gmm: &GaussianMixture,
    model: &ModelParams,
    image: &PhantomImage,
    e_p: &InteractionEmbedding,
    n: usize,
    k: usize,
    sample_seed: u64,
    kmeans_seed: u64,
) -> Result<Prediction> {
    let samples = gmm.sample(n, sample_seed)?;
    let candidates = predict_batch(&model.segmenter, image, &samples, e_p)?;
    let (mean_soft, y_app) = aggregate_majority(&candidates)?;
    let proposals = build_proposals(&candidates, &y_app, k, kmeans_seed)?;
    Ok(Prediction { mean_soft, y_app, proposals })
}

/// The point-and-label signal implied by choosing `chosen`.
pub fn feedback_for(chosen: &CorrectionProposal, mean_soft: &SoftMask, quantile: f64, seed: u64) -> Result<FeedbackSignal> {
    let pdiff = diff_points(&chosen.representative_soft, mean_soft, quantile)?;
    sample_feedback(&pdiff, &chosen.representative_binary, seed)
}

/// Persisted session: everything needed to replay it exactly.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SessionDoc {
    pub version: u32,
    pub config: SessionConfig,
    pub image: ImageSource,
    pub reference: Option<Rle>,
    pub model_hash: String,
    pub mixtures: Vec<GaussianMixture>,
    pub history: Vec<IterationRecord>,
    pub status: SessionStatus,
}

/// Serializable snapshot of a proposal set (wire form).
pub fn proposal_docs(pred: &Prediction) -> Vec<ProposalDoc> {
    pred.proposals.iter().map(ProposalDoc::from).collect()
}

impl SessionDoc {
    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let doc: SessionDoc = serde_json::from_str(text)?;
        if doc.version != SESSION_DOC_VERSION {
            return Err(Error::Decode(format!("unsupported session document version {}", doc.version)));
        }
        Ok(doc)
    }

    /// Re-runs the recorded choices against `model`, checking every
    /// aggregate and mixture against the record. Returns the rebuilt state.
    pub fn replay(&self, model: &ModelParams) -> Result<SessionState> {
        let hash = model.content_hash();
        if hash != self.model_hash {
            return Err(Error::InvalidState(format!("document was recorded with model {}, got {hash}", self.model_hash)));
        }
        let reference = self.reference.as_ref().map(Rle::decode).transpose()?;
        let mut state = SessionState::start(self.config.clone(), self.image.clone(), reference, model)?;
        for record in &self.history {
            let pred = state.step_segment(model)?;
            if pred.y_app.to_rle() != record.y_app {
                return Err(Error::InvariantViolation(format!("iteration {} aggregate differs on replay", record.iteration)));
            }
            match record.action {
                Action::Selected { cluster_id } => state.apply_selection(cluster_id, model)?,
                Action::Approved => {
                    state.approve()?;
                }
            }
            if record.feedback.is_some() && state.history.last().and_then(|r| r.feedback) != record.feedback {
                return Err(Error::InvariantViolation(format!("iteration {} feedback differs on replay", record.iteration)));
            }
        }
        if state.mixtures != self.mixtures || state.status != self.status {
            return Err(Error::InvariantViolation("mixture trajectory or status differs on replay".into()));
        }
        Ok(state)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::adapter::AdaptiveBlockParams;
    use crate::model::{Architecture, ModelParams};

    fn small() -> (SessionConfig, ModelParams) {
        let arch = Architecture { components: 4, latent_dim: 3, embed_dim: 5, adapter_hidden: 8, encoder_hidden: 8, adapter_output_scale: 1.0, ..Default::default() };
        let cfg = SessionConfig { candidates: 12, components: 4, proposals: 3, latent_dim: 3, embed_dim: 5, max_iterations: 3, seed: 9, ..Default::default() };
        (cfg, ModelParams::init(&arch, 2))
    }

    fn phantom() -> ImageSource {
        ImageSource::Phantom { seed: 4, height: 24, width: 24 }
    }

    #[test]
    fn default_config_matches_published_sizes() {
        let c = SessionConfig::default();
        assert_eq!((c.candidates, c.components, c.proposals), (48, 16, 4));
        c.validate().unwrap();
        assert!(SessionConfig { proposals: 0, ..c.clone() }.validate().is_err());
        assert!(SessionConfig { candidates: 3, ..c.clone() }.validate().is_err());
        assert!(SessionConfig { max_iterations: 0, ..c }.validate().is_err());
    }

    #[test]
    fn fresh_sessions_are_identical() {
        let (cfg, model) = small();
        let a = SessionState::start(cfg.clone(), phantom(), None, &model).unwrap();
        let b = SessionState::start(cfg, phantom(), None, &model).unwrap();
        assert!(a.history.is_empty());
        assert_eq!(a.gmm, b.gmm);
        assert_eq!(a.e_p, b.e_p);
        assert_eq!(a.status, SessionStatus::Active);
        assert_eq!(a.iteration, 1);
    }

    #[test]
    fn step_produces_k_proposals_and_is_reproducible() {
        let (cfg, model) = small();
        let mut a = SessionState::start(cfg.clone(), phantom(), None, &model).unwrap();
        let mut b = SessionState::start(cfg, phantom(), None, &model).unwrap();
        let pa = a.step_segment(&model).unwrap().clone();
        assert_eq!(pa.proposals.len(), 3);
        assert_eq!(&pa, b.step_segment(&model).unwrap());
        for p in &pa.proposals {
            assert_eq!(p.diff, crate::mask::SignedDiff::between(&p.representative_binary, &pa.y_app).unwrap());
        }
    }

    #[test]
    fn zero_adapter_leaves_mixture_unchanged() {
        let (cfg, mut model) = small();
        model.adapter = AdaptiveBlockParams::zeros(4, 3, 5, 8);
        let mut s = SessionState::start(cfg, phantom(), None, &model).unwrap();
        let before = s.gmm.clone();
        s.step_segment(&model).unwrap();
        s.apply_selection(1, &model).unwrap();
        assert_eq!(s.gmm, before);
        assert_eq!(s.iteration, 2);
        assert_eq!(s.history.len(), 1);
    }

    #[test]
    fn cap_and_ordering_rules() {
        let (cfg, model) = small();
        let mut s = SessionState::start(cfg, phantom(), None, &model).unwrap();
        assert!(matches!(s.apply_selection(0, &model), Err(Error::InvalidOperation(_))));
        assert!(s.approve().is_err());
        for _ in 0..3 {
            s.step_segment(&model).unwrap();
            assert!(s.apply_selection(7, &model).is_err());
            s.apply_selection(0, &model).unwrap();
            s.gmm.check_invariants(1e-6).unwrap();
        }
        assert_eq!(s.status, SessionStatus::Exhausted);
        assert_eq!(s.history.len(), 3);
        assert!(s.step_segment(&model).is_err());
    }

    #[test]
    fn approval_freezes_the_session() {
        let (cfg, model) = small();
        let mut s = SessionState::start(cfg, phantom(), None, &model).unwrap();
        let y = s.step_segment(&model).unwrap().y_app.clone();
        assert_eq!(s.approve().unwrap(), y);
        assert_eq!(s.history.last().unwrap().action, Action::Approved);
        assert!(s.step_segment(&model).is_err());
        assert!(s.apply_selection(0, &model).is_err());
        assert!(s.approve().is_err());
        assert_eq!(s.final_mask().unwrap().unwrap(), y);
    }

    #[test]
    fn degenerate_mixture_gives_identical_candidates() {
        let (cfg, model) = small();
        let mut s = SessionState::start(SessionConfig { components: 4, ..cfg }, phantom(), None, &model).unwrap();
        let mean = s.gmm.mean(0).to_vec();
        let means = vec![mean; 4];
        s.gmm = GaussianMixture::new(means, vec![vec![1e-6; 3]; 4], vec![0.25; 4]).unwrap();
        let pred = s.step_segment(&model).unwrap();
        assert!(pred.proposals.iter().all(|p| p.diff.is_zero()));
    }

    #[test]
    fn modes_mask_the_delta() {
        let mut d = GmmDelta::from_flat(2, 1, &[1.0, 2.0, 3.0, 4.0, 5.0, 6.0]).unwrap();
        AdaptationMode::Weights.mask(&mut d);
        assert_eq!(d.to_flat(), vec![0.0, 0.0, 0.0, 0.0, 5.0, 6.0]);
        let mut d = GmmDelta::from_flat(2, 1, &[1.0, 2.0, 3.0, 4.0, 5.0, 6.0]).unwrap();
        AdaptationMode::MeanVariance.mask(&mut d);
        assert_eq!(d.to_flat(), vec![1.0, 2.0, 3.0, 4.0, 0.0, 0.0]);
    }

    #[test]
    fn weights_mode_keeps_means_bit_identical() {
        let (cfg, model) = small();
        let mut s = SessionState::start(SessionConfig { mode: AdaptationMode::Weights, ..cfg }, phantom(), None, &model).unwrap();
        let (m0, v0) = (s.gmm.means_flat().to_vec(), s.gmm.variances_flat().to_vec());
        for _ in 0..2 {
            s.step_segment(&model).unwrap();
            s.apply_selection(0, &model).unwrap();
        }
        assert_eq!(s.gmm.means_flat(), &m0[..]);
        assert_eq!(s.gmm.variances_flat(), &v0[..]);
        assert_ne!(s.gmm.weights(), s.mixtures[0].weights());
    }

    #[test]
    fn persisted_session_replays() {
        let (cfg, model) = small();
        let mut s = SessionState::start(cfg, phantom(), None, &model).unwrap();
        s.step_segment(&model).unwrap();
        s.apply_selection(2, &model).unwrap();
        s.step_segment(&model).unwrap();
        s.apply_selection(0, &model).unwrap();
        s.step_segment(&model).unwrap();
        s.approve().unwrap();
        let doc = s.to_doc(&model.content_hash());
        let back = SessionDoc::from_json(&doc.to_json().unwrap()).unwrap();
        assert_eq!(back, doc);
        let replayed = back.replay(&model).unwrap();
        assert_eq!(replayed.history, s.history);

        let mut tampered = doc.clone();
        if let Action::Selected { cluster_id } = &mut tampered.history[0].action {
            *cluster_id = 1;
        }
        assert!(tampered.replay(&model).is_err());
        let other = ModelParams::init(&Architecture { components: 4, latent_dim: 3, embed_dim: 5, adapter_hidden: 8, encoder_hidden: 8, ..Default::default() }, 99);
        assert!(doc.replay(&other).is_err());
    }

    #[test]
    fn inline_images_load() {
        let src = ImageSource::Inline { height: 8, width: 8, pixels: (0..64).map(|i| (i * 4) as u8).collect() };
        let img = src.load().unwrap();
        assert_eq!(img.get(0, 1), 4.0 / 255.0);
        assert!(ImageSource::Inline { height: 8, width: 8, pixels: vec![0; 3] }.load().is_err());
    }
}
