//! The parameter bundle a session runs on, and its versioned checkpoint file.

use std::path::Path;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::adapter::{AdaptiveBlockParams, FeedbackEncoderParams};
use crate::error::{invalid, Error, Result};
use crate::segmenter::{AnalyticSegmenter, SegmenterParams, TrainableSegmenter};

pub const CHECKPOINT_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelParams {
    pub segmenter: SegmenterParams,
    pub encoder: FeedbackEncoderParams,
    pub adapter: AdaptiveBlockParams,
}

/// Layer widths used when building fresh parameters.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct Architecture {
    pub components: usize,
    pub latent_dim: usize,
    pub embed_dim: usize,
    pub encoder_hidden: usize,
    pub adapter_hidden: usize,
    /// Scale of the adaptive blocks' output layer at initialization.
    pub adapter_output_scale: f64,
    /// Hidden width of the trainable segmenter head (unused when analytic).
    pub segmenter_hidden: usize,
    pub trainable_segmenter: bool,
}

impl Default for Architecture {
    fn default() -> Self {
        Self {
            components: 16,
            latent_dim: 8,
            embed_dim: 16,
            encoder_hidden: 32,
            adapter_hidden: 64,
            adapter_output_scale: 0.1,
            segmenter_hidden: 16,
            trainable_segmenter: false,
        }
    }
}

impl ModelParams {
    pub fn init(arch: &Architecture, seed: u64) -> Self {
        use crate::rng::derive_seed;
        let seg_seed = derive_seed(seed, &[crate::rng::stream::PARAMS, 0]);
        let segmenter = if arch.trainable_segmenter {
            SegmenterParams::Trainable(TrainableSegmenter::random(arch.latent_dim, arch.embed_dim, arch.segmenter_hidden, seg_seed))
        } else {
            SegmenterParams::Analytic(AnalyticSegmenter::preference_axis(arch.latent_dim, arch.embed_dim, 0.5, 0.22, 0.05))
        };
        let encoder = FeedbackEncoderParams::random(
            arch.embed_dim,
            arch.encoder_hidden,
            derive_seed(seed, &[crate::rng::stream::PARAMS, 1]),
        );
        let adapter = AdaptiveBlockParams::random(
            arch.components,
            arch.latent_dim,
            arch.embed_dim,
            arch.adapter_hidden,
            derive_seed(seed, &[crate::rng::stream::PARAMS, 2]),
            arch.adapter_output_scale,
        );
        Self { segmenter, encoder, adapter }
    }

    /// Checks that the three parts agree on `(M, D, L)`.
    pub fn validate(&self) -> Result<()> {
        self.encoder.validate()?;
        self.adapter.validate()?;
        let l = self.encoder.embed_dim();
        if self.adapter.embed_dim() != l {
            return Err(Error::ShapeMismatch(format!(
                "encoder emits L={l}, adaptive blocks expect L={}",
                self.adapter.embed_dim()
            )));
        }
        self.segmenter.validate(self.adapter.latent_dim, l)
    }

    pub fn components(&self) -> usize {
        self.adapter.components
    }

    pub fn latent_dim(&self) -> usize {
        self.adapter.latent_dim
    }

    pub fn embed_dim(&self) -> usize {
        self.encoder.embed_dim()
    }

    /// Git-style content hash (`sha256("blob <len>\0" + bytes)`) of the
    /// canonical JSON encoding.
    pub fn content_hash(&self) -> String {
        content_hash(serde_json::to_string(self).expect("parameters serialize").as_bytes())
    }
}

pub fn content_hash(bytes: &[u8]) -> String {
    let mut h = Sha256::new();
    h.update(format!("blob {}\0", bytes.len()).as_bytes());
    h.update(bytes);
    hex::encode(h.finalize())
}

/// Versioned checkpoint: parameters plus whatever produced them.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Checkpoint {
    pub version: u32,
    pub seed: u64,
    /// Free-form echo of the producing configuration.
    pub config: serde_json::Value,
    pub params: ModelParams,
}

impl Checkpoint {
    pub fn new(params: ModelParams, seed: u64, config: serde_json::Value) -> Self {
        Self { version: CHECKPOINT_VERSION, seed, config, params }
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string(self)?)
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let ck: Checkpoint = serde_json::from_str(text)?;
        if ck.version != CHECKPOINT_VERSION {
            return Err(Error::Decode(format!("unsupported checkpoint version {}", ck.version)));
        }
        ck.params.validate()?;
        Ok(ck)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_json()?)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_json(&std::fs::read_to_string(path)?)
    }

    pub fn hash(&self) -> String {
        self.params.content_hash()
    }
}

/// Rejects architectures that cannot be built.
pub fn check_architecture(arch: &Architecture) -> Result<()> {
    if arch.components == 0 || arch.latent_dim == 0 || arch.embed_dim == 0 {
        return Err(invalid("M, D and L must be positive"));
    }
    if arch.encoder_hidden == 0 || arch.adapter_hidden == 0 || arch.segmenter_hidden == 0 {
        return Err(invalid("hidden widths must be positive"));
    }
    if !arch.adapter_output_scale.is_finite() {
        return Err(invalid("adapter output scale must be finite"));
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn init_is_consistent_and_deterministic() {
        let arch = Architecture::default();
        let p = ModelParams::init(&arch, 3);
        p.validate().unwrap();
        assert_eq!(p, ModelParams::init(&arch, 3));
        assert_eq!(p.adapter.net.depth(), 6);
        assert_eq!((p.components(), p.latent_dim(), p.embed_dim()), (16, 8, 16));
        let t = ModelParams::init(&Architecture { trainable_segmenter: true, ..arch }, 3);
        t.validate().unwrap();
        assert!(t.segmenter.is_trainable());
    }

    #[test]
    fn checkpoint_round_trip() {
        let p = ModelParams::init(&Architecture::default(), 1);
        let ck = Checkpoint::new(p, 1, serde_json::json!({"epochs": 0}));
        let back = Checkpoint::from_json(&ck.to_json().unwrap()).unwrap();
        assert_eq!(back, ck);
        assert_eq!(back.hash(), ck.hash());
        let mut bad: serde_json::Value = serde_json::from_str(&ck.to_json().unwrap()).unwrap();
        bad["version"] = 99.into();
        assert!(Checkpoint::from_json(&bad.to_string()).is_err());
    }

    #[test]
    fn content_hash_is_git_blob_hash() {
        // `printf 'hello\n' | git hash-object --stdin` under sha256 object format
        assert_eq!(
            content_hash(b"hello\n"),
            "2cf8d83d9ee29543b34a87727421fdecb7e3f3a183d337639025de576db9ebb4"
        );
    }
}
