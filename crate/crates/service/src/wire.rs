use base64::Engine;
use prefalign::mask::{BinaryMask, Rle};
use prefalign::proposals::ProposalDoc;
use prefalign::session::{proposal_docs, Action, ImageSource, SessionConfig, SessionDoc, SessionState, SessionStatus};
use serde::{Deserialize, Serialize};

use crate::error::ApiError;

/// 8-bit grayscale image, row-major.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct InlineImage {
    pub width: usize,
    pub height: usize,
    pub pixels: Vec<u8>,
}

impl InlineImage {
    pub fn to_source(&self) -> ImageSource {
        ImageSource::Inline { height: self.height, width: self.width, pixels: self.pixels.clone() }
    }
}

#[derive(Debug, Clone, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CreateSession {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub image_id: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub image: Option<InlineImage>,
    /// Partial session config; unspecified fields keep server defaults.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub config: Option<serde_json::Value>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SelectionRequest {
    pub cluster_id: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ImageRef {
    #[serde(skip_serializing_if = "Option::is_none")]
    pub image_id: Option<String>,
    pub height: usize,
    pub width: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SessionResource {
    pub session_id: String,
    pub status: SessionStatus,
    pub iteration: usize,
    pub image: ImageRef,
    pub config: SessionConfig,
    pub model_hash: String,
    /// Current aggregate; after termination, the last one shown.
    pub y_app: Rle,
    /// Empty once the session has terminated.
    pub proposals: Vec<ProposalDoc>,
    pub history_length: usize,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub final_mask: Option<Rle>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub y_app_png: Option<String>,
}

impl SessionResource {
    pub(crate) fn build(id: &str, image_id: Option<&str>, state: &SessionState, model_hash: &str, png: bool) -> Result<Self, ApiError> {
        let (y_app, proposals) = match (&state.prediction, state.status) {
            (Some(pred), SessionStatus::Active) => (pred.y_app.to_rle(), proposal_docs(pred)),
            _ => {
                let last = state
                    .history
                    .last()
                    .ok_or_else(|| ApiError::Internal("session has neither a prediction nor history".into()))?;
                (last.y_app.clone(), Vec::new())
            }
        };
        let final_mask = match state.history.last() {
            Some(r) if r.action == Action::Approved => Some(r.y_app.clone()),
            _ => None,
        };
        let y_app_png = if png { Some(png_base64(&y_app.decode()?)?) } else { None };
        Ok(Self {
            session_id: id.to_string(),
            status: state.status,
            iteration: state.iteration,
            image: ImageRef { image_id: image_id.map(str::to_string), height: state.image.height, width: state.image.width },
            config: state.config.clone(),
            model_hash: model_hash.to_string(),
            y_app,
            proposals,
            history_length: state.history.len(),
            final_mask,
            y_app_png,
        })
    }
}

/// File form of a persisted session.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct PersistedSession {
    pub session_id: String,
    pub image_id: Option<String>,
    pub doc: SessionDoc,
}

fn png_base64(mask: &BinaryMask) -> Result<String, ApiError> {
    let pixels: Vec<u8> = mask.data().iter().map(|&b| if b { 255 } else { 0 }).collect();
    let img = image::GrayImage::from_raw(mask.width() as u32, mask.height() as u32, pixels)
        .ok_or_else(|| ApiError::Internal("mask buffer size mismatch".into()))?;
    let mut bytes = Vec::new();
    img.write_to(&mut std::io::Cursor::new(&mut bytes), image::ImageFormat::Png)
        .map_err(|e| ApiError::Internal(e.to_string()))?;
    Ok(base64::engine::general_purpose::STANDARD.encode(bytes))
}
