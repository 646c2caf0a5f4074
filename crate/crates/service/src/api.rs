//! Wire types of the HTTP interface.

use pocus_core::Class;
use serde::{Deserialize, Serialize};

pub const API_VERSION: &str = "1";
/// Upper bound on stochastic passes a request may ask for.
pub const MAX_PASSES: usize = 50;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PredictOptions {
    pub want_heatmap: bool,
    pub want_confidence: bool,
    pub n_passes: usize,
    /// Seed for the stochastic passes.
    pub seed: u64,
}

impl Default for PredictOptions {
    fn default() -> Self {
        PredictOptions {
            want_heatmap: false,
            want_confidence: false,
            n_passes: pocus_core::uncertainty::DEFAULT_PASSES,
            seed: 0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FrameEntry {
    pub frame_index: usize,
    /// Index of the frame in the uploaded stream.
    pub source_frame: usize,
    pub probs: Vec<f64>,
    pub pred_class: Class,
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub epistemic_c: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub aleatoric_c: Option<f64>,
    /// `data:image/png;base64,...` overlay of the predicted class heatmap.
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub heatmap_ref: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct VideoSummary {
    pub probs: Vec<f64>,
    pub pred_class: Class,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct CheckpointInfo {
    pub fold: usize,
    pub path: String,
    pub sha256: String,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ModelInfo {
    pub arch: String,
    pub classes: Vec<Class>,
    pub checkpoints: Vec<CheckpointInfo>,
    pub ensemble: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PredictResponse {
    pub api_version: String,
    pub media_type: String,
    pub frames: Vec<FrameEntry>,
    pub video: VideoSummary,
    pub model_info: ModelInfo,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ErrorBody {
    pub error: String,
}
