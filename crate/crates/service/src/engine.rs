//! Model loading and request-independent inference.

use std::path::{Path, PathBuf};

use base64::Engine as _;
use ndarray::Array2;
use pocus_core::config::Config;
use pocus_core::data::{decode_upload, AugmentationPolicy, DatasetParams};
use pocus_core::eval::{argmax, ensemble_predict};
use pocus_core::explain::{ensemble_heatmap, overlay, to_rgb_image, write_review_bundle};
use pocus_core::nn::{checkpoint_path, load_checkpoint, Classifier, ModelInput, StochasticMode};
use pocus_core::uncertainty::{scores_from_stack, stochastic_stack, ConfidenceKind};
use pocus_core::{plot, Class, Error as CoreError};

use crate::api::{CheckpointInfo, FrameEntry, ModelInfo, PredictOptions, PredictResponse, VideoSummary, API_VERSION, MAX_PASSES};
use crate::error::ServiceError;

pub const OVERLAY_ALPHA: f32 = 0.4;

/// Read-only models plus the preprocessing they expect.
#[derive(Debug)]
pub struct Engine {
    members: Vec<Classifier>,
    info: ModelInfo,
    params: DatasetParams,
    policy: AugmentationPolicy,
}

impl Engine {
    /// Loads every fold checkpoint (ensemble) or fold 0 only.
    pub fn load(config: &Config) -> Result<Self, CoreError> {
        let arch = config.model.arch;
        let folds = if config.service.ensemble { config.split.folds } else { 1 };
        let paths: Vec<PathBuf> = (0..folds).map(|k| checkpoint_path(&config.checkpoint_dir, arch, k)).collect();
        if let Some(missing) = paths.iter().find(|p| !p.exists()) {
            return Err(CoreError::Config(format!("missing checkpoint {}", missing.display())));
        }
        let mut members = Vec::with_capacity(folds);
        let mut checkpoints = Vec::with_capacity(folds);
        for (fold, path) in paths.iter().enumerate() {
            let (model, _) = load_checkpoint(path)?;
            members.push(model);
            checkpoints.push(CheckpointInfo {
                fold,
                path: path.display().to_string(),
                sha256: pocus_core::io::sha256_file(path)?,
            });
        }
        Self::new(members, checkpoints, config.service.ensemble, config.data.params(), config.augment.clone())
    }

    pub fn new(
        members: Vec<Classifier>,
        checkpoints: Vec<CheckpointInfo>,
        ensemble: bool,
        params: DatasetParams,
        policy: AugmentationPolicy,
    ) -> Result<Self, CoreError> {
        let first = members.first().ok_or_else(|| CoreError::Config("no models to serve".into()))?;
        let arch = first.config().arch;
        if !arch.is_frame_model() || members.iter().any(|m| m.config().arch != arch) {
            return Err(CoreError::Unsupported(format!("the service needs frame models of one architecture, got {arch}")));
        }
        if members.iter().any(|m| m.n_classes() != Class::COUNT) {
            return Err(CoreError::Config(format!("served models must have {} classes", Class::COUNT)));
        }
        let info = ModelInfo {
            arch: arch.to_string(),
            classes: Class::ALL.to_vec(),
            checkpoints,
            ensemble,
        };
        Ok(Engine {
            members,
            info,
            params,
            policy,
        })
    }

    pub fn info(&self) -> &ModelInfo {
        &self.info
    }

    pub fn members(&self) -> &[Classifier] {
        &self.members
    }

    pub fn predict(&self, payload: Vec<u8>, opts: &PredictOptions) -> Result<PredictResponse, ServiceError> {
        if opts.want_confidence && !(2..=MAX_PASSES).contains(&opts.n_passes) {
            return Err(ServiceError::BadRequest(format!("n_passes must lie in [2, {MAX_PASSES}]")));
        }
        let upload = decode_upload(payload, &self.params).map_err(|e| match e {
            CoreError::Io { .. } => ServiceError::Internal(e.to_string()),
            other => ServiceError::BadRequest(format!("undecodable media: {other}")),
        })?;
        let frames = &upload.frames;
        let probs = ensemble_predict(&self.members, ModelInput::Frames(frames))?;
        let members: Vec<&Classifier> = self.members.iter().collect();
        let (epistemic, aleatoric) = if opts.want_confidence {
            let input = ModelInput::Frames(frames);
            let e = stochastic_stack(&members, input, opts.n_passes, StochasticMode::Dropout, &self.policy, opts.seed)?;
            let a = stochastic_stack(&members, input, opts.n_passes, StochasticMode::Tta, &self.policy, opts.seed)?;
            (
                Some(scores_from_stack(&e, ConfidenceKind::Epistemic)?),
                Some(scores_from_stack(&a, ConfidenceKind::Aleatoric)?),
            )
        } else {
            (None, None)
        };
        let mut entries = Vec::with_capacity(frames.len());
        for (i, row) in probs.rows().into_iter().enumerate() {
            let p: Vec<f64> = row.iter().map(|&v| v as f64).collect();
            let k = argmax(&p);
            let heatmap_ref = if opts.want_heatmap {
                let hm = ensemble_heatmap(&self.members, &frames[i], k)?;
                let img = to_rgb_image(&overlay(&frames[i], &hm, OVERLAY_ALPHA)?)?;
                Some(format!(
                    "data:image/png;base64,{}",
                    base64::engine::general_purpose::STANDARD.encode(plot::png_bytes(&img)?)
                ))
            } else {
                None
            };
            entries.push(FrameEntry {
                frame_index: i,
                source_frame: upload.source_indices[i],
                probs: p,
                pred_class: class_of(k)?,
                epistemic_c: epistemic.as_ref().map(|s| s[i].value),
                aleatoric_c: aleatoric.as_ref().map(|s| s[i].value),
                heatmap_ref,
            });
        }
        let video = video_summary(&probs)?;
        Ok(PredictResponse {
            api_version: API_VERSION.to_string(),
            media_type: upload.media_type.to_string(),
            frames: entries,
            video,
            model_info: self.info.clone(),
        })
    }

    /// Frames, overlays, and per-frame verdicts of one recording under `dir/video_id`.
    pub fn bundle(&self, payload: Vec<u8>, video_id: &str, dir: &Path) -> Result<PathBuf, CoreError> {
        let upload = decode_upload(payload, &self.params)?;
        let probs = ensemble_predict(&self.members, ModelInput::Frames(&upload.frames))?;
        let mut maps = Vec::with_capacity(upload.frames.len());
        for (frame, row) in upload.frames.iter().zip(probs.rows()) {
            let p: Vec<f64> = row.iter().map(|&v| v as f64).collect();
            maps.push(ensemble_heatmap(&self.members, frame, argmax(&p))?);
        }
        write_review_bundle(dir, video_id, &upload.frames, &probs, &maps)
    }
}

fn class_of(k: usize) -> Result<Class, ServiceError> {
    Class::from_index(k).ok_or_else(|| ServiceError::Internal(format!("class index {k} out of range")))
}

/// Mean of the frame probability rows.
pub fn video_summary(probs: &Array2<f32>) -> Result<VideoSummary, ServiceError> {
    let n = probs.nrows();
    if n == 0 {
        return Err(ServiceError::BadRequest("no frames decoded".into()));
    }
    let mut mean = vec![0.0f64; probs.ncols()];
    for row in probs.rows() {
        for (m, &v) in mean.iter_mut().zip(row) {
            *m += v as f64;
        }
    }
    mean.iter_mut().for_each(|m| *m /= n as f64);
    let k = argmax(&mean);
    Ok(VideoSummary {
        pred_class: class_of(k)?,
        probs: mean,
    })
}
