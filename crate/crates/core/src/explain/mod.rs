//! Heatmaps, activation peaks, and the two-sample analysis of their locations.

pub mod bundle;
pub mod heatmap;
pub mod mmd;
pub mod points;

use ndarray::Array3;
use serde::{Deserialize, Serialize};

pub use bundle::{to_rgb_image, write_review_bundle, FrameVerdict};
pub use heatmap::{cam, colorize, ensemble_heatmap, grad_cam, grad_cam_at, max_activation_point, overlay, CamSource, Heatmap, Peak};
pub use mmd::{median_bandwidth, mmd, mmd_sq, resampling_test, MmdResult, NullKind, Point, DEFAULT_RESAMPLES};
pub use points::{cam_scatter_export, group_by_class, read_points, write_points, CamPoint, CamPointSet, ScatterExport};

use crate::error::Result;
use crate::nn::Classifier;

/// CAM when the head allows it, Grad-CAM otherwise.
pub fn heatmap(model: &Classifier, image: &Array3<f32>, class_id: usize) -> Result<Heatmap> {
    if model.has_cam_head() {
        cam(model, image, class_id)
    } else {
        grad_cam(model, image, class_id)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PairwiseMmd {
    pub first: String,
    pub second: String,
    pub n_first: usize,
    pub n_second: usize,
    pub result: MmdResult,
}

/// Tests every pair of non-empty sets, in set order.
pub fn pairwise_tests(sets: &[CamPointSet], n_resamples: usize, seed: u64, null: NullKind) -> Result<Vec<PairwiseMmd>> {
    let mut out = Vec::new();
    for (i, a) in sets.iter().enumerate() {
        for b in &sets[i + 1..] {
            if a.points.is_empty() || b.points.is_empty() {
                log::warn!("skipping {} vs {}: empty set", a.label.short(), b.label.short());
                continue;
            }
            out.push(PairwiseMmd {
                first: a.label.short().to_string(),
                second: b.label.short().to_string(),
                n_first: a.points.len(),
                n_second: b.points.len(),
                result: resampling_test(&a.coordinates(), &b.coordinates(), n_resamples, seed, null)?,
            });
        }
    }
    Ok(out)
}
