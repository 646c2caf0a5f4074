use std::path::{Path, PathBuf};

use image::{Rgb, RgbImage};
use ndarray::{Array2, Array3};
use serde::{Deserialize, Serialize};

use super::heatmap::{overlay, Heatmap};
use crate::error::{Error, Result};
use crate::eval::argmax;
use crate::plot;
use crate::Class;

pub const DEFAULT_ALPHA: f32 = 0.4;

/// `[H, W, 3]` values in `[0, 1]` to an 8-bit image.
pub fn to_rgb_image(frame: &Array3<f32>) -> Result<RgbImage> {
    let (h, w, c) = frame.dim();
    if c != 3 {
        return Err(Error::invalid(format!("expected 3 channels, got {c}")));
    }
    Ok(RgbImage::from_fn(w as u32, h as u32, |x, y| {
        let px = |k: usize| (frame[[y as usize, x as usize, k]].clamp(0.0, 1.0) * 255.0).round() as u8;
        Rgb([px(0), px(1), px(2)])
    }))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FrameVerdict {
    pub frame_index: usize,
    pub class: Class,
    pub probability: f64,
    pub probabilities: Vec<f64>,
}

/// Writes original frames, heatmap overlays, and `predictions.json` under `dir/video_id`.
pub fn write_review_bundle(
    dir: &Path,
    video_id: &str,
    frames: &[Array3<f32>],
    probs: &Array2<f32>,
    heatmaps: &[Heatmap],
) -> Result<PathBuf> {
    if frames.len() != probs.nrows() || frames.len() != heatmaps.len() {
        return Err(Error::invalid("frames, probabilities and heatmaps differ in count"));
    }
    if video_id.is_empty() || video_id.contains(['/', '\\']) || video_id == ".." {
        return Err(Error::invalid(format!("`{video_id}` is not a usable directory name")));
    }
    let out = dir.join(video_id);
    let mut verdicts = Vec::with_capacity(frames.len());
    for (i, ((frame, row), hm)) in frames.iter().zip(probs.rows()).zip(heatmaps).enumerate() {
        plot::save_png(&to_rgb_image(frame)?, &out.join(format!("frame_{i:04}.png")))?;
        plot::save_png(&to_rgb_image(&overlay(frame, hm, DEFAULT_ALPHA)?)?, &out.join(format!("overlay_{i:04}.png")))?;
        let p: Vec<f64> = row.iter().map(|&v| v as f64).collect();
        let k = argmax(&p);
        verdicts.push(FrameVerdict {
            frame_index: i,
            class: Class::from_index(k).ok_or_else(|| Error::invalid(format!("class index {k} out of range")))?,
            probability: p[k],
            probabilities: p,
        });
    }
    crate::io::write_atomic(&out.join("predictions.json"), serde_json::to_string_pretty(&verdicts)?.as_bytes())?;
    Ok(out)
}
