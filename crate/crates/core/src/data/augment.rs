//! Training-time augmentation: random flips, small rotations and shifts.

use ndarray::Array3;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::data::dataset::FrameSample;
use crate::error::{Error, Result};

pub const MAX_ROTATION_DEG: f64 = 10.0;
pub const MAX_TRANSLATION_FRAC: f64 = 0.10;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AugmentationPolicy {
    /// Flip left-right with probability 1/2.
    pub h_flip: bool,
    /// Flip top-bottom with probability 1/2.
    pub v_flip: bool,
    pub max_rotation_deg: f64,
    pub max_translation_frac: f64,
    pub rng_seed: u64,
}

impl Default for AugmentationPolicy {
    fn default() -> Self {
        AugmentationPolicy {
            h_flip: true,
            v_flip: true,
            max_rotation_deg: MAX_ROTATION_DEG,
            max_translation_frac: MAX_TRANSLATION_FRAC,
            rng_seed: 0,
        }
    }
}

impl AugmentationPolicy {
    pub fn identity() -> Self {
        AugmentationPolicy {
            h_flip: false,
            v_flip: false,
            max_rotation_deg: 0.0,
            max_translation_frac: 0.0,
            rng_seed: 0,
        }
    }

    pub fn is_identity(&self) -> bool {
        !self.h_flip && !self.v_flip && self.max_rotation_deg == 0.0 && self.max_translation_frac == 0.0
    }

    pub fn validate(&self) -> Result<()> {
        if !(0.0..=MAX_ROTATION_DEG).contains(&self.max_rotation_deg) {
            return Err(Error::Config(format!(
                "max_rotation_deg must lie in [0, {MAX_ROTATION_DEG}], got {}",
                self.max_rotation_deg
            )));
        }
        if !(0.0..=MAX_TRANSLATION_FRAC).contains(&self.max_translation_frac) {
            return Err(Error::Config(format!(
                "max_translation_frac must lie in [0, {MAX_TRANSLATION_FRAC}], got {}",
                self.max_translation_frac
            )));
        }
        Ok(())
    }

    pub fn sample_transform<R: Rng + ?Sized>(&self, rng: &mut R) -> Transform {
        // Draw every variate unconditionally so the stream position does not
        // depend on which transforms are enabled.
        let flip_h: bool = rng.random();
        let flip_v: bool = rng.random();
        let angle: f64 = rng.random_range(-1.0..=1.0);
        let tx: f64 = rng.random_range(-1.0..=1.0);
        let ty: f64 = rng.random_range(-1.0..=1.0);
        Transform {
            h_flip: self.h_flip && flip_h,
            v_flip: self.v_flip && flip_v,
            rotation_deg: angle * self.max_rotation_deg,
            shift_x: tx * self.max_translation_frac,
            shift_y: ty * self.max_translation_frac,
        }
    }
}

/// A concrete draw from an [`AugmentationPolicy`].
#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct Transform {
    pub h_flip: bool,
    pub v_flip: bool,
    /// Counter-clockwise rotation about the image center.
    pub rotation_deg: f64,
    /// Shifts as fractions of width and height.
    pub shift_x: f64,
    pub shift_y: f64,
}

impl Transform {
    pub fn apply(&self, pixels: &Array3<f32>) -> Array3<f32> {
        let (h, w, c) = pixels.dim();
        let mut src = pixels.clone();
        if self.h_flip {
            src.invert_axis(ndarray::Axis(1));
        }
        if self.v_flip {
            src.invert_axis(ndarray::Axis(0));
        }
        let src = src.as_standard_layout().into_owned();
        if self.rotation_deg == 0.0 && self.shift_x == 0.0 && self.shift_y == 0.0 {
            return src;
        }

        let theta = self.rotation_deg.to_radians();
        let (sin, cos) = theta.sin_cos();
        let cx = (w as f64 - 1.0) / 2.0;
        let cy = (h as f64 - 1.0) / 2.0;
        let dx = self.shift_x * w as f64;
        let dy = self.shift_y * h as f64;
        let mut out = Array3::<f32>::zeros((h, w, c));
        for y in 0..h {
            for x in 0..w {
                // Inverse map: undo the shift, then rotate back about the center.
                let px = x as f64 - dx - cx;
                let py = y as f64 - dy - cy;
                let sx = cos * px - sin * py + cx;
                let sy = sin * px + cos * py + cy;
                sample_clamped(&src, sx, sy, |ch, v| out[[y, x, ch]] = v);
            }
        }
        out
    }
}

/// Bilinear lookup with replicated borders.
fn sample_clamped(src: &Array3<f32>, x: f64, y: f64, mut put: impl FnMut(usize, f32)) {
    let (h, w, c) = src.dim();
    let x = x.clamp(0.0, (w - 1) as f64);
    let y = y.clamp(0.0, (h - 1) as f64);
    let x0 = x.floor() as usize;
    let y0 = y.floor() as usize;
    let x1 = (x0 + 1).min(w - 1);
    let y1 = (y0 + 1).min(h - 1);
    let fx = (x - x0 as f64) as f32;
    let fy = (y - y0 as f64) as f32;
    for ch in 0..c {
        let top = src[[y0, x0, ch]] * (1.0 - fx) + src[[y0, x1, ch]] * fx;
        let bottom = src[[y1, x0, ch]] * (1.0 - fx) + src[[y1, x1, ch]] * fx;
        put(ch, top * (1.0 - fy) + bottom * fy);
    }
}

/// Augments `sample` with an RNG seeded from the policy seed and the sample's
/// identity, so repeated calls are bit-identical.
pub fn augment(sample: &FrameSample, policy: &AugmentationPolicy) -> Result<FrameSample> {
    let mut rng = sample_rng(policy.rng_seed, &sample.video_id, sample.frame_index, 0);
    augment_with_rng(sample, policy, &mut rng)
}

pub fn augment_with_rng<R: Rng + ?Sized>(
    sample: &FrameSample,
    policy: &AugmentationPolicy,
    rng: &mut R,
) -> Result<FrameSample> {
    policy.validate()?;
    if policy.is_identity() {
        return Ok(sample.clone());
    }
    let t = policy.sample_transform(rng);
    Ok(FrameSample {
        pixels: t.apply(&sample.pixels),
        ..sample.clone()
    })
}

/// Deterministic per-sample RNG stream.
pub fn sample_rng(seed: u64, video_id: &str, frame_index: usize, stream: u64) -> ChaCha8Rng {
    let mut hasher = Sha256::new();
    hasher.update(seed.to_le_bytes());
    hasher.update(video_id.as_bytes());
    hasher.update((frame_index as u64).to_le_bytes());
    hasher.update(stream.to_le_bytes());
    let digest: [u8; 32] = hasher.finalize().into();
    ChaCha8Rng::from_seed(digest)
}
