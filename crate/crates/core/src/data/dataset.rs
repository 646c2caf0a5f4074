//! Assembly of the labeled frame dataset and its on-disk PNG cache.

use std::collections::{BTreeMap, BTreeSet};
use std::path::{Path, PathBuf};

use image::{DynamicImage, RgbImage};
use ndarray::Array3;
use serde::{Deserialize, Serialize};

use crate::class::{Class, MediaKind, Probe};
use crate::data::image_ops::{crop_square, preprocess, FRAME_SIZE};
use crate::data::manifest::RecordingMeta;
use crate::data::video::extract_frames;
use crate::error::{Error, Result};

/// A preprocessed `224 x 224 x 3` frame in `[0, 1]`.
#[derive(Debug, Clone, PartialEq)]
pub struct FrameSample {
    pub video_id: String,
    pub frame_index: usize,
    pub pixels: Array3<f32>,
    pub label: Class,
}

impl FrameSample {
    pub fn new(video_id: impl Into<String>, frame_index: usize, pixels: Array3<f32>, label: Class) -> Result<Self> {
        let s = FrameSample {
            video_id: video_id.into(),
            frame_index,
            pixels,
            label,
        };
        s.validate()?;
        Ok(s)
    }

    pub fn validate(&self) -> Result<()> {
        if self.pixels.dim() != (FRAME_SIZE, FRAME_SIZE, 3) {
            return Err(Error::invalid(format!(
                "frame {}#{} has shape {:?}, expected (224, 224, 3)",
                self.video_id,
                self.frame_index,
                self.pixels.dim()
            )));
        }
        if self.pixels.iter().any(|v| !(0.0..=1.0).contains(v)) {
            return Err(Error::invalid(format!(
                "frame {}#{} has values outside [0, 1]",
                self.video_id, self.frame_index
            )));
        }
        Ok(())
    }

    /// Relative path of this frame in the cache: `{label}/{video_id}_frame{index:03}.png`.
    pub fn cache_name(&self) -> PathBuf {
        PathBuf::from(self.label.as_str()).join(format!("{}_frame{:03}.png", self.video_id, self.frame_index))
    }

    pub fn to_image(&self) -> RgbImage {
        pixels_to_image(&self.pixels)
    }
}

pub fn pixels_to_image(pixels: &Array3<f32>) -> RgbImage {
    let (h, w, _) = pixels.dim();
    RgbImage::from_fn(w as u32, h as u32, |x, y| {
        let q = |c| (pixels[[y as usize, x as usize, c]].clamp(0.0, 1.0) * 255.0).round() as u8;
        image::Rgb([q(0), q(1), q(2)])
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct DatasetParams {
    pub target_hz: f64,
    pub max_frames: usize,
    pub include_uninformative: bool,
}

impl Default for DatasetParams {
    fn default() -> Self {
        DatasetParams {
            target_hz: 3.0,
            max_frames: 30,
            include_uninformative: true,
        }
    }
}

#[derive(Debug, Clone, Default)]
pub struct Dataset {
    pub samples: Vec<FrameSample>,
}

impl Dataset {
    pub fn new(samples: Vec<FrameSample>) -> Self {
        Dataset { samples }
    }

    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    pub fn class_counts(&self) -> BTreeMap<Class, usize> {
        let mut counts = BTreeMap::new();
        for s in &self.samples {
            *counts.entry(s.label).or_insert(0) += 1;
        }
        counts
    }

    pub fn video_ids(&self) -> BTreeSet<&str> {
        self.samples.iter().map(|s| s.video_id.as_str()).collect()
    }

    /// Frames per video, with the video's label (the first frame's label).
    pub fn videos(&self) -> BTreeMap<&str, (Class, usize)> {
        let mut out = BTreeMap::new();
        for s in &self.samples {
            out.entry(s.video_id.as_str()).or_insert((s.label, 0)).1 += 1;
        }
        out
    }

    pub fn subset(&self, indices: &[usize]) -> Dataset {
        Dataset {
            samples: indices.iter().map(|&i| self.samples[i].clone()).collect(),
        }
    }

    pub fn filter(&self, mut keep: impl FnMut(&FrameSample) -> bool) -> Dataset {
        Dataset {
            samples: self.samples.iter().filter(|s| keep(s)).cloned().collect(),
        }
    }

    pub fn validate(&self) -> Result<()> {
        let mut seen = BTreeSet::new();
        for s in &self.samples {
            s.validate()?;
            if !seen.insert((s.video_id.as_str(), s.frame_index)) {
                return Err(Error::invalid(format!(
                    "duplicate frame {}#{}",
                    s.video_id, s.frame_index
                )));
            }
        }
        Ok(())
    }
}

/// Whether a recording takes part in training under the convex-probe protocol.
/// Uninformative (out-of-distribution) data is admitted from any probe.
pub fn admitted(rec: &RecordingMeta, params: &DatasetParams) -> bool {
    match rec.label {
        Class::Uninformative => params.include_uninformative,
        _ => rec.probe == Probe::Convex,
    }
}

/// Decodes, crops and resizes one recording into frame samples.
pub fn recording_frames(rec: &RecordingMeta, params: &DatasetParams) -> Result<Vec<FrameSample>> {
    match rec.kind {
        MediaKind::Image => {
            let img = image::open(&rec.path).map_err(|e| match e {
                image::ImageError::IoError(io) => Error::io(&rec.path, io),
                other => Error::Decode(format!("{}: {other}", rec.path.display())),
            })?;
            let pixels = preprocess(&crop_square(&img, rec.crop)?)?;
            Ok(vec![FrameSample::new(rec.id.clone(), 0, pixels, rec.label)?])
        }
        MediaKind::Video => extract_frames(rec, params.target_hz, params.max_frames)?
            .into_iter()
            .enumerate()
            .map(|(i, f)| {
                let pixels = preprocess(&crop_square(&f.image, rec.crop)?)?;
                FrameSample::new(rec.id.clone(), i, pixels, rec.label)
            })
            .collect(),
    }
}

pub fn build_dataset(records: &[RecordingMeta], params: &DatasetParams) -> Result<Dataset> {
    let mut samples = Vec::new();
    for rec in records.iter().filter(|r| admitted(r, params)) {
        samples.extend(recording_frames(rec, params)?);
    }
    if samples.is_empty() {
        return Err(Error::invalid("dataset is empty: no admissible convex-probe recordings"));
    }
    let dataset = Dataset { samples };
    for (class, n) in dataset.class_counts() {
        log::info!("dataset: {n} {class} frames");
    }
    Ok(dataset)
}

/// Writes every frame as `root/{label}/{video_id}_frame{index:03}.png`.
pub fn write_frame_cache(dataset: &Dataset, root: &Path) -> Result<Vec<PathBuf>> {
    let mut written = Vec::with_capacity(dataset.len());
    for s in &dataset.samples {
        let path = root.join(s.cache_name());
        if let Some(parent) = path.parent() {
            std::fs::create_dir_all(parent).map_err(|e| Error::io(parent, e))?;
        }
        DynamicImage::ImageRgb8(s.to_image()).save(&path)?;
        written.push(path);
    }
    Ok(written)
}

/// Loads a frame cache written by [`write_frame_cache`].
pub fn load_frame_cache(root: &Path) -> Result<Dataset> {
    let mut samples = Vec::new();
    for class in Class::ALL {
        let dir = root.join(class.as_str());
        if !dir.is_dir() {
            continue;
        }
        let mut entries: Vec<PathBuf> = std::fs::read_dir(&dir)
            .map_err(|e| Error::io(&dir, e))?
            .filter_map(|e| e.ok().map(|e| e.path()))
            .filter(|p| p.extension().is_some_and(|e| e == "png"))
            .collect();
        entries.sort();
        for path in entries {
            let Some((video_id, frame_index)) = parse_cache_name(&path) else {
                continue;
            };
            let img = image::open(&path)?;
            let pixels = crate::data::image_ops::to_unit_rgb(&img);
            samples.push(FrameSample::new(video_id, frame_index, pixels, class)?);
        }
    }
    Ok(Dataset { samples })
}

pub fn parse_cache_name(path: &Path) -> Option<(String, usize)> {
    let stem = path.file_stem()?.to_str()?;
    let (video, index) = stem.rsplit_once("_frame")?;
    Some((video.to_string(), index.parse().ok()?))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::video::{synthetic_frames, write_y4m};
    use image::{GrayImage, Luma};

    fn write_video(dir: &Path, name: &str, n: usize, fps: usize) -> PathBuf {
        let path = dir.join(name);
        write_y4m(std::fs::File::create(&path).unwrap(), &synthetic_frames(n, 32, 24), fps, 1).unwrap();
        path
    }

    fn write_image(dir: &Path, name: &str) -> PathBuf {
        let path = dir.join(name);
        GrayImage::from_pixel(40, 30, Luma([90])).save(&path).unwrap();
        path
    }

    #[test]
    fn one_video_plus_one_image() {
        let dir = tempfile::tempdir().unwrap();
        let recs = vec![
            RecordingMeta::video("v", write_video(dir.path(), "v.y4m", 120, 30), Class::Covid, 30.0),
            RecordingMeta::image("i", write_image(dir.path(), "i.png"), Class::Healthy),
        ];
        let ds = build_dataset(&recs, &DatasetParams::default()).unwrap();
        assert_eq!(ds.len(), 13);
        assert_eq!(ds.class_counts()[&Class::Covid], 12);
        assert_eq!(ds.class_counts()[&Class::Healthy], 1);
        ds.validate().unwrap();
    }

    #[test]
    fn linear_probe_excluded_and_empty_result_errors() {
        let dir = tempfile::tempdir().unwrap();
        let mut rec = RecordingMeta::image("i", write_image(dir.path(), "i.png"), Class::Covid);
        rec.probe = Probe::Linear;
        assert!(build_dataset(&[rec], &DatasetParams::default()).is_err());
    }

    #[test]
    fn uninformative_images_counted() {
        let dir = tempfile::tempdir().unwrap();
        let img = write_image(dir.path(), "u.png");
        let mut recs: Vec<RecordingMeta> = (0..400)
            .map(|i| {
                let mut r = RecordingMeta::image(&format!("u{i}"), &img, Class::Uninformative);
                // Neck scans come from linear probes; they still count as uninformative.
                if i >= 200 {
                    r.probe = Probe::Linear;
                }
                r
            })
            .collect();
        recs.push(RecordingMeta::image("c", &img, Class::Covid));
        let with = build_dataset(&recs, &DatasetParams::default()).unwrap();
        assert_eq!(with.class_counts()[&Class::Uninformative], 400);
        drop(with);
        let without = build_dataset(
            &recs,
            &DatasetParams {
                include_uninformative: false,
                ..Default::default()
            },
        )
        .unwrap();
        assert_eq!(without.len(), 1);
    }

    #[test]
    fn deterministic_and_cache_roundtrip() {
        let dir = tempfile::tempdir().unwrap();
        let recs = vec![RecordingMeta::video("vid_a", write_video(dir.path(), "a.y4m", 30, 30), Class::Pneumonia, 30.0)];
        let a = build_dataset(&recs, &DatasetParams::default()).unwrap();
        let b = build_dataset(&recs, &DatasetParams::default()).unwrap();
        assert_eq!(a.samples, b.samples);

        let cache = dir.path().join("frames");
        let paths = write_frame_cache(&a, &cache).unwrap();
        assert!(paths[1].ends_with("pneumonia/vid_a_frame001.png"));
        let back = load_frame_cache(&cache).unwrap();
        assert_eq!(back.len(), a.len());
        assert_eq!(back.samples[2].video_id, "vid_a");
        assert_eq!(back.samples[2].frame_index, 2);
        let max_err = back.samples[2]
            .pixels
            .iter()
            .zip(a.samples[2].pixels.iter())
            .map(|(x, y)| (x - y).abs())
            .fold(0.0f32, f32::max);
        assert!(max_err <= 0.5 / 255.0 + 1e-6);
    }
}
