//! Model evaluation: batched prediction, fold ensembles, and video aggregation.

use std::collections::BTreeMap;
use std::path::Path;

use ndarray::{Array2, Array3, Axis};
use serde::{Deserialize, Serialize};

use crate::class::Class;
use crate::cv::FoldAssignment;
use crate::data::augment::{sample_rng, AugmentationPolicy};
use crate::data::Dataset;
use crate::error::{Error, Result};
use crate::metrics::MetricsReport;
use crate::nn::checkpoint::{checkpoint_path, load_checkpoint, CheckpointMeta};
use crate::nn::zoo::{feature_path, Arch, SegmentEncoding, VideoChunk};
use crate::nn::{Classifier, ModelInput};

/// Anything producing class-probability rows for a batch.
pub trait Predictor {
    fn predict(&self, input: ModelInput<'_>) -> Result<Array2<f32>>;
}

impl Predictor for Classifier {
    fn predict(&self, input: ModelInput<'_>) -> Result<Array2<f32>> {
        Classifier::predict(self, input)
    }
}

/// Models whose probabilities are averaged.
#[derive(Debug, Clone)]
pub struct Ensemble {
    members: Vec<Classifier>,
}

impl Ensemble {
    pub fn new(members: Vec<Classifier>) -> Result<Self> {
        let first = members.first().ok_or_else(|| Error::Config("an ensemble needs at least one model".into()))?;
        let (arch, k) = (first.config().arch, first.n_classes());
        if members.iter().any(|m| m.config().arch != arch || m.n_classes() != k) {
            return Err(Error::Config("ensemble members must share arch and class count".into()));
        }
        Ok(Ensemble { members })
    }

    /// Loads `{arch}_fold{K}.bin` for every fold; a missing file is an error naming it.
    pub fn load(dir: &Path, arch: Arch, n_folds: usize) -> Result<(Self, Vec<CheckpointMeta>)> {
        let mut members = Vec::new();
        let mut metas = Vec::new();
        for fold in 0..n_folds {
            let (m, meta) = load_checkpoint(&checkpoint_path(dir, arch, fold))?;
            members.push(m);
            metas.push(meta);
        }
        Ok((Self::new(members)?, metas))
    }

    pub fn members(&self) -> &[Classifier] {
        &self.members
    }

    pub fn len(&self) -> usize {
        self.members.len()
    }

    pub fn is_empty(&self) -> bool {
        self.members.is_empty()
    }
}

impl Predictor for Ensemble {
    fn predict(&self, input: ModelInput<'_>) -> Result<Array2<f32>> {
        ensemble_predict(&self.members, input)
    }
}

/// Mean of the members' probability matrices.
pub fn ensemble_predict(models: &[Classifier], input: ModelInput<'_>) -> Result<Array2<f32>> {
    let mut sum: Option<Array2<f64>> = None;
    for m in models {
        let p = m.predict(input)?.mapv(f64::from);
        match &mut sum {
            Some(s) => {
                if s.dim() != p.dim() {
                    return Err(Error::invalid("ensemble members disagree on output shape"));
                }
                *s += &p;
            }
            None => sum = Some(p),
        }
    }
    let sum = sum.ok_or_else(|| Error::Config("an ensemble needs at least one model".into()))?;
    Ok(sum.mapv(|v| (v / models.len() as f64) as f32))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct VideoPrediction {
    pub video_id: String,
    pub probs: Vec<f64>,
    pub pred: usize,
    pub n_frames: usize,
}

/// Averages frame probabilities per video (in first-appearance order) and takes the argmax.
pub fn aggregate_video(video_ids: &[&str], probs: &Array2<f32>) -> Result<Vec<VideoPrediction>> {
    if video_ids.len() != probs.nrows() {
        return Err(Error::invalid("video ids and probability rows differ in count"));
    }
    let mut order: Vec<&str> = Vec::new();
    let mut sums: BTreeMap<&str, (Vec<f64>, usize)> = BTreeMap::new();
    for (i, &v) in video_ids.iter().enumerate() {
        let entry = sums.entry(v).or_insert_with(|| {
            order.push(v);
            (vec![0.0; probs.ncols()], 0)
        });
        for (acc, &p) in entry.0.iter_mut().zip(probs.row(i)) {
            *acc += p as f64;
        }
        entry.1 += 1;
    }
    Ok(order
        .into_iter()
        .map(|v| {
            let (sum, n) = &sums[v];
            let probs: Vec<f64> = sum.iter().map(|s| s / *n as f64).collect();
            VideoPrediction {
                video_id: v.to_string(),
                pred: argmax(&probs),
                probs,
                n_frames: *n,
            }
        })
        .collect())
}

/// Index of the largest value, ties to the lowest index.
pub fn argmax(values: &[f64]) -> usize {
    let mut best = 0;
    for (i, &v) in values.iter().enumerate() {
        if v > values[best] {
            best = i;
        }
    }
    best
}

/// Labelled examples in the representation a model consumes.
#[derive(Debug, Clone, Copy)]
pub enum Examples<'a> {
    Frames(&'a Dataset),
    /// Encodings aligned one-to-one with the dataset's samples.
    Features {
        dataset: &'a Dataset,
        encodings: &'a [SegmentEncoding],
    },
    Chunks {
        chunks: &'a [VideoChunk],
        labels: &'a [Class],
    },
}

/// An owned batch cut from [`Examples`].
#[derive(Debug, Clone)]
pub enum Batch {
    Frames(Vec<Array3<f32>>),
    Features(Vec<SegmentEncoding>),
    Chunks(Vec<VideoChunk>),
}

impl Batch {
    pub fn as_input(&self) -> ModelInput<'_> {
        match self {
            Batch::Frames(f) => ModelInput::Frames(f),
            Batch::Features(f) => ModelInput::Features(f),
            Batch::Chunks(c) => ModelInput::Chunks(c),
        }
    }
}

impl<'a> Examples<'a> {
    pub fn validate(&self) -> Result<()> {
        match self {
            Examples::Frames(_) => Ok(()),
            Examples::Features { dataset, encodings } if dataset.len() == encodings.len() => Ok(()),
            Examples::Chunks { chunks, labels } if chunks.len() == labels.len() => Ok(()),
            _ => Err(Error::invalid("examples and labels differ in count")),
        }
    }

    pub fn len(&self) -> usize {
        match self {
            Examples::Frames(d) | Examples::Features { dataset: d, .. } => d.len(),
            Examples::Chunks { chunks, .. } => chunks.len(),
        }
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn label(&self, i: usize) -> Class {
        match self {
            Examples::Frames(d) | Examples::Features { dataset: d, .. } => d.samples[i].label,
            Examples::Chunks { labels, .. } => labels[i],
        }
    }

    pub fn labels(&self) -> Vec<Class> {
        (0..self.len()).map(|i| self.label(i)).collect()
    }

    pub fn all_indices(&self) -> Vec<usize> {
        (0..self.len()).collect()
    }

    /// Training and held-out indices for `fold`.
    pub fn split(&self, assignment: &FoldAssignment, fold: usize) -> Result<(Vec<usize>, Vec<usize>)> {
        if fold >= assignment.n_folds {
            return Err(Error::Config(format!("fold {fold} out of range for {} folds", assignment.n_folds)));
        }
        let (mut train, mut test) = (Vec::new(), Vec::new());
        for i in 0..self.len() {
            let v = self.video_id(i);
            match assignment.fold_of(v) {
                Some(f) if f == fold => test.push(i),
                Some(_) => train.push(i),
                None => return Err(Error::invalid(format!("video `{v}` has no fold"))),
            }
        }
        Ok((train, test))
    }

    pub fn video_id(&self, i: usize) -> &'a str {
        match self {
            Examples::Frames(d) | Examples::Features { dataset: d, .. } => &d.samples[i].video_id,
            Examples::Chunks { chunks, .. } => &chunks[i].video_id,
        }
    }

    /// Batch of the given indices, augmented when `augment` is set.
    pub fn batch(&self, indices: &[usize], augment: Option<(&AugmentationPolicy, u64)>) -> Batch {
        match self {
            Examples::Frames(d) => Batch::Frames(
                indices
                    .iter()
                    .map(|&i| {
                        let s = &d.samples[i];
                        match augment {
                            Some((policy, stream)) if !policy.is_identity() => {
                                let mut rng = sample_rng(policy.rng_seed, &s.video_id, s.frame_index, stream);
                                policy.sample_transform(&mut rng).apply(&s.pixels)
                            }
                            _ => s.pixels.clone(),
                        }
                    })
                    .collect(),
            ),
            Examples::Features { encodings, .. } => Batch::Features(indices.iter().map(|&i| encodings[i].clone()).collect()),
            Examples::Chunks { chunks, .. } => Batch::Chunks(
                indices
                    .iter()
                    .map(|&i| {
                        let c = &chunks[i];
                        match augment {
                            Some((policy, stream)) if !policy.is_identity() => {
                                let mut rng = sample_rng(policy.rng_seed, &c.video_id, c.chunk_index, stream);
                                let t = policy.sample_transform(&mut rng);
                                VideoChunk {
                                    frames: c.frames.iter().map(|f| t.apply(f)).collect(),
                                    ..c.clone()
                                }
                            }
                            _ => c.clone(),
                        }
                    })
                    .collect(),
            ),
        }
    }
}

/// Loads one `.feat` file per sample from a frame-cache layout rooted at `root`.
pub fn load_segment_encodings(dataset: &Dataset, root: &Path) -> Result<Vec<SegmentEncoding>> {
    dataset
        .samples
        .iter()
        .map(|s| SegmentEncoding::load(&feature_path(&root.join(s.cache_name()))))
        .collect()
}

pub const EVAL_BATCH: usize = 8;

/// Probabilities for the examples at `indices`, predicted in batches.
pub fn predict_examples(model: &dyn Predictor, examples: &Examples<'_>, indices: &[usize]) -> Result<Array2<f32>> {
    examples.validate()?;
    if indices.is_empty() {
        return Err(Error::invalid("no examples to predict"));
    }
    let mut parts = Vec::new();
    for chunk in indices.chunks(EVAL_BATCH) {
        parts.push(model.predict(examples.batch(chunk, None).as_input())?);
    }
    let views: Vec<_> = parts.iter().map(|p| p.view()).collect();
    ndarray::concatenate(Axis(0), &views).map_err(|e| Error::invalid(e.to_string()))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Evaluation {
    pub frame: MetricsReport,
    pub video: MetricsReport,
    pub videos: Vec<VideoPrediction>,
}

/// Frame- and video-level reports for a model over the examples at `indices`.
pub fn evaluate(
    model: &dyn Predictor,
    examples: &Examples<'_>,
    indices: &[usize],
    exclude_uninformative: bool,
) -> Result<Evaluation> {
    let probs = predict_examples(model, examples, indices)?;
    evaluate_probabilities(&probs, examples, indices, exclude_uninformative)
}

/// Reports from precomputed probabilities, row `r` belonging to example `indices[r]`.
pub fn evaluate_probabilities(
    probs: &Array2<f32>,
    examples: &Examples<'_>,
    indices: &[usize],
    exclude_uninformative: bool,
) -> Result<Evaluation> {
    let labels: Vec<Class> = indices.iter().map(|&i| examples.label(i)).collect();
    let frame = MetricsReport::from_probabilities(probs, &labels, exclude_uninformative)?;
    let ids: Vec<&str> = indices.iter().map(|&i| examples.video_id(i)).collect();
    let videos = aggregate_video(&ids, probs)?;
    let mut video_label: BTreeMap<&str, Class> = BTreeMap::new();
    for (r, id) in ids.iter().enumerate() {
        video_label.entry(id).or_insert(labels[r]);
    }
    let vprobs = Array2::from_shape_fn((videos.len(), probs.ncols()), |(i, j)| videos[i].probs[j] as f32);
    let vlabels: Vec<Class> = videos.iter().map(|v| video_label[v.video_id.as_str()]).collect();
    let video = MetricsReport::from_probabilities(&vprobs, &vlabels, exclude_uninformative)?;
    Ok(Evaluation { frame, video, videos })
}

/// Refuses checkpoints trained against a different split.
pub fn verify_split(meta: &CheckpointMeta, assignment: &FoldAssignment) -> Result<()> {
    let hash = assignment.hash();
    if meta.split_hash != hash {
        return Err(Error::Config(format!(
            "checkpoint for fold {} was trained on split {}, not {}",
            meta.fold, meta.split_hash, hash
        )));
    }
    Ok(())
}
