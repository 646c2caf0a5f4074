//! Classifier configurations and the concrete frame and video architectures.

use std::fmt;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use ndarray::{s, Array2, Array3, Array4, ArrayD, Axis, IxDyn};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::checkpoint;
use super::layers::{Activation, BatchNorm, Conv, Dense, DepthwiseConv, Layer, Mode};
use super::network::{softmax, Network, ParamCounts};
use crate::data::augment::{sample_rng, AugmentationPolicy};
use crate::data::dataset::{recording_frames, DatasetParams};
use crate::data::manifest::RecordingMeta;
use crate::data::FRAME_SIZE;
use crate::error::{Error, Result};

/// Length of one segmentation-bottleneck encoding.
pub const SEGMENT_FEATURES: usize = 560;
pub const CHUNK_LEN: usize = 5;
pub const CHUNK_HZ: f64 = 5.0;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Arch {
    VggHead,
    VggCam,
    Mobile,
    SegmentEnc,
    Video3d,
}

impl Arch {
    pub const ALL: [Arch; 5] = [Arch::VggHead, Arch::VggCam, Arch::Mobile, Arch::SegmentEnc, Arch::Video3d];

    pub fn as_str(self) -> &'static str {
        match self {
            Arch::VggHead => "vgg_head",
            Arch::VggCam => "vgg_cam",
            Arch::Mobile => "mobile",
            Arch::SegmentEnc => "segment_enc",
            Arch::Video3d => "video3d",
        }
    }

    pub fn is_frame_model(self) -> bool {
        !matches!(self, Arch::Video3d)
    }

    pub fn default_widths(self) -> Vec<Vec<usize>> {
        match self {
            Arch::VggHead | Arch::VggCam => vec![
                vec![64, 64],
                vec![128, 128],
                vec![256, 256, 256],
                vec![512, 512, 512],
                vec![512, 512, 512],
            ],
            Arch::Mobile => vec![vec![32], vec![64], vec![128, 128], vec![256, 256], vec![512, 512]],
            Arch::Video3d => vec![vec![16], vec![32], vec![64], vec![128]],
            Arch::SegmentEnc => vec![],
        }
    }

    fn input_norm(self) -> InputNorm {
        match self {
            Arch::VggHead | Arch::VggCam => InputNorm::Caffe,
            Arch::Mobile => InputNorm::Symmetric,
            Arch::SegmentEnc | Arch::Video3d => InputNorm::Identity,
        }
    }
}

impl fmt::Display for Arch {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Arch {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.trim().to_ascii_lowercase().replace('-', "_").as_str() {
            "vgg_head" | "vgg" => Ok(Arch::VggHead),
            "vgg_cam" => Ok(Arch::VggCam),
            "mobile" => Ok(Arch::Mobile),
            "segment_enc" => Ok(Arch::SegmentEnc),
            "video3d" | "video_3d" => Ok(Arch::Video3d),
            other => Err(Error::Config(format!("unknown arch `{other}`"))),
        }
    }
}

/// Pixel normalization applied at the model boundary to `[0, 1]` RGB input.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum InputNorm {
    /// BGR, 0..255, ImageNet channel means subtracted.
    Caffe,
    /// Scaled to `[-1, 1]`.
    Symmetric,
    Identity,
}

const CAFFE_MEAN_BGR: [f32; 3] = [103.939, 116.779, 123.68];

impl InputNorm {
    fn apply(self, x: &mut ArrayD<f32>) {
        match self {
            InputNorm::Identity => {}
            InputNorm::Symmetric => x.mapv_inplace(|v| v * 2.0 - 1.0),
            InputNorm::Caffe => {
                let rgb = x.clone();
                for (bgr, src) in [(0usize, 2usize), (1, 1), (2, 0)] {
                    let mean = CAFFE_MEAN_BGR[bgr];
                    let from = rgb.index_axis(Axis(1), src);
                    x.index_axis_mut(Axis(1), bgr).assign(&from.mapv(|v| v * 255.0 - mean));
                }
            }
        }
    }
}

/// External weights file referenced by path and optional SHA-256.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct WeightsRef {
    pub path: PathBuf,
    #[serde(default)]
    pub sha256: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ClassifierConfig {
    pub arch: Arch,
    pub n_classes: usize,
    pub dropout_rate: f64,
    /// Trailing backbone layers (pooling included) left trainable; the head is always trainable.
    pub trainable_tail_layers: usize,
    pub pretrained_backbone: bool,
    pub backbone_weights: Option<WeightsRef>,
    /// Convolution widths per block; `None` uses the architecture default.
    pub backbone_widths: Option<Vec<Vec<usize>>>,
    pub hidden_units: usize,
    pub dense_sizes: Vec<usize>,
    pub input_size: usize,
    pub chunk_len: usize,
    /// Layer whose output Grad-CAM differentiates; defaults to the last backbone block output.
    pub cam_layer: Option<String>,
    pub init_seed: u64,
}

impl Default for ClassifierConfig {
    fn default() -> Self {
        ClassifierConfig {
            arch: Arch::VggCam,
            n_classes: 4,
            dropout_rate: 0.5,
            trainable_tail_layers: 3,
            pretrained_backbone: false,
            backbone_weights: None,
            backbone_widths: None,
            hidden_units: 64,
            dense_sizes: vec![512, 256],
            input_size: FRAME_SIZE,
            chunk_len: CHUNK_LEN,
            cam_layer: None,
            init_seed: 0,
        }
    }
}

impl ClassifierConfig {
    pub fn new(arch: Arch) -> Self {
        ClassifierConfig {
            arch,
            ..Default::default()
        }
    }

    pub fn widths(&self) -> Vec<Vec<usize>> {
        self.backbone_widths.clone().unwrap_or_else(|| self.arch.default_widths())
    }

    pub fn default_weights_path(&self) -> PathBuf {
        PathBuf::from("weights").join(format!("{}_backbone.safetensors", self.arch))
    }

    pub fn validate(&self) -> Result<()> {
        if self.n_classes < 2 {
            return Err(Error::Config(format!("n_classes must be at least 2, got {}", self.n_classes)));
        }
        if !(0.0..1.0).contains(&self.dropout_rate) {
            return Err(Error::Config(format!("dropout_rate must lie in [0, 1), got {}", self.dropout_rate)));
        }
        if self.arch == Arch::SegmentEnc {
            if self.dense_sizes.is_empty() || self.dense_sizes.contains(&0) {
                return Err(Error::Config("dense_sizes must be non-empty and positive".into()));
            }
            return Ok(());
        }
        let widths = self.widths();
        if widths.is_empty() || widths.iter().any(|b| b.is_empty() || b.contains(&0)) {
            return Err(Error::Config("backbone widths must be non-empty and positive".into()));
        }
        if self.input_size >> widths.len() == 0 {
            return Err(Error::Config(format!(
                "input size {} too small for {} pooling stages",
                self.input_size,
                widths.len()
            )));
        }
        if self.arch == Arch::VggHead && self.hidden_units == 0 {
            return Err(Error::Config("hidden_units must be positive".into()));
        }
        if self.arch == Arch::Video3d && self.chunk_len == 0 {
            return Err(Error::Config("chunk_len must be positive".into()));
        }
        Ok(())
    }
}

/// Stochastic inference modes for uncertainty estimation.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum StochasticMode {
    /// Monte-Carlo dropout.
    Dropout,
    /// Test-time augmentation with dropout off.
    Tta,
}

/// Five consecutive preprocessed frames of one video.
#[derive(Debug, Clone, PartialEq)]
pub struct VideoChunk {
    pub video_id: String,
    pub chunk_index: usize,
    /// `[H, W, 3]` frames in `[0, 1]`.
    pub frames: Vec<Array3<f32>>,
}

impl VideoChunk {
    pub fn validate(&self, chunk_len: usize) -> Result<()> {
        if self.frames.len() != chunk_len {
            return Err(Error::invalid(format!(
                "chunk {} of `{}` has {} frames, expected {chunk_len}",
                self.chunk_index,
                self.video_id,
                self.frames.len()
            )));
        }
        let shape = self.frames[0].shape();
        if shape.len() != 3 || shape[2] != 3 || self.frames.iter().any(|f| f.shape() != shape) {
            return Err(Error::invalid(format!("chunk `{}` has inconsistent frame shapes", self.video_id)));
        }
        Ok(())
    }
}

/// Splits sampled frames into non-overlapping chunks; the remainder is dropped.
pub fn chunk_frames(video_id: &str, frames: Vec<Array3<f32>>, chunk_len: usize) -> Vec<VideoChunk> {
    if frames.len() < chunk_len {
        log::warn!("video `{video_id}` has {} frames, too short for a {chunk_len}-frame chunk", frames.len());
    }
    let mut out = Vec::new();
    let mut it = frames.into_iter();
    loop {
        let chunk: Vec<_> = it.by_ref().take(chunk_len).collect();
        if chunk.len() < chunk_len || chunk_len == 0 {
            break;
        }
        out.push(VideoChunk {
            video_id: video_id.to_string(),
            chunk_index: out.len(),
            frames: chunk,
        });
    }
    out
}

/// Samples a video at `target_hz` and splits it into `chunk_len`-frame chunks.
pub fn chunk_video(rec: &RecordingMeta, target_hz: f64, chunk_len: usize) -> Result<Vec<VideoChunk>> {
    let params = DatasetParams {
        target_hz,
        max_frames: usize::MAX,
        include_uninformative: true,
    };
    let frames = recording_frames(rec, &params)?.into_iter().map(|s| s.pixels).collect();
    Ok(chunk_frames(&rec.id, frames, chunk_len))
}

/// Bottleneck features of the external segmentation ensemble for one frame.
#[derive(Debug, Clone, PartialEq)]
pub struct SegmentEncoding {
    features: Vec<f32>,
}

impl SegmentEncoding {
    pub fn new(features: Vec<f32>) -> Result<Self> {
        if features.len() != SEGMENT_FEATURES {
            return Err(Error::invalid(format!(
                "segment encoding has {} values, expected {SEGMENT_FEATURES}",
                features.len()
            )));
        }
        if features.iter().any(|v| !v.is_finite()) {
            return Err(Error::invalid("segment encoding contains non-finite values"));
        }
        Ok(SegmentEncoding { features })
    }

    pub fn features(&self) -> &[f32] {
        &self.features
    }

    pub fn from_le_bytes(bytes: &[u8]) -> Result<Self> {
        if bytes.len() != SEGMENT_FEATURES * 4 {
            return Err(Error::invalid(format!(
                "feature file has {} bytes, expected {}",
                bytes.len(),
                SEGMENT_FEATURES * 4
            )));
        }
        Self::new(bytes.chunks_exact(4).map(|b| f32::from_le_bytes([b[0], b[1], b[2], b[3]])).collect())
    }

    pub fn to_le_bytes(&self) -> Vec<u8> {
        self.features.iter().flat_map(|v| v.to_le_bytes()).collect()
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
        Self::from_le_bytes(&bytes)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        crate::io::write_atomic(path, &self.to_le_bytes())
    }
}

/// Feature file location for a frame cache entry (same stem, `.feat` suffix).
pub fn feature_path(cache_entry: &Path) -> PathBuf {
    cache_entry.with_extension("feat")
}

/// A batch in the representation a model consumes.
#[derive(Debug, Clone, Copy)]
pub enum ModelInput<'a> {
    /// `[H, W, 3]` frames in `[0, 1]`.
    Frames(&'a [Array3<f32>]),
    Chunks(&'a [VideoChunk]),
    Features(&'a [SegmentEncoding]),
}

impl ModelInput<'_> {
    pub fn len(&self) -> usize {
        match self {
            ModelInput::Frames(f) => f.len(),
            ModelInput::Chunks(c) => c.len(),
            ModelInput::Features(f) => f.len(),
        }
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

/// Stacks `[H, W, 3]` frames into `[N, 3, H, W]`.
pub fn frames_to_tensor(frames: &[Array3<f32>]) -> Result<ArrayD<f32>> {
    let first = frames.first().ok_or_else(|| Error::invalid("empty batch"))?;
    let (h, w, c) = first.dim();
    let mut t = Array4::<f32>::zeros((frames.len(), c, h, w));
    for (i, f) in frames.iter().enumerate() {
        if f.dim() != (h, w, c) {
            return Err(Error::invalid(format!("frame {i} has shape {:?}, expected {:?}", f.shape(), first.shape())));
        }
        t.slice_mut(s![i, .., .., ..]).assign(&f.view().permuted_axes([2, 0, 1]));
    }
    Ok(t.into_dyn())
}

fn chunks_to_tensor(chunks: &[VideoChunk], chunk_len: usize) -> Result<ArrayD<f32>> {
    let first = chunks.first().ok_or_else(|| Error::invalid("empty batch"))?;
    first.validate(chunk_len)?;
    let (h, w, c) = first.frames[0].dim();
    let mut t = ArrayD::<f32>::zeros(IxDyn(&[chunks.len(), c, chunk_len, h, w]));
    for (i, chunk) in chunks.iter().enumerate() {
        chunk.validate(chunk_len)?;
        for (d, f) in chunk.frames.iter().enumerate() {
            if f.dim() != (h, w, c) {
                return Err(Error::invalid("chunks in a batch must share a frame shape"));
            }
            t.slice_mut(s![i, .., d, .., ..]).assign(&f.view().permuted_axes([2, 0, 1]));
        }
    }
    Ok(t)
}

/// A built network bound to its configuration.
#[derive(Debug, Clone)]
pub struct Classifier {
    config: ClassifierConfig,
    network: Network,
    backbone_len: usize,
    norm: InputNorm,
}

/// Builds a frame-based classifier (every arch except `video3d`).
pub fn build_frame_classifier(config: &ClassifierConfig) -> Result<Classifier> {
    if !config.arch.is_frame_model() {
        return Err(Error::Config(format!("{} is not a frame classifier; use build_video_classifier", config.arch)));
    }
    Classifier::build(config)
}

/// Builds the 3-D chunk classifier.
pub fn build_video_classifier(config: &ClassifierConfig) -> Result<VideoClassifier> {
    if config.arch != Arch::Video3d {
        return Err(Error::Config(format!("{} is not a video classifier", config.arch)));
    }
    Ok(VideoClassifier(Classifier::build(config)?))
}

impl Classifier {
    pub fn build(config: &ClassifierConfig) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(config.init_seed);
        let mut net = Network::default();
        let drop = config.dropout_rate as f32;
        let n = config.n_classes;
        let mut channels = 3;
        match config.arch {
            Arch::VggHead | Arch::VggCam => {
                for (b, block) in config.widths().iter().enumerate() {
                    for (i, &w) in block.iter().enumerate() {
                        net.push(
                            format!("block{}_conv{}", b + 1, i + 1),
                            Layer::Conv(Conv::new(channels, w, [1, 3, 3], 2, &mut rng)),
                        );
                        channels = w;
                    }
                    net.push(format!("block{}_pool", b + 1), Layer::MaxPool);
                }
            }
            Arch::Mobile => {
                for (b, block) in config.widths().iter().enumerate() {
                    for (i, &w) in block.iter().enumerate() {
                        if b == 0 {
                            net.push(
                                format!("block1_conv{}", i + 1),
                                Layer::Conv(Conv::new(channels, w, [1, 3, 3], 2, &mut rng)),
                            );
                        } else {
                            net.push(
                                format!("block{}_dw{}", b + 1, i + 1),
                                Layer::Depthwise(DepthwiseConv::new(channels, &mut rng)),
                            );
                            net.push(
                                format!("block{}_pw{}", b + 1, i + 1),
                                Layer::Conv(Conv::new(channels, w, [1, 1, 1], 2, &mut rng)),
                            );
                        }
                        channels = w;
                    }
                    net.push(format!("block{}_pool", b + 1), Layer::MaxPool);
                }
            }
            Arch::Video3d => {
                for (b, block) in config.widths().iter().enumerate() {
                    for (i, &w) in block.iter().enumerate() {
                        net.push(
                            format!("block{}_conv{}", b + 1, i + 1),
                            Layer::Conv(Conv::new(channels, w, [3, 3, 3], 3, &mut rng)),
                        );
                        channels = w;
                    }
                    net.push(format!("block{}_pool", b + 1), Layer::MaxPool);
                }
            }
            Arch::SegmentEnc => {}
        }
        let backbone_len = if config.arch == Arch::SegmentEnc {
            0
        } else {
            net.push("global_avg_pool", Layer::GlobalAvgPool);
            net.layers.len()
        };

        match config.arch {
            Arch::VggHead => {
                net.push(
                    "head_dense",
                    Layer::Dense(Dense::new(channels, config.hidden_units, Activation::Relu, &mut rng)),
                );
                net.push("head_dropout", Layer::Dropout { rate: drop });
                net.push("head_bn", Layer::BatchNorm(BatchNorm::new(config.hidden_units)));
                net.push(
                    "predictions",
                    Layer::Dense(Dense::new(config.hidden_units, n, Activation::Linear, &mut rng)),
                );
            }
            Arch::SegmentEnc => {
                let mut width = SEGMENT_FEATURES;
                for (i, &size) in config.dense_sizes.iter().enumerate() {
                    net.push(
                        format!("dense{}", i + 1),
                        Layer::Dense(Dense::new(width, size, Activation::Relu, &mut rng)),
                    );
                    width = size;
                }
                net.push("head_dropout", Layer::Dropout { rate: drop });
                net.push("predictions", Layer::Dense(Dense::new(width, n, Activation::Linear, &mut rng)));
            }
            Arch::VggCam | Arch::Mobile | Arch::Video3d => {
                net.push("head_dropout", Layer::Dropout { rate: drop });
                net.push("predictions", Layer::Dense(Dense::new(channels, n, Activation::Linear, &mut rng)));
            }
        }

        let frozen = backbone_len.saturating_sub(config.trainable_tail_layers);
        for (i, l) in net.layers.iter_mut().enumerate() {
            l.trainable = i >= frozen;
        }

        let mut model = Classifier {
            config: config.clone(),
            network: net,
            backbone_len,
            norm: config.arch.input_norm(),
        };
        if config.pretrained_backbone && backbone_len > 0 {
            let weights = config.backbone_weights.clone().unwrap_or_else(|| WeightsRef {
                path: config.default_weights_path(),
                sha256: None,
            });
            match checkpoint::load_backbone(&mut model.network, backbone_len, &weights) {
                Err(Error::MissingWeights(path)) if config.arch == Arch::Video3d => {
                    log::warn!("no 3-D backbone weights at {}; using random initialization", path.display());
                }
                other => other?,
            }
        }
        if let Some(name) = &config.cam_layer {
            model.cam_target(Some(name))?;
        }
        Ok(model)
    }

    pub fn config(&self) -> &ClassifierConfig {
        &self.config
    }

    pub fn network(&self) -> &Network {
        &self.network
    }

    pub fn network_mut(&mut self) -> &mut Network {
        &mut self.network
    }

    /// Number of layers before the classification head.
    pub fn backbone_len(&self) -> usize {
        self.backbone_len
    }

    pub fn param_counts(&self) -> ParamCounts {
        self.network.param_counts()
    }

    pub fn n_classes(&self) -> usize {
        self.config.n_classes
    }

    /// Sets every dropout layer's rate.
    pub fn set_dropout_rate(&mut self, rate: f64) -> Result<()> {
        if !(0.0..1.0).contains(&rate) {
            return Err(Error::Config(format!("dropout rate must lie in [0, 1), got {rate}")));
        }
        for l in &mut self.network.layers {
            if let Layer::Dropout { rate: r } = &mut l.layer {
                *r = rate as f32;
            }
        }
        self.config.dropout_rate = rate;
        Ok(())
    }

    /// Validates and normalizes a batch into the network input tensor.
    pub fn input_tensor(&self, input: ModelInput<'_>) -> Result<ArrayD<f32>> {
        if input.is_empty() {
            return Err(Error::invalid("empty batch"));
        }
        let s = self.config.input_size;
        let mut t = match (self.config.arch, input) {
            (Arch::SegmentEnc, ModelInput::Features(f)) => {
                let data: Vec<f32> = f.iter().flat_map(|e| e.features().iter().copied()).collect();
                ArrayD::from_shape_vec(IxDyn(&[f.len(), SEGMENT_FEATURES]), data).expect("sized")
            }
            (Arch::Video3d, ModelInput::Chunks(c)) => chunks_to_tensor(c, self.config.chunk_len)?,
            (arch, ModelInput::Frames(f)) if arch.is_frame_model() && arch != Arch::SegmentEnc => frames_to_tensor(f)?,
            (arch, _) => {
                return Err(Error::invalid(format!("{arch} cannot consume this input kind")));
            }
        };
        let sh = t.shape();
        if sh.len() >= 4 && (sh[1] != 3 || sh[sh.len() - 2] != s || sh[sh.len() - 1] != s) {
            return Err(Error::invalid(format!("expected {s}x{s} RGB input, got shape {sh:?}")));
        }
        self.norm.apply(&mut t);
        Ok(t)
    }

    pub fn logits(&self, x: &ArrayD<f32>, mode: Mode, rng: &mut ChaCha8Rng) -> Result<ArrayD<f32>> {
        self.network.forward(x, mode, rng)
    }

    /// Deterministic class probabilities, one row per input.
    pub fn predict(&self, input: ModelInput<'_>) -> Result<Array2<f32>> {
        let x = self.input_tensor(input)?;
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        softmax(&self.logits(&x, Mode::Inference, &mut rng)?)
    }

    /// Probabilities for a batch of `[H, W, 3]` frames.
    pub fn forward(&self, frames: &[Array3<f32>]) -> Result<Array2<f32>> {
        self.predict(ModelInput::Frames(frames))
    }

    /// Index of the layer whose output is the convolutional feature map.
    pub fn cam_target(&self, name: Option<&str>) -> Result<usize> {
        if self.backbone_len == 0 {
            return Err(Error::Unsupported(format!("{} has no convolutional feature maps", self.config.arch)));
        }
        match name.or(self.config.cam_layer.as_deref()) {
            Some(name) => {
                let idx = self
                    .network
                    .index_of(name)
                    .ok_or_else(|| Error::Config(format!("no layer named `{name}`")))?;
                if idx + 1 >= self.backbone_len {
                    return Err(Error::Config(format!("`{name}` is not a spatial backbone layer")));
                }
                Ok(idx)
            }
            // The layer feeding global average pooling.
            None => Ok(self.backbone_len - 2),
        }
    }

    /// True when global average pooling is followed only by dropout and one dense layer.
    pub fn has_cam_head(&self) -> bool {
        if self.backbone_len == 0 {
            return false;
        }
        let head: Vec<_> = self.network.layers[self.backbone_len..]
            .iter()
            .filter(|l| !matches!(l.layer, Layer::Dropout { .. }))
            .collect();
        head.len() == 1 && matches!(head[0].layer, Layer::Dense(_))
    }

    /// Final dense kernel `[features, classes]` of a CAM head.
    pub fn cam_weights(&self) -> Result<&ArrayD<f32>> {
        if !self.has_cam_head() {
            return Err(Error::Unsupported(format!(
                "{} does not end in pooling plus a single dense layer; use grad_cam",
                self.config.arch
            )));
        }
        match &self.network.layers.last().expect("non-empty").layer {
            Layer::Dense(d) => Ok(&d.kernel),
            _ => unreachable!("checked by has_cam_head"),
        }
    }

    /// Probabilities plus the feature maps feeding global pooling, as `[N, H, W, C]`.
    pub fn forward_with_features(&self, frames: &[Array3<f32>]) -> Result<(Array2<f32>, Array4<f32>)> {
        let idx = self.cam_target(None)?;
        let x = self.input_tensor(ModelInput::Frames(frames))?;
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let maps = self.network.forward_range(&x, 0..idx + 1, Mode::Inference, &mut rng)?;
        let logits = self
            .network
            .forward_range(&maps, idx + 1..self.network.layers.len(), Mode::Inference, &mut rng)?;
        let maps = maps
            .into_dimensionality::<ndarray::Ix4>()
            .map_err(|_| Error::Unsupported("feature maps are not 2-D".into()))?
            .permuted_axes([0, 2, 3, 1])
            .as_standard_layout()
            .into_owned();
        Ok((softmax(&logits)?, maps))
    }

    /// `n_passes` probability matrices stacked as `[passes, batch, classes]`.
    pub fn stochastic_forward(
        &self,
        input: ModelInput<'_>,
        n_passes: usize,
        mode: StochasticMode,
        policy: &AugmentationPolicy,
        seed: u64,
    ) -> Result<Array3<f32>> {
        if n_passes < 2 {
            return Err(Error::Config(format!("need at least 2 passes, got {n_passes}")));
        }
        let b = input.len();
        let mut out = Array3::<f32>::zeros((n_passes, b, self.n_classes()));
        match mode {
            StochasticMode::Dropout => {
                let x = self.input_tensor(input)?;
                // Layers before the first dropout are deterministic; run them once.
                let split = self
                    .network
                    .layers
                    .iter()
                    .position(|l| matches!(l.layer, Layer::Dropout { .. }))
                    .unwrap_or(self.network.layers.len());
                let mut rng = ChaCha8Rng::seed_from_u64(seed);
                let shared = self.network.forward_range(&x, 0..split, Mode::Inference, &mut rng)?;
                for p in 0..n_passes {
                    let mut rng = ChaCha8Rng::seed_from_u64(seed);
                    rng.set_stream(p as u64);
                    let logits = self
                        .network
                        .forward_range(&shared, split..self.network.layers.len(), Mode::McDropout, &mut rng)?;
                    out.index_axis_mut(Axis(0), p).assign(&softmax(&logits)?);
                }
            }
            StochasticMode::Tta => {
                policy.validate()?;
                for p in 0..n_passes {
                    let probs = match input {
                        ModelInput::Frames(frames) => {
                            let aug: Vec<Array3<f32>> = frames
                                .iter()
                                .enumerate()
                                .map(|(i, f)| {
                                    let mut rng = sample_rng(seed, "", i, p as u64);
                                    policy.sample_transform(&mut rng).apply(f)
                                })
                                .collect();
                            self.predict(ModelInput::Frames(&aug))?
                        }
                        ModelInput::Chunks(chunks) => {
                            let aug: Vec<VideoChunk> = chunks
                                .iter()
                                .enumerate()
                                .map(|(i, c)| {
                                    let mut rng = sample_rng(seed, &c.video_id, i, p as u64);
                                    let t = policy.sample_transform(&mut rng);
                                    VideoChunk {
                                        frames: c.frames.iter().map(|f| t.apply(f)).collect(),
                                        ..c.clone()
                                    }
                                })
                                .collect();
                            self.predict(ModelInput::Chunks(&aug))?
                        }
                        ModelInput::Features(_) => {
                            return Err(Error::Unsupported("test-time augmentation needs image input".into()));
                        }
                    };
                    out.index_axis_mut(Axis(0), p).assign(&probs);
                }
            }
        }
        Ok(out)
    }
}

/// Chunk classifier with the same probability contract as frame classifiers.
#[derive(Debug, Clone)]
pub struct VideoClassifier(pub Classifier);

impl VideoClassifier {
    pub fn forward(&self, chunks: &[VideoChunk]) -> Result<Array2<f32>> {
        self.0.predict(ModelInput::Chunks(chunks))
    }

    pub fn classifier(&self) -> &Classifier {
        &self.0
    }
}
