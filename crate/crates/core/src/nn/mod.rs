//! Convolutional classifiers built on `ndarray`.

pub mod checkpoint;
pub mod layers;
pub mod network;
pub mod zoo;

pub use checkpoint::{checkpoint_path, load_checkpoint, save_checkpoint, CheckpointMeta};
pub use layers::{Layer, Mode};
pub use network::{argmax_rows, softmax, Network, ParamCounts};
pub use zoo::{
    build_frame_classifier, build_video_classifier, chunk_frames, chunk_video, Arch, Classifier, ClassifierConfig,
    ModelInput, SegmentEncoding, StochasticMode, VideoChunk, VideoClassifier, WeightsRef,
};
