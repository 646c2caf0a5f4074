pub mod augment;
pub mod dataset;
pub mod image_ops;
pub mod manifest;
pub mod upload;
pub mod video;

pub use augment::{augment, AugmentationPolicy, Transform};
pub use dataset::{build_dataset, Dataset, DatasetParams, FrameSample};
pub use image_ops::{crop_square, preprocess, CropWindow, FRAME_SIZE};
pub use manifest::{load_manifest, RecordingMeta};
pub use video::{extract_frames, RawFrame};
pub use upload::{decode_upload, DecodedUpload};
