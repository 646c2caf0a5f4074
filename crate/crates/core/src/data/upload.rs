//! In-memory media decoding for uploaded payloads.

use image::{DynamicImage, ImageFormat};
use ndarray::Array3;

use super::dataset::DatasetParams;
use super::image_ops::{crop_square, preprocess};
use super::video::{open_video_bytes, sample_frames};
use crate::class::MediaKind;
use crate::error::{Error, Result};

/// Media types accepted for upload, detected from content.
pub const ACCEPTED_MEDIA: [&str; 5] = ["image/png", "image/jpeg", "image/bmp", "image/gif", "video/x-yuv4mpeg"];

#[derive(Debug, Clone)]
pub struct DecodedUpload {
    pub kind: MediaKind,
    pub media_type: &'static str,
    /// Preprocessed frames in sampling order.
    pub frames: Vec<Array3<f32>>,
    /// Source frame index of each kept frame.
    pub source_indices: Vec<usize>,
}

pub fn sniff_media_type(bytes: &[u8]) -> Option<&'static str> {
    if bytes.starts_with(b"YUV4MPEG2") {
        return Some("video/x-yuv4mpeg");
    }
    match image::guess_format(bytes).ok()? {
        ImageFormat::Png => Some("image/png"),
        ImageFormat::Jpeg => Some("image/jpeg"),
        ImageFormat::Bmp => Some("image/bmp"),
        ImageFormat::Gif => Some("image/gif"),
        _ => None,
    }
}

/// Decodes a still image or a video; videos are sampled like recordings.
///
/// A GIF with one frame is treated as a still image.
pub fn decode_upload(bytes: Vec<u8>, params: &DatasetParams) -> Result<DecodedUpload> {
    if bytes.is_empty() {
        return Err(Error::Decode("empty payload".into()));
    }
    let media_type = sniff_media_type(&bytes).ok_or_else(|| Error::Decode("unrecognised media type".into()))?;
    if media_type.starts_with("image/") && media_type != "image/gif" {
        let img = image::load_from_memory(&bytes)?;
        return still(img, media_type);
    }
    let mut source = open_video_bytes(bytes)?;
    let fps = source.fps();
    let mut first = Vec::new();
    while first.len() < 2 {
        match source.next_frame()? {
            Some(f) => first.push(f),
            None => break,
        }
    }
    if first.is_empty() {
        return Err(Error::Decode("video has no frames".into()));
    }
    if first.len() == 1 {
        return still(first.pop().expect("one frame"), media_type);
    }
    let fps = fps.ok_or_else(|| Error::Decode("video has no frame rate".into()))?;
    let mut replay = Replay {
        buffered: first.into_iter(),
        rest: source,
    };
    let raw = sample_frames(&mut replay, fps, params.target_hz, params.max_frames)?;
    let mut frames = Vec::with_capacity(raw.len());
    let mut source_indices = Vec::with_capacity(raw.len());
    for f in raw {
        frames.push(preprocess(&crop_square(&f.image, None)?)?);
        source_indices.push(f.index);
    }
    Ok(DecodedUpload {
        kind: MediaKind::Video,
        media_type,
        frames,
        source_indices,
    })
}

fn still(img: DynamicImage, media_type: &'static str) -> Result<DecodedUpload> {
    Ok(DecodedUpload {
        kind: MediaKind::Image,
        media_type,
        frames: vec![preprocess(&crop_square(&img, None)?)?],
        source_indices: vec![0],
    })
}

struct Replay {
    buffered: std::vec::IntoIter<DynamicImage>,
    rest: Box<dyn super::video::FrameSource>,
}

impl super::video::FrameSource for Replay {
    fn fps(&self) -> Option<f64> {
        self.rest.fps()
    }

    fn next_frame(&mut self) -> Result<Option<DynamicImage>> {
        match self.buffered.next() {
            Some(f) => Ok(Some(f)),
            None => self.rest.next_frame(),
        }
    }
}
