//! Video decoding and fixed-rate frame sampling.
//!
//! Supported sources: YUV4MPEG2 (`.y4m`) streams, animated GIFs, directories
//! of still frames (sorted by file name), and anything `ffmpeg` can read when
//! it is on `PATH`.

use std::fs::File;
use std::io::{BufReader, Cursor, Read, Write};
use std::path::{Path, PathBuf};
use std::process::{Child, ChildStdout, Command, Stdio};

use image::codecs::gif::GifDecoder;
use image::{AnimationDecoder, DynamicImage, GrayImage, RgbImage};

use crate::class::MediaKind;
use crate::data::manifest::RecordingMeta;
use crate::error::{Error, Result};

/// A decoded frame with its position in the source stream.
#[derive(Debug, Clone)]
pub struct RawFrame {
    /// Index of the frame in the source video.
    pub index: usize,
    /// Seconds from the start of the video.
    pub timestamp: f64,
    pub image: DynamicImage,
}

/// Sequential frame reader.
pub trait FrameSource {
    /// Native frame rate, when the container records one.
    fn fps(&self) -> Option<f64>;
    fn next_frame(&mut self) -> Result<Option<DynamicImage>>;
}

/// Stride between kept frames when sampling `fps` down to `target_hz`.
pub fn sampling_stride(fps: f64, target_hz: f64) -> Result<usize> {
    if !(target_hz.is_finite() && target_hz > 0.0) {
        return Err(Error::Config(format!("target rate must be > 0, got {target_hz}")));
    }
    if !(fps.is_finite() && fps > 0.0) {
        return Err(Error::Config(format!("fps must be > 0, got {fps}")));
    }
    if fps < target_hz {
        return Err(Error::Config(format!(
            "video fps {fps} is below the target sampling rate {target_hz}"
        )));
    }
    Ok(((fps / target_hz).round() as usize).max(1))
}

/// Keeps frames `0, s, 2s, ...` with `s = round(fps / target_hz)`, stopping
/// once `max_frames` have been collected.
pub fn sample_frames(
    source: &mut dyn FrameSource,
    fps: f64,
    target_hz: f64,
    max_frames: usize,
) -> Result<Vec<RawFrame>> {
    let stride = sampling_stride(fps, target_hz)?;
    let mut out = Vec::new();
    let mut index = 0usize;
    while out.len() < max_frames {
        let Some(image) = source.next_frame()? else {
            break;
        };
        if index % stride == 0 {
            out.push(RawFrame {
                index,
                timestamp: index as f64 / fps,
                image,
            });
        }
        index += 1;
    }
    Ok(out)
}

/// Decodes `rec` and samples it at `target_hz`, capped at `max_frames`
/// (the head of long videos is kept).
pub fn extract_frames(rec: &RecordingMeta, target_hz: f64, max_frames: usize) -> Result<Vec<RawFrame>> {
    if rec.kind != MediaKind::Video {
        return Err(Error::Config(format!("recording `{}` is not a video", rec.id)));
    }
    let fps = rec
        .fps
        .ok_or_else(|| Error::Config(format!("video `{}` has no fps", rec.id)))?;
    sampling_stride(fps, target_hz)?;
    let mut source = open_video(&rec.path)?;
    sample_frames(source.as_mut(), fps, target_hz, max_frames)
}

/// Counts the frames of a video by decoding it completely.
pub fn count_frames(path: &Path) -> Result<usize> {
    let mut source = open_video(path)?;
    let mut n = 0;
    while source.next_frame()?.is_some() {
        n += 1;
    }
    Ok(n)
}

pub fn open_video(path: &Path) -> Result<Box<dyn FrameSource>> {
    if path.is_dir() {
        return Ok(Box::new(DirSource::new(path)?));
    }
    let mut file = File::open(path).map_err(|e| Error::io(path, e))?;
    let mut magic = [0u8; 9];
    let n = file.read(&mut magic).map_err(|e| Error::io(path, e))?;
    let magic = &magic[..n];
    drop(file);
    let reopen = || File::open(path).map_err(|e| Error::io(path, e));
    if magic.starts_with(b"YUV4MPEG2") {
        Ok(Box::new(Y4mSource::new(BufReader::new(reopen()?))?))
    } else if magic.starts_with(b"GIF8") {
        Ok(Box::new(GifSource::new(BufReader::new(reopen()?))?))
    } else if ffmpeg_available() {
        Ok(Box::new(FfmpegSource::spawn(path)?))
    } else {
        Err(Error::Decode(format!(
            "{}: unrecognised video container (install ffmpeg for mp4/avi/mov)",
            path.display()
        )))
    }
}

/// Opens an in-memory video (Y4M or GIF).
pub fn open_video_bytes(bytes: Vec<u8>) -> Result<Box<dyn FrameSource>> {
    if bytes.starts_with(b"YUV4MPEG2") {
        Ok(Box::new(Y4mSource::new(Cursor::new(bytes))?))
    } else if bytes.starts_with(b"GIF8") {
        Ok(Box::new(GifSource::new(Cursor::new(bytes))?))
    } else {
        Err(Error::Decode("unrecognised video container".into()))
    }
}

pub struct Y4mSource<R: Read> {
    decoder: y4m::Decoder<R>,
    fps: Option<f64>,
}

impl<R: Read> Y4mSource<R> {
    pub fn new(reader: R) -> Result<Self> {
        let decoder = y4m::Decoder::new(reader).map_err(|e| Error::Decode(format!("y4m: {e:?}")))?;
        let rate = decoder.get_framerate();
        let fps = (rate.den > 0 && rate.num > 0).then(|| rate.num as f64 / rate.den as f64);
        Ok(Y4mSource { decoder, fps })
    }
}

impl<R: Read> FrameSource for Y4mSource<R> {
    fn fps(&self) -> Option<f64> {
        self.fps
    }

    fn next_frame(&mut self) -> Result<Option<DynamicImage>> {
        let width = self.decoder.get_width();
        let height = self.decoder.get_height();
        let colorspace = self.decoder.get_colorspace();
        let bytes_per_sample = self.decoder.get_bytes_per_sample();
        let shift = self.decoder.get_bit_depth().saturating_sub(8);
        let frame = match self.decoder.read_frame() {
            Ok(f) => f,
            Err(y4m::Error::EOF) => return Ok(None),
            Err(e) => return Err(Error::Decode(format!("y4m frame: {e:?}"))),
        };
        let sample = |plane: &[u8], i: usize| -> f32 {
            if bytes_per_sample == 1 {
                plane[i] as f32
            } else {
                (u16::from_le_bytes([plane[2 * i], plane[2 * i + 1]]) >> shift) as f32
            }
        };
        let luma = frame.get_y_plane();
        use y4m::Colorspace as C;
        let (cw, sub_x, sub_y) = match colorspace {
            C::Cmono | C::Cmono12 => {
                let img = GrayImage::from_fn(width as u32, height as u32, |x, y| {
                    let v = sample(luma, y as usize * width + x as usize);
                    image::Luma([v.round().clamp(0.0, 255.0) as u8])
                });
                return Ok(Some(DynamicImage::ImageLuma8(img)));
            }
            C::C444 | C::C444p10 | C::C444p12 => (width, 1, 1),
            C::C422 | C::C422p10 | C::C422p12 => (width.div_ceil(2), 2, 1),
            _ => (width.div_ceil(2), 2, 2),
        };
        let (u, v) = (frame.get_u_plane(), frame.get_v_plane());
        let img = RgbImage::from_fn(width as u32, height as u32, |x, y| {
            let (x, y) = (x as usize, y as usize);
            let yy = sample(luma, y * width + x);
            let ci = (y / sub_y) * cw + x / sub_x;
            image::Rgb(yuv_to_rgb(yy, sample(u, ci), sample(v, ci)))
        });
        Ok(Some(DynamicImage::ImageRgb8(img)))
    }
}

// BT.601, limited range.
fn yuv_to_rgb(y: f32, u: f32, v: f32) -> [u8; 3] {
    let c = 1.164 * (y - 16.0);
    let d = u - 128.0;
    let e = v - 128.0;
    let q = |x: f32| x.round().clamp(0.0, 255.0) as u8;
    [q(c + 1.596 * e), q(c - 0.392 * d - 0.813 * e), q(c + 2.017 * d)]
}

fn rgb_to_yuv(p: [u8; 3]) -> [u8; 3] {
    let (r, g, b) = (p[0] as f32, p[1] as f32, p[2] as f32);
    let q = |x: f32| x.round().clamp(0.0, 255.0) as u8;
    [
        q(16.0 + 0.257 * r + 0.504 * g + 0.098 * b),
        q(128.0 - 0.148 * r - 0.291 * g + 0.439 * b),
        q(128.0 + 0.439 * r - 0.368 * g - 0.071 * b),
    ]
}

/// Writes frames as a YUV4MPEG2 stream at `fps_num / fps_den` frames per
/// second. All-gray inputs are written as `Cmono`, anything else as 4:4:4.
pub fn write_y4m<W: Write>(
    writer: W,
    frames: &[DynamicImage],
    fps_num: usize,
    fps_den: usize,
) -> Result<()> {
    let first = frames
        .first()
        .ok_or_else(|| Error::invalid("cannot write an empty video"))?;
    let (w, h) = (first.width() as usize, first.height() as usize);
    let mono = frames.iter().all(|f| matches!(f, DynamicImage::ImageLuma8(_)));
    let colorspace = if mono {
        y4m::Colorspace::Cmono
    } else {
        y4m::Colorspace::C444
    };
    let mut encoder = y4m::encode(w, h, y4m::Ratio::new(fps_num, fps_den))
        .with_colorspace(colorspace)
        .write_header(writer)
        .map_err(|e| Error::Decode(format!("y4m header: {e:?}")))?;
    for frame in frames {
        if frame.width() as usize != w || frame.height() as usize != h {
            return Err(Error::invalid("all frames must share one size"));
        }
        let (yp, up, vp) = if mono {
            (frame.to_luma8().into_raw(), Vec::new(), Vec::new())
        } else {
            let rgb = frame.to_rgb8();
            let mut planes = (Vec::with_capacity(w * h), Vec::with_capacity(w * h), Vec::with_capacity(w * h));
            for p in rgb.pixels() {
                let [y, u, v] = rgb_to_yuv(p.0);
                planes.0.push(y);
                planes.1.push(u);
                planes.2.push(v);
            }
            planes
        };
        encoder
            .write_frame(&y4m::Frame::new([&yp, &up, &vp], None))
            .map_err(|e| Error::Decode(format!("y4m frame: {e:?}")))?;
    }
    Ok(())
}

pub struct GifSource {
    frames: std::vec::IntoIter<DynamicImage>,
    fps: Option<f64>,
}

impl GifSource {
    pub fn new<R: std::io::BufRead + std::io::Seek>(reader: R) -> Result<Self> {
        let decoder = GifDecoder::new(reader)?;
        let frames = decoder.into_frames().collect_frames()?;
        let fps = frames.first().and_then(|f| {
            let (num, den) = f.delay().numer_denom_ms();
            (num > 0).then(|| 1000.0 * den as f64 / num as f64)
        });
        let frames: Vec<DynamicImage> = frames
            .into_iter()
            .map(|f| DynamicImage::ImageRgba8(f.into_buffer()))
            .collect();
        Ok(GifSource {
            frames: frames.into_iter(),
            fps,
        })
    }
}

impl FrameSource for GifSource {
    fn fps(&self) -> Option<f64> {
        self.fps
    }

    fn next_frame(&mut self) -> Result<Option<DynamicImage>> {
        Ok(self.frames.next())
    }
}

/// Still frames in a directory, ordered by file name.
pub struct DirSource {
    files: std::vec::IntoIter<PathBuf>,
}

impl DirSource {
    pub fn new(dir: &Path) -> Result<Self> {
        let mut files: Vec<PathBuf> = std::fs::read_dir(dir)
            .map_err(|e| Error::io(dir, e))?
            .filter_map(|e| e.ok().map(|e| e.path()))
            .filter(|p| {
                p.extension()
                    .and_then(|e| e.to_str())
                    .is_some_and(|e| matches!(e.to_ascii_lowercase().as_str(), "png" | "jpg" | "jpeg" | "bmp"))
            })
            .collect();
        files.sort();
        Ok(DirSource {
            files: files.into_iter(),
        })
    }
}

impl FrameSource for DirSource {
    fn fps(&self) -> Option<f64> {
        None
    }

    fn next_frame(&mut self) -> Result<Option<DynamicImage>> {
        match self.files.next() {
            Some(p) => Ok(Some(image::open(&p).map_err(|e| Error::Decode(format!("{}: {e}", p.display())))?)),
            None => Ok(None),
        }
    }
}

pub fn ffmpeg_available() -> bool {
    Command::new("ffmpeg")
        .arg("-version")
        .stdout(Stdio::null())
        .stderr(Stdio::null())
        .status()
        .is_ok_and(|s| s.success())
}

/// Streams raw RGB frames from an `ffmpeg` subprocess.
pub struct FfmpegSource {
    child: Child,
    stdout: ChildStdout,
    width: usize,
    height: usize,
    fps: Option<f64>,
}

impl FfmpegSource {
    pub fn spawn(path: &Path) -> Result<Self> {
        let probe = Command::new("ffprobe")
            .args([
                "-v",
                "error",
                "-select_streams",
                "v:0",
                "-show_entries",
                "stream=width,height,r_frame_rate",
                "-of",
                "csv=p=0",
            ])
            .arg(path)
            .output()
            .map_err(|e| Error::io(path, e))?;
        let text = String::from_utf8_lossy(&probe.stdout);
        let fields: Vec<&str> = text.trim().split(',').collect();
        if !probe.status.success() || fields.len() < 3 {
            return Err(Error::Decode(format!("{}: ffprobe failed", path.display())));
        }
        let parse = |s: &str| s.trim().parse::<usize>().map_err(|_| Error::Decode(format!("ffprobe: `{s}`")));
        let width = parse(fields[0])?;
        let height = parse(fields[1])?;
        let fps = fields[2].split_once('/').and_then(|(n, d)| {
            let (n, d) = (n.parse::<f64>().ok()?, d.parse::<f64>().ok()?);
            (d > 0.0 && n > 0.0).then_some(n / d)
        });
        let mut child = Command::new("ffmpeg")
            .args(["-v", "error", "-i"])
            .arg(path)
            .args(["-f", "rawvideo", "-pix_fmt", "rgb24", "-"])
            .stdout(Stdio::piped())
            .stderr(Stdio::null())
            .spawn()
            .map_err(|e| Error::io(path, e))?;
        let stdout = child.stdout.take().expect("piped stdout");
        Ok(FfmpegSource {
            child,
            stdout,
            width,
            height,
            fps,
        })
    }
}

impl FrameSource for FfmpegSource {
    fn fps(&self) -> Option<f64> {
        self.fps
    }

    fn next_frame(&mut self) -> Result<Option<DynamicImage>> {
        let mut buf = vec![0u8; self.width * self.height * 3];
        match self.stdout.read_exact(&mut buf) {
            Ok(()) => {}
            Err(e) if e.kind() == std::io::ErrorKind::UnexpectedEof => return Ok(None),
            Err(e) => return Err(Error::Decode(format!("ffmpeg: {e}"))),
        }
        let img = RgbImage::from_raw(self.width as u32, self.height as u32, buf)
            .ok_or_else(|| Error::Decode("ffmpeg: short frame".into()))?;
        Ok(Some(DynamicImage::ImageRgb8(img)))
    }
}

impl Drop for FfmpegSource {
    fn drop(&mut self) {
        let _ = self.child.kill();
        let _ = self.child.wait();
    }
}

/// Constant-gray frames whose value encodes the frame index, for tests and demos.
pub fn synthetic_frames(n: usize, width: u32, height: u32) -> Vec<DynamicImage> {
    (0..n)
        .map(|i| DynamicImage::ImageLuma8(GrayImage::from_pixel(width, height, image::Luma([(i % 256) as u8]))))
        .collect()
}
