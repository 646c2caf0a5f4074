//! Cropping, resizing and normalization of raw frames.

use image::{DynamicImage, GenericImageView};
use ndarray::{Array2, Array3, Axis};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Side length of every preprocessed frame.
pub const FRAME_SIZE: usize = 224;

/// Axis-aligned crop rectangle in source pixel coordinates.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct CropWindow {
    pub x: u32,
    pub y: u32,
    pub w: u32,
    pub h: u32,
}

/// Crops `frame` to `window`, or to the largest centered square when absent.
pub fn crop_square(frame: &DynamicImage, window: Option<CropWindow>) -> Result<DynamicImage> {
    let (width, height) = frame.dimensions();
    if width == 0 || height == 0 {
        return Err(Error::invalid("empty frame"));
    }
    let win = match window {
        Some(w) => {
            let inside = w.w > 0
                && w.h > 0
                && w.x.checked_add(w.w).is_some_and(|r| r <= width)
                && w.y.checked_add(w.h).is_some_and(|b| b <= height);
            if !inside {
                return Err(Error::Bounds {
                    window: (w.x, w.y, w.w, w.h),
                    width,
                    height,
                });
            }
            if w.w != w.h {
                return Err(Error::invalid(format!(
                    "crop window must be square, got {}x{}",
                    w.w, w.h
                )));
            }
            w
        }
        None => {
            let side = width.min(height);
            CropWindow {
                x: (width - side) / 2,
                y: (height - side) / 2,
                w: side,
                h: side,
            }
        }
    };
    Ok(frame.crop_imm(win.x, win.y, win.w, win.h))
}

/// Converts an image to an `H x W x 3` array in `[0, 1]`. Gray inputs are
/// replicated across the three channels; alpha is dropped.
pub fn to_unit_rgb(frame: &DynamicImage) -> Array3<f32> {
    let (w, h) = frame.dimensions();
    let (w, h) = (w as usize, h as usize);
    let mut out = Array3::<f32>::zeros((h, w, 3));
    match frame {
        DynamicImage::ImageLuma8(g) => {
            for (x, y, p) in g.enumerate_pixels() {
                let v = p.0[0] as f32 / 255.0;
                for c in 0..3 {
                    out[[y as usize, x as usize, c]] = v;
                }
            }
        }
        _ => {
            let rgb = frame.to_rgb8();
            for (x, y, p) in rgb.enumerate_pixels() {
                for c in 0..3 {
                    out[[y as usize, x as usize, c]] = p.0[c] as f32 / 255.0;
                }
            }
        }
    }
    out
}

/// Resizes a square frame to `FRAME_SIZE x FRAME_SIZE x 3` with values in `[0, 1]`.
pub fn preprocess(frame: &DynamicImage) -> Result<Array3<f32>> {
    let (w, h) = frame.dimensions();
    if w == 0 || h == 0 {
        return Err(Error::invalid("empty image"));
    }
    if w != h {
        return Err(Error::invalid(format!("preprocess expects a square image, got {w}x{h}")));
    }
    let unit = to_unit_rgb(frame);
    Ok(resize(&unit, FRAME_SIZE, FRAME_SIZE))
}

/// Area averaging when shrinking an axis, bilinear when enlarging it.
pub fn resize(src: &Array3<f32>, out_h: usize, out_w: usize) -> Array3<f32> {
    let (h, w, _) = src.dim();
    let rows = axis_weights(h, out_h);
    let cols = axis_weights(w, out_w);
    let tmp = apply_weights(src, &cols, Axis(1));
    apply_weights(&tmp, &rows, Axis(0))
}

/// Per output index, the (source index, weight) taps along one axis.
fn axis_weights(n_in: usize, n_out: usize) -> Vec<Vec<(usize, f32)>> {
    if n_out <= n_in {
        area_weights(n_in, n_out)
    } else {
        linear_weights(n_in, n_out)
    }
}

fn area_weights(n_in: usize, n_out: usize) -> Vec<Vec<(usize, f32)>> {
    let scale = n_in as f64 / n_out as f64;
    (0..n_out)
        .map(|o| {
            let lo = o as f64 * scale;
            let hi = (o + 1) as f64 * scale;
            let mut taps = Vec::new();
            let mut i = lo.floor() as usize;
            while (i as f64) < hi && i < n_in {
                let overlap = (hi.min((i + 1) as f64) - lo.max(i as f64)).max(0.0);
                if overlap > 0.0 {
                    taps.push((i, (overlap / scale) as f32));
                }
                i += 1;
            }
            taps
        })
        .collect()
}

/// Half-pixel-centered linear interpolation with edge clamping.
fn linear_weights(n_in: usize, n_out: usize) -> Vec<Vec<(usize, f32)>> {
    let scale = n_in as f64 / n_out as f64;
    (0..n_out)
        .map(|o| {
            let pos = ((o as f64 + 0.5) * scale - 0.5).clamp(0.0, (n_in - 1) as f64);
            let i0 = pos.floor() as usize;
            let i1 = (i0 + 1).min(n_in - 1);
            let t = (pos - i0 as f64) as f32;
            if i1 == i0 || t == 0.0 {
                vec![(i0, 1.0)]
            } else {
                vec![(i0, 1.0 - t), (i1, t)]
            }
        })
        .collect()
}

fn apply_weights(src: &Array3<f32>, taps: &[Vec<(usize, f32)>], axis: Axis) -> Array3<f32> {
    let mut shape = [src.dim().0, src.dim().1, src.dim().2];
    shape[axis.index()] = taps.len();
    let mut out = Array3::<f32>::zeros(shape);
    for (o, tap) in taps.iter().enumerate() {
        let mut dst = out.index_axis_mut(axis, o);
        for &(i, wgt) in tap {
            dst.scaled_add(wgt, &src.index_axis(axis, i));
        }
    }
    out
}

/// Bilinear resize of a single-channel grid (half-pixel centers, clamped edges).
pub fn resize_bilinear_2d(src: &Array2<f32>, out_h: usize, out_w: usize) -> Array2<f32> {
    let (h, w) = src.dim();
    let rows = linear_weights_any(h, out_h);
    let cols = linear_weights_any(w, out_w);
    Array2::from_shape_fn((out_h, out_w), |(y, x)| {
        let mut acc = 0.0f32;
        for &(r, wr) in &rows[y] {
            for &(c, wc) in &cols[x] {
                acc += wr * wc * src[[r, c]];
            }
        }
        acc
    })
}

fn linear_weights_any(n_in: usize, n_out: usize) -> Vec<Vec<(usize, f32)>> {
    if n_in == n_out {
        (0..n_out).map(|i| vec![(i, 1.0)]).collect()
    } else {
        linear_weights(n_in, n_out)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use image::{GrayImage, Luma, Rgb, RgbImage};

    #[test]
    fn centered_crop_of_landscape_frame() {
        let img = DynamicImage::ImageRgb8(RgbImage::new(640, 480));
        let out = crop_square(&img, None).unwrap();
        assert_eq!(out.dimensions(), (480, 480));
    }

    #[test]
    fn explicit_window_is_exact_region() {
        let mut img = RgbImage::new(640, 480);
        img.put_pixel(100, 20, Rgb([255, 0, 0]));
        img.put_pixel(519, 439, Rgb([0, 255, 0]));
        let win = CropWindow {
            x: 100,
            y: 20,
            w: 420,
            h: 420,
        };
        let out = crop_square(&DynamicImage::ImageRgb8(img), Some(win)).unwrap();
        let out = out.to_rgb8();
        assert_eq!(out.dimensions(), (420, 420));
        assert_eq!(out.get_pixel(0, 0), &Rgb([255, 0, 0]));
        assert_eq!(out.get_pixel(419, 419), &Rgb([0, 255, 0]));
    }

    #[test]
    fn window_outside_frame_is_bounds_error() {
        let img = DynamicImage::ImageRgb8(RgbImage::new(640, 480));
        let win = CropWindow {
            x: 500,
            y: 400,
            w: 300,
            h: 300,
        };
        assert!(matches!(crop_square(&img, Some(win)), Err(Error::Bounds { .. })));
    }

    #[test]
    fn preprocess_shape_and_constant_value() {
        let img = DynamicImage::ImageLuma8(GrayImage::from_pixel(480, 480, Luma([51])));
        let out = preprocess(&img).unwrap();
        assert_eq!(out.dim(), (224, 224, 3));
        let expected = 51.0 / 255.0;
        assert!(out.iter().all(|&v| (v - expected).abs() < 1e-6));
    }

    #[test]
    fn preprocess_upsamples_small_inputs() {
        let img = DynamicImage::ImageRgb8(RgbImage::from_pixel(100, 100, Rgb([255, 0, 255])));
        let out = preprocess(&img).unwrap();
        assert_eq!(out.dim(), (224, 224, 3));
        assert!((out[[10, 10, 0]] - 1.0).abs() < 1e-6);
        assert!(out[[10, 10, 1]].abs() < 1e-6);
    }

    #[test]
    fn preprocess_rejects_empty_and_non_square() {
        let empty = DynamicImage::ImageRgb8(RgbImage::new(0, 0));
        assert!(preprocess(&empty).is_err());
        let rect = DynamicImage::ImageRgb8(RgbImage::new(20, 10));
        assert!(preprocess(&rect).is_err());
    }

    /// Oracle: the mean of the source image, computed directly over its pixels.
    fn source_mean(img: &GrayImage) -> f64 {
        img.pixels().map(|p| p.0[0] as f64 / 255.0).sum::<f64>() / (img.width() * img.height()) as f64
    }

    #[test]
    fn checkerboard_mean_is_preserved() {
        for (side, cell) in [(480u32, 1u32), (500, 3), (333, 7)] {
            let img = GrayImage::from_fn(side, side, |x, y| {
                if ((x / cell) + (y / cell)) % 2 == 0 {
                    Luma([255])
                } else {
                    Luma([0])
                }
            });
            let oracle = source_mean(&img);
            let out = preprocess(&DynamicImage::ImageLuma8(img)).unwrap();
            let mean = out.iter().map(|&v| v as f64).sum::<f64>() / out.len() as f64;
            assert!((mean - oracle).abs() <= 0.02 * oracle, "{side}/{cell}: {mean} vs {oracle}");
        }
    }

    #[test]
    fn area_weights_sum_to_one() {
        for (n_in, n_out) in [(480, 224), (225, 224), (1000, 7)] {
            for taps in area_weights(n_in, n_out) {
                let s: f32 = taps.iter().map(|t| t.1).sum();
                assert!((s - 1.0).abs() < 1e-5);
            }
        }
    }
}
