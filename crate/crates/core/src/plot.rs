//! Minimal raster charts: curves, confusion grids, scatter and density maps.

use std::io::Cursor;
use std::path::Path;

use image::{ImageFormat, Rgb, RgbImage};

use crate::error::{Error, Result};
use crate::metrics::{ConfusionMatrix, MetricsReport};
use crate::Class;

pub const WHITE: Rgb<u8> = Rgb([255, 255, 255]);
pub const BLACK: Rgb<u8> = Rgb([0, 0, 0]);
pub const GRAY: Rgb<u8> = Rgb([170, 170, 170]);

pub fn class_color(class: Class) -> Rgb<u8> {
    match class {
        Class::Covid => Rgb([214, 39, 40]),
        Class::Pneumonia => Rgb([31, 119, 180]),
        Class::Healthy => Rgb([44, 160, 44]),
        Class::Uninformative => Rgb([127, 127, 127]),
    }
}

pub fn blank(width: u32, height: u32) -> RgbImage {
    RgbImage::from_pixel(width, height, WHITE)
}

pub fn put(img: &mut RgbImage, x: i64, y: i64, color: Rgb<u8>) {
    if x >= 0 && y >= 0 && (x as u32) < img.width() && (y as u32) < img.height() {
        img.put_pixel(x as u32, y as u32, color);
    }
}

/// Bresenham line.
pub fn line(img: &mut RgbImage, from: (i64, i64), to: (i64, i64), color: Rgb<u8>) {
    let (mut x0, mut y0) = from;
    let (x1, y1) = to;
    let dx = (x1 - x0).abs();
    let dy = -(y1 - y0).abs();
    let sx = if x0 < x1 { 1 } else { -1 };
    let sy = if y0 < y1 { 1 } else { -1 };
    let mut err = dx + dy;
    loop {
        put(img, x0, y0, color);
        if x0 == x1 && y0 == y1 {
            break;
        }
        let e2 = 2 * err;
        if e2 >= dy {
            err += dy;
            x0 += sx;
        }
        if e2 <= dx {
            err += dx;
            y0 += sy;
        }
    }
}

pub fn dot(img: &mut RgbImage, x: i64, y: i64, radius: i64, color: Rgb<u8>) {
    for dy in -radius..=radius {
        for dx in -radius..=radius {
            if dx * dx + dy * dy <= radius * radius {
                put(img, x + dx, y + dy, color);
            }
        }
    }
}

pub fn fill_rect(img: &mut RgbImage, x0: u32, y0: u32, w: u32, h: u32, color: Rgb<u8>) {
    for y in y0..(y0 + h).min(img.height()) {
        for x in x0..(x0 + w).min(img.width()) {
            img.put_pixel(x, y, color);
        }
    }
}

pub fn png_bytes(img: &RgbImage) -> Result<Vec<u8>> {
    let mut buf = Cursor::new(Vec::new());
    img.write_to(&mut buf, ImageFormat::Png)
        .map_err(|e| Error::Decode(format!("png encoding failed: {e}")))?;
    Ok(buf.into_inner())
}

pub fn save_png(img: &RgbImage, path: &Path) -> Result<()> {
    crate::io::write_atomic(path, &png_bytes(img)?)
}

const SIZE: u32 = 320;
const MARGIN: u32 = 20;

/// Maps unit-square coordinates to pixels with `y` pointing up.
fn to_px(x: f64, y: f64) -> (i64, i64) {
    let span = (SIZE - 2 * MARGIN) as f64;
    let px = MARGIN as f64 + x.clamp(0.0, 1.0) * span;
    let py = (SIZE - MARGIN) as f64 - y.clamp(0.0, 1.0) * span;
    (px.round() as i64, py.round() as i64)
}

fn axes() -> RgbImage {
    let mut img = blank(SIZE, SIZE);
    let corners = [to_px(0.0, 0.0), to_px(1.0, 0.0), to_px(1.0, 1.0), to_px(0.0, 1.0)];
    for i in 0..4 {
        line(&mut img, corners[i], corners[(i + 1) % 4], BLACK);
    }
    img
}

/// Polyline chart over the unit square; one series per class.
pub fn curve_chart(series: &[(Class, Vec<(f64, f64)>)], diagonal: bool) -> RgbImage {
    let mut img = axes();
    if diagonal {
        line(&mut img, to_px(0.0, 0.0), to_px(1.0, 1.0), GRAY);
    }
    for (class, pts) in series {
        for w in pts.windows(2) {
            line(&mut img, to_px(w[0].0, w[0].1), to_px(w[1].0, w[1].1), class_color(*class));
        }
    }
    img
}

/// Row-normalized confusion grid shaded from white (0) to dark blue (1).
pub fn confusion_chart(cm: &ConfusionMatrix) -> RgbImage {
    let n = cm.n_classes().max(1) as u32;
    let cell = (SIZE - 2 * MARGIN) / n;
    let mut img = blank(SIZE, SIZE);
    for (i, row) in cm.row_normalized().iter().enumerate() {
        for (j, &v) in row.iter().enumerate() {
            let shade = |full: f64| (255.0 - v * (255.0 - full)).round() as u8;
            let color = Rgb([shade(8.0), shade(48.0), shade(107.0)]);
            fill_rect(&mut img, MARGIN + j as u32 * cell, MARGIN + i as u32 * cell, cell - 1, cell - 1, color);
        }
    }
    img
}

fn class_of(name: &str) -> Option<Class> {
    name.parse().ok()
}

/// Writes `roc.png`, `pr.png`, and `confusion.png` next to the CSV exports.
pub fn export_report_plots(report: &MetricsReport, dir: &Path) -> Result<()> {
    let mut roc = Vec::new();
    let mut pr = Vec::new();
    for c in &report.classes {
        let Some(class) = class_of(&c.class) else { continue };
        if let Some(curve) = &c.roc {
            roc.push((class, curve.points.iter().map(|p| (p.fpr, p.tpr)).collect()));
        }
        if let Some(points) = &c.pr {
            pr.push((class, points.iter().map(|p| (p.recall, p.precision)).collect()));
        }
    }
    save_png(&curve_chart(&roc, true), &dir.join("roc.png"))?;
    save_png(&curve_chart(&pr, false), &dir.join("pr.png"))?;
    save_png(&confusion_chart(&report.confusion), &dir.join("confusion.png"))
}
