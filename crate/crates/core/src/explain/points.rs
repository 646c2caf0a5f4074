//! Max-activation coordinates: CSV interchange, scatter and density renders.

use std::path::{Path, PathBuf};

use ndarray::Array2;
use serde::{Deserialize, Serialize};

use super::heatmap::{jet, Peak};
use super::mmd::Point;
use crate::data::FRAME_SIZE;
use crate::error::{Error, Result};
use crate::plot;
use crate::Class;

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct CamPoint {
    pub video_id: String,
    pub frame_index: usize,
    pub class: Class,
    pub x: u32,
    pub y: u32,
}

impl CamPoint {
    pub fn new(video_id: impl Into<String>, frame_index: usize, class: Class, x: u32, y: u32) -> Result<Self> {
        if x as usize >= FRAME_SIZE || y as usize >= FRAME_SIZE {
            return Err(Error::invalid(format!("point ({x}, {y}) lies outside the {FRAME_SIZE}px frame")));
        }
        Ok(CamPoint {
            video_id: video_id.into(),
            frame_index,
            class,
            x,
            y,
        })
    }

    pub fn from_peak(video_id: impl Into<String>, frame_index: usize, class: Class, peak: Peak) -> Result<Self> {
        Self::new(video_id, frame_index, class, peak.x, peak.y)
    }

    pub fn coords(&self) -> Point {
        [self.x as f64, self.y as f64]
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct CamPointSet {
    pub label: Class,
    pub points: Vec<CamPoint>,
}

impl CamPointSet {
    pub fn coordinates(&self) -> Vec<Point> {
        self.points.iter().map(CamPoint::coords).collect()
    }
}

/// One set per diagnostic class, in C, P, H order; sets may be empty.
pub fn group_by_class(points: &[CamPoint]) -> Vec<CamPointSet> {
    Class::DIAGNOSTIC
        .iter()
        .map(|&label| CamPointSet {
            label,
            points: points.iter().filter(|p| p.class == label).cloned().collect(),
        })
        .collect()
}

/// CSV with header `video_id,frame_index,class,x,y`.
pub fn points_to_csv(points: &[CamPoint]) -> Result<Vec<u8>> {
    let mut w = csv::Writer::from_writer(Vec::new());
    for p in points {
        w.serialize(p).map_err(|e| Error::Serde(e.to_string()))?;
    }
    if points.is_empty() {
        w.write_record(["video_id", "frame_index", "class", "x", "y"])
            .map_err(|e| Error::Serde(e.to_string()))?;
    }
    w.into_inner().map_err(|e| Error::Serde(e.to_string()))
}

pub fn points_from_csv(bytes: &[u8]) -> Result<Vec<CamPoint>> {
    let mut r = csv::Reader::from_reader(bytes);
    let mut out = Vec::new();
    for (i, row) in r.deserialize::<CamPoint>().enumerate() {
        let p = row.map_err(|e| Error::invalid_row(i + 1, e.to_string()))?;
        out.push(CamPoint::new(p.video_id, p.frame_index, p.class, p.x, p.y)?);
    }
    Ok(out)
}

pub fn write_points(points: &[CamPoint], path: &Path) -> Result<()> {
    crate::io::write_atomic(path, &points_to_csv(points)?)
}

pub fn read_points(path: &Path) -> Result<Vec<CamPoint>> {
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    points_from_csv(&bytes)
}

/// Kernel density bandwidth of the density renders, in pixels.
pub const DENSITY_BANDWIDTH: f64 = 8.0;

/// Gaussian kernel density on the frame grid, scaled to a maximum of one.
pub fn density_grid(points: &[Point], bandwidth: f64) -> Array2<f32> {
    let n = FRAME_SIZE;
    let mut counts = Array2::<f64>::zeros((n, n));
    for p in points {
        let (x, y) = (p[0].round() as usize, p[1].round() as usize);
        if x < n && y < n {
            counts[[y, x]] += 1.0;
        }
    }
    let radius = (3.0 * bandwidth).ceil() as isize;
    let taps: Vec<f64> = (-radius..=radius)
        .map(|d| (-(d * d) as f64 / (2.0 * bandwidth * bandwidth)).exp())
        .collect();
    let blur = |src: &Array2<f64>, along_x: bool| {
        Array2::from_shape_fn((n, n), |(y, x)| {
            let mut acc = 0.0;
            for (t, w) in taps.iter().enumerate() {
                let d = t as isize - radius;
                let (sy, sx) = if along_x { (y as isize, x as isize + d) } else { (y as isize + d, x as isize) };
                if (0..n as isize).contains(&sy) && (0..n as isize).contains(&sx) {
                    acc += w * src[[sy as usize, sx as usize]];
                }
            }
            acc
        })
    };
    let dens = blur(&blur(&counts, true), false);
    let max = dens.iter().fold(0.0f64, |a, &b| a.max(b));
    dens.mapv(|v| if max > 0.0 { (v / max) as f32 } else { 0.0 })
}

#[derive(Debug, Clone, PartialEq)]
pub struct ScatterExport {
    pub csv: PathBuf,
    pub scatter: PathBuf,
    pub densities: Vec<(Class, PathBuf)>,
    pub warnings: Vec<String>,
}

/// Writes `cam_points.csv`, `cam_scatter.png`, and `cam_density_{class}.png`.
pub fn cam_scatter_export(sets: &[CamPointSet], dir: &Path) -> Result<ScatterExport> {
    if sets.iter().all(|s| s.points.is_empty()) {
        return Err(Error::invalid("no CAM points to export"));
    }
    let mut warnings = Vec::new();
    let all: Vec<CamPoint> = sets.iter().flat_map(|s| s.points.iter().cloned()).collect();
    let csv = dir.join("cam_points.csv");
    write_points(&all, &csv)?;

    let size = FRAME_SIZE as u32;
    let mut scatter = plot::blank(size, size);
    let mut densities = Vec::new();
    for set in sets {
        if set.points.is_empty() {
            let msg = format!("class {} has no CAM points; layer omitted", set.label.short());
            log::warn!("{msg}");
            warnings.push(msg);
            continue;
        }
        for p in &set.points {
            plot::dot(&mut scatter, p.x as i64, p.y as i64, 2, plot::class_color(set.label));
        }
        let grid = density_grid(&set.coordinates(), DENSITY_BANDWIDTH);
        let mut img = plot::blank(size, size);
        for ((y, x), &v) in grid.indexed_iter() {
            let c = jet(v);
            img.put_pixel(x as u32, y as u32, image::Rgb(c.map(|ch| (ch * 255.0).round() as u8)));
        }
        let path = dir.join(format!("cam_density_{}.png", set.label));
        plot::save_png(&img, &path)?;
        densities.push((set.label, path));
    }
    let scatter_path = dir.join("cam_scatter.png");
    plot::save_png(&scatter, &scatter_path)?;
    Ok(ScatterExport {
        csv,
        scatter: scatter_path,
        densities,
        warnings,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn csv_round_trip_and_bounds() {
        let pts = vec![
            CamPoint::new("a", 0, Class::Covid, 0, 223).unwrap(),
            CamPoint::new("b,c", 4, Class::Healthy, 17, 5).unwrap(),
        ];
        let bytes = points_to_csv(&pts).unwrap();
        assert!(String::from_utf8_lossy(&bytes).starts_with("video_id,frame_index,class,x,y\n"));
        assert_eq!(points_from_csv(&bytes).unwrap(), pts);
        assert!(CamPoint::new("a", 0, Class::Covid, 224, 0).is_err());
        assert!(points_from_csv(b"video_id,frame_index,class,x,y\nz,1,covid,300,2\n").is_err());
    }

    #[test]
    fn density_peaks_at_isolated_point() {
        let g = density_grid(&[[40.0, 100.0]], 4.0);
        assert_eq!(g[[100, 40]], 1.0);
        assert!(g[[100, 60]] < 0.01);
    }
}
