//! Class activation maps and their overlays.

use ndarray::{s, Array2, Array3, ArrayD, Axis, Ix2};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::data::image_ops::resize_bilinear_2d;
use crate::data::FRAME_SIZE;
use crate::error::{Error, Result};
use crate::nn::layers::Mode;
use crate::nn::{Classifier, ModelInput};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CamSource {
    Cam,
    GradCam,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Heatmap {
    /// Rectified activations at input resolution.
    pub grid: Array2<f32>,
    /// Rectified activations at feature-map resolution.
    pub cells: Array2<f32>,
    pub class_id: usize,
    pub source: CamSource,
    /// Set when every value is zero.
    pub is_zero: bool,
}

impl Heatmap {
    /// Rectifies a feature-resolution map and upsamples it bilinearly to `size`.
    pub fn from_cells(cells: Array2<f32>, size: usize, class_id: usize, source: CamSource) -> Result<Self> {
        if cells.iter().any(|v| !v.is_finite()) {
            return Err(Error::invalid("activation map has non-finite values"));
        }
        let cells = cells.mapv(|v| v.max(0.0));
        let grid = resize_bilinear_2d(&cells, size, size).mapv(|v| v.max(0.0));
        let is_zero = grid.iter().all(|&v| v == 0.0);
        Ok(Heatmap {
            grid,
            cells,
            class_id,
            source,
            is_zero,
        })
    }

    pub fn max(&self) -> f32 {
        self.grid.iter().fold(0.0, |a, &b| a.max(b))
    }
}

fn single_input(model: &Classifier, image: &Array3<f32>) -> Result<ArrayD<f32>> {
    model.input_tensor(ModelInput::Frames(std::slice::from_ref(image)))
}

fn check_class(model: &Classifier, class_id: usize) -> Result<()> {
    if class_id >= model.n_classes() {
        return Err(Error::invalid(format!("class {class_id} out of range")));
    }
    Ok(())
}

/// Class activation map: dense weights of the class applied to the pooled feature maps.
pub fn cam(model: &Classifier, image: &Array3<f32>, class_id: usize) -> Result<Heatmap> {
    check_class(model, class_id)?;
    let weights = model.cam_weights()?.view().into_dimensionality::<Ix2>().expect("2-d kernel");
    let tap = model.backbone_len() - 2;
    let x = single_input(model, image)?;
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let maps = model.network().forward_range(&x, 0..tap + 1, Mode::Inference, &mut rng)?;
    let cells = weighted_sum(&maps, weights.column(class_id).iter().copied())?;
    Heatmap::from_cells(cells, FRAME_SIZE, class_id, CamSource::Cam)
}

/// Grad-CAM at the model's configured target layer.
pub fn grad_cam(model: &Classifier, image: &Array3<f32>, class_id: usize) -> Result<Heatmap> {
    grad_cam_at(model, image, class_id, None)
}

/// Grad-CAM: channels weighted by the spatial mean of the class-score gradient.
pub fn grad_cam_at(model: &Classifier, image: &Array3<f32>, class_id: usize, layer: Option<&str>) -> Result<Heatmap> {
    check_class(model, class_id)?;
    let target = model.cam_target(layer)?;
    let x = single_input(model, image)?;
    let net = model.network();
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let maps = net.forward_range(&x, 0..target + 1, Mode::Inference, &mut rng)?;
    let (logits, trace) = net.trace_from(&maps, target + 1, Mode::Inference, &mut rng)?;
    let mut seed_grad = ArrayD::<f32>::zeros(logits.raw_dim());
    seed_grad[[0, class_id]] = 1.0;
    let (_, grad) = net.backward(&trace, &seed_grad, true);
    let grad = grad.expect("input gradient requested");
    let channels = grad.shape()[1];
    let spatial = grad.len() / channels;
    let flat = grad.to_shape((channels, spatial)).expect("single sample");
    let alphas: Vec<f32> = flat.mean_axis(Axis(1)).expect("non-empty").to_vec();
    let cells = weighted_sum(&maps, alphas.into_iter())?;
    let hm = Heatmap::from_cells(cells, FRAME_SIZE, class_id, CamSource::GradCam)?;
    if hm.is_zero {
        log::warn!("grad-cam for class {class_id} is identically zero");
    }
    Ok(hm)
}

/// `sum_k w_k * A_k` over the channels of a `[1, C, H, W]` map.
fn weighted_sum(maps: &ArrayD<f32>, weights: impl Iterator<Item = f32>) -> Result<Array2<f32>> {
    let [1, c, h, w] = *maps.shape() else {
        return Err(Error::Unsupported(format!("feature maps of shape {:?} are not 2-D", maps.shape())));
    };
    let mut out = Array2::<f32>::zeros((h, w));
    let mut used = 0;
    for (k, wk) in weights.enumerate().take(c) {
        out.scaled_add(wk, &maps.slice(s![0, k, .., ..]));
        used += 1;
    }
    if used != c {
        return Err(Error::invalid("weight count differs from channel count"));
    }
    Ok(out)
}

/// Mean of the members' heatmaps for one class.
pub fn ensemble_heatmap(models: &[Classifier], image: &Array3<f32>, class_id: usize) -> Result<Heatmap> {
    let mut maps = Vec::with_capacity(models.len());
    for m in models {
        maps.push(if m.has_cam_head() { cam(m, image, class_id)? } else { grad_cam(m, image, class_id)? });
    }
    let first = maps.first().ok_or_else(|| Error::invalid("no models"))?;
    let source = first.source;
    let n = maps.len() as f32;
    let mut grid = Array2::<f32>::zeros(first.grid.raw_dim());
    for hm in &maps {
        grid += &hm.grid;
    }
    grid.mapv_inplace(|v| v / n);
    let cells = if maps.iter().all(|h| h.cells.dim() == first.cells.dim()) {
        let mut c = Array2::<f32>::zeros(first.cells.raw_dim());
        for hm in &maps {
            c += &hm.cells;
        }
        c / n
    } else {
        first.cells.clone()
    };
    let is_zero = grid.iter().all(|&v| v == 0.0);
    Ok(Heatmap {
        grid,
        cells,
        class_id,
        source,
        is_zero,
    })
}

/// Location of a heatmap's global maximum in pixel units.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Peak {
    pub x: u32,
    pub y: u32,
    /// Set when the map is constant (the peak is then `(0, 0)`).
    pub uniform: bool,
}

/// Global maximum; ties go to the first in raster order (smallest y, then x).
pub fn max_activation_point(hm: &Heatmap) -> Result<Peak> {
    if hm.is_zero {
        return Err(Error::Degenerate("heatmap is identically zero".into()));
    }
    Ok(argmax_raster(&hm.grid))
}

pub fn argmax_raster(grid: &Array2<f32>) -> Peak {
    let mut best = (0usize, 0usize);
    let mut best_v = f32::NEG_INFINITY;
    let mut min_v = f32::INFINITY;
    for ((y, x), &v) in grid.indexed_iter() {
        if v > best_v {
            best_v = v;
            best = (y, x);
        }
        min_v = min_v.min(v);
    }
    Peak {
        x: best.1 as u32,
        y: best.0 as u32,
        uniform: best_v == min_v,
    }
}

/// Jet colormap of a value in `[0, 1]`.
pub fn jet(v: f32) -> [f32; 3] {
    let v = v.clamp(0.0, 1.0);
    let ch = |offset: f32| (1.5 - (4.0 * v - offset).abs()).clamp(0.0, 1.0);
    [ch(3.0), ch(2.0), ch(1.0)]
}

/// Heatmap normalized by its maximum and colour-mapped, as `[H, W, 3]`.
pub fn colorize(hm: &Heatmap) -> Array3<f32> {
    let max = hm.max();
    let (h, w) = hm.grid.dim();
    let mut out = Array3::<f32>::zeros((h, w, 3));
    for ((y, x), &v) in hm.grid.indexed_iter() {
        let n = if max > 0.0 { v / max } else { 0.0 };
        let c = jet(n);
        for k in 0..3 {
            out[[y, x, k]] = c[k];
        }
    }
    out
}

/// Alpha-blends the colour-mapped heatmap over an `[H, W, 3]` image.
pub fn overlay(image: &Array3<f32>, hm: &Heatmap, alpha: f32) -> Result<Array3<f32>> {
    if !(0.0..=1.0).contains(&alpha) {
        return Err(Error::invalid(format!("alpha must lie in [0, 1], got {alpha}")));
    }
    let (h, w, c) = image.dim();
    if c != 3 || hm.grid.dim() != (h, w) {
        return Err(Error::invalid(format!(
            "image {:?} and heatmap {:?} differ in shape",
            image.shape(),
            hm.grid.shape()
        )));
    }
    if alpha == 0.0 {
        return Ok(image.clone());
    }
    let colors = colorize(hm);
    if alpha == 1.0 {
        return Ok(colors);
    }
    Ok(image * (1.0 - alpha) + &(colors * alpha))
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::Array2;

    fn hm_from(grid: Array2<f32>) -> Heatmap {
        let is_zero = grid.iter().all(|&v| v == 0.0);
        Heatmap {
            cells: grid.clone(),
            grid,
            class_id: 0,
            source: CamSource::Cam,
            is_zero,
        }
    }

    #[test]
    fn delta_and_tie_rules() {
        let mut g = Array2::<f32>::zeros((224, 224));
        g[[20, 10]] = 1.0;
        assert_eq!(max_activation_point(&hm_from(g)).unwrap(), Peak { x: 10, y: 20, uniform: false });
        let mut g = Array2::<f32>::zeros((10, 10));
        g[[5, 5]] = 2.0;
        g[[3, 7]] = 2.0;
        let p = max_activation_point(&hm_from(g)).unwrap();
        assert_eq!((p.x, p.y), (7, 3));
        let p = max_activation_point(&hm_from(Array2::from_elem((4, 4), 0.3))).unwrap();
        assert_eq!((p.x, p.y, p.uniform), (0, 0, true));
        assert!(max_activation_point(&hm_from(Array2::zeros((4, 4)))).is_err());
    }

    #[test]
    fn constant_and_zero_cells() {
        let hm = Heatmap::from_cells(Array2::from_elem((7, 7), 1.0), 224, 0, CamSource::Cam).unwrap();
        assert!(hm.grid.iter().all(|&v| (v - 1.0).abs() < 1e-6));
        let hm = Heatmap::from_cells(Array2::from_elem((7, 7), -1.0), 224, 0, CamSource::Cam).unwrap();
        assert!(hm.is_zero);
    }

    #[test]
    fn overlay_blend() {
        let img = Array3::from_shape_fn((8, 8, 3), |(y, x, c)| (y + x + c) as f32 / 20.0);
        let grid = Array2::from_shape_fn((8, 8), |(y, x)| (y * 8 + x) as f32);
        let hm = hm_from(grid);
        assert_eq!(overlay(&img, &hm, 0.0).unwrap(), img);
        let colors = colorize(&hm);
        assert_eq!(overlay(&img, &hm, 1.0).unwrap(), colors);
        let mid = overlay(&img, &hm, 0.3).unwrap();
        for (y, x, c) in [(0, 0, 0), (3, 5, 1), (7, 7, 2)] {
            let want = 0.7 * img[[y, x, c]] + 0.3 * colors[[y, x, c]];
            assert!((mid[[y, x, c]] - want).abs() < 1e-6);
        }
        assert!(overlay(&img, &hm, 1.5).is_err());
    }
}
