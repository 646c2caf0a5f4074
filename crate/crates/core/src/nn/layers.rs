//! Layer primitives with forward and backward passes.
//!
//! Tensors are channel-first: `[N, C, H, W]` for images and `[N, C, D, H, W]`
//! for clips. Dense layers and batch norm take `[N, F]`.

use ndarray::{s, Array2, ArrayD, ArrayView2, Axis, Ix2, IxDyn};
use rand::Rng;
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Mode {
    /// Deterministic: dropout off, batch norm uses moving statistics.
    Inference,
    /// Dropout on; trainable batch norm layers use batch statistics.
    Train,
    /// Dropout on, everything else as in inference.
    McDropout,
}

impl Mode {
    fn dropout_active(self) -> bool {
        !matches!(self, Mode::Inference)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Activation {
    Linear,
    Relu,
}

/// Stride-1 "same" convolution over 2 or 3 spatial dims.
#[derive(Debug, Clone)]
pub struct Conv {
    /// `[out, in * kd * kh * kw]`
    pub kernel: ArrayD<f32>,
    pub bias: ArrayD<f32>,
    pub in_channels: usize,
    pub size: [usize; 3],
    pub spatial_dims: usize,
    pub activation: Activation,
}

/// Per-channel 3x3 convolution over 2 spatial dims.
#[derive(Debug, Clone)]
pub struct DepthwiseConv {
    /// `[channels, 9]`
    pub kernel: ArrayD<f32>,
    pub bias: ArrayD<f32>,
    pub activation: Activation,
}

#[derive(Debug, Clone)]
pub struct Dense {
    /// `[in, out]`
    pub kernel: ArrayD<f32>,
    pub bias: ArrayD<f32>,
    pub activation: Activation,
}

#[derive(Debug, Clone)]
pub struct BatchNorm {
    pub gamma: ArrayD<f32>,
    pub beta: ArrayD<f32>,
    pub moving_mean: ArrayD<f32>,
    pub moving_variance: ArrayD<f32>,
    pub momentum: f32,
    pub epsilon: f32,
}

#[derive(Debug, Clone)]
pub enum Layer {
    Conv(Conv),
    Depthwise(DepthwiseConv),
    /// 2x2 max pooling with stride 2 over the last two dims.
    MaxPool,
    /// Mean over every spatial dim, giving `[N, C]`.
    GlobalAvgPool,
    Dense(Dense),
    BatchNorm(BatchNorm),
    Dropout { rate: f32 },
}

/// What a layer keeps from the forward pass for its backward pass.
#[derive(Debug, Clone)]
pub enum Cache {
    Conv { input: ArrayD<f32>, output: ArrayD<f32> },
    Pool { input: ArrayD<f32> },
    Gap { input_shape: Vec<usize> },
    Dense { input: ArrayD<f32>, output: ArrayD<f32> },
    BatchNorm { normalized: ArrayD<f32>, inv_std: Vec<f32>, batch_stats: bool },
    Dropout { mask: Option<ArrayD<f32>> },
}

fn glorot(rng: &mut ChaCha8Rng, shape: &[usize], fan_in: usize, fan_out: usize) -> ArrayD<f32> {
    let limit = (6.0 / (fan_in + fan_out) as f64).sqrt() as f32;
    let n: usize = shape.iter().product();
    let data = (0..n).map(|_| rng.random_range(-limit..limit)).collect();
    ArrayD::from_shape_vec(IxDyn(shape), data).expect("shape matches length")
}

impl Conv {
    pub fn new(in_channels: usize, out: usize, size: [usize; 3], spatial_dims: usize, rng: &mut ChaCha8Rng) -> Self {
        let k: usize = size.iter().product();
        Conv {
            kernel: glorot(rng, &[out, in_channels * k], in_channels * k, out * k),
            bias: ArrayD::zeros(IxDyn(&[out])),
            in_channels,
            size,
            spatial_dims,
            activation: Activation::Relu,
        }
    }

    pub fn out_channels(&self) -> usize {
        self.kernel.shape()[0]
    }

    fn kernel2(&self) -> ArrayView2<'_, f32> {
        self.kernel.view().into_dimensionality::<Ix2>().expect("2-d kernel")
    }
}

impl DepthwiseConv {
    pub fn new(channels: usize, rng: &mut ChaCha8Rng) -> Self {
        DepthwiseConv {
            kernel: glorot(rng, &[channels, 9], 9, 9),
            bias: ArrayD::zeros(IxDyn(&[channels])),
            activation: Activation::Relu,
        }
    }
}

impl Dense {
    pub fn new(inputs: usize, outputs: usize, activation: Activation, rng: &mut ChaCha8Rng) -> Self {
        Dense {
            kernel: glorot(rng, &[inputs, outputs], inputs, outputs),
            bias: ArrayD::zeros(IxDyn(&[outputs])),
            activation,
        }
    }

    pub fn inputs(&self) -> usize {
        self.kernel.shape()[0]
    }

    pub fn outputs(&self) -> usize {
        self.kernel.shape()[1]
    }
}

impl BatchNorm {
    pub fn new(features: usize) -> Self {
        BatchNorm {
            gamma: ArrayD::ones(IxDyn(&[features])),
            beta: ArrayD::zeros(IxDyn(&[features])),
            moving_mean: ArrayD::zeros(IxDyn(&[features])),
            moving_variance: ArrayD::ones(IxDyn(&[features])),
            momentum: 0.99,
            epsilon: 1e-3,
        }
    }
}

/// Splits a channel-first tensor shape into `(n, c, d, h, w)`.
fn dims5(shape: &[usize]) -> Result<(usize, usize, usize, usize, usize)> {
    match *shape {
        [n, c, h, w] => Ok((n, c, 1, h, w)),
        [n, c, d, h, w] => Ok((n, c, d, h, w)),
        _ => Err(Error::invalid(format!("expected a 4-d or 5-d tensor, got shape {shape:?}"))),
    }
}

fn relu_inplace(x: &mut ArrayD<f32>) {
    x.mapv_inplace(|v| v.max(0.0));
}

fn relu_mask(dy: &ArrayD<f32>, y: &ArrayD<f32>) -> ArrayD<f32> {
    let mut d = dy.clone();
    ndarray::Zip::from(&mut d).and(y).for_each(|g, &o| {
        if o <= 0.0 {
            *g = 0.0;
        }
    });
    d
}

/// Unfolds one sample `[c, d, h, w]` into `[c * kd * kh * kw, d * h * w]` columns.
fn im2col(src: &[f32], c: usize, d: usize, h: usize, w: usize, size: [usize; 3]) -> Array2<f32> {
    let [kd, kh, kw] = size;
    let (pd, ph, pw) = ((kd / 2) as isize, (kh / 2) as isize, (kw / 2) as isize);
    let cols = d * h * w;
    let mut out = Array2::<f32>::zeros((c * kd * kh * kw, cols));
    let buf = out.as_slice_mut().expect("standard layout");
    for ci in 0..c {
        for dz in 0..kd {
            for dy in 0..kh {
                for dx in 0..kw {
                    let row = ((ci * kd + dz) * kh + dy) * kw + dx;
                    let dst = &mut buf[row * cols..(row + 1) * cols];
                    let ox = dx as isize - pw;
                    let x0 = (-ox).max(0) as usize;
                    let x1 = (w as isize - ox).min(w as isize).max(0) as usize;
                    if x0 >= x1 {
                        continue;
                    }
                    for z in 0..d {
                        let sz = z as isize + dz as isize - pd;
                        if sz < 0 || sz >= d as isize {
                            continue;
                        }
                        for y in 0..h {
                            let sy = y as isize + dy as isize - ph;
                            if sy < 0 || sy >= h as isize {
                                continue;
                            }
                            let src_row = ((ci * d + sz as usize) * h + sy as usize) * w;
                            let dst_row = (z * h + y) * w;
                            let sx0 = (x0 as isize + ox) as usize;
                            dst[dst_row + x0..dst_row + x1].copy_from_slice(&src[src_row + sx0..src_row + sx0 + (x1 - x0)]);
                        }
                    }
                }
            }
        }
    }
    out
}

/// Adjoint of [`im2col`]: accumulates columns back into `dst`.
fn col2im(cols: &Array2<f32>, dst: &mut [f32], c: usize, d: usize, h: usize, w: usize, size: [usize; 3]) {
    let [kd, kh, kw] = size;
    let (pd, ph, pw) = ((kd / 2) as isize, (kh / 2) as isize, (kw / 2) as isize);
    let ncols = d * h * w;
    let buf = cols.as_slice().expect("standard layout");
    for ci in 0..c {
        for dz in 0..kd {
            for dy in 0..kh {
                for dx in 0..kw {
                    let row = ((ci * kd + dz) * kh + dy) * kw + dx;
                    let src = &buf[row * ncols..(row + 1) * ncols];
                    let ox = dx as isize - pw;
                    let x0 = (-ox).max(0) as usize;
                    let x1 = (w as isize - ox).min(w as isize).max(0) as usize;
                    if x0 >= x1 {
                        continue;
                    }
                    for z in 0..d {
                        let sz = z as isize + dz as isize - pd;
                        if sz < 0 || sz >= d as isize {
                            continue;
                        }
                        for y in 0..h {
                            let sy = y as isize + dy as isize - ph;
                            if sy < 0 || sy >= h as isize {
                                continue;
                            }
                            let dst_row = ((ci * d + sz as usize) * h + sy as usize) * w;
                            let src_row = (z * h + y) * w;
                            let sx0 = (x0 as isize + ox) as usize;
                            for i in 0..(x1 - x0) {
                                dst[dst_row + sx0 + i] += src[src_row + x0 + i];
                            }
                        }
                    }
                }
            }
        }
    }
}

impl Layer {
    /// Tensors persisted in checkpoints, in a fixed order.
    pub fn tensors(&self) -> Vec<(&'static str, &ArrayD<f32>)> {
        match self {
            Layer::Conv(l) => vec![("kernel", &l.kernel), ("bias", &l.bias)],
            Layer::Depthwise(l) => vec![("kernel", &l.kernel), ("bias", &l.bias)],
            Layer::Dense(l) => vec![("kernel", &l.kernel), ("bias", &l.bias)],
            Layer::BatchNorm(l) => vec![
                ("gamma", &l.gamma),
                ("beta", &l.beta),
                ("moving_mean", &l.moving_mean),
                ("moving_variance", &l.moving_variance),
            ],
            Layer::MaxPool | Layer::GlobalAvgPool | Layer::Dropout { .. } => vec![],
        }
    }

    pub fn tensors_mut(&mut self) -> Vec<(&'static str, &mut ArrayD<f32>)> {
        match self {
            Layer::Conv(l) => vec![("kernel", &mut l.kernel), ("bias", &mut l.bias)],
            Layer::Depthwise(l) => vec![("kernel", &mut l.kernel), ("bias", &mut l.bias)],
            Layer::Dense(l) => vec![("kernel", &mut l.kernel), ("bias", &mut l.bias)],
            Layer::BatchNorm(l) => vec![
                ("gamma", &mut l.gamma),
                ("beta", &mut l.beta),
                ("moving_mean", &mut l.moving_mean),
                ("moving_variance", &mut l.moving_variance),
            ],
            Layer::MaxPool | Layer::GlobalAvgPool | Layer::Dropout { .. } => vec![],
        }
    }

    /// Parameters updated by gradient descent (excludes moving statistics).
    pub fn params_mut(&mut self) -> Vec<&mut ArrayD<f32>> {
        match self {
            Layer::Conv(l) => vec![&mut l.kernel, &mut l.bias],
            Layer::Depthwise(l) => vec![&mut l.kernel, &mut l.bias],
            Layer::Dense(l) => vec![&mut l.kernel, &mut l.bias],
            Layer::BatchNorm(l) => vec![&mut l.gamma, &mut l.beta],
            Layer::MaxPool | Layer::GlobalAvgPool | Layer::Dropout { .. } => vec![],
        }
    }

    /// `(gradient-trained, state)` scalar counts.
    pub fn param_count(&self) -> (usize, usize) {
        match self {
            Layer::BatchNorm(l) => (l.gamma.len() + l.beta.len(), l.moving_mean.len() + l.moving_variance.len()),
            other => (other.tensors().iter().map(|(_, t)| t.len()).sum(), 0),
        }
    }

    pub fn forward(
        &self,
        x: &ArrayD<f32>,
        mode: Mode,
        trainable: bool,
        rng: &mut ChaCha8Rng,
        keep_cache: bool,
    ) -> Result<(ArrayD<f32>, Option<Cache>)> {
        match self {
            Layer::Conv(l) => {
                let y = conv_forward(l, x)?;
                let cache = keep_cache.then(|| Cache::Conv { input: x.clone(), output: y.clone() });
                Ok((y, cache))
            }
            Layer::Depthwise(l) => {
                let y = depthwise_forward(l, x)?;
                let cache = keep_cache.then(|| Cache::Conv { input: x.clone(), output: y.clone() });
                Ok((y, cache))
            }
            Layer::MaxPool => {
                let y = maxpool_forward(x)?;
                Ok((y, keep_cache.then(|| Cache::Pool { input: x.clone() })))
            }
            Layer::GlobalAvgPool => {
                if x.ndim() < 3 {
                    return Err(Error::invalid(format!("pooling needs spatial dims, got {:?}", x.shape())));
                }
                let (n, c) = (x.shape()[0], x.shape()[1]);
                let flat = x.to_shape((n, c, x.len() / (n * c).max(1))).expect("contiguous reshape");
                let y = flat.mean_axis(Axis(2)).expect("non-empty spatial").into_dyn();
                Ok((y, keep_cache.then(|| Cache::Gap { input_shape: x.shape().to_vec() })))
            }
            Layer::Dense(l) => {
                let x2 = x
                    .view()
                    .into_dimensionality::<Ix2>()
                    .map_err(|_| Error::invalid(format!("dense layer expects [N, F], got {:?}", x.shape())))?;
                if x2.ncols() != l.inputs() {
                    return Err(Error::invalid(format!(
                        "dense layer expects {} features, got {}",
                        l.inputs(),
                        x2.ncols()
                    )));
                }
                let w = l.kernel.view().into_dimensionality::<Ix2>().expect("2-d kernel");
                let mut y = (x2.dot(&w) + &l.bias).into_dyn();
                if l.activation == Activation::Relu {
                    relu_inplace(&mut y);
                }
                let cache = keep_cache.then(|| Cache::Dense { input: x.clone(), output: y.clone() });
                Ok((y, cache))
            }
            Layer::BatchNorm(l) => {
                let x2 = x
                    .view()
                    .into_dimensionality::<Ix2>()
                    .map_err(|_| Error::invalid(format!("batch norm expects [N, F], got {:?}", x.shape())))?;
                let f = x2.ncols();
                let batch_stats = mode == Mode::Train && trainable;
                let (mean, var): (Vec<f32>, Vec<f32>) = if batch_stats {
                    let m = x2.mean_axis(Axis(0)).expect("non-empty batch");
                    let v = x2.var_axis(Axis(0), 0.0);
                    (m.to_vec(), v.to_vec())
                } else {
                    (l.moving_mean.iter().copied().collect(), l.moving_variance.iter().copied().collect())
                };
                let inv_std: Vec<f32> = var.iter().map(|v| 1.0 / (v + l.epsilon).sqrt()).collect();
                let mut normalized = x2.to_owned();
                for j in 0..f {
                    normalized.column_mut(j).mapv_inplace(|v| (v - mean[j]) * inv_std[j]);
                }
                let mut y = normalized.clone();
                for j in 0..f {
                    let (g, b) = (l.gamma[j], l.beta[j]);
                    y.column_mut(j).mapv_inplace(|v| v * g + b);
                }
                let cache = keep_cache.then(|| Cache::BatchNorm {
                    normalized: normalized.into_dyn(),
                    inv_std,
                    batch_stats,
                });
                Ok((y.into_dyn(), cache))
            }
            Layer::Dropout { rate } => {
                if !mode.dropout_active() || *rate <= 0.0 {
                    return Ok((x.clone(), keep_cache.then_some(Cache::Dropout { mask: None })));
                }
                let keep = 1.0 - rate;
                let mask = x.mapv(|_| if rng.random::<f32>() < keep { 1.0 / keep } else { 0.0 });
                let y = x * &mask;
                Ok((y, keep_cache.then_some(Cache::Dropout { mask: Some(mask) })))
            }
        }
    }

    /// Moves batch norm moving statistics towards the batch statistics.
    pub fn update_moving_stats(&mut self, x: &ArrayD<f32>) {
        if let Layer::BatchNorm(l) = self {
            let x2 = x.view().into_dimensionality::<Ix2>().expect("checked in forward");
            let mean = x2.mean_axis(Axis(0)).expect("non-empty batch");
            let var = x2.var_axis(Axis(0), 0.0);
            let m = l.momentum;
            l.moving_mean.zip_mut_with(&mean.into_dyn(), |a, &b| *a = m * *a + (1.0 - m) * b);
            l.moving_variance.zip_mut_with(&var.into_dyn(), |a, &b| *a = m * *a + (1.0 - m) * b);
        }
    }

    /// Returns parameter gradients (when `param_grads`) and the input gradient
    /// (when `input_grad`).
    pub fn backward(
        &self,
        cache: &Cache,
        dy: &ArrayD<f32>,
        param_grads: bool,
        input_grad: bool,
    ) -> (Option<Vec<ArrayD<f32>>>, Option<ArrayD<f32>>) {
        match (self, cache) {
            (Layer::Conv(l), Cache::Conv { input, output }) => conv_backward(l, input, output, dy, param_grads, input_grad),
            (Layer::Depthwise(l), Cache::Conv { input, output }) => {
                depthwise_backward(l, input, output, dy, param_grads, input_grad)
            }
            (Layer::MaxPool, Cache::Pool { input }) => (None, input_grad.then(|| maxpool_backward(input, dy))),
            (Layer::GlobalAvgPool, Cache::Gap { input_shape }) => {
                let (n, c) = (input_shape[0], input_shape[1]);
                let spatial: usize = input_shape[2..].iter().product();
                let dx = input_grad.then(|| {
                    let scale = 1.0 / spatial as f32;
                    let d2 = dy.view().into_dimensionality::<Ix2>().expect("[N, C]");
                    let mut dx = ArrayD::<f32>::zeros(IxDyn(input_shape));
                    {
                        let mut flat = dx.view_mut().into_shape_with_order((n, c, spatial)).expect("contiguous");
                        for i in 0..n {
                            for j in 0..c {
                                flat.slice_mut(s![i, j, ..]).fill(d2[[i, j]] * scale);
                            }
                        }
                    }
                    dx
                });
                (None, dx)
            }
            (Layer::Dense(l), Cache::Dense { input, output }) => {
                let dz = if l.activation == Activation::Relu { relu_mask(dy, output) } else { dy.clone() };
                let dz2 = dz.view().into_dimensionality::<Ix2>().expect("[N, out]");
                let x2 = input.view().into_dimensionality::<Ix2>().expect("[N, in]");
                let w = l.kernel.view().into_dimensionality::<Ix2>().expect("2-d kernel");
                let grads = param_grads.then(|| vec![x2.t().dot(&dz2).into_dyn(), dz2.sum_axis(Axis(0)).into_dyn()]);
                let dx = input_grad.then(|| dz2.dot(&w.t()).into_dyn());
                (grads, dx)
            }
            (Layer::BatchNorm(l), Cache::BatchNorm { normalized, inv_std, batch_stats }) => {
                let dy2 = dy.view().into_dimensionality::<Ix2>().expect("[N, F]");
                let xh = normalized.view().into_dimensionality::<Ix2>().expect("[N, F]");
                let dgamma = (&dy2 * &xh).sum_axis(Axis(0));
                let dbeta = dy2.sum_axis(Axis(0));
                let grads = param_grads.then(|| vec![dgamma.clone().into_dyn(), dbeta.clone().into_dyn()]);
                let dx = input_grad.then(|| {
                    let n = dy2.nrows() as f32;
                    let mut dx = Array2::<f32>::zeros(dy2.raw_dim());
                    for j in 0..dy2.ncols() {
                        let g = l.gamma[j] * inv_std[j];
                        for i in 0..dy2.nrows() {
                            dx[[i, j]] = if *batch_stats {
                                g * (dy2[[i, j]] - dbeta[j] / n - xh[[i, j]] * dgamma[j] / n)
                            } else {
                                g * dy2[[i, j]]
                            };
                        }
                    }
                    dx.into_dyn()
                });
                (grads, dx)
            }
            (Layer::Dropout { .. }, Cache::Dropout { mask }) => {
                let dx = input_grad.then(|| match mask {
                    Some(m) => dy * m,
                    None => dy.clone(),
                });
                (None, dx)
            }
            _ => panic!("cache does not belong to this layer"),
        }
    }
}

fn conv_forward(l: &Conv, x: &ArrayD<f32>) -> Result<ArrayD<f32>> {
    if x.ndim() != l.spatial_dims + 2 {
        return Err(Error::invalid(format!(
            "convolution expects {} spatial dims, got shape {:?}",
            l.spatial_dims,
            x.shape()
        )));
    }
    let (n, c, d, h, w) = dims5(x.shape())?;
    if c != l.in_channels {
        return Err(Error::invalid(format!("convolution expects {} channels, got {c}", l.in_channels)));
    }
    let out_c = l.out_channels();
    let mut shape = x.shape().to_vec();
    shape[1] = out_c;
    let mut y = ArrayD::<f32>::zeros(IxDyn(&shape));
    let x = x.as_standard_layout();
    let src = x.as_slice().expect("standard layout");
    let per_in = c * d * h * w;
    let per_out = out_c * d * h * w;
    let kernel = l.kernel2();
    let dst = y.as_slice_mut().expect("fresh array");
    for i in 0..n {
        let cols = im2col(&src[i * per_in..(i + 1) * per_in], c, d, h, w, l.size);
        let out = kernel.dot(&cols);
        let o = &mut dst[i * per_out..(i + 1) * per_out];
        let spatial = d * h * w;
        for (oc, row) in out.outer_iter().enumerate() {
            let b = l.bias[oc];
            for (k, v) in row.iter().enumerate() {
                let z = v + b;
                o[oc * spatial + k] = if l.activation == Activation::Relu { z.max(0.0) } else { z };
            }
        }
    }
    Ok(y)
}

fn conv_backward(
    l: &Conv,
    x: &ArrayD<f32>,
    y: &ArrayD<f32>,
    dy: &ArrayD<f32>,
    param_grads: bool,
    input_grad: bool,
) -> (Option<Vec<ArrayD<f32>>>, Option<ArrayD<f32>>) {
    let (n, c, d, h, w) = dims5(x.shape()).expect("validated in forward");
    let out_c = l.out_channels();
    let spatial = d * h * w;
    let dz = if l.activation == Activation::Relu { relu_mask(dy, y) } else { dy.clone() };
    let dz = dz.as_standard_layout().into_owned();
    let dzs = dz.as_slice().expect("standard layout");
    let src = x.as_slice().expect("cached input is contiguous");
    let kernel = l.kernel2();
    let mut dk = Array2::<f32>::zeros(kernel.raw_dim());
    let mut db = ndarray::Array1::<f32>::zeros(out_c);
    let mut dx = input_grad.then(|| ArrayD::<f32>::zeros(x.raw_dim()));
    let per_in = c * spatial;
    for i in 0..n {
        let dzi = ArrayView2::from_shape((out_c, spatial), &dzs[i * out_c * spatial..(i + 1) * out_c * spatial])
            .expect("sized slice");
        if param_grads {
            let cols = im2col(&src[i * per_in..(i + 1) * per_in], c, d, h, w, l.size);
            dk += &dzi.dot(&cols.t());
            db += &dzi.sum_axis(Axis(1));
        }
        if let Some(dx) = dx.as_mut() {
            let dcols = kernel.t().dot(&dzi);
            let buf = dx.as_slice_mut().expect("fresh array");
            col2im(&dcols, &mut buf[i * per_in..(i + 1) * per_in], c, d, h, w, l.size);
        }
    }
    (param_grads.then(|| vec![dk.into_dyn(), db.into_dyn()]), dx)
}

fn depthwise_forward(l: &DepthwiseConv, x: &ArrayD<f32>) -> Result<ArrayD<f32>> {
    let [n, c, h, w] = *x.shape() else {
        return Err(Error::invalid(format!("depthwise convolution expects [N, C, H, W], got {:?}", x.shape())));
    };
    if c != l.kernel.shape()[0] {
        return Err(Error::invalid(format!("depthwise convolution expects {} channels, got {c}", l.kernel.shape()[0])));
    }
    let x = x.as_standard_layout();
    let src = x.as_slice().expect("standard layout");
    let mut y = ArrayD::<f32>::zeros(x.raw_dim());
    let dst = y.as_slice_mut().expect("fresh array");
    for i in 0..n {
        for ch in 0..c {
            let base = (i * c + ch) * h * w;
            let k: Vec<f32> = l.kernel.slice(s![ch, ..]).to_vec();
            for yy in 0..h {
                for xx in 0..w {
                    let mut acc = l.bias[ch];
                    for ky in 0..3 {
                        let sy = yy as isize + ky as isize - 1;
                        if sy < 0 || sy >= h as isize {
                            continue;
                        }
                        for kx in 0..3 {
                            let sx = xx as isize + kx as isize - 1;
                            if sx < 0 || sx >= w as isize {
                                continue;
                            }
                            acc += k[ky * 3 + kx] * src[base + sy as usize * w + sx as usize];
                        }
                    }
                    dst[base + yy * w + xx] = if l.activation == Activation::Relu { acc.max(0.0) } else { acc };
                }
            }
        }
    }
    Ok(y)
}

fn depthwise_backward(
    l: &DepthwiseConv,
    x: &ArrayD<f32>,
    y: &ArrayD<f32>,
    dy: &ArrayD<f32>,
    param_grads: bool,
    input_grad: bool,
) -> (Option<Vec<ArrayD<f32>>>, Option<ArrayD<f32>>) {
    let [n, c, h, w] = *x.shape() else { unreachable!("validated in forward") };
    let dz = if l.activation == Activation::Relu { relu_mask(dy, y) } else { dy.clone() };
    let dz = dz.as_standard_layout().into_owned();
    let g = dz.as_slice().expect("standard layout");
    let src = x.as_slice().expect("cached input is contiguous");
    let mut dk = ArrayD::<f32>::zeros(l.kernel.raw_dim());
    let mut db = ArrayD::<f32>::zeros(l.bias.raw_dim());
    let mut dx = ArrayD::<f32>::zeros(x.raw_dim());
    {
        let dxs = dx.as_slice_mut().expect("fresh array");
        for i in 0..n {
            for ch in 0..c {
                let base = (i * c + ch) * h * w;
                for yy in 0..h {
                    for xx in 0..w {
                        let gv = g[base + yy * w + xx];
                        if gv == 0.0 {
                            continue;
                        }
                        db[ch] += gv;
                        for ky in 0..3 {
                            let sy = yy as isize + ky as isize - 1;
                            if sy < 0 || sy >= h as isize {
                                continue;
                            }
                            for kx in 0..3 {
                                let sx = xx as isize + kx as isize - 1;
                                if sx < 0 || sx >= w as isize {
                                    continue;
                                }
                                let idx = base + sy as usize * w + sx as usize;
                                dk[[ch, ky * 3 + kx]] += gv * src[idx];
                                dxs[idx] += gv * l.kernel[[ch, ky * 3 + kx]];
                            }
                        }
                    }
                }
            }
        }
    }
    (param_grads.then(|| vec![dk, db]), input_grad.then_some(dx))
}

fn maxpool_forward(x: &ArrayD<f32>) -> Result<ArrayD<f32>> {
    let nd = x.ndim();
    if nd < 3 {
        return Err(Error::invalid(format!("max pooling needs spatial dims, got {:?}", x.shape())));
    }
    let (h, w) = (x.shape()[nd - 2], x.shape()[nd - 1]);
    let (oh, ow) = (h / 2, w / 2);
    if oh == 0 || ow == 0 {
        return Err(Error::invalid(format!("input {h}x{w} too small to pool")));
    }
    let planes = x.len() / (h * w);
    let x = x.as_standard_layout();
    let src = x.as_slice().expect("standard layout");
    let mut out = Vec::with_capacity(planes * oh * ow);
    for p in 0..planes {
        let base = p * h * w;
        for yy in 0..oh {
            for xx in 0..ow {
                let r0 = base + 2 * yy * w + 2 * xx;
                let r1 = r0 + w;
                out.push(src[r0].max(src[r0 + 1]).max(src[r1]).max(src[r1 + 1]));
            }
        }
    }
    let mut shape = x.shape().to_vec();
    shape[nd - 2] = oh;
    shape[nd - 1] = ow;
    Ok(ArrayD::from_shape_vec(IxDyn(&shape), out).expect("pooled size"))
}

fn maxpool_backward(x: &ArrayD<f32>, dy: &ArrayD<f32>) -> ArrayD<f32> {
    let nd = x.ndim();
    let (h, w) = (x.shape()[nd - 2], x.shape()[nd - 1]);
    let (oh, ow) = (h / 2, w / 2);
    let planes = x.len() / (h * w);
    let src = x.as_slice().expect("cached input is contiguous");
    let dy = dy.as_standard_layout();
    let g = dy.as_slice().expect("standard layout");
    let mut dx = ArrayD::<f32>::zeros(x.raw_dim());
    let dst = dx.as_slice_mut().expect("fresh array");
    for p in 0..planes {
        let base = p * h * w;
        for yy in 0..oh {
            for xx in 0..ow {
                let r0 = base + 2 * yy * w + 2 * xx;
                let cands = [r0, r0 + 1, r0 + w, r0 + w + 1];
                let best = cands
                    .into_iter()
                    .fold(cands[0], |b, c| if src[c] > src[b] { c } else { b });
                dst[best] += g[(p * oh + yy) * ow + xx];
            }
        }
    }
    dx
}
