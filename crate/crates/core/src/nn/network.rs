//! Sequential network with partial backpropagation and an Adam optimizer.

use ndarray::{Array2, ArrayD, Axis, Ix2};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::layers::{Cache, Layer, Mode};
use crate::error::{Error, Result};

#[derive(Debug, Clone)]
pub struct NamedLayer {
    pub name: String,
    pub trainable: bool,
    pub layer: Layer,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct ParamCounts {
    pub total: usize,
    pub trainable: usize,
    pub non_trainable: usize,
}

/// Per-layer parameter gradients; `None` for frozen or parameter-free layers.
pub type Gradients = Vec<Option<Vec<ArrayD<f32>>>>;

/// Forward activations kept for a backward pass starting at `start`.
#[derive(Debug)]
pub struct Trace {
    pub start: usize,
    pub caches: Vec<Cache>,
    /// Inputs of batch norm layers that must update moving statistics.
    bn_inputs: Vec<(usize, ArrayD<f32>)>,
}

#[derive(Debug, Clone, Default)]
pub struct Network {
    pub layers: Vec<NamedLayer>,
}

impl Network {
    pub fn push(&mut self, name: impl Into<String>, layer: Layer) {
        self.layers.push(NamedLayer {
            name: name.into(),
            trainable: true,
            layer,
        });
    }

    pub fn index_of(&self, name: &str) -> Option<usize> {
        self.layers.iter().position(|l| l.name == name)
    }

    pub fn first_trainable(&self) -> Option<usize> {
        self.layers
            .iter()
            .position(|l| l.trainable && !l.layer.tensors().is_empty())
    }

    pub fn param_counts(&self) -> ParamCounts {
        let mut trainable = 0;
        let mut non_trainable = 0;
        for l in &self.layers {
            let (params, state) = l.layer.param_count();
            if l.trainable {
                trainable += params;
            } else {
                non_trainable += params;
            }
            non_trainable += state;
        }
        ParamCounts {
            total: trainable + non_trainable,
            trainable,
            non_trainable,
        }
    }

    /// Runs layers `range` without keeping activations.
    pub fn forward_range(
        &self,
        x: &ArrayD<f32>,
        range: std::ops::Range<usize>,
        mode: Mode,
        rng: &mut ChaCha8Rng,
    ) -> Result<ArrayD<f32>> {
        let mut cur = x.clone();
        for l in &self.layers[range] {
            cur = l.layer.forward(&cur, mode, l.trainable, rng, false)?.0;
        }
        Ok(cur)
    }

    pub fn forward(&self, x: &ArrayD<f32>, mode: Mode, rng: &mut ChaCha8Rng) -> Result<ArrayD<f32>> {
        self.forward_range(x, 0..self.layers.len(), mode, rng)
    }

    /// Runs the network, keeping activations for layers at and after `start`.
    pub fn forward_traced(
        &self,
        x: &ArrayD<f32>,
        start: usize,
        mode: Mode,
        rng: &mut ChaCha8Rng,
    ) -> Result<(ArrayD<f32>, Trace)> {
        let a = self.forward_range(x, 0..start, mode, rng)?;
        self.trace_from(&a, start, mode, rng)
    }

    /// Like [`Network::forward_traced`], but `a` is the input of layer `start`.
    pub fn trace_from(
        &self,
        a: &ArrayD<f32>,
        start: usize,
        mode: Mode,
        rng: &mut ChaCha8Rng,
    ) -> Result<(ArrayD<f32>, Trace)> {
        let mut cur = a.clone();
        let mut caches = Vec::with_capacity(self.layers.len() - start);
        let mut bn_inputs = Vec::new();
        for (i, l) in self.layers.iter().enumerate().skip(start) {
            if mode == Mode::Train && l.trainable && matches!(l.layer, Layer::BatchNorm(_)) {
                bn_inputs.push((i, cur.clone()));
            }
            let (y, cache) = l.layer.forward(&cur, mode, l.trainable, rng, true)?;
            caches.push(cache.expect("cache requested"));
            cur = y;
        }
        Ok((cur, Trace { start, caches, bn_inputs }))
    }

    /// Commits batch norm moving statistics observed during a traced training pass.
    pub fn commit_statistics(&mut self, trace: &Trace) {
        for (i, x) in &trace.bn_inputs {
            self.layers[*i].layer.update_moving_stats(x);
        }
    }

    /// Backpropagates `dout` through the traced layers.
    ///
    /// Returns gradients for trainable layers and the gradient with respect to
    /// the input of layer `trace.start`.
    pub fn backward(&self, trace: &Trace, dout: &ArrayD<f32>, want_input_grad: bool) -> (Gradients, Option<ArrayD<f32>>) {
        let mut grads: Gradients = vec![None; self.layers.len()];
        let mut cur = dout.clone();
        let n = self.layers.len();
        for i in (trace.start..n).rev() {
            let l = &self.layers[i];
            let need_input = i > trace.start || want_input_grad;
            let (g, dx) = l.layer.backward(&trace.caches[i - trace.start], &cur, l.trainable, need_input);
            grads[i] = g.filter(|g| !g.is_empty());
            match dx {
                Some(dx) => cur = dx,
                None => return (grads, None),
            }
        }
        (grads, Some(cur))
    }
}

pub fn softmax(logits: &ArrayD<f32>) -> Result<Array2<f32>> {
    let l = logits
        .view()
        .into_dimensionality::<Ix2>()
        .map_err(|_| Error::invalid(format!("logits must be [N, K], got {:?}", logits.shape())))?;
    let mut out = l.to_owned();
    for mut row in out.rows_mut() {
        let m = row.fold(f32::NEG_INFINITY, |a, &b| a.max(b));
        row.mapv_inplace(|v| (v - m).exp());
        let s = row.sum();
        row.mapv_inplace(|v| v / s);
    }
    Ok(out)
}

/// Mean cross-entropy and its gradient with respect to the logits.
pub fn cross_entropy(logits: &ArrayD<f32>, targets: &[usize]) -> Result<(f64, ArrayD<f32>, Array2<f32>)> {
    let probs = softmax(logits)?;
    let n = probs.nrows();
    if n != targets.len() {
        return Err(Error::invalid("target count differs from batch size"));
    }
    let l = logits.view().into_dimensionality::<Ix2>().expect("checked by softmax");
    let mut loss = 0.0f64;
    for (i, &t) in targets.iter().enumerate() {
        if t >= probs.ncols() {
            return Err(Error::invalid(format!("target class {t} out of range")));
        }
        let row = l.row(i);
        let m = row.fold(f32::NEG_INFINITY, |a, &b| a.max(b)) as f64;
        let lse = m + row.iter().map(|&v| (v as f64 - m).exp()).sum::<f64>().ln();
        loss += lse - row[t] as f64;
    }
    let mut grad = probs.clone();
    for (i, &t) in targets.iter().enumerate() {
        grad[[i, t]] -= 1.0;
    }
    grad /= n as f32;
    Ok((loss / n as f64, grad.into_dyn(), probs))
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AdamParams {
    pub learning_rate: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
}

impl Default for AdamParams {
    fn default() -> Self {
        AdamParams {
            learning_rate: 1e-4,
            beta1: 0.9,
            beta2: 0.999,
            epsilon: 1e-7,
        }
    }
}

#[derive(Debug, Clone)]
pub struct Adam {
    pub params: AdamParams,
    step: i32,
    moments: Vec<Option<Vec<(ArrayD<f32>, ArrayD<f32>)>>>,
}

impl Adam {
    pub fn new(params: AdamParams) -> Self {
        Adam {
            params,
            step: 0,
            moments: Vec::new(),
        }
    }

    pub fn step(&mut self, net: &mut Network, grads: &Gradients) {
        self.step += 1;
        if self.moments.len() < net.layers.len() {
            self.moments.resize(net.layers.len(), None);
        }
        let p = self.params;
        let lr_t = p.learning_rate * (1.0 - p.beta2.powi(self.step)).sqrt() / (1.0 - p.beta1.powi(self.step));
        let (b1, b2, eps, lr_t) = (p.beta1 as f32, p.beta2 as f32, p.epsilon as f32, lr_t as f32);
        for (i, g) in grads.iter().enumerate() {
            let Some(g) = g else { continue };
            if !net.layers[i].trainable {
                continue;
            }
            let params = net.layers[i].layer.params_mut();
            let state = self.moments[i]
                .get_or_insert_with(|| params.iter().map(|t| (ArrayD::zeros(t.raw_dim()), ArrayD::zeros(t.raw_dim()))).collect());
            for ((param, grad), (m, v)) in params.into_iter().zip(g).zip(state.iter_mut()) {
                ndarray::Zip::from(param)
                    .and(grad)
                    .and(m)
                    .and(v)
                    .for_each(|w, &gr, m, v| {
                        *m = b1 * *m + (1.0 - b1) * gr;
                        *v = b2 * *v + (1.0 - b2) * gr * gr;
                        *w -= lr_t * *m / (v.sqrt() + eps);
                    });
            }
        }
    }
}

/// Row-wise argmax, ties to the lowest index.
pub fn argmax_rows(probs: &Array2<f32>) -> Vec<usize> {
    probs
        .axis_iter(Axis(0))
        .map(|row| {
            let mut best = 0;
            for (j, &v) in row.iter().enumerate() {
                if v > row[best] {
                    best = j;
                }
            }
            best
        })
        .collect()
}
