//! Weight files (safetensors) and checkpoint sidecars.

use std::collections::{BTreeMap, HashMap};
use std::path::{Path, PathBuf};

use ndarray::{ArrayD, IxDyn};
use safetensors::tensor::{Dtype, SafeTensors, TensorView};
use serde::{Deserialize, Serialize};

use super::network::Network;
use super::zoo::{Arch, Classifier, ClassifierConfig, WeightsRef};
use crate::error::{Error, Result};
use crate::io::{sha256_file, write_atomic};

/// Metadata written next to each checkpoint.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CheckpointMeta {
    pub config: ClassifierConfig,
    pub fold: usize,
    pub seed: u64,
    /// Zero-based epoch whose weights were kept.
    pub epoch: usize,
    pub val_metrics: BTreeMap<String, f64>,
    pub split_hash: String,
}

pub fn checkpoint_path(dir: &Path, arch: Arch, fold: usize) -> PathBuf {
    dir.join(format!("{arch}_fold{fold}.bin"))
}

pub fn sidecar_path(checkpoint: &Path) -> PathBuf {
    checkpoint.with_extension("json")
}

fn tensor_name(layer: &str, tensor: &str) -> String {
    format!("{layer}.{tensor}")
}

pub fn weights_to_bytes(net: &Network) -> Result<Vec<u8>> {
    let mut raw: Vec<(String, Vec<usize>, Vec<u8>)> = Vec::new();
    for l in &net.layers {
        for (name, t) in l.layer.tensors() {
            let bytes = t.iter().flat_map(|v| v.to_le_bytes()).collect();
            raw.push((tensor_name(&l.name, name), t.shape().to_vec(), bytes));
        }
    }
    let views = raw
        .iter()
        .map(|(n, shape, bytes)| {
            TensorView::new(Dtype::F32, shape.clone(), bytes)
                .map(|v| (n.clone(), v))
                .map_err(|e| Error::Serde(e.to_string()))
        })
        .collect::<Result<Vec<_>>>()?;
    safetensors::serialize(views, &None::<HashMap<String, String>>).map_err(|e| Error::Serde(e.to_string()))
}

/// Loads tensors for layers `0..upto` from safetensors bytes; every tensor must be present.
pub fn load_weights_bytes(net: &mut Network, bytes: &[u8], upto: usize, source: &Path) -> Result<()> {
    let st = SafeTensors::deserialize(bytes).map_err(|e| Error::Decode(format!("{}: {e}", source.display())))?;
    for l in net.layers.iter_mut().take(upto) {
        let layer_name = l.name.clone();
        for (name, t) in l.layer.tensors_mut() {
            let key = tensor_name(&layer_name, name);
            let view = st
                .tensor(&key)
                .map_err(|_| Error::Decode(format!("{}: missing tensor `{key}`", source.display())))?;
            if view.dtype() != Dtype::F32 || view.shape() != t.shape() {
                return Err(Error::Decode(format!(
                    "{}: tensor `{key}` has {:?} {:?}, expected F32 {:?}",
                    source.display(),
                    view.dtype(),
                    view.shape(),
                    t.shape()
                )));
            }
            let data: Vec<f32> = view
                .data()
                .chunks_exact(4)
                .map(|b| f32::from_le_bytes([b[0], b[1], b[2], b[3]]))
                .collect();
            *t = ArrayD::from_shape_vec(IxDyn(view.shape()), data).expect("shape checked");
        }
    }
    Ok(())
}

pub fn save_weights(net: &Network, path: &Path) -> Result<()> {
    write_atomic(path, &weights_to_bytes(net)?)
}

pub fn load_weights(net: &mut Network, path: &Path) -> Result<()> {
    let bytes = read_weights(path)?;
    let n = net.layers.len();
    load_weights_bytes(net, &bytes, n, path)
}

fn read_weights(path: &Path) -> Result<Vec<u8>> {
    if !path.exists() {
        return Err(Error::MissingWeights(path.to_path_buf()));
    }
    std::fs::read(path).map_err(|e| Error::io(path, e))
}

/// Loads pretrained backbone tensors, verifying the checksum when one is given.
pub fn load_backbone(net: &mut Network, backbone_len: usize, weights: &WeightsRef) -> Result<()> {
    let bytes = read_weights(&weights.path)?;
    if let Some(expected) = &weights.sha256 {
        let found = sha256_file(&weights.path)?;
        if !found.eq_ignore_ascii_case(expected) {
            return Err(Error::Checksum {
                path: weights.path.clone(),
                expected: expected.clone(),
                found,
            });
        }
    }
    load_weights_bytes(net, &bytes, backbone_len, &weights.path)
}

pub fn save_checkpoint(dir: &Path, model: &Classifier, meta: &CheckpointMeta) -> Result<PathBuf> {
    let path = checkpoint_path(dir, model.config().arch, meta.fold);
    save_weights(model.network(), &path)?;
    let json = serde_json::to_string_pretty(meta)?;
    write_atomic(&sidecar_path(&path), json.as_bytes())?;
    Ok(path)
}

pub fn load_meta(checkpoint: &Path) -> Result<CheckpointMeta> {
    let side = sidecar_path(checkpoint);
    let text = std::fs::read_to_string(&side).map_err(|e| Error::io(&side, e))?;
    Ok(serde_json::from_str(&text)?)
}

pub fn load_checkpoint(path: &Path) -> Result<(Classifier, CheckpointMeta)> {
    if !path.exists() {
        return Err(Error::MissingWeights(path.to_path_buf()));
    }
    let meta = load_meta(path)?;
    let config = ClassifierConfig {
        pretrained_backbone: false,
        ..meta.config.clone()
    };
    let mut model = Classifier::build(&config)?;
    load_weights(model.network_mut(), path)?;
    Ok((model, meta))
}
