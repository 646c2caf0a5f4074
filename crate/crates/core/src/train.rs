//! Per-fold fine-tuning and cross-validation orchestration.

use std::collections::{BTreeMap, BTreeSet};
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::class::Class;
use crate::cv::FoldAssignment;
use crate::data::augment::AugmentationPolicy;
use crate::error::{Error, Result};
use crate::eval::{evaluate_probabilities, predict_examples, Evaluation, Examples};
use crate::metrics::{aggregate_reports, MeanStd};
use crate::nn::checkpoint::{checkpoint_path, load_checkpoint, save_checkpoint, CheckpointMeta};
use crate::nn::layers::Mode;
use crate::nn::network::{cross_entropy, Adam, AdamParams};
use crate::nn::{argmax_rows, Classifier, ClassifierConfig};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    pub early_stopping: bool,
    /// Non-improving epochs tolerated before stopping.
    pub patience: usize,
    pub restore_best: bool,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            epochs: 40,
            batch_size: 8,
            learning_rate: 1e-4,
            early_stopping: true,
            patience: 5,
            restore_best: true,
            seed: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.batch_size == 0 {
            return Err(Error::Config("batch_size must be positive".into()));
        }
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return Err(Error::Config(format!("learning_rate must be positive, got {}", self.learning_rate)));
        }
        Ok(())
    }
}

/// Tracks the monitored loss and decides when to stop.
#[derive(Debug, Clone)]
pub struct EarlyStopping {
    patience: usize,
    best: f64,
    best_epoch: Option<usize>,
    wait: usize,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct StopDecision {
    pub improved: bool,
    pub stop: bool,
}

impl EarlyStopping {
    pub fn new(patience: usize) -> Self {
        EarlyStopping {
            patience,
            best: f64::INFINITY,
            best_epoch: None,
            wait: 0,
        }
    }

    /// Records `loss` for `epoch`. A patience of zero stops at the first non-improving epoch.
    pub fn update(&mut self, epoch: usize, loss: f64) -> StopDecision {
        if loss < self.best {
            self.best = loss;
            self.best_epoch = Some(epoch);
            self.wait = 0;
            return StopDecision {
                improved: true,
                stop: false,
            };
        }
        self.wait += 1;
        StopDecision {
            improved: false,
            stop: self.wait >= self.patience.max(1),
        }
    }

    pub fn best_epoch(&self) -> Option<usize> {
        self.best_epoch
    }

    pub fn best(&self) -> f64 {
        self.best
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub train_loss: f64,
    pub val_loss: Option<f64>,
    pub train_acc: f64,
    pub val_acc: Option<f64>,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct TrainingLog {
    pub records: Vec<EpochRecord>,
    pub best_epoch: Option<usize>,
    pub stopped_early: bool,
}

impl TrainingLog {
    /// One JSON object per epoch.
    pub fn to_jsonl(&self) -> String {
        self.records
            .iter()
            .map(|r| serde_json::to_string(r).expect("record serializes") + "\n")
            .collect()
    }
}

fn loss_and_accuracy(model: &Classifier, examples: &Examples<'_>, indices: &[usize]) -> Result<(f64, f64)> {
    let probs = predict_examples(model, examples, indices)?;
    let preds = argmax_rows(&probs);
    let mut loss = 0.0;
    let mut correct = 0;
    for (r, &i) in indices.iter().enumerate() {
        let t = examples.label(i).index();
        loss -= (probs[[r, t]].max(1e-7) as f64).ln();
        correct += usize::from(preds[r] == t);
    }
    Ok((loss / indices.len() as f64, correct as f64 / indices.len() as f64))
}

/// Trains on `train_idx`, monitoring loss on `val_idx` (or the training loss when empty).
pub fn fit(
    model: Classifier,
    examples: &Examples<'_>,
    train_idx: &[usize],
    val_idx: &[usize],
    config: &TrainConfig,
    policy: &AugmentationPolicy,
) -> Result<(Classifier, TrainingLog)> {
    fit_with(model, examples, train_idx, val_idx, config, policy, &mut |_, _| true)
}

/// [`fit`] with a hook called after every epoch; returning `false` stops training.
pub fn fit_with(
    mut model: Classifier,
    examples: &Examples<'_>,
    train_idx: &[usize],
    val_idx: &[usize],
    config: &TrainConfig,
    policy: &AugmentationPolicy,
    on_epoch: &mut dyn FnMut(&Classifier, &EpochRecord) -> bool,
) -> Result<(Classifier, TrainingLog)> {
    config.validate()?;
    policy.validate()?;
    examples.validate()?;
    let mut log = TrainingLog::default();
    if config.epochs == 0 {
        return Ok((model, log));
    }
    if train_idx.is_empty() {
        return Err(Error::Training("empty training set".into()));
    }
    let start = model
        .network()
        .first_trainable()
        .ok_or_else(|| Error::Training("model has no trainable layers".into()))?;
    let mut adam = Adam::new(AdamParams {
        learning_rate: config.learning_rate,
        ..Default::default()
    });
    let mut stopper = EarlyStopping::new(config.patience);
    let mut best: Option<Classifier> = None;
    let mut order = train_idx.to_vec();

    for epoch in 0..config.epochs {
        let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
        rng.set_stream(epoch as u64);
        order.shuffle(&mut rng);
        let (mut loss_sum, mut correct) = (0.0, 0usize);
        for batch_idx in order.chunks(config.batch_size) {
            let batch = examples.batch(batch_idx, Some((policy, epoch as u64)));
            let x = model.input_tensor(batch.as_input())?;
            let targets: Vec<usize> = batch_idx.iter().map(|&i| examples.label(i).index()).collect();
            let (logits, trace) = model.network().forward_traced(&x, start, Mode::Train, &mut rng)?;
            let (loss, dlogits, probs) = cross_entropy(&logits, &targets)?;
            if !loss.is_finite() {
                return Err(Error::Training(format!("loss diverged at epoch {epoch}")));
            }
            let (grads, _) = model.network().backward(&trace, &dlogits, false);
            model.network_mut().commit_statistics(&trace);
            adam.step(model.network_mut(), &grads);
            loss_sum += loss * batch_idx.len() as f64;
            correct += argmax_rows(&probs).iter().zip(&targets).filter(|(p, t)| p == t).count();
        }
        let train_loss = loss_sum / order.len() as f64;
        let train_acc = correct as f64 / order.len() as f64;
        let (val_loss, val_acc) = if val_idx.is_empty() {
            (None, None)
        } else {
            let (l, a) = loss_and_accuracy(&model, examples, val_idx)?;
            (Some(l), Some(a))
        };
        if !val_loss.unwrap_or(0.0).is_finite() {
            return Err(Error::Training(format!("validation loss diverged at epoch {epoch}")));
        }
        log.records.push(EpochRecord {
            epoch,
            train_loss,
            val_loss,
            train_acc,
            val_acc,
        });
        log::info!("epoch {epoch}: train_loss {train_loss:.4} val_loss {val_loss:?}");
        let decision = stopper.update(epoch, val_loss.unwrap_or(train_loss));
        if decision.improved && config.restore_best {
            best = Some(model.clone());
        }
        if config.early_stopping && decision.stop {
            log.stopped_early = true;
            break;
        }
        if !on_epoch(&model, log.records.last().expect("just pushed")) {
            break;
        }
    }
    log.best_epoch = stopper.best_epoch();
    if let Some(b) = best {
        model = b;
    }
    Ok((model, log))
}

/// Fine-tunes on every fold except `fold` and monitors the held-out fold.
pub fn train_fold(
    model: Classifier,
    examples: &Examples<'_>,
    assignment: &FoldAssignment,
    fold: usize,
    config: &TrainConfig,
    policy: &AugmentationPolicy,
) -> Result<(Classifier, TrainingLog)> {
    let (train, held_out) = examples.split(assignment, fold)?;
    let present: BTreeSet<Class> = examples.labels().into_iter().collect();
    let trained: BTreeSet<Class> = train.iter().map(|&i| examples.label(i)).collect();
    if let Some(missing) = present.difference(&trained).next() {
        return Err(Error::Training(format!("fold {fold} has no training frames of class {missing}")));
    }
    fit(model, examples, &train, &held_out, config, policy)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CrossValidationConfig {
    pub model: ClassifierConfig,
    pub train: TrainConfig,
    pub augment: AugmentationPolicy,
    pub checkpoint_dir: PathBuf,
    pub exclude_uninformative: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FoldResult {
    pub fold: usize,
    pub checkpoint: PathBuf,
    pub resumed: bool,
    pub evaluation: Evaluation,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CrossValidationOutcome {
    pub folds: Vec<FoldResult>,
    pub frame_aggregate: BTreeMap<String, MeanStd>,
    pub video_aggregate: BTreeMap<String, MeanStd>,
}

fn resumable(path: &Path, split_hash: &str) -> Option<Classifier> {
    if !path.exists() {
        return None;
    }
    match load_checkpoint(path) {
        Ok((m, meta)) if meta.split_hash == split_hash => Some(m),
        Ok(_) => {
            log::warn!("{} was trained on another split; retraining", path.display());
            None
        }
        Err(e) => {
            log::warn!("cannot load {}: {e}; retraining", path.display());
            None
        }
    }
}

/// Trains (or resumes) one model per fold and evaluates each on its held-out videos.
pub fn run_cross_validation(
    config: &CrossValidationConfig,
    examples: &Examples<'_>,
    assignment: &FoldAssignment,
) -> Result<CrossValidationOutcome> {
    let split_hash = assignment.hash();
    let mut folds = Vec::new();
    for fold in 0..assignment.n_folds {
        let path = checkpoint_path(&config.checkpoint_dir, config.model.arch, fold);
        let (model, resumed) = match resumable(&path, &split_hash) {
            Some(m) => (m, true),
            None => {
                let fresh = Classifier::build(&config.model)?;
                let (model, log) = train_fold(fresh, examples, assignment, fold, &config.train, &config.augment)?;
                let best = log.best_epoch.and_then(|e| log.records.iter().find(|r| r.epoch == e));
                let mut val_metrics = BTreeMap::new();
                if let Some(r) = best {
                    val_metrics.insert("train_loss".into(), r.train_loss);
                    if let (Some(l), Some(a)) = (r.val_loss, r.val_acc) {
                        val_metrics.insert("val_loss".into(), l);
                        val_metrics.insert("val_acc".into(), a);
                    }
                }
                let meta = CheckpointMeta {
                    config: config.model.clone(),
                    fold,
                    seed: config.train.seed,
                    epoch: log.best_epoch.unwrap_or(0),
                    val_metrics,
                    split_hash: split_hash.clone(),
                };
                save_checkpoint(&config.checkpoint_dir, &model, &meta)?;
                crate::io::write_atomic(&path.with_extension("log.jsonl"), log.to_jsonl().as_bytes())?;
                (model, false)
            }
        };
        let (_, held_out) = examples.split(assignment, fold)?;
        let probs = predict_examples(&model, examples, &held_out)?;
        let evaluation = evaluate_probabilities(&probs, examples, &held_out, config.exclude_uninformative)?;
        folds.push(FoldResult {
            fold,
            checkpoint: path,
            resumed,
            evaluation,
        });
    }
    let frames: Vec<_> = folds.iter().map(|f| f.evaluation.frame.clone()).collect();
    let videos: Vec<_> = folds.iter().map(|f| f.evaluation.video.clone()).collect();
    Ok(CrossValidationOutcome {
        frame_aggregate: aggregate_reports(&frames),
        video_aggregate: aggregate_reports(&videos),
        folds,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn patience_zero_stops_after_second_epoch() {
        let mut s = EarlyStopping::new(0);
        assert!(!s.update(0, 1.0).stop);
        assert!(s.update(1, 2.0).stop);
    }

    #[test]
    fn patience_counts_non_improving_epochs() {
        let mut s = EarlyStopping::new(2);
        assert!(s.update(0, 1.0).improved);
        assert!(!s.update(1, 1.5).stop);
        assert!(s.update(2, 0.5).improved);
        assert!(!s.update(3, 0.6).stop);
        assert!(s.update(4, 0.7).stop);
        assert_eq!(s.best_epoch(), Some(2));
    }

    #[test]
    fn defaults_follow_the_published_regimen() {
        let c = TrainConfig::default();
        assert_eq!((c.epochs, c.batch_size, c.learning_rate, c.patience), (40, 8, 1e-4, 5));
    }
}
