//! Confidence from the spread of stochastic forward passes.

use std::path::Path;

use ndarray::{Array3, Axis};
use serde::{Deserialize, Serialize};
use statrs::distribution::{ContinuousCDF, StudentsT};

use crate::data::AugmentationPolicy;
use crate::error::{Error, Result};
use crate::nn::{Classifier, ModelInput, StochasticMode};
use crate::Class;

pub const DEFAULT_PASSES: usize = 10;
/// Largest standard deviation of a variable confined to `[0, 1]`.
pub const MAX_STD: f64 = 0.5;
const STD_SLACK: f64 = 1e-9;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ConfidenceKind {
    Epistemic,
    Aleatoric,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ConfidenceScore {
    pub value: f64,
    pub kind: ConfidenceKind,
    pub winning_class: usize,
    pub raw_std: f64,
}

/// `c = 1 - sigma / 0.5`, for `sigma` in `[0, 0.5]`.
pub fn confidence_from_std(sigma: f64) -> Result<f64> {
    if !sigma.is_finite() || !(-STD_SLACK..=MAX_STD + STD_SLACK).contains(&sigma) {
        return Err(Error::invalid(format!("standard deviation {sigma} outside [0, {MAX_STD}]")));
    }
    Ok((1.0 - sigma.clamp(0.0, MAX_STD) / MAX_STD).clamp(0.0, 1.0))
}

/// Sample standard deviation (n - 1 denominator).
pub fn sample_std(values: &[f64]) -> f64 {
    let n = values.len() as f64;
    if values.len() < 2 {
        return 0.0;
    }
    let mean = values.iter().sum::<f64>() / n;
    (values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1.0)).sqrt()
}

/// Scores from a `[passes, batch, classes]` probability stack.
///
/// The winning class is the argmax of the pass mean (lowest index on ties);
/// the spread is the sample std of that class across passes, clipped to 0.5.
pub fn scores_from_stack(stack: &Array3<f32>, kind: ConfidenceKind) -> Result<Vec<ConfidenceScore>> {
    let (passes, batch, _) = stack.dim();
    if passes < 2 {
        return Err(Error::Config(format!("need at least 2 passes, got {passes}")));
    }
    let mut out = Vec::with_capacity(batch);
    for b in 0..batch {
        let per_sample = stack.index_axis(Axis(1), b).mapv(|v| v as f64);
        let mean = per_sample.mean_axis(Axis(0)).expect("passes > 0");
        let winning_class = crate::eval::argmax(mean.as_slice().expect("contiguous"));
        let column: Vec<f64> = per_sample.column(winning_class).to_vec();
        let raw_std = sample_std(&column).min(MAX_STD);
        out.push(ConfidenceScore {
            value: confidence_from_std(raw_std)?,
            kind,
            winning_class,
            raw_std,
        });
    }
    Ok(out)
}

/// Mean of the members' stacks, pass by pass.
pub fn stochastic_stack(
    models: &[&Classifier],
    input: ModelInput<'_>,
    n_passes: usize,
    mode: StochasticMode,
    policy: &AugmentationPolicy,
    seed: u64,
) -> Result<Array3<f32>> {
    let (first, rest) = models.split_first().ok_or_else(|| Error::invalid("no models"))?;
    let mut acc = first.stochastic_forward(input, n_passes, mode, policy, seed)?.mapv(f64::from);
    for m in rest {
        acc += &m.stochastic_forward(input, n_passes, mode, policy, seed)?.mapv(f64::from);
    }
    Ok(acc.mapv(|v| (v / models.len() as f64) as f32))
}

/// Monte-Carlo dropout confidence.
pub fn epistemic_confidence(model: &Classifier, input: ModelInput<'_>, n_passes: usize, seed: u64) -> Result<Vec<ConfidenceScore>> {
    let stack = model.stochastic_forward(input, n_passes, StochasticMode::Dropout, &AugmentationPolicy::identity(), seed)?;
    scores_from_stack(&stack, ConfidenceKind::Epistemic)
}

/// Test-time augmentation confidence with dropout inactive.
pub fn aleatoric_confidence(
    model: &Classifier,
    input: ModelInput<'_>,
    policy: &AugmentationPolicy,
    n_passes: usize,
    seed: u64,
) -> Result<Vec<ConfidenceScore>> {
    let stack = model.stochastic_forward(input, n_passes, StochasticMode::Tta, policy, seed)?;
    scores_from_stack(&stack, ConfidenceKind::Aleatoric)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Correlation {
    pub rho: f64,
    /// Two-sided, from Student's t with n - 2 degrees of freedom.
    pub p_value: f64,
    pub n: usize,
    /// Set when either variable has zero variance; `rho` and `p_value` are then NaN.
    pub degenerate: bool,
}

pub fn pearson(a: &[f64], b: &[f64]) -> Result<Correlation> {
    if a.len() != b.len() {
        return Err(Error::invalid("correlation inputs differ in length"));
    }
    let n = a.len();
    if n < 3 {
        return Err(Error::invalid(format!("correlation needs at least 3 samples, got {n}")));
    }
    let mean = |v: &[f64]| v.iter().sum::<f64>() / n as f64;
    let (ma, mb) = (mean(a), mean(b));
    let (mut sab, mut saa, mut sbb) = (0.0, 0.0, 0.0);
    for (x, y) in a.iter().zip(b) {
        sab += (x - ma) * (y - mb);
        saa += (x - ma).powi(2);
        sbb += (y - mb).powi(2);
    }
    if saa == 0.0 || sbb == 0.0 {
        return Ok(Correlation {
            rho: f64::NAN,
            p_value: f64::NAN,
            n,
            degenerate: true,
        });
    }
    let rho = (sab / (saa * sbb).sqrt()).clamp(-1.0, 1.0);
    let df = (n - 2) as f64;
    let p_value = if rho.abs() == 1.0 {
        0.0
    } else {
        let t = rho * (df / (1.0 - rho * rho)).sqrt();
        let dist = StudentsT::new(0.0, 1.0, df).map_err(|e| Error::invalid(e.to_string()))?;
        (2.0 * dist.sf(t.abs())).min(1.0)
    };
    Ok(Correlation {
        rho,
        p_value,
        n,
        degenerate: false,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CorrectnessReport {
    pub correlation: Correlation,
    pub mean_conf_correct: Option<f64>,
    pub mean_conf_wrong: Option<f64>,
}

/// Point-biserial correlation of confidence with the 0/1 correctness indicator.
pub fn correlate_with_correctness(scores: &[f64], correct: &[bool]) -> Result<CorrectnessReport> {
    let indicator: Vec<f64> = correct.iter().map(|&c| if c { 1.0 } else { 0.0 }).collect();
    let correlation = pearson(scores, &indicator)?;
    let group_mean = |want: bool| {
        let v: Vec<f64> = scores.iter().zip(correct).filter(|(_, &c)| c == want).map(|(s, _)| *s).collect();
        (!v.is_empty()).then(|| v.iter().sum::<f64>() / v.len() as f64)
    };
    Ok(CorrectnessReport {
        correlation,
        mean_conf_correct: group_mean(true),
        mean_conf_wrong: group_mean(false),
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ConfidenceRow {
    pub video_id: String,
    pub frame_index: usize,
    pub pred_class: Class,
    pub epistemic_c: f64,
    pub aleatoric_c: f64,
    pub correct: bool,
}

pub fn write_confidence_csv(rows: &[ConfidenceRow], path: &Path) -> Result<()> {
    let mut w = csv::Writer::from_writer(Vec::new());
    if rows.is_empty() {
        w.write_record(["video_id", "frame_index", "pred_class", "epistemic_c", "aleatoric_c", "correct"])
            .map_err(|e| Error::Serde(e.to_string()))?;
    }
    for r in rows {
        w.serialize(r).map_err(|e| Error::Serde(e.to_string()))?;
    }
    let bytes = w.into_inner().map_err(|e| Error::Serde(e.to_string()))?;
    crate::io::write_atomic(path, &bytes)
}

pub fn read_confidence_csv(path: &Path) -> Result<Vec<ConfidenceRow>> {
    let mut r = csv::Reader::from_path(path).map_err(|e| Error::Serde(format!("{}: {e}", path.display())))?;
    r.deserialize()
        .enumerate()
        .map(|(i, row)| row.map_err(|e| Error::invalid_row(i + 1, e.to_string())))
        .collect()
}

/// Correctness correlations of both scores plus their mutual correlation.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ConfidenceSummary {
    pub epistemic: CorrectnessReport,
    pub aleatoric: CorrectnessReport,
    pub inter_score: Correlation,
}

pub fn summarize(rows: &[ConfidenceRow]) -> Result<ConfidenceSummary> {
    let e: Vec<f64> = rows.iter().map(|r| r.epistemic_c).collect();
    let a: Vec<f64> = rows.iter().map(|r| r.aleatoric_c).collect();
    let ok: Vec<bool> = rows.iter().map(|r| r.correct).collect();
    Ok(ConfidenceSummary {
        epistemic: correlate_with_correctness(&e, &ok)?,
        aleatoric: correlate_with_correctness(&a, &ok)?,
        inter_score: pearson(&e, &a)?,
    })
}
