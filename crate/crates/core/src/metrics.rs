//! Classification metrics, curves, and cross-fold aggregation.

use std::collections::BTreeMap;
use std::fmt;
use std::io::Write;
use std::path::Path;

use ndarray::Array2;
use serde::{Deserialize, Serialize};

use crate::class::Class;
use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ConfusionMatrix {
    /// `counts[true][predicted]`
    pub counts: Vec<Vec<u64>>,
    pub class_names: Vec<String>,
}

pub fn confusion_matrix(truth: &[usize], predicted: &[usize], class_names: &[&str]) -> Result<ConfusionMatrix> {
    if truth.len() != predicted.len() {
        return Err(Error::invalid(format!(
            "{} true labels but {} predictions",
            truth.len(),
            predicted.len()
        )));
    }
    let k = class_names.len();
    let mut counts = vec![vec![0u64; k]; k];
    for (i, (&t, &p)) in truth.iter().zip(predicted).enumerate() {
        if t >= k || p >= k {
            return Err(Error::invalid(format!("sample {i}: label outside the {k}-class set")));
        }
        counts[t][p] += 1;
    }
    Ok(ConfusionMatrix {
        counts,
        class_names: class_names.iter().map(|s| s.to_string()).collect(),
    })
}

impl ConfusionMatrix {
    pub fn n_classes(&self) -> usize {
        self.counts.len()
    }

    pub fn total(&self) -> u64 {
        self.counts.iter().flatten().sum()
    }

    pub fn trace(&self) -> u64 {
        (0..self.n_classes()).map(|i| self.counts[i][i]).sum()
    }

    pub fn row_total(&self, k: usize) -> u64 {
        self.counts[k].iter().sum()
    }

    pub fn col_total(&self, k: usize) -> u64 {
        self.counts.iter().map(|r| r[k]).sum()
    }

    /// Each row divided by its total (diagonal = recall); empty rows stay zero.
    pub fn row_normalized(&self) -> Vec<Vec<f64>> {
        self.counts
            .iter()
            .map(|row| {
                let t: u64 = row.iter().sum();
                row.iter().map(|&c| if t == 0 { 0.0 } else { c as f64 / t as f64 }).collect()
            })
            .collect()
    }

    /// Each column divided by its total (diagonal = precision).
    pub fn col_normalized(&self) -> Vec<Vec<f64>> {
        let k = self.n_classes();
        let cols: Vec<u64> = (0..k).map(|j| self.col_total(j)).collect();
        self.counts
            .iter()
            .map(|row| {
                row.iter()
                    .zip(&cols)
                    .map(|(&c, &t)| if t == 0 { 0.0 } else { c as f64 / t as f64 })
                    .collect()
            })
            .collect()
    }

    /// One-vs-rest counts `(tp, fp, fn, tn)` for class `k`.
    pub fn binarize(&self, k: usize) -> (u64, u64, u64, u64) {
        let tp = self.counts[k][k];
        let fp = self.col_total(k) - tp;
        let fn_ = self.row_total(k) - tp;
        let tn = self.total() - tp - fp - fn_;
        (tp, fp, fn_, tn)
    }

    pub fn to_csv(&self) -> String {
        let mut s = String::from("true\\pred");
        for n in &self.class_names {
            s.push(',');
            s.push_str(n);
        }
        s.push('\n');
        for (name, row) in self.class_names.iter().zip(&self.counts) {
            s.push_str(name);
            for c in row {
                s.push_str(&format!(",{c}"));
            }
            s.push('\n');
        }
        s
    }
}

/// A metric value; zero with `degenerate` set when its denominator vanished.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Metric {
    pub value: f64,
    pub degenerate: bool,
}

impl Metric {
    fn ratio(num: f64, den: f64) -> Self {
        if den == 0.0 {
            Metric {
                value: 0.0,
                degenerate: true,
            }
        } else {
            Metric {
                value: num / den,
                degenerate: false,
            }
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ClassMetrics {
    pub recall: Metric,
    pub precision: Metric,
    pub f1: Metric,
    pub specificity: Metric,
    pub mcc: Metric,
    pub support: u64,
}

pub fn per_class_metrics(cm: &ConfusionMatrix, class_k: usize) -> Result<ClassMetrics> {
    if class_k >= cm.n_classes() {
        return Err(Error::invalid(format!("class index {class_k} outside the matrix")));
    }
    let (tp, fp, fn_, tn) = cm.binarize(class_k);
    let (tp, fp, fn_, tn) = (tp as f64, fp as f64, fn_ as f64, tn as f64);
    let mcc_den = ((tp + fp) * (tp + fn_) * (tn + fp) * (tn + fn_)).sqrt();
    Ok(ClassMetrics {
        recall: Metric::ratio(tp, tp + fn_),
        precision: Metric::ratio(tp, tp + fp),
        f1: Metric::ratio(2.0 * tp, 2.0 * tp + fp + fn_),
        specificity: Metric::ratio(tn, tn + fp),
        mcc: Metric::ratio(tp * tn - fp * fn_, mcc_den),
        support: (tp + fn_) as u64,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RocPoint {
    pub threshold: f64,
    pub fpr: f64,
    pub tpr: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RocCurve {
    /// Starts at `(0, 0)` with an infinite threshold, then one point per unique score.
    pub points: Vec<RocPoint>,
    pub auc: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PrPoint {
    pub threshold: f64,
    pub recall: f64,
    pub precision: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct OperatingPoint {
    pub threshold: f64,
    pub fpr: f64,
    pub tpr: f64,
    pub accuracy: f64,
}

/// Cumulative `(threshold, tp, fp)` for each unique score, descending;
/// a sample is positive when its score is at least the threshold.
fn sweep(labels: &[bool], scores: &[f64]) -> Result<Vec<(f64, usize, usize)>> {
    if labels.len() != scores.len() {
        return Err(Error::invalid("labels and scores differ in length"));
    }
    if scores.iter().any(|s| s.is_nan()) {
        return Err(Error::invalid("scores contain NaN"));
    }
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| scores[b].total_cmp(&scores[a]));
    let mut out: Vec<(f64, usize, usize)> = Vec::new();
    let (mut tp, mut fp) = (0, 0);
    for (pos, &i) in order.iter().enumerate() {
        if labels[i] {
            tp += 1;
        } else {
            fp += 1;
        }
        let last_of_group = order.get(pos + 1).is_none_or(|&j| scores[j] != scores[i]);
        if last_of_group {
            out.push((scores[i], tp, fp));
        }
    }
    Ok(out)
}

fn class_totals(labels: &[bool]) -> (usize, usize) {
    let p = labels.iter().filter(|&&l| l).count();
    (p, labels.len() - p)
}

pub fn roc_curve(labels: &[bool], scores: &[f64]) -> Result<RocCurve> {
    let (p, n) = class_totals(labels);
    if p == 0 || n == 0 {
        return Err(Error::Degenerate("ROC needs at least one positive and one negative".into()));
    }
    let mut points = vec![RocPoint {
        threshold: f64::INFINITY,
        fpr: 0.0,
        tpr: 0.0,
    }];
    for (t, tp, fp) in sweep(labels, scores)? {
        points.push(RocPoint {
            threshold: t,
            fpr: fp as f64 / n as f64,
            tpr: tp as f64 / p as f64,
        });
    }
    let auc = points
        .windows(2)
        .map(|w| (w[1].fpr - w[0].fpr) * (w[1].tpr + w[0].tpr) / 2.0)
        .sum();
    Ok(RocCurve { points, auc })
}

/// Precision-recall points over unique thresholds; needs at least one positive.
pub fn pr_curve(labels: &[bool], scores: &[f64]) -> Result<Vec<PrPoint>> {
    let (p, _) = class_totals(labels);
    if p == 0 {
        return Err(Error::Degenerate("precision-recall needs at least one positive".into()));
    }
    Ok(sweep(labels, scores)?
        .into_iter()
        .map(|(t, tp, fp)| PrPoint {
            threshold: t,
            recall: tp as f64 / p as f64,
            precision: tp as f64 / (tp + fp) as f64,
        })
        .collect())
}

/// Threshold maximizing binarized accuracy; ties go to the lower false-positive rate.
///
/// Predicting every sample negative is reported with a threshold just above
/// the largest score.
pub fn max_accuracy_point(labels: &[bool], scores: &[f64]) -> Result<OperatingPoint> {
    let (p, n) = class_totals(labels);
    if p == 0 || n == 0 {
        return Err(Error::Degenerate("operating point needs both classes".into()));
    }
    let total = labels.len() as f64;
    let swept = sweep(labels, scores)?;
    let top = swept.first().map(|s| s.0).expect("non-empty");
    let mut best = OperatingPoint {
        threshold: top.next_up(),
        fpr: 0.0,
        tpr: 0.0,
        accuracy: n as f64 / total,
    };
    for (t, tp, fp) in swept {
        let acc = (tp + n - fp) as f64 / total;
        let fpr = fp as f64 / n as f64;
        if acc > best.accuracy || (acc == best.accuracy && fpr < best.fpr) {
            best = OperatingPoint {
                threshold: t,
                fpr,
                tpr: tp as f64 / p as f64,
                accuracy: acc,
            };
        }
    }
    Ok(best)
}

/// Per-class section of a [`MetricsReport`].
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClassReport {
    pub class: String,
    pub metrics: ClassMetrics,
    pub roc: Option<RocCurve>,
    pub pr: Option<Vec<PrPoint>>,
    pub max_accuracy: Option<OperatingPoint>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub n_samples: usize,
    pub confusion: ConfusionMatrix,
    /// One entry per evaluated class (classes with at least one true sample).
    pub classes: Vec<ClassReport>,
    pub accuracy: f64,
    /// Unweighted mean of the evaluated classes' recalls.
    pub balanced_accuracy: f64,
}

impl MetricsReport {
    /// Builds a report from probability rows over `Class::ALL` and true labels.
    ///
    /// With `exclude_uninformative`, samples whose true class is uninformative
    /// are dropped; predictions remain the argmax over all four classes.
    pub fn from_probabilities(probs: &Array2<f32>, truth: &[Class], exclude_uninformative: bool) -> Result<Self> {
        if probs.nrows() != truth.len() {
            return Err(Error::invalid("probability rows and labels differ in count"));
        }
        if probs.ncols() != Class::COUNT {
            return Err(Error::invalid(format!("expected {} probability columns", Class::COUNT)));
        }
        let keep: Vec<usize> = (0..truth.len())
            .filter(|&i| !(exclude_uninformative && truth[i] == Class::Uninformative))
            .collect();
        if keep.is_empty() {
            return Err(Error::invalid("no samples left to evaluate"));
        }
        let t: Vec<usize> = keep.iter().map(|&i| truth[i].index()).collect();
        let preds = crate::nn::argmax_rows(probs);
        let p: Vec<usize> = keep.iter().map(|&i| preds[i]).collect();
        let names: Vec<&str> = Class::ALL.iter().map(|c| c.as_str()).collect();
        let cm = confusion_matrix(&t, &p, &names)?;
        let mut classes = Vec::new();
        for class in Class::ALL {
            let k = class.index();
            if cm.row_total(k) == 0 {
                continue;
            }
            let labels: Vec<bool> = t.iter().map(|&x| x == k).collect();
            let scores: Vec<f64> = keep.iter().map(|&i| probs[[i, k]] as f64).collect();
            classes.push(ClassReport {
                class: class.as_str().to_string(),
                metrics: per_class_metrics(&cm, k)?,
                roc: roc_curve(&labels, &scores).ok(),
                pr: pr_curve(&labels, &scores).ok(),
                max_accuracy: max_accuracy_point(&labels, &scores).ok(),
            });
        }
        let balanced = classes.iter().map(|c| c.metrics.recall.value).sum::<f64>() / classes.len() as f64;
        Ok(MetricsReport {
            n_samples: keep.len(),
            accuracy: cm.trace() as f64 / cm.total() as f64,
            balanced_accuracy: balanced,
            confusion: cm,
            classes,
        })
    }

    pub fn class(&self, name: &str) -> Option<&ClassReport> {
        self.classes.iter().find(|c| c.class == name)
    }

    /// Scalar metrics keyed `accuracy`, `balanced_accuracy`, `<class>.<metric>`.
    pub fn scalars(&self) -> BTreeMap<String, f64> {
        let mut m = BTreeMap::new();
        m.insert("accuracy".into(), self.accuracy);
        m.insert("balanced_accuracy".into(), self.balanced_accuracy);
        for c in &self.classes {
            let x = &c.metrics;
            for (name, v) in [
                ("recall", x.recall),
                ("precision", x.precision),
                ("f1", x.f1),
                ("specificity", x.specificity),
                ("mcc", x.mcc),
            ] {
                m.insert(format!("{}.{name}", c.class), v.value);
            }
            if let Some(roc) = &c.roc {
                m.insert(format!("{}.auc", c.class), roc.auc);
            }
        }
        m
    }

    /// Writes `report.json`, `confusion.csv`, and per-class curve CSVs into `dir`.
    pub fn export(&self, dir: &Path) -> Result<()> {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        let json = serde_json::to_string_pretty(self)?;
        crate::io::write_atomic(&dir.join("report.json"), json.as_bytes())?;
        crate::io::write_atomic(&dir.join("confusion.csv"), self.confusion.to_csv().as_bytes())?;
        for c in &self.classes {
            if let Some(roc) = &c.roc {
                let mut w = Vec::new();
                writeln!(w, "threshold,fpr,tpr").expect("vec write");
                for p in &roc.points {
                    writeln!(w, "{},{},{}", p.threshold, p.fpr, p.tpr).expect("vec write");
                }
                crate::io::write_atomic(&dir.join(format!("roc_{}.csv", c.class)), &w)?;
            }
            if let Some(pr) = &c.pr {
                let mut w = Vec::new();
                writeln!(w, "threshold,recall,precision").expect("vec write");
                for p in pr {
                    writeln!(w, "{},{},{}", p.threshold, p.recall, p.precision).expect("vec write");
                }
                crate::io::write_atomic(&dir.join(format!("pr_{}.csv", c.class)), &w)?;
            }
        }
        Ok(())
    }
}

/// Mean and sample standard deviation across folds.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MeanStd {
    pub mean: f64,
    pub std: f64,
    pub n: usize,
}

impl MeanStd {
    pub fn of(values: &[f64]) -> Self {
        let n = values.len();
        if n == 0 {
            return MeanStd { mean: 0.0, std: 0.0, n };
        }
        let mean = values.iter().sum::<f64>() / n as f64;
        let std = if n < 2 {
            0.0
        } else {
            (values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1) as f64).sqrt()
        };
        MeanStd { mean, std, n }
    }
}

impl fmt::Display for MeanStd {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{:.2} ± {:.2}", self.mean, self.std)
    }
}

/// Per-metric mean ± std over fold reports; metrics missing from some folds use the folds that have them.
pub fn aggregate_reports(reports: &[MetricsReport]) -> BTreeMap<String, MeanStd> {
    let mut values: BTreeMap<String, Vec<f64>> = BTreeMap::new();
    for r in reports {
        for (k, v) in r.scalars() {
            values.entry(k).or_default().push(v);
        }
    }
    values.into_iter().map(|(k, v)| (k, MeanStd::of(&v))).collect()
}
