//! Acceptance suite. Runs every criterion in sequence and prints one
//! `PASS`/`FAIL`/`SKIP` line each; exits non-zero when any criterion fails.

mod common;

use std::collections::BTreeMap;
use std::io::Write;
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::time::{Duration, Instant};

use axum::http::StatusCode;
use common::*;
use ndarray::{Array2, Array3};
use pocus_core::config::Config;
use pocus_core::cv::{audit_folds, stratified_group_kfold, stratified_group_kfold_videos, FrameRecord, VideoInfo};
use pocus_core::data::video::{extract_frames, write_y4m};
use pocus_core::data::{build_dataset, load_manifest, AugmentationPolicy, Dataset, FrameSample, RecordingMeta};
use pocus_core::eval::{predict_examples, Examples};
use pocus_core::explain::{cam, grad_cam, max_activation_point, median_bandwidth, mmd_sq, resampling_test, NullKind, Point};
use pocus_core::metrics::{confusion_matrix, per_class_metrics, roc_curve, MetricsReport};
use pocus_core::nn::{argmax_rows, Arch, Classifier, ClassifierConfig, ModelInput};
use pocus_core::train::{fit, fit_with, run_cross_validation, CrossValidationConfig, TrainConfig};
use pocus_core::uncertainty::{confidence_from_std, epistemic_confidence};
use pocus_core::Class;
use pocus_service::api::PredictResponse;
use pocus_service::{router, AppState};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde_json::Value;

/// Environment variable naming a TOML config whose manifest points at the public dataset.
const REPRO_ENV: &str = "POCUS_REPRO_CONFIG";

enum Outcome {
    Pass(String),
    Fail(String),
    Skip(String),
}

type Check = Result<String, String>;

fn ensure(cond: bool, msg: impl FnOnce() -> String) -> Result<(), String> {
    if cond {
        Ok(())
    } else {
        Err(msg())
    }
}

fn line(text: &str) {
    // Written to the raw handle so the line survives output capture.
    let mut out = std::io::stdout().lock();
    let _ = writeln!(out, "{text}");
    let _ = out.flush();
}

fn main() {
    let criteria: Vec<(&str, fn() -> Outcome)> = vec![
        ("fold integrity", || done(fold_integrity())),
        ("frame extraction", || done(frame_extraction())),
        ("confidence formula", || done(confidence_formula())),
        ("mmd oracle", || done(mmd_oracle())),
        ("resampling test", || done(resampling())),
        ("metrics oracle", || done(metrics_oracle())),
        ("cam identity", || done(cam_identity())),
        ("training smoke", || done(training_smoke())),
        ("video aggregation + ensemble", || done(aggregation_and_ensemble())),
        ("soft reproduction", soft_reproduction),
        ("service contract", || done(service_contract())),
    ];
    let filter: Vec<String> = std::env::args().skip(1).filter(|a| !a.starts_with('-')).collect();
    let mut failed = 0;
    line(&format!("running {} acceptance criteria", criteria.len()));
    for (name, check) in criteria {
        if !filter.is_empty() && !filter.iter().any(|f| name.contains(f.as_str())) {
            continue;
        }
        let start = Instant::now();
        let outcome = catch_unwind(AssertUnwindSafe(check)).unwrap_or_else(|e| {
            let msg = e
                .downcast_ref::<String>()
                .cloned()
                .or_else(|| e.downcast_ref::<&str>().map(|s| s.to_string()))
                .unwrap_or_else(|| "panic".into());
            Outcome::Fail(msg)
        });
        let secs = start.elapsed().as_secs_f64();
        let (tag, detail) = match outcome {
            Outcome::Pass(d) => ("PASS", d),
            Outcome::Fail(d) => {
                failed += 1;
                ("FAIL", d)
            }
            Outcome::Skip(d) => ("SKIP", d),
        };
        line(&format!("[{tag}] {name} ({secs:.1}s): {detail}"));
    }
    line(&format!("acceptance: {failed} failed"));
    if failed > 0 {
        std::process::exit(1);
    }
}

fn done(r: Check) -> Outcome {
    match r {
        Ok(d) => Outcome::Pass(d),
        Err(d) => Outcome::Fail(d),
    }
}

fn fold_integrity() -> Check {
    let mut rng = ChaCha8Rng::seed_from_u64(100);
    let classes = [Class::Covid, Class::Pneumonia, Class::Healthy];
    let videos: Vec<VideoInfo> = (0..100)
        .map(|i| VideoInfo {
            id: format!("vid{i:03}"),
            label: classes[rng.random_range(0..3)],
            frames: rng.random_range(5..=30),
        })
        .collect();
    let split = stratified_group_kfold_videos(&videos, 5, 7).map_err(|e| e.to_string())?.assignment;
    let mut frames = Vec::new();
    for v in &videos {
        for k in 0..v.frames {
            let mut fp = [0u8; 16];
            rng.fill(&mut fp);
            frames.push(FrameRecord {
                video_id: v.id.clone(),
                frame_index: k,
                label: v.label,
                fingerprint: Some(fp),
            });
        }
    }

    let start = Instant::now();
    let audit = audit_folds(&frames, &split, 0.10).map_err(|e| e.to_string())?;
    let elapsed = start.elapsed();

    // Independent recount: every video lands in one fold, shares within 0.10.
    ensure(split.assignment.len() == 100, || "not every video assigned".into())?;
    let total = frames.len() as f64;
    let mut worst = 0.0f64;
    for fold in 0..5 {
        let in_fold: Vec<&FrameRecord> = frames.iter().filter(|f| split.fold_of(&f.video_id) == Some(fold)).collect();
        ensure(!in_fold.is_empty(), || format!("fold {fold} empty"))?;
        for c in classes {
            let global = frames.iter().filter(|f| f.label == c).count() as f64 / total;
            let share = in_fold.iter().filter(|f| f.label == c).count() as f64 / in_fold.len() as f64;
            worst = worst.max((share - global).abs());
        }
    }
    ensure(audit.leakage.is_empty(), || format!("leakage: {:?}", audit.leakage))?;
    ensure(worst <= 0.10, || format!("class share deviation {worst:.3} > 0.10"))?;
    ensure((audit.max_share_deviation - worst).abs() < 1e-12, || "audit disagrees with recount".into())?;
    ensure(elapsed < Duration::from_secs(1), || format!("audit took {elapsed:?}"))?;
    Ok(format!(
        "0 leaked videos, max share deviation {worst:.3} (tol 0.10), audit {:.1} ms (limit 1000)",
        elapsed.as_secs_f64() * 1e3
    ))
}

fn frame_extraction() -> Check {
    let dir = tempfile::tempdir().map_err(|e| e.to_string())?;
    let mut counts = Vec::new();
    for seconds in [5usize, 12] {
        let frames = pocus_core::data::video::synthetic_frames(30 * seconds, 32, 24);
        let path = dir.path().join(format!("clip{seconds}.y4m"));
        let mut bytes = Vec::new();
        write_y4m(&mut bytes, &frames, 30, 1).map_err(|e| e.to_string())?;
        std::fs::write(&path, bytes).map_err(|e| e.to_string())?;
        let rec = RecordingMeta::video(&format!("clip{seconds}"), &path, Class::Covid, 30.0);
        let a = extract_frames(&rec, 3.0, 30).map_err(|e| e.to_string())?;
        let b = extract_frames(&rec, 3.0, 30).map_err(|e| e.to_string())?;
        let same = a.len() == b.len()
            && a.iter().zip(&b).all(|(x, y)| x.index == y.index && x.image.as_bytes() == y.image.as_bytes());
        ensure(same, || format!("{seconds} s clip differs between runs"))?;
        let expected: Vec<usize> = (0..(3 * seconds).min(30)).map(|k| 10 * k).collect();
        let got: Vec<usize> = a.iter().map(|f| f.index).collect();
        ensure(got == expected, || format!("{seconds} s clip sampled {got:?}"))?;
        counts.push(a.len());
    }
    ensure(counts == [15, 30], || format!("frame counts {counts:?}, expected [15, 30]"))?;
    Ok("5 s -> 15 frames, 12 s -> 30 frames, identical across two runs".into())
}

fn confidence_formula() -> Check {
    let c = |s: f64| confidence_from_std(s).map_err(|e| e.to_string());
    let (c0, c5, c1) = (c(0.0)?, c(0.5)?, c(0.1)?);
    ensure(c0 == 1.0 && c5 == 0.0, || format!("c(0)={c0}, c(0.5)={c5}"))?;
    ensure(c1 == 1.0 - 0.1 / 0.5, || format!("c(0.1)={c1}"))?;
    ensure((c1 - 0.8).abs() <= f64::EPSILON, || format!("c(0.1)={c1}"))?;

    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let frames: Vec<Array3<f32>> = (0..3).map(|_| Array3::from_shape_fn((64, 64, 3), |_| rng.random())).collect();
    let mut checked = 0;
    for arch in [Arch::VggCam, Arch::VggHead, Arch::Mobile] {
        for seed in 0..3 {
            let cfg = ClassifierConfig {
                backbone_widths: Some(vec![vec![4], vec![6]]),
                hidden_units: 8,
                input_size: 64,
                dropout_rate: 0.0,
                init_seed: seed,
                ..ClassifierConfig::new(arch)
            };
            let model = Classifier::build(&cfg).map_err(|e| format!("{arch:?}: {e}"))?;
            let scores = epistemic_confidence(&model, ModelInput::Frames(&frames), 10, seed).map_err(|e| e.to_string())?;
            ensure(scores.iter().all(|s| s.value == 1.0), || format!("{arch:?} seed {seed}: {scores:?}"))?;
            checked += 1;
        }
    }
    Ok(format!("c(0)=1, c(0.5)=0, c(0.1)={c1}; dropout 0 gives c=1 on {checked} models"))
}

fn brute_mmd_sq(x: &[Point], y: &[Point], sigma: f64) -> f64 {
    let k = |a: &Point, b: &Point| (-((a[0] - b[0]).powi(2) + (a[1] - b[1]).powi(2)) / (sigma * sigma)).exp();
    let mean = |p: &[Point], q: &[Point]| {
        let mut s = 0.0;
        for a in p {
            for b in q {
                s += k(a, b);
            }
        }
        s / (p.len() * q.len()) as f64
    };
    mean(x, x) + mean(y, y) - 2.0 * mean(x, y)
}

fn random_set(rng: &mut ChaCha8Rng, n: usize, offset: f64) -> Vec<Point> {
    (0..n).map(|_| [rng.random::<f64>() * 224.0 + offset, rng.random::<f64>() * 224.0]).collect()
}

fn mmd_oracle() -> Check {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let mut worst = 0.0f64;
    for _ in 0..100 {
        let (n, m) = (rng.random_range(1..=50), rng.random_range(1..=50));
        let offset = rng.random_range(-30.0..30.0);
        let x = random_set(&mut rng, n, 0.0);
        let y = random_set(&mut rng, m, offset);
        let sigma = rng.random_range(5.0..120.0);
        let got = mmd_sq(&x, &y, sigma).map_err(|e| e.to_string())?;
        worst = worst.max((got - brute_mmd_sq(&x, &y, sigma)).abs());
        let self_term = mmd_sq(&x, &x, sigma).map_err(|e| e.to_string())?;
        ensure(self_term.abs() <= 1e-12, || format!("MMD²(X,X) = {self_term}"))?;
    }
    ensure(worst <= 1e-12, || format!("max deviation {worst:e} > 1e-12"))?;
    let single = mmd_sq(&[[0.0, 0.0]], &[[1.0, 0.0]], 1.0).map_err(|e| e.to_string())?;
    let expected = 2.0 - 2.0 * (-1.0f64).exp();
    ensure((single - expected).abs() <= 1e-12, || format!("single point {single} vs {expected}"))?;
    Ok(format!("100 pairs max |Δ| = {worst:.1e} (tol 1e-12); MMD²(X,X)=0; single point = {single:.12}"))
}

/// p-value over every split of the pooled four points into two pairs.
fn enumerated_p(x: &[Point], y: &[Point]) -> f64 {
    let pooled: Vec<Point> = x.iter().chain(y).copied().collect();
    let sigma = median_bandwidth(&pooled).unwrap();
    let observed = brute_mmd_sq(x, y, sigma);
    let mut hits = 0;
    let mut total = 0;
    for a in 0..4 {
        for b in a + 1..4 {
            let first = [pooled[a], pooled[b]];
            let second: Vec<Point> = (0..4).filter(|&i| i != a && i != b).map(|i| pooled[i]).collect();
            let stat = brute_mmd_sq(&first, &second, sigma);
            total += 1;
            if stat >= observed - 1e-12 * (1.0 + observed.abs()) {
                hits += 1;
            }
        }
    }
    hits as f64 / total as f64
}

fn resampling() -> Check {
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    for trial in 0..20 {
        let x = random_set(&mut rng, 2, 0.0);
        let y = random_set(&mut rng, 2, 40.0);
        let r = resampling_test(&x, &y, 5000, trial, NullKind::Permutation).map_err(|e| e.to_string())?;
        let oracle = enumerated_p(&x, &y);
        ensure(r.exact, || "2 vs 2 test was not enumerated".into())?;
        ensure((r.p_value - oracle).abs() <= 1e-12, || format!("trial {trial}: p={} vs {oracle}", r.p_value))?;
    }

    let mut above = 0;
    for run in 0..50u64 {
        let mut r = ChaCha8Rng::seed_from_u64(1000 + run);
        let x = random_set(&mut r, 30, 0.0);
        let y = random_set(&mut r, 30, 0.0);
        let res = resampling_test(&x, &y, 500, run, NullKind::Permutation).map_err(|e| e.to_string())?;
        if res.p_value > 0.05 {
            above += 1;
        }
    }
    ensure(above >= 45, || format!("only {above}/50 same-distribution runs had p > 0.05"))?;

    let x = random_set(&mut rng, 683, 0.0);
    let y = random_set(&mut rng, 682, 10.0);
    let start = Instant::now();
    let big = resampling_test(&x, &y, 5000, 3, NullKind::Permutation).map_err(|e| e.to_string())?;
    let elapsed = start.elapsed();
    ensure(big.null_values.len() == 5000, || "wrong resample count".into())?;
    ensure(elapsed < Duration::from_secs(60), || format!("1365 points took {elapsed:?}"))?;
    Ok(format!(
        "2 vs 2 matches enumeration in 20 cases; {above}/50 calibrated runs p > 0.05 (need 45); 5000 resamples on 1365 points in {:.1} s (limit 60)",
        elapsed.as_secs_f64()
    ))
}

fn pairwise_auc(labels: &[bool], scores: &[f64]) -> f64 {
    let mut num = 0.0;
    let mut pairs = 0.0;
    for (i, &li) in labels.iter().enumerate() {
        if !li {
            continue;
        }
        for (j, &lj) in labels.iter().enumerate() {
            if lj {
                continue;
            }
            pairs += 1.0;
            num += match scores[i].partial_cmp(&scores[j]).unwrap() {
                std::cmp::Ordering::Greater => 1.0,
                std::cmp::Ordering::Equal => 0.5,
                std::cmp::Ordering::Less => 0.0,
            };
        }
    }
    num / pairs
}

fn metrics_oracle() -> Check {
    let counts = [[5u64, 0, 0], [0, 3, 1], [1, 0, 4]];
    let (mut truth, mut pred) = (Vec::new(), Vec::new());
    for (t, row) in counts.iter().enumerate() {
        for (p, &n) in row.iter().enumerate() {
            for _ in 0..n {
                truth.push(t);
                pred.push(p);
            }
        }
    }
    let cm = confusion_matrix(&truth, &pred, &["covid", "pneumonia", "healthy"]).map_err(|e| e.to_string())?;
    let m = per_class_metrics(&cm, 2).map_err(|e| e.to_string())?;
    let (tp, fp, fn_, tn) = (4.0, 1.0, 1.0, 8.0);
    let mcc_oracle: f64 = (tp * tn - fp * fn_) / ((tp + fp) * (tp + fn_) * (tn + fp) * (tn + fn_) as f64).sqrt();
    let oracle = [
        ("recall", m.recall.value, tp / (tp + fn_), 0.8),
        ("precision", m.precision.value, tp / (tp + fp), 0.8),
        ("specificity", m.specificity.value, tn / (tn + fp), 0.889),
        ("mcc", m.mcc.value, mcc_oracle, 0.689),
    ];
    for (name, got, exact, stated) in oracle {
        ensure((got - stated).abs() <= 1e-3, || format!("{name} = {got}, stated {stated}"))?;
        ensure((got - exact).abs() <= 1e-12, || format!("{name} = {got}, counts give {exact}"))?;
    }

    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let mut worst = 0.0f64;
    let mut instances = 0;
    while instances < 1000 {
        let n = rng.random_range(2..=25);
        let levels = rng.random_range(2..=8);
        let labels: Vec<bool> = (0..n).map(|_| rng.random()).collect();
        if labels.iter().all(|&l| l) || labels.iter().all(|&l| !l) {
            continue;
        }
        let scores: Vec<f64> = (0..n).map(|_| rng.random_range(0..levels) as f64 / levels as f64).collect();
        let auc = roc_curve(&labels, &scores).map_err(|e| e.to_string())?.auc;
        worst = worst.max((auc - pairwise_auc(&labels, &scores)).abs());
        instances += 1;
    }
    ensure(worst <= 1e-9, || format!("AUC deviation {worst:e}"))?;

    let mut reports = 0;
    for seed in 0..50u64 {
        let mut r = ChaCha8Rng::seed_from_u64(seed);
        let n = r.random_range(4..60);
        let truth: Vec<Class> = (0..n).map(|_| Class::from_index(r.random_range(0..4)).unwrap()).collect();
        let mut probs = Array2::<f32>::from_shape_fn((n, 4), |_| r.random::<f32>() + 1e-3);
        for mut row in probs.rows_mut() {
            let s = row.sum();
            row /= s;
        }
        for exclude in [false, true] {
            let Ok(report) = MetricsReport::from_probabilities(&probs, &truth, exclude) else {
                continue;
            };
            let mean = report.classes.iter().map(|c| c.metrics.recall.value).sum::<f64>() / report.classes.len() as f64;
            ensure((report.balanced_accuracy - mean).abs() <= 1e-12, || {
                format!("balanced accuracy {} vs mean recall {mean}", report.balanced_accuracy)
            })?;
            reports += 1;
        }
    }
    Ok(format!(
        "class 2: recall {:.3} precision {:.3} specificity {:.3} mcc {:.3} (tol 1e-3); AUC max |Δ| {worst:.1e} over 1000 instances (tol 1e-9); balanced accuracy = mean recall on {reports} reports",
        m.recall.value, m.precision.value, m.specificity.value, m.mcc.value
    ))
}

fn cosine(a: &Array2<f32>, b: &Array2<f32>) -> f64 {
    let dot: f64 = a.iter().zip(b).map(|(x, y)| *x as f64 * *y as f64).sum();
    let na: f64 = a.iter().map(|x| (*x as f64).powi(2)).sum::<f64>().sqrt();
    let nb: f64 = b.iter().map(|x| (*x as f64).powi(2)).sum::<f64>().sqrt();
    dot / (na * nb)
}

fn cam_identity() -> Check {
    let mut worst = 1.0f64;
    let mut compared = 0;
    for seed in 0..20u64 {
        let cfg = ClassifierConfig {
            backbone_widths: Some(vec![vec![4], vec![6]]),
            init_seed: seed,
            ..ClassifierConfig::new(Arch::VggCam)
        };
        let model = Classifier::build(&cfg).map_err(|e| e.to_string())?;
        let mut rng = ChaCha8Rng::seed_from_u64(500 + seed);
        let frame = Array3::from_shape_fn((224, 224, 3), |_| rng.random::<f32>());
        let mut seed_compared = false;
        for class in 0..4 {
            let a = cam(&model, &frame, class).map_err(|e| e.to_string())?;
            let b = grad_cam(&model, &frame, class).map_err(|e| e.to_string())?;
            ensure(a.is_zero == b.is_zero, || format!("seed {seed} class {class}: zero flags differ"))?;
            if a.is_zero {
                continue;
            }
            let pa = max_activation_point(&a).map_err(|e| e.to_string())?;
            let pb = max_activation_point(&b).map_err(|e| e.to_string())?;
            ensure((pa.x, pa.y) == (pb.x, pb.y), || format!("seed {seed} class {class}: {pa:?} vs {pb:?}"))?;
            let cos = cosine(&a.grid, &b.grid);
            worst = worst.min(cos);
            ensure(cos >= 1.0 - 1e-4, || format!("seed {seed} class {class}: cosine {cos}"))?;
            compared += 1;
            seed_compared = true;
        }
        ensure(seed_compared, || format!("seed {seed}: every class map was zero"))?;
    }
    Ok(format!("{compared} maps over 20 seeds: same argmax, min cosine {worst:.7} (tol 1-1e-4)"))
}

fn memorization_set(n: usize, seed: u64) -> Dataset {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let samples = (0..n)
        .map(|i| {
            let quads: Vec<[f32; 3]> = (0..4).map(|_| [rng.random(), rng.random(), rng.random()]).collect();
            let pixels = Array3::from_shape_fn((224, 224, 3), |(y, x, c)| {
                let q = (y / 112) * 2 + x / 112;
                (quads[q][c] * 0.8 + rng.random::<f32>() * 0.2).clamp(0.0, 1.0)
            });
            FrameSample::new(format!("m{i}"), 0, pixels, Class::from_index(i % 3).unwrap()).unwrap()
        })
        .collect();
    Dataset::new(samples)
}

fn accuracy(model: &Classifier, examples: &Examples<'_>) -> f64 {
    let idx = examples.all_indices();
    let preds = argmax_rows(&predict_examples(model, examples, &idx).unwrap());
    idx.iter().filter(|&&i| preds[i] == examples.label(i).index()).count() as f64 / idx.len() as f64
}

type Snapshot = Vec<(String, bool, Vec<ndarray::ArrayD<f32>>)>;

fn snapshot(model: &Classifier) -> Snapshot {
    model
        .network()
        .layers
        .iter()
        .map(|l| (l.name.clone(), l.trainable, l.layer.tensors().into_iter().map(|(_, t)| t.clone()).collect()))
        .collect()
}

fn training_smoke() -> Check {
    let data = memorization_set(20, 0);
    let examples = Examples::Frames(&data);
    let idx = examples.all_indices();
    let cfg = ClassifierConfig {
        backbone_widths: Some(vec![vec![8], vec![16]]),
        dropout_rate: 0.0,
        init_seed: 1,
        ..ClassifierConfig::new(Arch::VggCam)
    };
    let model = Classifier::build(&cfg).map_err(|e| e.to_string())?;
    let train = TrainConfig {
        epochs: 200,
        learning_rate: 1e-3,
        early_stopping: false,
        restore_best: false,
        ..Default::default()
    };
    let start = Instant::now();
    let (model, log) = fit_with(model, &examples, &idx, &[], &train, &AugmentationPolicy::identity(), &mut |m, _| {
        accuracy(m, &examples) < 1.0
    })
    .map_err(|e| e.to_string())?;
    let elapsed = start.elapsed();
    let acc = accuracy(&model, &examples);
    ensure(acc == 1.0, || format!("training accuracy {acc} after {} epochs", log.records.len()))?;
    ensure(log.records.len() <= 200, || "more than 200 epochs".into())?;
    ensure(elapsed < Duration::from_secs(300), || format!("took {elapsed:?}"))?;

    let frozen_cfg = ClassifierConfig {
        backbone_widths: Some(vec![vec![4], vec![8]]),
        hidden_units: 8,
        ..ClassifierConfig::new(Arch::VggHead)
    };
    let small = memorization_set(8, 1);
    let ex = Examples::Frames(&small);
    let model = Classifier::build(&frozen_cfg).map_err(|e| e.to_string())?;
    let before = snapshot(&model);
    let one_step = TrainConfig {
        epochs: 1,
        batch_size: 8,
        learning_rate: 1e-3,
        ..Default::default()
    };
    let (model, _) =
        fit(model, &ex, &ex.all_indices(), &[], &one_step, &AugmentationPolicy::default()).map_err(|e| e.to_string())?;
    let after = snapshot(&model);
    let mut frozen = 0;
    for ((name, trainable, a), (_, _, b)) in before.iter().zip(&after) {
        if a.is_empty() || *trainable {
            continue;
        }
        ensure(a == b, || format!("frozen layer {name} changed"))?;
        frozen += 1;
    }
    ensure(frozen > 0, || "no frozen layer with parameters".into())?;
    Ok(format!(
        "100% training accuracy on 20 frames after {} epochs in {:.1} s (limit 200 epochs, 300 s); {frozen} frozen layer(s) bit-identical after one step",
        log.records.len(),
        elapsed.as_secs_f64()
    ))
}

fn runtime() -> tokio::runtime::Runtime {
    tokio::runtime::Builder::new_multi_thread().enable_all().build().unwrap()
}

fn aggregation_and_ensemble() -> Check {
    runtime().block_on(async {
        let app = router(AppState::new(engine_of(vec![tiny_model(1), tiny_model(2)]), 50 << 20));
        let (status, body) = send(&app, predict_request(multipart(&fixture_video(5), None))).await;
        ensure(status == StatusCode::OK, || format!("status {status}"))?;
        let resp: PredictResponse = serde_json::from_slice(&body).map_err(|e| e.to_string())?;
        let n = resp.frames.len() as f64;
        let mut worst = 0.0f64;
        for k in 0..4 {
            let mean = resp.frames.iter().map(|f| f.probs[k]).sum::<f64>() / n;
            worst = worst.max((mean - resp.video.probs[k]).abs());
        }
        ensure(worst <= 1e-6, || format!("video probs deviate by {worst:e}"))?;

        let five = router(AppState::new(engine_of((0..5).map(|_| tiny_model(3)).collect()), 50 << 20));
        let one = router(AppState::new(engine_of(vec![tiny_model(3)]), 50 << 20));
        let mut identical = 0;
        for payload in [fixture_png(), fixture_video(2)] {
            let (_, a) = send(&five, predict_request(multipart(&payload, None))).await;
            let (_, b) = send(&one, predict_request(multipart(&payload, None))).await;
            let a: PredictResponse = serde_json::from_slice(&a).map_err(|e| e.to_string())?;
            let b: PredictResponse = serde_json::from_slice(&b).map_err(|e| e.to_string())?;
            let same = a.frames.len() == b.frames.len()
                && a.frames.iter().zip(&b.frames).all(|(x, y)| x.probs == y.probs)
                && a.video.probs == b.video.probs;
            ensure(same, || "five identical members differ from one model".into())?;
            identical += a.frames.len();
        }
        Ok(format!(
            "{} frames: video mean max |Δ| {worst:.1e} (tol 1e-6); 5 identical members equal 1 model exactly on {identical} frames",
            resp.frames.len()
        ))
    })
}

fn soft_reproduction() -> Outcome {
    let Some(path) = std::env::var_os(REPRO_ENV) else {
        return Outcome::Skip(format!("expected-flaky, excluded from CI; set {REPRO_ENV} to a config for the public dataset"));
    };
    match reproduce(std::path::Path::new(&path)) {
        Ok(d) => Outcome::Pass(d),
        Err(d) => Outcome::Fail(d),
    }
}

fn reproduce(path: &std::path::Path) -> Check {
    let cfg = Config::load(path).map_err(|e| e.to_string())?;
    let records = load_manifest(&cfg.data.manifest).map_err(|e| e.to_string())?;
    let dataset = build_dataset(&records, &cfg.data.params()).map_err(|e| e.to_string())?;
    let split = stratified_group_kfold(&dataset, cfg.split.folds, cfg.split.seed).map_err(|e| e.to_string())?.assignment;
    let cv = CrossValidationConfig {
        model: ClassifierConfig {
            arch: Arch::VggCam,
            ..cfg.model.clone()
        },
        train: TrainConfig {
            epochs: 40,
            batch_size: 8,
            learning_rate: 1e-4,
            ..cfg.train.clone()
        },
        augment: cfg.augment.clone(),
        checkpoint_dir: cfg.checkpoint_dir.join("reproduction"),
        exclude_uninformative: true,
    };
    let outcome = run_cross_validation(&cv, &Examples::Frames(&dataset), &split).map_err(|e| e.to_string())?;
    let get = |m: &BTreeMap<String, pocus_core::metrics::MeanStd>, k: &str| m.get(k).map(|v| v.mean).unwrap_or(f64::NAN);
    let frame_acc = get(&outcome.frame_aggregate, "accuracy");
    let video_recall = get(&outcome.video_aggregate, "covid.recall");
    let detail = format!("frame accuracy {frame_acc:.3} (need 0.80), video covid recall {video_recall:.3} (need 0.90)");
    ensure(frame_acc >= 0.80 && video_recall >= 0.90, || detail.clone())?;
    Ok(detail)
}

fn service_contract() -> Check {
    ensure(!std::path::Path::new(env!("CARGO_MANIFEST_DIR")).join("static").exists(), || {
        "service crate ships UI assets".into()
    })?;
    runtime().block_on(async {
        let app = router(AppState::new(engine_of(vec![tiny_model(1)]), 50 << 20));
        let opts = r#"{"want_heatmap": true, "want_confidence": true, "n_passes": 3}"#;
        let (status, body) = send(&app, predict_request(multipart(&fixture_png(), Some(opts)))).await;
        ensure(status == StatusCode::OK, || format!("status {status}"))?;
        let raw: Value = serde_json::from_slice(&body).map_err(|e| e.to_string())?;
        for key in ["api_version", "media_type", "frames", "video", "model_info"] {
            ensure(raw.get(key).is_some(), || format!("missing `{key}`"))?;
        }
        for key in ["frame_index", "source_frame", "probs", "pred_class", "epistemic_c", "aleatoric_c", "heatmap_ref"] {
            ensure(raw["frames"][0].get(key).is_some(), || format!("frame entry missing `{key}`"))?;
        }
        let resp: PredictResponse = serde_json::from_value(raw).map_err(|e| e.to_string())?;
        let mut worst = 0.0f64;
        for row in resp.frames.iter().map(|f| &f.probs).chain([&resp.video.probs]) {
            ensure(row.len() == 4 && row.iter().all(|p| (0.0..=1.0).contains(p)), || format!("bad row {row:?}"))?;
            worst = worst.max((row.iter().sum::<f64>() - 1.0).abs());
        }
        ensure(worst <= 1e-5, || format!("row sum off by {worst:e}"))?;

        let (bad, body) = send(&app, predict_request(multipart(b"definitely not media", None))).await;
        ensure(bad == StatusCode::BAD_REQUEST, || format!("undecodable payload gave {bad}"))?;
        let err: Value = serde_json::from_slice(&body).map_err(|e| e.to_string())?;
        ensure(err["error"].is_string(), || "error body lacks `error`".into())?;
        Ok(format!("schema-valid response, row sums within {worst:.1e} (tol 1e-5); undecodable payload -> 400; no UI assets needed"))
    })
}
