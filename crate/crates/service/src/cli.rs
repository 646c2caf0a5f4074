//! Command-line dispatch over the toolkit's stages.

use std::ffi::OsString;
use std::io::Write;
use std::path::{Path, PathBuf};

use clap::{Parser, Subcommand};
use pocus_core::config::Config;
use pocus_core::cv::{audit_folds, frame_records, stratified_group_kfold, FoldAssignment, DEFAULT_SHARE_TOLERANCE};
use pocus_core::data::dataset::{admitted, load_frame_cache, write_frame_cache};
use pocus_core::data::{build_dataset, load_manifest, Dataset};
use pocus_core::eval::{evaluate, load_segment_encodings, verify_split, Examples, EVAL_BATCH};
use pocus_core::explain::{
    cam_scatter_export, group_by_class, heatmap, max_activation_point, pairwise_tests, read_points, write_points, CamPoint,
    NullKind,
};
use pocus_core::metrics::aggregate_reports;
use pocus_core::nn::zoo::CHUNK_HZ;
use pocus_core::nn::{argmax_rows, checkpoint_path, chunk_video, load_checkpoint, Arch, ModelInput, SegmentEncoding, VideoChunk};
use pocus_core::train::{run_cross_validation, CrossValidationConfig};
use pocus_core::uncertainty::{aleatoric_confidence, epistemic_confidence, summarize, write_confidence_csv, ConfidenceRow};
use pocus_core::{plot, Class, Error, MediaKind, Result};

use crate::app::{self, AppState};
use crate::engine::Engine;

#[derive(Debug, Parser)]
#[command(name = "pocus", version, about = "Lung ultrasound classification toolkit")]
pub struct Cli {
    /// Configuration file (defaults to $POCUS_CONFIG, then built-in defaults).
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Extract, crop and cache frames from the manifest.
    Ingest {
        #[arg(long)]
        manifest: Option<PathBuf>,
        #[arg(long)]
        cache_dir: Option<PathBuf>,
    },
    /// Assign cached videos to stratified folds and audit the result.
    Split {
        #[arg(long)]
        folds: Option<usize>,
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Train (or resume) one model per fold.
    Train {
        #[arg(long)]
        split: Option<PathBuf>,
        #[arg(long)]
        epochs: Option<usize>,
        #[arg(long)]
        exclude_uninformative: bool,
    },
    /// Evaluate each fold checkpoint on its held-out videos.
    Evaluate {
        #[arg(long)]
        split: Option<PathBuf>,
        #[arg(long, default_value = "reports")]
        out: PathBuf,
        #[arg(long)]
        exclude_uninformative: bool,
    },
    /// Max-activation points of held-out frames, with scatter and density renders.
    Explain {
        #[arg(long)]
        split: Option<PathBuf>,
        #[arg(long, default_value = "cams")]
        out: PathBuf,
    },
    /// Pairwise kernel two-sample tests over a CAM point CSV.
    Mmd {
        #[arg(long)]
        points: PathBuf,
        #[arg(long)]
        resamples: Option<usize>,
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long)]
        null: Option<NullKind>,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Epistemic and aleatoric confidence of held-out frames.
    Uncertainty {
        #[arg(long)]
        split: Option<PathBuf>,
        #[arg(long)]
        passes: Option<usize>,
        #[arg(long, default_value = "confidence.csv")]
        out: PathBuf,
    },
    /// Run the HTTP inference service.
    Serve {
        #[arg(long)]
        bind: Option<String>,
        /// Serve the fold-0 model only.
        #[arg(long)]
        single: bool,
    },
    /// Write a review bundle (frames, overlays, verdicts) for one recording.
    Bundle {
        #[arg(long)]
        input: PathBuf,
        #[arg(long)]
        video_id: Option<String>,
        #[arg(long, default_value = "bundles")]
        out: PathBuf,
    },
}

/// Parses `args` and runs the command; returns the process exit status.
pub fn run<I, T>(args: I, out: &mut dyn Write) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return e.exit_code();
        }
    };
    match dispatch(cli, out) {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("error: {e}");
            1
        }
    }
}

fn dispatch(cli: Cli, out: &mut dyn Write) -> Result<()> {
    let mut cfg = Config::resolve(cli.config.as_deref())?;
    match cli.command {
        Command::Ingest { manifest, cache_dir } => {
            if let Some(m) = manifest {
                cfg.data.manifest = m;
            }
            if let Some(c) = cache_dir {
                cfg.data.cache_dir = c;
            }
            ingest(&cfg, out)
        }
        Command::Split { folds, seed, out: path } => {
            cfg.split.folds = folds.unwrap_or(cfg.split.folds);
            cfg.split.seed = seed.unwrap_or(cfg.split.seed);
            cfg.split.path = path.unwrap_or(cfg.split.path);
            split(&cfg, out)
        }
        Command::Train { split, epochs, exclude_uninformative } => {
            cfg.split.path = split.unwrap_or(cfg.split.path);
            cfg.train.epochs = epochs.unwrap_or(cfg.train.epochs);
            train(&cfg, exclude_uninformative, out)
        }
        Command::Evaluate { split, out: dir, exclude_uninformative } => {
            cfg.split.path = split.unwrap_or(cfg.split.path);
            evaluate_folds(&cfg, &dir, exclude_uninformative, out)
        }
        Command::Explain { split, out: dir } => {
            cfg.split.path = split.unwrap_or(cfg.split.path);
            explain(&cfg, &dir, out)
        }
        Command::Mmd { points, resamples, seed, null, out: json } => {
            cfg.explain.resamples = resamples.unwrap_or(cfg.explain.resamples);
            cfg.explain.seed = seed.unwrap_or(cfg.explain.seed);
            cfg.explain.null = null.unwrap_or(cfg.explain.null);
            mmd(&cfg, &points, json.as_deref(), out)
        }
        Command::Uncertainty { split, passes, out: path } => {
            cfg.split.path = split.unwrap_or(cfg.split.path);
            cfg.uncertainty.passes = passes.unwrap_or(cfg.uncertainty.passes);
            uncertainty(&cfg, &path, out)
        }
        Command::Serve { bind, single } => {
            cfg.service.bind = bind.unwrap_or(cfg.service.bind);
            if single {
                cfg.service.ensemble = false;
            }
            serve(&cfg)
        }
        Command::Bundle { input, video_id, out: dir } => {
            let engine = Engine::load(&cfg)?;
            let id = video_id.unwrap_or_else(|| input.file_stem().map(|s| s.to_string_lossy().into_owned()).unwrap_or_default());
            let bytes = std::fs::read(&input).map_err(|e| Error::io(&input, e))?;
            let path = engine.bundle(bytes, &id, &dir)?;
            say(out, format!("wrote review bundle {}", path.display()))
        }
    }
}

fn say(out: &mut dyn Write, line: impl AsRef<str>) -> Result<()> {
    writeln!(out, "{}", line.as_ref()).map_err(|e| Error::io("<stdout>", e))
}

fn ingest(cfg: &Config, out: &mut dyn Write) -> Result<()> {
    let records = load_manifest(&cfg.data.manifest)?;
    let dataset = build_dataset(&records, &cfg.data.params())?;
    let written = write_frame_cache(&dataset, &cfg.data.cache_dir)?;
    say(
        out,
        format!(
            "cached {} frames from {} recordings in {}",
            written.len(),
            dataset.videos().len(),
            cfg.data.cache_dir.display()
        ),
    )?;
    for (class, n) in dataset.class_counts() {
        say(out, format!("  {class}: {n}"))?;
    }
    Ok(())
}

fn split(cfg: &Config, out: &mut dyn Write) -> Result<()> {
    let dataset = load_frame_cache(&cfg.data.cache_dir)?;
    let outcome = stratified_group_kfold(&dataset, cfg.split.folds, cfg.split.seed)?;
    for w in &outcome.warnings {
        log::warn!("{w}");
    }
    let audit = audit_folds(&frame_records(&dataset), &outcome.assignment, DEFAULT_SHARE_TOLERANCE)?;
    outcome.assignment.save(&cfg.split.path)?;
    say(out, format!("wrote {} ({} folds)", cfg.split.path.display(), cfg.split.folds))?;
    for f in &audit.folds {
        say(out, format!("  fold {}: {} videos, {} frames", f.fold, f.videos, f.frames))?;
    }
    say(
        out,
        format!(
            "  leakage: {}, max share deviation {:.3} (tolerance {:.2})",
            audit.leakage.len(),
            audit.max_share_deviation,
            audit.tolerance
        ),
    )
}

/// Examples in the representation the configured architecture consumes.
enum OwnedExamples {
    Frames(Dataset),
    Features(Dataset, Vec<SegmentEncoding>),
    Chunks(Vec<VideoChunk>, Vec<Class>),
}

impl OwnedExamples {
    fn load(cfg: &Config) -> Result<Self> {
        match cfg.model.arch {
            Arch::Video3d => {
                let params = cfg.data.params();
                let mut chunks = Vec::new();
                let mut labels = Vec::new();
                for rec in load_manifest(&cfg.data.manifest)?
                    .iter()
                    .filter(|r| r.kind == MediaKind::Video && admitted(r, &params))
                {
                    for c in chunk_video(rec, CHUNK_HZ, cfg.model.chunk_len)? {
                        chunks.push(c);
                        labels.push(rec.label);
                    }
                }
                Ok(OwnedExamples::Chunks(chunks, labels))
            }
            Arch::SegmentEnc => {
                let dataset = load_frame_cache(&cfg.data.cache_dir)?;
                let enc = load_segment_encodings(&dataset, &cfg.data.cache_dir)?;
                Ok(OwnedExamples::Features(dataset, enc))
            }
            _ => Ok(OwnedExamples::Frames(load_frame_cache(&cfg.data.cache_dir)?)),
        }
    }

    fn view(&self) -> Examples<'_> {
        match self {
            OwnedExamples::Frames(d) => Examples::Frames(d),
            OwnedExamples::Features(d, e) => Examples::Features { dataset: d, encodings: e },
            OwnedExamples::Chunks(c, l) => Examples::Chunks { chunks: c, labels: l },
        }
    }

    fn frames(&self) -> Result<&Dataset> {
        match self {
            OwnedExamples::Frames(d) => Ok(d),
            _ => Err(Error::Unsupported("this command needs a frame-based architecture".into())),
        }
    }
}

fn train(cfg: &Config, exclude_uninformative: bool, out: &mut dyn Write) -> Result<()> {
    let assignment = FoldAssignment::load(&cfg.split.path)?;
    let owned = OwnedExamples::load(cfg)?;
    let cv = CrossValidationConfig {
        model: cfg.model.clone(),
        train: cfg.train.clone(),
        augment: cfg.augment.clone(),
        checkpoint_dir: cfg.checkpoint_dir.clone(),
        exclude_uninformative,
    };
    let outcome = run_cross_validation(&cv, &owned.view(), &assignment)?;
    for f in &outcome.folds {
        let status = if f.resumed { "resumed" } else { "trained" };
        say(
            out,
            format!(
                "fold {} {status}: frame accuracy {:.3}, video accuracy {:.3} ({})",
                f.fold,
                f.evaluation.frame.accuracy,
                f.evaluation.video.accuracy,
                f.checkpoint.display()
            ),
        )?;
    }
    for key in ["accuracy", "balanced_accuracy"] {
        if let Some(ms) = outcome.frame_aggregate.get(key) {
            say(out, format!("frame {key}: {ms}"))?;
        }
        if let Some(ms) = outcome.video_aggregate.get(key) {
            say(out, format!("video {key}: {ms}"))?;
        }
    }
    Ok(())
}

fn evaluate_folds(cfg: &Config, dir: &Path, exclude_uninformative: bool, out: &mut dyn Write) -> Result<()> {
    let assignment = FoldAssignment::load(&cfg.split.path)?;
    let owned = OwnedExamples::load(cfg)?;
    let examples = owned.view();
    let mut frame_reports = Vec::new();
    let mut video_reports = Vec::new();
    for fold in 0..assignment.n_folds {
        let path = checkpoint_path(&cfg.checkpoint_dir, cfg.model.arch, fold);
        let (model, meta) = load_checkpoint(&path)?;
        verify_split(&meta, &assignment)?;
        let (_, test) = examples.split(&assignment, fold)?;
        let ev = evaluate(&model, &examples, &test, exclude_uninformative)?;
        let fold_dir = dir.join(format!("fold{fold}"));
        for (name, report) in [("frame", &ev.frame), ("video", &ev.video)] {
            report.export(&fold_dir.join(name))?;
            plot::export_report_plots(report, &fold_dir.join(name))?;
        }
        say(out, format!("fold {fold}: frame accuracy {:.3}, video accuracy {:.3}", ev.frame.accuracy, ev.video.accuracy))?;
        frame_reports.push(ev.frame);
        video_reports.push(ev.video);
    }
    let summary = serde_json::json!({
        "frame": aggregate_reports(&frame_reports),
        "video": aggregate_reports(&video_reports),
    });
    pocus_core::io::write_atomic(&dir.join("aggregate.json"), serde_json::to_string_pretty(&summary)?.as_bytes())?;
    let frame = aggregate_reports(&frame_reports);
    let video = aggregate_reports(&video_reports);
    for key in ["accuracy", "balanced_accuracy"] {
        say(out, format!("frame {key}: {}", frame[key]))?;
        say(out, format!("video {key}: {}", video[key]))?;
    }
    Ok(())
}

fn explain(cfg: &Config, dir: &Path, out: &mut dyn Write) -> Result<()> {
    let assignment = FoldAssignment::load(&cfg.split.path)?;
    let owned = OwnedExamples::load(cfg)?;
    let dataset = owned.frames()?;
    let examples = owned.view();
    let mut points = Vec::new();
    let mut skipped = 0usize;
    for fold in 0..assignment.n_folds {
        let (model, meta) = load_checkpoint(&checkpoint_path(&cfg.checkpoint_dir, cfg.model.arch, fold))?;
        verify_split(&meta, &assignment)?;
        let (_, test) = examples.split(&assignment, fold)?;
        for i in test {
            let s = &dataset.samples[i];
            if !Class::DIAGNOSTIC.contains(&s.label) {
                continue;
            }
            let hm = heatmap(&model, &s.pixels, s.label.index())?;
            if hm.is_zero {
                skipped += 1;
                continue;
            }
            let peak = max_activation_point(&hm)?;
            points.push(CamPoint::from_peak(&s.video_id, s.frame_index, s.label, peak)?);
        }
    }
    if skipped > 0 {
        log::warn!("{skipped} frames had all-zero heatmaps and were skipped");
    }
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let export = cam_scatter_export(&group_by_class(&points), dir)?;
    write_points(&points, &export.csv)?;
    say(out, format!("wrote {} CAM points to {}", points.len(), export.csv.display()))
}

fn mmd(cfg: &Config, points: &Path, json: Option<&Path>, out: &mut dyn Write) -> Result<()> {
    let pts = read_points(points)?;
    let sets = group_by_class(&pts);
    let results = pairwise_tests(&sets, cfg.explain.resamples, cfg.explain.seed, cfg.explain.null)?;
    if results.is_empty() {
        return Err(Error::invalid("need points from at least two classes"));
    }
    for r in &results {
        say(
            out,
            format!(
                "{} vs {}: MMD²={:.6} MMD={:.6} σ={:.3} p={:.4} (n={}/{})",
                r.first, r.second, r.result.mmd_sq, r.result.mmd, r.result.sigma, r.result.p_value, r.n_first, r.n_second
            ),
        )?;
    }
    if let Some(path) = json {
        pocus_core::io::write_atomic(path, serde_json::to_string_pretty(&results)?.as_bytes())?;
    }
    Ok(())
}

fn uncertainty(cfg: &Config, path: &Path, out: &mut dyn Write) -> Result<()> {
    let assignment = FoldAssignment::load(&cfg.split.path)?;
    let owned = OwnedExamples::load(cfg)?;
    let dataset = owned.frames()?;
    let examples = owned.view();
    let passes = cfg.uncertainty.passes;
    let mut rows = Vec::new();
    for fold in 0..assignment.n_folds {
        let (model, meta) = load_checkpoint(&checkpoint_path(&cfg.checkpoint_dir, cfg.model.arch, fold))?;
        verify_split(&meta, &assignment)?;
        if model.config().dropout_rate == 0.0 {
            log::warn!("fold {fold} model has no dropout; epistemic confidence will be 1");
        }
        let (_, test) = examples.split(&assignment, fold)?;
        for (b, batch) in test.chunks(EVAL_BATCH).enumerate() {
            let frames: Vec<_> = batch.iter().map(|&i| dataset.samples[i].pixels.clone()).collect();
            let input = ModelInput::Frames(&frames);
            let seed = cfg.uncertainty.seed.wrapping_add(((fold as u64) << 32) | b as u64);
            let preds = argmax_rows(&model.predict(input)?);
            let e = epistemic_confidence(&model, input, passes, seed)?;
            let a = aleatoric_confidence(&model, input, &cfg.augment, passes, seed)?;
            for (j, &i) in batch.iter().enumerate() {
                let s = &dataset.samples[i];
                rows.push(ConfidenceRow {
                    video_id: s.video_id.clone(),
                    frame_index: s.frame_index,
                    pred_class: Class::from_index(preds[j]).ok_or_else(|| Error::invalid("class index out of range"))?,
                    epistemic_c: e[j].value,
                    aleatoric_c: a[j].value,
                    correct: preds[j] == s.label.index(),
                });
            }
        }
    }
    write_confidence_csv(&rows, path)?;
    say(out, format!("wrote {} rows to {}", rows.len(), path.display()))?;
    let summary = summarize(&rows)?;
    for (name, r) in [("epistemic", &summary.epistemic), ("aleatoric", &summary.aleatoric)] {
        let fmt = |v: Option<f64>| v.map_or("n/a".to_string(), |v| format!("{v:.3}"));
        say(
            out,
            format!(
                "{name}: rho={:.3} p={:.3e} mean confidence correct={} wrong={}",
                r.correlation.rho,
                r.correlation.p_value,
                fmt(r.mean_conf_correct),
                fmt(r.mean_conf_wrong)
            ),
        )?;
    }
    say(out, format!("inter-score: rho={:.3} p={:.3e}", summary.inter_score.rho, summary.inter_score.p_value))
}

fn serve(cfg: &Config) -> Result<()> {
    let engine = Engine::load(cfg)?;
    let state = AppState::new(engine, cfg.service.upload_limit_bytes);
    let rt = tokio::runtime::Runtime::new().map_err(|e| Error::io("<runtime>", e))?;
    rt.block_on(app::serve(state, &cfg.service.bind))
        .map_err(|e| Error::io(&cfg.service.bind, e))
}
