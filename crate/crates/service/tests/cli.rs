mod common;

use std::path::Path;
use std::process::Command;

use image::{DynamicImage, Rgb, RgbImage};
use pocus_core::cv::FoldAssignment;
use pocus_core::data::video::write_y4m;
use pocus_core::explain::read_points;
use pocus_core::uncertainty::read_confidence_csv;
use pocus_service::cli::run;

const LABELS: [&str; 4] = ["covid", "pneumonia", "healthy", "uninformative"];

fn tinted_clip(tint: [u8; 3], seed: u8, frames: usize) -> Vec<DynamicImage> {
    (0..frames)
        .map(|t| {
            DynamicImage::ImageRgb8(RgbImage::from_fn(48, 40, |x, y| {
                let wave = ((x as usize * 7 + y as usize * 3 + t * 5 + seed as usize * 11) % 64) as u8;
                Rgb([tint[0].saturating_add(wave), tint[1].saturating_add(wave / 2), tint[2].saturating_add(wave / 3)])
            }))
        })
        .collect()
}

/// Twelve 2 s clips (three per class) plus a manifest and config in `root`.
fn workspace(root: &Path) -> std::path::PathBuf {
    let mut manifest = String::from("id,path,label,probe,kind,source,fps,crop_x,crop_y,crop_w,crop_h,notes\n");
    for (c, label) in LABELS.iter().enumerate() {
        for v in 0..3u8 {
            let id = format!("{label}{v}");
            let tint = [40 * c as u8 + 20, 180 - 40 * c as u8, 60 + 10 * v];
            let mut bytes = Vec::new();
            write_y4m(&mut bytes, &tinted_clip(tint, v, 60), 30, 1).unwrap();
            std::fs::write(root.join(format!("{id}.y4m")), bytes).unwrap();
            manifest.push_str(&format!("{id},{id}.y4m,{label},convex,video,synthetic,30,,,,,\n"));
        }
    }
    std::fs::write(root.join("manifest.csv"), manifest).unwrap();
    let cfg = format!(
        r#"checkpoint_dir = "{root}/ckpt"
[data]
manifest = "{root}/manifest.csv"
cache_dir = "{root}/cache"
[split]
folds = 3
path = "{root}/splits.json"
[train]
epochs = 1
[model]
backbone_widths = [[2], [4]]
[explain]
resamples = 200
[uncertainty]
passes = 3
[service]
ensemble = true
"#,
        root = root.display()
    );
    let path = root.join("pocus.toml");
    std::fs::write(&path, cfg).unwrap();
    path
}

fn pocus(args: &[&str]) -> (i32, String) {
    let mut out = Vec::new();
    let mut argv = vec!["pocus"];
    argv.extend_from_slice(args);
    let code = run(argv, &mut out);
    (code, String::from_utf8(out).unwrap())
}

#[test]
fn unknown_command_is_a_usage_error() {
    let status = Command::new(env!("CARGO_BIN_EXE_pocus")).arg("frobnicate").output().unwrap();
    assert_eq!(status.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&status.stderr).contains("Usage"));
    assert_eq!(pocus(&["frobnicate"]).0, 2);
}

#[test]
fn module_errors_exit_nonzero() {
    let dir = tempfile::tempdir().unwrap();
    let missing = dir.path().join("nope.csv");
    assert_eq!(pocus(&["mmd", "--points", missing.to_str().unwrap()]).0, 1);
}

#[test]
fn full_pipeline_round_trip() {
    let dir = tempfile::tempdir().unwrap();
    let root = dir.path();
    let cfg_path = workspace(root);
    let cfg = cfg_path.to_str().unwrap();

    let (code, out) = pocus(&["--config", cfg, "ingest"]);
    assert_eq!(code, 0, "{out}");
    assert!(out.contains("cached 72 frames from 12 recordings"), "{out}");

    let (code, out) = pocus(&["--config", cfg, "split", "--folds", "3", "--seed", "7"]);
    assert_eq!(code, 0, "{out}");
    let split = FoldAssignment::load(&root.join("splits.json")).unwrap();
    assert_eq!(split.n_folds, 3);
    assert_eq!(split.assignment.len(), 12);
    assert!(out.contains("leakage: 0"), "{out}");

    let (code, out) = pocus(&["--config", cfg, "train"]);
    assert_eq!(code, 0, "{out}");
    assert_eq!(out.matches("trained").count(), 3, "{out}");
    let (code, out) = pocus(&["--config", cfg, "train"]);
    assert_eq!(code, 0);
    assert_eq!(out.matches("resumed").count(), 3, "{out}");

    let reports = root.join("reports");
    let (code, out) = pocus(&["--config", cfg, "evaluate", "--out", reports.to_str().unwrap()]);
    assert_eq!(code, 0, "{out}");
    assert!(out.contains("frame accuracy"));
    for f in ["aggregate.json", "fold0/frame/report.json", "fold2/video/confusion.csv", "fold1/frame/roc.png"] {
        assert!(reports.join(f).exists(), "{f}");
    }

    let cams = root.join("cams");
    let (code, out) = pocus(&["--config", cfg, "explain", "--out", cams.to_str().unwrap()]);
    assert_eq!(code, 0, "{out}");
    let points = read_points(&cams.join("cam_points.csv")).unwrap();
    assert!(!points.is_empty() && points.len() <= 54);

    let (code, out) = pocus(&["--config", cfg, "mmd", "--points", cams.join("cam_points.csv").to_str().unwrap()]);
    if points.iter().map(|p| p.class).collect::<std::collections::BTreeSet<_>>().len() >= 2 {
        assert_eq!(code, 0, "{out}");
        for token in ["MMD²=", "MMD=", "σ=", "p="] {
            assert!(out.contains(token), "{out}");
        }
    }

    let conf = root.join("confidence.csv");
    let (code, out) = pocus(&["--config", cfg, "uncertainty", "--out", conf.to_str().unwrap()]);
    assert_eq!(code, 0, "{out}");
    assert_eq!(read_confidence_csv(&conf).unwrap().len(), 72);
    assert!(out.contains("epistemic: rho="));

    let bundles = root.join("bundles");
    let clip = root.join("covid0.y4m");
    let (code, out) = pocus(&["--config", cfg, "bundle", "--input", clip.to_str().unwrap(), "--out", bundles.to_str().unwrap()]);
    assert_eq!(code, 0, "{out}");
    let verdicts: serde_json::Value =
        serde_json::from_slice(&std::fs::read(bundles.join("covid0/predictions.json")).unwrap()).unwrap();
    assert_eq!(verdicts.as_array().unwrap().len(), 6);
    assert!(bundles.join("covid0/overlay_0005.png").exists());
}

#[test]
fn config_comes_from_environment() {
    let dir = tempfile::tempdir().unwrap();
    let cfg_path = workspace(dir.path());
    let out = Command::new(env!("CARGO_BIN_EXE_pocus"))
        .arg("ingest")
        .env("POCUS_CONFIG", &cfg_path)
        .output()
        .unwrap();
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    assert!(dir.path().join("cache").exists());
}

#[test]
fn readme_example_config_parses() {
    let readme = std::fs::read_to_string(concat!(env!("CARGO_MANIFEST_DIR"), "/../../README.md")).unwrap();
    let block = readme.split("```toml\n").nth(1).unwrap().split("```").next().unwrap();
    let cfg = pocus_core::config::Config::from_toml(block).unwrap();
    assert_eq!(cfg.split.folds, 5);
    assert_eq!(cfg.model.arch, pocus_core::nn::Arch::VggCam);
}
