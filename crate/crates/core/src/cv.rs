//! Video-grouped, class-stratified k-fold splits and their leakage audit.
//!
//! Whole videos are assigned to folds. Within each class, videos are placed
//! largest first into the fold currently holding the fewest frames of that
//! class (ties: fewest frames overall, then lowest fold index). Videos of
//! equal size are ordered by a seeded shuffle.

use std::collections::{BTreeMap, BTreeSet, HashMap};
use std::path::Path;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::class::Class;
use crate::data::Dataset;
use crate::error::{Error, Result};

pub const DEFAULT_FOLDS: usize = 5;
/// Allowed absolute deviation of a fold's class share from the global share.
pub const DEFAULT_SHARE_TOLERANCE: f64 = 0.10;

/// Video-level summary used for splitting.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct VideoInfo {
    pub id: String,
    pub label: Class,
    pub frames: usize,
}

/// Frame-level record used by the audit.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct FrameRecord {
    pub video_id: String,
    pub frame_index: usize,
    pub label: Class,
    /// Content hash; identical content in two folds counts as leakage.
    pub fingerprint: Option<[u8; 16]>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct FoldAssignment {
    pub n_folds: usize,
    pub assignment: BTreeMap<String, usize>,
}

impl FoldAssignment {
    pub fn fold_of(&self, video_id: &str) -> Option<usize> {
        self.assignment.get(video_id).copied()
    }

    pub fn videos_in(&self, fold: usize) -> Vec<&str> {
        self.assignment
            .iter()
            .filter(|(_, &f)| f == fold)
            .map(|(v, _)| v.as_str())
            .collect()
    }

    /// Indices of `dataset` frames used for training and held out for `fold`.
    pub fn split_indices(&self, dataset: &Dataset, fold: usize) -> Result<(Vec<usize>, Vec<usize>)> {
        if fold >= self.n_folds {
            return Err(Error::Config(format!("fold {fold} out of range for {} folds", self.n_folds)));
        }
        let mut train = Vec::new();
        let mut test = Vec::new();
        for (i, s) in dataset.samples.iter().enumerate() {
            match self.fold_of(&s.video_id) {
                Some(f) if f == fold => test.push(i),
                Some(_) => train.push(i),
                None => {
                    return Err(Error::invalid(format!("video `{}` has no fold", s.video_id)));
                }
            }
        }
        Ok((train, test))
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("fold assignment serializes")
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let a: FoldAssignment = serde_json::from_str(text)?;
        if a.n_folds == 0 || a.assignment.values().any(|&f| f >= a.n_folds) {
            return Err(Error::invalid("split file has fold indices out of range"));
        }
        Ok(a)
    }

    /// SHA-256 of the canonical JSON form; recorded alongside checkpoints.
    pub fn hash(&self) -> String {
        hex::encode(Sha256::digest(self.to_json().as_bytes()))
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        crate::io::write_atomic(path, self.to_json().as_bytes())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_json(&text)
    }
}

/// Collapses a dataset to one [`VideoInfo`] per video.
pub fn video_infos(dataset: &Dataset) -> Vec<VideoInfo> {
    dataset
        .videos()
        .into_iter()
        .map(|(id, (label, frames))| VideoInfo {
            id: id.to_string(),
            label,
            frames,
        })
        .collect()
}

pub fn frame_records(dataset: &Dataset) -> Vec<FrameRecord> {
    dataset
        .samples
        .iter()
        .map(|s| {
            let mut h = Sha256::new();
            for v in s.pixels.iter() {
                h.update(v.to_le_bytes());
            }
            let digest = h.finalize();
            let mut fp = [0u8; 16];
            fp.copy_from_slice(&digest[..16]);
            FrameRecord {
                video_id: s.video_id.clone(),
                frame_index: s.frame_index,
                label: s.label,
                fingerprint: Some(fp),
            }
        })
        .collect()
}

#[derive(Debug, Clone)]
pub struct SplitOutcome {
    pub assignment: FoldAssignment,
    /// Classes with fewer videos than folds (some folds lack them).
    pub warnings: Vec<String>,
}

pub fn stratified_group_kfold(dataset: &Dataset, n_folds: usize, seed: u64) -> Result<SplitOutcome> {
    stratified_group_kfold_videos(&video_infos(dataset), n_folds, seed)
}

pub fn stratified_group_kfold_videos(videos: &[VideoInfo], n_folds: usize, seed: u64) -> Result<SplitOutcome> {
    if n_folds < 2 {
        return Err(Error::Config(format!("need at least 2 folds, got {n_folds}")));
    }
    let mut ids = BTreeSet::new();
    for v in videos {
        if !ids.insert(v.id.as_str()) {
            return Err(Error::invalid(format!("duplicate video id `{}`", v.id)));
        }
    }
    if videos.len() < n_folds {
        return Err(Error::Config(format!(
            "{} videos cannot fill {n_folds} non-empty folds",
            videos.len()
        )));
    }

    let mut by_class: BTreeMap<Class, Vec<&VideoInfo>> = BTreeMap::new();
    for v in videos {
        by_class.entry(v.label).or_default().push(v);
    }

    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut totals = vec![0usize; n_folds];
    let mut assignment = BTreeMap::new();
    let mut warnings = Vec::new();
    for (class, mut members) in by_class {
        if members.len() < n_folds {
            let msg = format!(
                "class {class} has {} videos for {n_folds} folds; some folds will lack it",
                members.len()
            );
            log::warn!("{msg}");
            warnings.push(msg);
        }
        members.sort_by(|a, b| a.id.cmp(&b.id));
        members.shuffle(&mut rng);
        members.sort_by(|a, b| b.frames.cmp(&a.frames));
        let mut class_counts = vec![0usize; n_folds];
        for v in members {
            let fold = (0..n_folds)
                .min_by_key(|&f| (class_counts[f], totals[f], f))
                .expect("n_folds >= 2");
            class_counts[fold] += v.frames;
            totals[fold] += v.frames;
            assignment.insert(v.id.clone(), fold);
        }
    }

    // Greedy placement can leave a fold without videos when one class
    // dominates; move the smallest video of the fullest fold into it.
    for empty in 0..n_folds {
        if assignment.values().any(|&f| f == empty) {
            continue;
        }
        let mut counts = vec![0usize; n_folds];
        for &f in assignment.values() {
            counts[f] += 1;
        }
        let donor = (0..n_folds).max_by_key(|&f| (counts[f], f)).expect("folds");
        let frames: HashMap<&str, usize> = videos.iter().map(|v| (v.id.as_str(), v.frames)).collect();
        let moved = assignment
            .iter()
            .filter(|(_, &f)| f == donor)
            .min_by_key(|(id, _)| (frames[id.as_str()], (*id).clone()))
            .map(|(id, _)| id.clone())
            .expect("donor fold has videos");
        assignment.insert(moved, empty);
    }

    Ok(SplitOutcome {
        assignment: FoldAssignment { n_folds, assignment },
        warnings,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FoldStats {
    pub fold: usize,
    pub videos: usize,
    pub frames: usize,
    pub class_frames: BTreeMap<Class, usize>,
    pub class_shares: BTreeMap<Class, f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AuditReport {
    /// Descriptions of frames whose content or identity appears in two folds.
    pub leakage: Vec<String>,
    pub folds: Vec<FoldStats>,
    pub global_shares: BTreeMap<Class, f64>,
    /// Largest absolute deviation of any fold's class share from the global share.
    pub max_share_deviation: f64,
    /// Largest fold frame count over the smallest.
    pub size_imbalance: f64,
    pub tolerance: f64,
    pub within_tolerance: bool,
    pub warnings: Vec<String>,
}

impl AuditReport {
    pub fn is_clean(&self) -> bool {
        self.leakage.is_empty() && self.within_tolerance && self.folds.iter().all(|f| f.videos > 0)
    }
}

pub fn audit_folds(frames: &[FrameRecord], assignment: &FoldAssignment, tolerance: f64) -> Result<AuditReport> {
    let n = assignment.n_folds;
    let mut unassigned: BTreeSet<&str> = BTreeSet::new();
    for f in frames {
        match assignment.fold_of(&f.video_id) {
            Some(k) if k < n => {}
            _ => {
                unassigned.insert(&f.video_id);
            }
        }
    }
    if !unassigned.is_empty() {
        return Err(Error::invalid(format!(
            "audit failed: unassigned videos: {}",
            unassigned.into_iter().collect::<Vec<_>>().join(", ")
        )));
    }

    let mut leakage = Vec::new();
    let mut by_key: HashMap<(&str, usize), usize> = HashMap::new();
    let mut by_print: HashMap<[u8; 16], (usize, &FrameRecord)> = HashMap::new();
    for f in frames {
        let fold = assignment.fold_of(&f.video_id).expect("checked above");
        if by_key.insert((&f.video_id, f.frame_index), fold).is_some() {
            leakage.push(format!("frame {}#{} appears twice", f.video_id, f.frame_index));
        }
        if let Some(fp) = f.fingerprint {
            match by_print.get(&fp) {
                Some(&(other_fold, other)) if other_fold != fold => leakage.push(format!(
                    "frame {}#{} (fold {fold}) duplicates {}#{} (fold {other_fold})",
                    f.video_id, f.frame_index, other.video_id, other.frame_index
                )),
                Some(_) => {}
                None => {
                    by_print.insert(fp, (fold, f));
                }
            }
        }
    }

    let mut warnings = Vec::new();
    let present: BTreeSet<&str> = frames.iter().map(|f| f.video_id.as_str()).collect();
    let stale: Vec<&str> = assignment
        .assignment
        .keys()
        .map(String::as_str)
        .filter(|v| !present.contains(v))
        .collect();
    if !stale.is_empty() {
        warnings.push(format!("split lists videos absent from the dataset: {}", stale.join(", ")));
    }

    let mut global: BTreeMap<Class, usize> = BTreeMap::new();
    let mut folds: Vec<FoldStats> = (0..n)
        .map(|fold| FoldStats {
            fold,
            videos: 0,
            frames: 0,
            class_frames: BTreeMap::new(),
            class_shares: BTreeMap::new(),
        })
        .collect();
    let mut fold_videos: Vec<BTreeSet<&str>> = vec![BTreeSet::new(); n];
    for f in frames {
        let k = assignment.fold_of(&f.video_id).expect("checked above");
        *global.entry(f.label).or_insert(0) += 1;
        *folds[k].class_frames.entry(f.label).or_insert(0) += 1;
        folds[k].frames += 1;
        fold_videos[k].insert(&f.video_id);
    }
    let total = frames.len().max(1) as f64;
    let global_shares: BTreeMap<Class, f64> = global.iter().map(|(&c, &v)| (c, v as f64 / total)).collect();
    let mut max_dev: f64 = 0.0;
    for (stats, vids) in folds.iter_mut().zip(&fold_videos) {
        stats.videos = vids.len();
        for (&class, &share) in &global_shares {
            let count = stats.class_frames.get(&class).copied().unwrap_or(0);
            let fold_share = if stats.frames == 0 {
                0.0
            } else {
                count as f64 / stats.frames as f64
            };
            stats.class_shares.insert(class, fold_share);
            max_dev = max_dev.max((fold_share - share).abs());
            if count == 0 {
                warnings.push(format!("fold {} has no {class} frames", stats.fold));
            }
        }
        if stats.videos == 0 {
            warnings.push(format!("fold {} is empty", stats.fold));
        }
    }
    let sizes: Vec<usize> = folds.iter().map(|f| f.frames).collect();
    let (min, max) = (
        *sizes.iter().min().unwrap_or(&0),
        *sizes.iter().max().unwrap_or(&0),
    );
    let size_imbalance = if min == 0 { f64::INFINITY } else { max as f64 / min as f64 };

    Ok(AuditReport {
        leakage,
        folds,
        global_shares,
        max_share_deviation: max_dev,
        size_imbalance,
        tolerance,
        within_tolerance: max_dev <= tolerance,
        warnings,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn infos(layout: &[(Class, &[usize])]) -> Vec<VideoInfo> {
        let mut out = Vec::new();
        for (class, sizes) in layout {
            for (i, &frames) in sizes.iter().enumerate() {
                out.push(VideoInfo {
                    id: format!("{}_{i:02}", class.short()),
                    label: *class,
                    frames,
                });
            }
        }
        out
    }

    fn records(videos: &[VideoInfo]) -> Vec<FrameRecord> {
        videos
            .iter()
            .flat_map(|v| {
                (0..v.frames).map(move |i| FrameRecord {
                    video_id: v.id.clone(),
                    frame_index: i,
                    label: v.label,
                    fingerprint: None,
                })
            })
            .collect()
    }

    #[test]
    fn symmetric_single_class() {
        let v = infos(&[(Class::Covid, &[30; 10])]);
        let out = stratified_group_kfold_videos(&v, 5, 0).unwrap();
        for fold in 0..5 {
            assert_eq!(out.assignment.videos_in(fold).len(), 2);
        }
        let audit = audit_folds(&records(&v), &out.assignment, DEFAULT_SHARE_TOLERANCE).unwrap();
        assert!(audit.folds.iter().all(|f| f.frames == 60));
        assert!(audit.leakage.is_empty());
    }

    #[test]
    fn three_class_shares_within_tolerance() {
        let v = infos(&[
            (Class::Covid, &[30, 30, 28, 25, 22, 30, 18, 15, 30, 12, 9, 30, 27, 6, 21]),
            (Class::Pneumonia, &[30, 12, 8, 30, 19, 24, 30, 5, 16, 11]),
            (Class::Healthy, &[14, 30, 30, 7, 22, 10, 3, 30, 17, 26]),
        ]);
        let out = stratified_group_kfold_videos(&v, 5, 42).unwrap();
        assert!(out.warnings.is_empty());
        let audit = audit_folds(&records(&v), &out.assignment, DEFAULT_SHARE_TOLERANCE).unwrap();
        // Exhaustive check over every fold and class.
        for fold in &audit.folds {
            for (class, share) in &audit.global_shares {
                assert!((fold.class_shares[class] - share).abs() <= 0.10, "fold {} {class}", fold.fold);
            }
        }
        assert!(audit.is_clean());
    }

    #[test]
    fn folds_disjoint_and_complete() {
        let v = infos(&[(Class::Covid, &[5, 6, 7, 8, 9, 10]), (Class::Healthy, &[3, 4, 5, 6, 7])]);
        let a = stratified_group_kfold_videos(&v, 5, 1).unwrap().assignment;
        let mut union = BTreeSet::new();
        for i in 0..5 {
            for j in (i + 1)..5 {
                let x: BTreeSet<_> = a.videos_in(i).into_iter().collect();
                let y: BTreeSet<_> = a.videos_in(j).into_iter().collect();
                assert!(x.is_disjoint(&y));
            }
            union.extend(a.videos_in(i));
        }
        assert_eq!(union.len(), v.len());
    }

    #[test]
    fn same_seed_same_bytes() {
        let v = infos(&[(Class::Covid, &[10; 12]), (Class::Pneumonia, &[10; 7])]);
        let a = stratified_group_kfold_videos(&v, 5, 9).unwrap().assignment;
        let b = stratified_group_kfold_videos(&v, 5, 9).unwrap().assignment;
        assert_eq!(a.to_json(), b.to_json());
        assert_eq!(a.hash(), b.hash());
        assert_eq!(FoldAssignment::from_json(&a.to_json()).unwrap(), a);
    }

    #[test]
    fn sparse_class_warns_but_assigns() {
        let v = infos(&[(Class::Covid, &[10; 10]), (Class::Healthy, &[10, 10])]);
        let out = stratified_group_kfold_videos(&v, 5, 0).unwrap();
        assert_eq!(out.warnings.len(), 1);
        assert_eq!(out.assignment.assignment.len(), 12);
        let audit = audit_folds(&records(&v), &out.assignment, DEFAULT_SHARE_TOLERANCE).unwrap();
        assert!(audit.warnings.iter().any(|w| w.contains("no healthy")));
    }

    #[test]
    fn planted_leak_is_flagged() {
        let v = infos(&[(Class::Covid, &[3; 5]), (Class::Healthy, &[3; 5])]);
        let a = stratified_group_kfold_videos(&v, 5, 0).unwrap().assignment;
        let mut recs = records(&v);
        for (i, r) in recs.iter_mut().enumerate() {
            r.fingerprint = Some([i as u8; 16]);
        }
        let clean = audit_folds(&recs, &a, DEFAULT_SHARE_TOLERANCE).unwrap();
        assert!(clean.leakage.is_empty());

        // Relabel a copy of one frame as belonging to a video in another fold.
        let victim = recs[0].clone();
        let other = v
            .iter()
            .find(|x| a.fold_of(&x.id) != a.fold_of(&victim.video_id))
            .unwrap();
        recs.push(FrameRecord {
            video_id: other.id.clone(),
            frame_index: 99,
            ..victim
        });
        let dirty = audit_folds(&recs, &a, DEFAULT_SHARE_TOLERANCE).unwrap();
        assert_eq!(dirty.leakage.len(), 1);
        assert!(!dirty.is_clean());
    }

    #[test]
    fn unassigned_video_fails_audit() {
        let v = infos(&[(Class::Covid, &[3; 5])]);
        let mut a = stratified_group_kfold_videos(&v, 5, 0).unwrap().assignment;
        a.assignment.remove("C_03");
        let err = audit_folds(&records(&v), &a, 0.1).unwrap_err();
        assert!(err.to_string().contains("C_03"));
    }

    #[test]
    fn full_dataset_scale_fold_sizes() {
        // 1,365 frames over 5 folds is ~273 frames per fold.
        let mut sizes_c = vec![30usize; 23];
        sizes_c.extend([9; 1]);
        let v = infos(&[
            (Class::Covid, &sizes_c),
            (Class::Pneumonia, &[29; 13]),
            (Class::Healthy, &[15; 19]),
            ]);
        let total: usize = v.iter().map(|x| x.frames).sum();
        assert_eq!(total, 699 + 377 + 285);
        let a = stratified_group_kfold_videos(&v, 5, 0).unwrap().assignment;
        let audit = audit_folds(&records(&v), &a, DEFAULT_SHARE_TOLERANCE).unwrap();
        for f in &audit.folds {
            assert!((f.frames as f64 - total as f64 / 5.0).abs() < 0.1 * total as f64 / 5.0, "{}", f.frames);
        }
    }
}
