//! CSV manifest of source recordings.
//!
//! Header: `id,path,label,probe,kind,source,fps,crop_x,crop_y,crop_w,crop_h,notes`.
//! Relative paths resolve against the manifest's directory. Empty crop fields
//! select the centered square crop.

use std::collections::{HashMap, HashSet};
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::class::{Class, MediaKind, Probe};
use crate::data::image_ops::CropWindow;
use crate::error::{Error, Result};

pub const MANIFEST_COLUMNS: [&str; 12] = [
    "id", "path", "label", "probe", "kind", "source", "fps", "crop_x", "crop_y", "crop_w",
    "crop_h", "notes",
];

const REQUIRED_COLUMNS: [&str; 6] = ["id", "path", "label", "probe", "kind", "fps"];

/// One source video or image.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RecordingMeta {
    pub id: String,
    pub path: PathBuf,
    pub label: Class,
    pub probe: Probe,
    pub kind: MediaKind,
    pub source: String,
    pub pattern_notes: String,
    /// Frames per second; present iff `kind` is video.
    pub fps: Option<f64>,
    pub crop: Option<CropWindow>,
}

impl RecordingMeta {
    pub fn video(id: &str, path: impl Into<PathBuf>, label: Class, fps: f64) -> Self {
        RecordingMeta {
            id: id.to_string(),
            path: path.into(),
            label,
            probe: Probe::Convex,
            kind: MediaKind::Video,
            source: String::new(),
            pattern_notes: String::new(),
            fps: Some(fps),
            crop: None,
        }
    }

    pub fn image(id: &str, path: impl Into<PathBuf>, label: Class) -> Self {
        RecordingMeta {
            id: id.to_string(),
            path: path.into(),
            label,
            probe: Probe::Convex,
            kind: MediaKind::Image,
            source: String::new(),
            pattern_notes: String::new(),
            fps: None,
            crop: None,
        }
    }
}

pub fn load_manifest(path: impl AsRef<Path>) -> Result<Vec<RecordingMeta>> {
    let path = path.as_ref();
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let base = path.parent().unwrap_or_else(|| Path::new("."));
    parse_manifest(&text, base)
}

/// Parses manifest text; `base_dir` anchors relative recording paths.
pub fn parse_manifest(text: &str, base_dir: &Path) -> Result<Vec<RecordingMeta>> {
    let mut reader = csv::ReaderBuilder::new()
        .trim(csv::Trim::All)
        .flexible(false)
        .from_reader(text.as_bytes());
    let headers = reader.headers()?.clone();
    let column: HashMap<&str, usize> = headers.iter().enumerate().map(|(i, h)| (h, i)).collect();
    for required in REQUIRED_COLUMNS {
        if !column.contains_key(required) {
            return Err(Error::MissingColumn(required.to_string()));
        }
    }

    let mut seen = HashSet::new();
    let mut records = Vec::new();
    for (i, row) in reader.records().enumerate() {
        let row_no = i + 1;
        let row = row.map_err(|e| Error::invalid_row(row_no, e.to_string()))?;
        let field = |name: &str| -> &str {
            column
                .get(name)
                .and_then(|&c| row.get(c))
                .unwrap_or_default()
        };

        let id = field("id").to_string();
        if id.is_empty() {
            return Err(Error::invalid_row(row_no, "empty id"));
        }
        if !seen.insert(id.clone()) {
            return Err(Error::invalid_row(row_no, format!("duplicate id `{id}`")));
        }
        let label: Class = field("label")
            .parse()
            .map_err(|e: Error| Error::invalid_row(row_no, strip(e)))?;
        let probe: Probe = field("probe")
            .parse()
            .map_err(|e: Error| Error::invalid_row(row_no, strip(e)))?;
        let kind: MediaKind = field("kind")
            .parse()
            .map_err(|e: Error| Error::invalid_row(row_no, strip(e)))?;

        let fps = match field("fps") {
            "" => None,
            s => Some(
                s.parse::<f64>()
                    .map_err(|_| Error::invalid_row(row_no, format!("bad fps `{s}`")))?,
            ),
        };
        match (kind, fps) {
            (MediaKind::Video, None) => {
                return Err(Error::invalid_row(row_no, "video without fps"));
            }
            (MediaKind::Video, Some(f)) if !(f.is_finite() && f > 0.0) => {
                return Err(Error::invalid_row(row_no, format!("fps must be > 0, got {f}")));
            }
            (MediaKind::Image, Some(_)) => {
                return Err(Error::invalid_row(row_no, "image rows must leave fps empty"));
            }
            _ => {}
        }

        let crop = parse_crop(
            [
                field("crop_x"),
                field("crop_y"),
                field("crop_w"),
                field("crop_h"),
            ],
            row_no,
        )?;

        let raw_path = PathBuf::from(field("path"));
        if raw_path.as_os_str().is_empty() {
            return Err(Error::invalid_row(row_no, "empty path"));
        }
        let path = if raw_path.is_absolute() {
            raw_path
        } else {
            base_dir.join(raw_path)
        };

        records.push(RecordingMeta {
            id,
            path,
            label,
            probe,
            kind,
            source: field("source").to_string(),
            pattern_notes: field("notes").to_string(),
            fps,
            crop,
        });
    }
    Ok(records)
}

fn strip(e: Error) -> String {
    match e {
        Error::Validation { message, .. } => message,
        other => other.to_string(),
    }
}

fn parse_crop(fields: [&str; 4], row: usize) -> Result<Option<CropWindow>> {
    if fields.iter().all(|f| f.is_empty()) {
        return Ok(None);
    }
    if fields.iter().any(|f| f.is_empty()) {
        return Err(Error::invalid_row(row, "crop fields must be all set or all empty"));
    }
    let mut v = [0u32; 4];
    for (slot, f) in v.iter_mut().zip(fields) {
        *slot = f
            .parse()
            .map_err(|_| Error::invalid_row(row, format!("bad crop value `{f}`")))?;
    }
    Ok(Some(CropWindow {
        x: v[0],
        y: v[1],
        w: v[2],
        h: v[3],
    }))
}

#[cfg(test)]
mod tests {
    use super::*;

    const HEADER: &str = "id,path,label,probe,kind,source,fps,crop_x,crop_y,crop_w,crop_h,notes\n";

    #[test]
    fn two_valid_rows() {
        let text = format!(
            "{HEADER}v1,a.y4m,covid,convex,video,grepmed,30,,,,,B-lines\n\
             i1,/abs/b.png,healthy,convex,image,atlas,,10,20,100,100,A-lines\n"
        );
        let recs = parse_manifest(&text, Path::new("/data")).unwrap();
        assert_eq!(recs.len(), 2);
        assert_eq!(recs[0].path, PathBuf::from("/data/a.y4m"));
        assert_eq!(recs[0].fps, Some(30.0));
        assert_eq!(recs[0].pattern_notes, "B-lines");
        assert_eq!(recs[1].path, PathBuf::from("/abs/b.png"));
        assert_eq!(
            recs[1].crop,
            Some(CropWindow {
                x: 10,
                y: 20,
                w: 100,
                h: 100
            })
        );
    }

    #[test]
    fn unknown_label_cites_row() {
        let text = format!(
            "{HEADER}v1,a.y4m,covid,convex,video,,30,,,,,\nv2,b.y4m,viral,convex,video,,30,,,,,\n"
        );
        let err = parse_manifest(&text, Path::new(".")).unwrap_err();
        match err {
            Error::Validation { row, message } => {
                assert_eq!(row, Some(2));
                assert!(message.contains("viral"));
            }
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn missing_column_is_named() {
        let text = "id,path,label,kind,fps\nv1,a,covid,video,30\n";
        let err = parse_manifest(text, Path::new(".")).unwrap_err();
        assert!(matches!(err, Error::MissingColumn(ref c) if c == "probe"));
    }

    #[test]
    fn duplicate_ids_rejected() {
        let text = format!(
            "{HEADER}v1,a.y4m,covid,convex,video,,30,,,,,\nv1,b.y4m,covid,convex,video,,30,,,,,\n"
        );
        assert!(matches!(
            parse_manifest(&text, Path::new(".")),
            Err(Error::Validation { row: Some(2), .. })
        ));
    }

    #[test]
    fn fps_iff_video() {
        let no_fps = format!("{HEADER}v1,a.y4m,covid,convex,video,,,,,,,\n");
        assert!(parse_manifest(&no_fps, Path::new(".")).is_err());
        let image_fps = format!("{HEADER}i1,a.png,covid,convex,image,,25,,,,,\n");
        assert!(parse_manifest(&image_fps, Path::new(".")).is_err());
    }

    #[test]
    fn table_one_convex_video_counts() {
        // 40 covid, 23 pneumonia and 20 healthy convex videos.
        let mut text = HEADER.to_string();
        let mut n = 0;
        for (label, count) in [("covid", 40), ("pneumonia", 23), ("healthy", 20)] {
            for _ in 0..count {
                text.push_str(&format!("v{n},v{n}.y4m,{label},convex,video,,25,,,,,\n"));
                n += 1;
            }
        }
        let recs = parse_manifest(&text, Path::new(".")).unwrap();
        assert_eq!(recs.len(), 83);
        assert!(recs.iter().all(|r| r.kind == MediaKind::Video));
    }
}
