//! JSON-lines dataset manifests.

use std::collections::HashSet;
use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use super::VolumeError;

/// One patient case. Relative file references are resolved against the
/// manifest's directory at load time.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct StudyRecord {
    pub case_id: String,
    pub t1c_path: PathBuf,
    pub t2_path: PathBuf,
    pub mask_path: Option<PathBuf>,
    /// Overall stage I–IV as 0..=3.
    pub overall_stage: Option<u8>,
    /// T stage T1–T4 as 0..=3.
    pub t_stage: Option<u8>,
    pub progression_3yr: u8,
    pub split_tag: Option<String>,
}

#[derive(Debug, Serialize, Deserialize)]
struct ManifestLine {
    case_id: Option<String>,
    t1c: Option<String>,
    t2: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    mask: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    overall_stage: Option<i64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    t_stage: Option<i64>,
    progression: Option<i64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    split: Option<String>,
}

pub fn load_manifest(path: impl AsRef<Path>) -> Result<Vec<StudyRecord>, VolumeError> {
    let path = path.as_ref();
    let text = fs::read_to_string(path).map_err(|source| VolumeError::Io {
        path: path.to_path_buf(),
        source,
    })?;
    let base = path.parent().unwrap_or_else(|| Path::new(""));
    let resolve = |s: &str| -> PathBuf {
        let p = Path::new(s);
        if p.is_absolute() {
            p.to_path_buf()
        } else {
            base.join(p)
        }
    };

    let mut records = Vec::new();
    let mut seen = HashSet::new();
    for (i, line) in text.lines().enumerate() {
        let lineno = i + 1;
        if line.trim().is_empty() {
            continue;
        }
        let err = |message: String| VolumeError::Parse {
            path: path.to_path_buf(),
            line: lineno,
            message,
        };
        let raw: ManifestLine =
            serde_json::from_str(line).map_err(|e| err(format!("invalid JSON: {e}")))?;
        let required = |v: Option<String>, key: &str| v.ok_or_else(|| err(format!("missing \"{key}\"")));
        let case_id = required(raw.case_id, "case_id")?;
        let t1c = required(raw.t1c, "t1c")?;
        let t2 = required(raw.t2, "t2")?;
        let progression = match raw.progression {
            Some(v @ (0 | 1)) => v as u8,
            Some(v) => return Err(err(format!("progression must be 0 or 1, got {v}"))),
            None => return Err(err("missing \"progression\"".into())),
        };
        let stage = |v: Option<i64>, key: &str| -> Result<Option<u8>, VolumeError> {
            match v {
                None => Ok(None),
                Some(s @ 0..=3) => Ok(Some(s as u8)),
                Some(s) => Err(err(format!("{key} must be in 0..=3, got {s}"))),
            }
        };
        let overall_stage = stage(raw.overall_stage, "overall_stage")?;
        let t_stage = stage(raw.t_stage, "t_stage")?;
        if !seen.insert(case_id.clone()) {
            return Err(VolumeError::DuplicateCaseId(case_id));
        }
        records.push(StudyRecord {
            t1c_path: resolve(&t1c),
            t2_path: resolve(&t2),
            mask_path: raw.mask.as_deref().map(resolve),
            case_id,
            overall_stage,
            t_stage,
            progression_3yr: progression,
            split_tag: raw.split,
        });
    }
    Ok(records)
}

/// Write records as JSON lines. Paths are written as given.
pub fn write_manifest(records: &[StudyRecord], path: impl AsRef<Path>) -> Result<(), VolumeError> {
    let path = path.as_ref();
    let io = |source| VolumeError::Io {
        path: path.to_path_buf(),
        source,
    };
    let mut out = Vec::new();
    for r in records {
        let line = ManifestLine {
            case_id: Some(r.case_id.clone()),
            t1c: Some(r.t1c_path.to_string_lossy().into_owned()),
            t2: Some(r.t2_path.to_string_lossy().into_owned()),
            mask: r.mask_path.as_ref().map(|p| p.to_string_lossy().into_owned()),
            overall_stage: r.overall_stage.map(i64::from),
            t_stage: r.t_stage.map(i64::from),
            progression: Some(i64::from(r.progression_3yr)),
            split: r.split_tag.clone(),
        };
        serde_json::to_writer(&mut out, &line).expect("manifest line serializes");
        out.push(b'\n');
    }
    let mut f = fs::File::create(path).map_err(io)?;
    f.write_all(&out).map_err(io)
}
