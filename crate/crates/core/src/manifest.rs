//! On-disk layout of a BOLD time series: one NIfTI file per frame plus a
//! JSON manifest tying frames, phase annotations, sparse labels, and the
//! subject record together.
//!
//! Manifest schema:
//!
//! ```json
//! {
//!   "subject_id": "phantom_0003",
//!   "cohort": "control",
//!   "plurality": "singleton",
//!   "frames": ["frames/frame_0000.nii.gz", ...],
//!   "phase": ["normoxia1", ...],
//!   "labels": {"0": "labels/label_0000.nii.gz", ...}
//! }
//! ```
//!
//! Paths are relative to the manifest's directory.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nifti;
use crate::volume::{Cohort, Phase, Plurality, SubjectRecord, TimeSeries};

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SeriesManifest {
    pub subject_id: String,
    pub cohort: String,
    pub plurality: String,
    pub frames: Vec<String>,
    pub phase: Vec<String>,
    /// Frame index (as decimal string, JSON maps are string-keyed) -> path.
    pub labels: BTreeMap<String, String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub gestational_age: Option<String>,
}

fn manifest_err(path: &Path, reason: impl Into<String>) -> Error {
    Error::Manifest {
        path: path.to_path_buf(),
        reason: reason.into(),
    }
}

/// Load a manifest plus all referenced frames and labels.
pub fn load_series(manifest_path: impl AsRef<Path>) -> Result<(TimeSeries, SubjectRecord)> {
    let manifest_path = manifest_path.as_ref();
    let text = std::fs::read_to_string(manifest_path)
        .map_err(|e| Error::io(manifest_path, e))?;
    let manifest: SeriesManifest = serde_json::from_str(&text)
        .map_err(|e| manifest_err(manifest_path, format!("JSON parse error: {e}")))?;
    let base = manifest_path.parent().unwrap_or_else(|| Path::new("."));

    if manifest.frames.len() != manifest.phase.len() {
        return Err(manifest_err(
            manifest_path,
            format!(
                "frames ({}) and phase ({}) lengths differ",
                manifest.frames.len(),
                manifest.phase.len()
            ),
        ));
    }

    let mut frames = Vec::with_capacity(manifest.frames.len());
    for rel in &manifest.frames {
        frames.push(nifti::load_volume(base.join(rel))?);
    }
    let mut phase = Vec::with_capacity(manifest.phase.len());
    for p in &manifest.phase {
        phase.push(Phase::parse(p).map_err(|e| manifest_err(manifest_path, e.to_string()))?);
    }
    let mut labels = BTreeMap::new();
    for (key, rel) in &manifest.labels {
        let index: usize = key.parse().map_err(|_| {
            manifest_err(manifest_path, format!("label key {key:?} is not a frame index"))
        })?;
        labels.insert(index, nifti::load_labelmap(base.join(rel), 0.5)?);
    }

    let gestational_age = match &manifest.gestational_age {
        None => None,
        Some(s) => Some(parse_ga(s).map_err(|e| manifest_err(manifest_path, e.to_string()))?),
    };
    let record = SubjectRecord {
        subject_id: manifest.subject_id.clone(),
        cohort: Cohort::parse(&manifest.cohort)
            .map_err(|e| manifest_err(manifest_path, e.to_string()))?,
        plurality: Plurality::parse(&manifest.plurality)
            .map_err(|e| manifest_err(manifest_path, e.to_string()))?,
        gestational_age,
    };
    let series = TimeSeries::new(manifest.subject_id, frames, phase, labels)
        .map_err(|e| manifest_err(manifest_path, e.to_string()))?;
    Ok((series, record))
}

/// Write a series under `dir` (one gzipped frame per file, labels alongside)
/// and return the path of the manifest JSON.
pub fn save_series(
    series: &TimeSeries,
    record: &SubjectRecord,
    dir: impl AsRef<Path>,
) -> Result<PathBuf> {
    let dir = dir.as_ref();
    std::fs::create_dir_all(dir.join("frames")).map_err(|e| Error::io(dir, e))?;
    if !series.labels.is_empty() {
        std::fs::create_dir_all(dir.join("labels")).map_err(|e| Error::io(dir, e))?;
    }

    let mut frame_paths = Vec::with_capacity(series.frames.len());
    for (i, frame) in series.frames.iter().enumerate() {
        let rel = format!("frames/frame_{i:04}.nii.gz");
        nifti::save_volume(frame, dir.join(&rel))?;
        frame_paths.push(rel);
    }
    let mut label_paths = BTreeMap::new();
    for (&i, label) in &series.labels {
        let rel = format!("labels/label_{i:04}.nii.gz");
        nifti::save_labelmap(label, dir.join(&rel))?;
        label_paths.insert(i.to_string(), rel);
    }

    let manifest = SeriesManifest {
        subject_id: record.subject_id.clone(),
        cohort: record.cohort.as_str().to_string(),
        plurality: record.plurality.as_str().to_string(),
        frames: frame_paths,
        phase: series.phase.iter().map(|p| p.as_str().to_string()).collect(),
        labels: label_paths,
        gestational_age: record.gestational_age.map(|(w, d)| format!("{w}w{d}d")),
    };
    let manifest_path = dir.join("manifest.json");
    let text = serde_json::to_string_pretty(&manifest)
        .map_err(|e| manifest_err(&manifest_path, e.to_string()))?;
    std::fs::write(&manifest_path, text).map_err(|e| Error::io(&manifest_path, e))?;
    Ok(manifest_path)
}

fn parse_ga(s: &str) -> Result<(u32, u32)> {
    let cleaned = s.trim();
    let Some((w, rest)) = cleaned.split_once('w') else {
        return Err(Error::InvalidArgument(format!(
            "gestational age {s:?} not in <weeks>w<days>d form"
        )));
    };
    let d = rest.trim_end_matches('d');
    let weeks = w
        .parse()
        .map_err(|_| Error::InvalidArgument(format!("bad gestational weeks in {s:?}")))?;
    let days = d
        .parse()
        .map_err(|_| Error::InvalidArgument(format!("bad gestational days in {s:?}")))?;
    Ok((weeks, days))
}

/// Discover all `manifest.json` files directly under `root`'s subdirectories
/// (one subject per subdirectory), sorted by path for determinism.
pub fn discover_manifests(root: impl AsRef<Path>) -> Result<Vec<PathBuf>> {
    let root = root.as_ref();
    let mut found = Vec::new();
    let entries = std::fs::read_dir(root).map_err(|e| Error::io(root, e))?;
    for entry in entries {
        let entry = entry.map_err(|e| Error::io(root, e))?;
        let candidate = entry.path().join("manifest.json");
        if candidate.is_file() {
            found.push(candidate);
        }
    }
    let direct = root.join("manifest.json");
    if direct.is_file() {
        found.push(direct);
    }
    found.sort();
    Ok(found)
}
