//! Dataset manifest: a JSON index of samples plus per-sample array files.
//!
//! Feature paths are stored relative to the manifest file so a dataset
//! directory can be moved wholesale.

use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::types::{DiagramSequence, GroundingSample, Timespan, VideoFeatures};

use super::array_file::{read_array_file, write_array_file};

pub const MANIFEST_VERSION: u32 = 1;

/// One sample's entry in the manifest index.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ManifestEntry {
    pub id: String,
    /// Path to the clip-feature array file, relative to the manifest.
    pub video_features: PathBuf,
    /// Path to the diagram-feature array file, relative to the manifest.
    pub diagram_features: PathBuf,
    pub duration_seconds: f64,
    /// `ground_truth[i]` lists `[start, end]` pairs for diagram `i`.
    pub ground_truth: Vec<Vec<[f64; 2]>>,
}

/// The on-disk dataset index.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Manifest {
    pub version: u32,
    pub samples: Vec<ManifestEntry>,
}

/// Read and structurally validate a manifest file.
pub fn load_manifest(path: &Path) -> Result<Manifest> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let manifest: Manifest =
        serde_json::from_str(&text).map_err(|e| Error::format(path, e.to_string()))?;
    if manifest.version != MANIFEST_VERSION {
        return Err(Error::format(
            path,
            format!(
                "unsupported manifest version {} (expected {MANIFEST_VERSION})",
                manifest.version
            ),
        ));
    }
    let mut seen = std::collections::BTreeSet::new();
    for entry in &manifest.samples {
        if !seen.insert(entry.id.clone()) {
            return Err(Error::format(
                path,
                format!("duplicate sample id {:?}", entry.id),
            ));
        }
    }
    Ok(manifest)
}

/// Serialize `manifest` to `path` as pretty JSON (atomic write).
pub fn write_manifest(path: &Path, manifest: &Manifest) -> Result<()> {
    let mut text = serde_json::to_string_pretty(manifest)
        .map_err(|e| Error::format(path, e.to_string()))?;
    text.push('\n');
    super::write_atomic(path, text.as_bytes())
}

/// Write `samples` as a dataset directory: one array file per feature
/// matrix under `arrays/` plus a `manifest.json` index. Returns the
/// manifest path.
pub fn save_dataset<S: Scalar>(dir: &Path, samples: &[GroundingSample<S>]) -> Result<PathBuf> {
    let mut entries = Vec::with_capacity(samples.len());
    for sample in samples {
        if sample.id.is_empty()
            || !sample
                .id
                .chars()
                .all(|c| c.is_ascii_alphanumeric() || matches!(c, '-' | '_' | '.'))
        {
            return Err(Error::Validation(format!(
                "sample id {:?} is not usable as a file name",
                sample.id
            )));
        }
        let video_rel = PathBuf::from("arrays").join(format!("{}.video.sqga", sample.id));
        let diagram_rel = PathBuf::from("arrays").join(format!("{}.diagrams.sqga", sample.id));
        write_array_file(&dir.join(&video_rel), &sample.video.clips)?;
        write_array_file(&dir.join(&diagram_rel), &sample.diagrams.diagrams)?;
        entries.push(ManifestEntry {
            id: sample.id.clone(),
            video_features: video_rel,
            diagram_features: diagram_rel,
            duration_seconds: sample.video.duration_seconds,
            ground_truth: sample
                .ground_truth
                .iter()
                .map(|spans| spans.iter().map(|s| [s.start(), s.end()]).collect())
                .collect(),
        });
    }
    let manifest = Manifest {
        version: MANIFEST_VERSION,
        samples: entries,
    };
    let path = dir.join("manifest.json");
    write_manifest(&path, &manifest)?;
    Ok(path)
}

/// Load every sample referenced by the manifest at `path`.
///
/// Errors name the offending sample id and field.
pub fn load_samples<S: Scalar>(path: &Path) -> Result<Vec<GroundingSample<S>>> {
    let manifest = load_manifest(path)?;
    let base = path.parent().unwrap_or_else(|| Path::new("."));
    let mut samples = Vec::with_capacity(manifest.samples.len());
    for entry in &manifest.samples {
        samples.push(load_entry(base, entry)?);
    }
    Ok(samples)
}

fn load_entry<S: Scalar>(base: &Path, entry: &ManifestEntry) -> Result<GroundingSample<S>> {
    let id = &entry.id;
    let ctx = |field: &str, err: Error| {
        Error::Validation(format!("sample {id}, field {field}: {err}"))
    };

    let video_path = base.join(&entry.video_features);
    let clips = read_array_file::<S>(&video_path).map_err(|e| ctx("video_features", e))?;
    let video = VideoFeatures::new(clips, entry.duration_seconds)
        .map_err(|e| ctx("video_features", e))?;

    let diagram_path = base.join(&entry.diagram_features);
    let diagrams =
        read_array_file::<S>(&diagram_path).map_err(|e| ctx("diagram_features", e))?;
    let diagrams = DiagramSequence::new(diagrams).map_err(|e| ctx("diagram_features", e))?;

    let mut ground_truth = Vec::with_capacity(entry.ground_truth.len());
    for (i, spans) in entry.ground_truth.iter().enumerate() {
        let mut parsed = Vec::with_capacity(spans.len());
        for (j, &[s, e]) in spans.iter().enumerate() {
            let span = Timespan::new(s, e).map_err(|err| {
                Error::Validation(format!(
                    "sample {id}, field ground_truth[{i}][{j}]: {err}"
                ))
            })?;
            parsed.push(span);
        }
        ground_truth.push(parsed);
    }

    GroundingSample::new(id.clone(), video, diagrams, ground_truth)
        .map_err(|e| ctx("ground_truth", e))
}
