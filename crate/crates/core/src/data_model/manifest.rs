//! Dataset manifest: a JSON file listing label names and per-image records.
//!
//! ```json
//! {
//!   "labels": ["grasp", "cut"],
//!   "records": [
//!     {
//!       "image": "images/rec0000.ppm",
//!       "keypoints": [{ "class": 0, "x": 12, "y": 40 }],
//!       "gt_masks": ["gt/rec0000.class0.pgm", "gt/rec0000.class1.pgm"]
//!     }
//!   ]
//! }
//! ```
//!
//! Paths are relative to the manifest's directory. `gt_masks` is optional and,
//! when present, lists one mask file per label in label order. Loading
//! validates headers and keypoint bounds up front so pipeline code can assume
//! records are well formed.

use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use super::netpbm::read_image_dims;
use super::{DataError, Keypoint, KeypointAnnotation, LabelSpace};

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct ManifestFile {
    labels: Vec<String>,
    records: Vec<RecordEntry>,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct RecordEntry {
    image: String,
    #[serde(default)]
    keypoints: Vec<Keypoint>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    gt_masks: Option<Vec<String>>,
}

/// One dataset entry with paths resolved against the manifest directory.
#[derive(Debug, Clone)]
pub struct ManifestRecord {
    pub image: PathBuf,
    pub keypoints: KeypointAnnotation,
    pub gt_masks: Option<Vec<PathBuf>>,
    pub width: usize,
    pub height: usize,
}

/// A loaded and validated dataset listing.
#[derive(Debug, Clone)]
pub struct DatasetManifest {
    pub labels: LabelSpace,
    pub records: Vec<ManifestRecord>,
}

fn record_err(index: usize, detail: impl Into<String>) -> DataError {
    DataError::ManifestRecord {
        index,
        detail: detail.into(),
    }
}

/// Load `path`, resolve its record paths, and validate headers, keypoint
/// bounds and ground-truth plane dimensions.
pub fn load_manifest(path: &Path) -> Result<DatasetManifest, DataError> {
    let text = fs::read_to_string(path).map_err(|e| DataError::io(path, e))?;
    let file: ManifestFile =
        serde_json::from_str(&text).map_err(|e| DataError::ManifestParse {
            path: path.display().to_string(),
            detail: e.to_string(),
        })?;
    let labels = LabelSpace::new(file.labels)?;
    let base = path.parent().unwrap_or_else(|| Path::new("."));

    let mut records = Vec::with_capacity(file.records.len());
    for (index, entry) in file.records.into_iter().enumerate() {
        let image = base.join(&entry.image);
        let dims = read_image_dims(&image)
            .map_err(|e| record_err(index, format!("image `{}`: {e}", entry.image)))?;
        let keypoints = KeypointAnnotation::new(entry.keypoints);
        keypoints
            .validate(dims.width, dims.height, labels.count())
            .map_err(|detail| record_err(index, detail))?;
        let gt_masks = match entry.gt_masks {
            None => None,
            Some(rel_paths) => {
                if rel_paths.len() != labels.count() {
                    return Err(record_err(
                        index,
                        format!(
                            "gt_masks lists {} files, label space has {}",
                            rel_paths.len(),
                            labels.count()
                        ),
                    ));
                }
                let mut resolved = Vec::with_capacity(rel_paths.len());
                for rel in &rel_paths {
                    let p = base.join(rel);
                    let mask_dims = read_image_dims(&p)
                        .map_err(|e| record_err(index, format!("gt mask `{rel}`: {e}")))?;
                    if mask_dims.channels != 1 {
                        return Err(record_err(
                            index,
                            format!("gt mask `{rel}` is not single channel"),
                        ));
                    }
                    if mask_dims.width != dims.width || mask_dims.height != dims.height {
                        return Err(record_err(
                            index,
                            format!(
                                "gt mask `{rel}` is {}x{}, image is {}x{}",
                                mask_dims.width, mask_dims.height, dims.width, dims.height
                            ),
                        ));
                    }
                    resolved.push(p);
                }
                Some(resolved)
            }
        };
        records.push(ManifestRecord {
            image,
            keypoints,
            gt_masks,
            width: dims.width,
            height: dims.height,
        });
    }
    Ok(DatasetManifest { labels, records })
}

/// Serialize a manifest to `path`, relativizing record paths against the
/// manifest directory where possible.
pub fn write_manifest(manifest: &DatasetManifest, path: &Path) -> Result<(), DataError> {
    let base = path.parent().unwrap_or_else(|| Path::new("."));
    let relativize = |p: &Path| -> String {
        p.strip_prefix(base).unwrap_or(p).display().to_string()
    };
    let file = ManifestFile {
        labels: manifest.labels.names().to_vec(),
        records: manifest
            .records
            .iter()
            .map(|r| RecordEntry {
                image: relativize(&r.image),
                keypoints: r.keypoints.entries().to_vec(),
                gt_masks: r
                    .gt_masks
                    .as_ref()
                    .map(|paths| paths.iter().map(|p| relativize(p)).collect()),
            })
            .collect(),
    };
    let text = serde_json::to_string_pretty(&file).expect("manifest serialization");
    fs::write(path, text).map_err(|e| DataError::io(path, e))
}
