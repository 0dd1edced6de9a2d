//! Newline-delimited JSON dataset manifests.

use std::collections::{BTreeMap, HashSet};
use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use super::io::{min_max_normalize, read_grid, read_png8, resize_bilinear, resize_nearest, write_file};
use super::slice::{ImageSlice, LabelMap};
use crate::error::{Error, Result};

pub const DEFAULT_FOLDS: u32 = 5;

/// One manifest line.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ManifestRecord {
    pub slice_id: String,
    /// Image file, relative to the manifest's directory unless absolute.
    pub path: String,
    pub patient_id: String,
    pub fold: u32,
    pub class_pixel_counts: BTreeMap<u32, u64>,
}

impl ManifestRecord {
    pub fn class_count(&self, class: u32) -> u64 {
        self.class_pixel_counts.get(&class).copied().unwrap_or(0)
    }

    pub fn contains_any(&self, classes: &std::collections::BTreeSet<u32>) -> bool {
        classes.iter().any(|&c| self.class_count(c) > 0)
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct DatasetManifest {
    pub records: Vec<ManifestRecord>,
    /// Directory relative record paths are resolved against.
    pub base_dir: PathBuf,
    pub n_folds: u32,
}

impl DatasetManifest {
    pub fn new(records: Vec<ManifestRecord>, base_dir: PathBuf, n_folds: u32) -> Result<Self> {
        let m = Self {
            records,
            base_dir,
            n_folds,
        };
        m.validate()?;
        Ok(m)
    }

    pub fn validate(&self) -> Result<()> {
        if self.n_folds == 0 {
            return Err(Error::Validation("n_folds must be positive".into()));
        }
        let mut seen = HashSet::new();
        for r in &self.records {
            if !seen.insert(r.slice_id.as_str()) {
                return Err(Error::Validation(format!("duplicate slice_id {:?}", r.slice_id)));
            }
            if r.fold >= self.n_folds {
                return Err(Error::Validation(format!(
                    "slice {:?} has fold {} outside [0, {})",
                    r.slice_id, r.fold, self.n_folds
                )));
            }
        }
        Ok(())
    }

    pub fn len(&self) -> usize {
        self.records.len()
    }

    pub fn is_empty(&self) -> bool {
        self.records.is_empty()
    }

    pub fn get(&self, slice_id: &str) -> Option<&ManifestRecord> {
        self.records.iter().find(|r| r.slice_id == slice_id)
    }

    /// Every class id with a positive count somewhere, background excluded.
    pub fn classes(&self) -> std::collections::BTreeSet<u32> {
        self.records
            .iter()
            .flat_map(|r| r.class_pixel_counts.iter())
            .filter(|(&c, &n)| c != 0 && n > 0)
            .map(|(&c, _)| c)
            .collect()
    }

    pub fn image_path(&self, record: &ManifestRecord) -> PathBuf {
        let p = Path::new(&record.path);
        if p.is_absolute() {
            p.to_path_buf()
        } else {
            self.base_dir.join(p)
        }
    }

    /// Label map location: the image path with `_label.png` replacing its
    /// extension.
    pub fn label_path(&self, record: &ManifestRecord) -> PathBuf {
        label_path_for(&self.image_path(record))
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let mut out = String::new();
        for r in &self.records {
            out.push_str(&serde_json::to_string(r)?);
            out.push('\n');
        }
        write_file(path, out.as_bytes())
    }
}

pub fn label_path_for(image_path: &Path) -> PathBuf {
    let stem = image_path
        .file_stem()
        .map(|s| s.to_string_lossy().into_owned())
        .unwrap_or_default();
    image_path.with_file_name(format!("{stem}_label.png"))
}

/// Parses and validates a manifest with the default fold count.
pub fn load_manifest(path: &Path) -> Result<DatasetManifest> {
    load_manifest_with_folds(path, DEFAULT_FOLDS)
}

pub fn load_manifest_with_folds(path: &Path, n_folds: u32) -> Result<DatasetManifest> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let mut records = Vec::new();
    for (i, line) in text.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let record: ManifestRecord = serde_json::from_str(line).map_err(|e| Error::Parse {
            path: path.to_path_buf(),
            line: i + 1,
            message: e.to_string(),
        })?;
        records.push(record);
    }
    let base_dir = path.parent().map(Path::to_path_buf).unwrap_or_default();
    DatasetManifest::new(records, base_dir, n_folds)
}

/// Loads, resizes (bilinear) and min-max normalizes one slice.
///
/// A zero-dynamic-range image yields an all-zero slice.
pub fn load_slice(
    manifest: &DatasetManifest,
    record: &ManifestRecord,
    target_size: usize,
    replicate_channels: usize,
) -> Result<ImageSlice> {
    if target_size == 0 {
        return Err(Error::Argument("target_size must be positive".into()));
    }
    let grid = read_grid(&manifest.image_path(record))?;
    let resized = resize_bilinear(&grid, target_size, target_size);
    let pixels = min_max_normalize(&resized.values);
    let slice = ImageSlice::from_valid(record.slice_id.clone(), target_size, target_size, pixels);
    if replicate_channels == 1 {
        Ok(slice)
    } else {
        slice.replicate_channels(replicate_channels)
    }
}

/// Loads the label map for `record`, resized with nearest-neighbour sampling.
pub fn load_labels(manifest: &DatasetManifest, record: &ManifestRecord, target_size: usize) -> Result<LabelMap> {
    let (h, w, labels) = read_png8(&manifest.label_path(record))?;
    let resized = resize_nearest(&labels, h, w, target_size, target_size);
    LabelMap::new(target_size, target_size, resized)
}
