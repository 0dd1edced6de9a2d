//! Log of every slice consumed by a training step, and the check that no
//! test-class ground truth reached training.

use std::collections::{BTreeMap, BTreeSet};
use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::data::io::write_file;
use crate::data::{load_labels, DatasetManifest};
use crate::error::{Error, Result};

/// One training step's inputs.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct AuditEntry {
    pub phase: String,
    pub step: usize,
    pub slice_ids: Vec<String>,
    /// Class whose ground-truth mask supervised the step, if any.
    pub gt_class: Option<u32>,
}

#[derive(Clone, Debug, Default)]
pub struct AuditLog {
    entries: Vec<AuditEntry>,
}

impl AuditLog {
    pub fn push(&mut self, phase: &str, step: usize, slice_ids: Vec<String>, gt_class: Option<u32>) {
        self.entries.push(AuditEntry {
            phase: phase.to_string(),
            step,
            slice_ids,
            gt_class,
        });
    }

    pub fn entries(&self) -> &[AuditEntry] {
        &self.entries
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let mut out = String::new();
        for e in &self.entries {
            out.push_str(&serde_json::to_string(e)?);
            out.push('\n');
        }
        write_file(path, out.as_bytes())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let mut entries = Vec::new();
        for (i, line) in text.lines().enumerate().filter(|(_, l)| !l.trim().is_empty()) {
            entries.push(serde_json::from_str(line).map_err(|e| Error::Parse {
                path: path.to_path_buf(),
                line: i + 1,
                message: e.to_string(),
            })?);
        }
        Ok(Self { entries })
    }
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct PurityReport {
    pub entries_checked: usize,
    pub slices_checked: usize,
    /// Test-class pixels in the label maps of all slices fed to training.
    pub test_class_pixels: u64,
    /// Steps supervised by a test-class mask.
    pub test_class_supervision: usize,
    pub offending_slices: BTreeSet<String>,
}

impl PurityReport {
    pub fn is_clean(&self) -> bool {
        self.test_class_pixels == 0 && self.test_class_supervision == 0
    }
}

/// Re-reads the label map of every logged slice at `image_size` and counts
/// test-class pixels.
pub fn check_purity(
    manifest: &DatasetManifest,
    entries: &[AuditEntry],
    test_classes: &BTreeSet<u32>,
    image_size: usize,
) -> Result<PurityReport> {
    let mut per_slice: BTreeMap<&str, u64> = BTreeMap::new();
    let mut report = PurityReport {
        entries_checked: entries.len(),
        slices_checked: 0,
        test_class_pixels: 0,
        test_class_supervision: 0,
        offending_slices: BTreeSet::new(),
    };
    for e in entries {
        if e.gt_class.is_some_and(|c| test_classes.contains(&c)) {
            report.test_class_supervision += 1;
        }
        for id in &e.slice_ids {
            let count = match per_slice.get(id.as_str()) {
                Some(&n) => n,
                None => {
                    let record = manifest
                        .get(id)
                        .ok_or_else(|| Error::Data(format!("audit names unknown slice {id:?}")))?;
                    let labels = load_labels(manifest, record, image_size)?;
                    let n = test_classes.iter().map(|&c| labels.class_count(c) as u64).sum();
                    per_slice.insert(id, n);
                    n
                }
            };
            report.slices_checked += 1;
            report.test_class_pixels += count;
            if count > 0 {
                report.offending_slices.insert(id.clone());
            }
        }
    }
    Ok(report)
}
