use std::collections::BTreeSet;

use serde::{Deserialize, Serialize};

use super::manifest::DatasetManifest;
use crate::error::{Error, Result};

/// How test classes are kept away from training.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(try_from = "u8", into = "u8")]
pub enum Setting {
    /// Test-class pixels may appear in training images, but only as
    /// unlabeled background.
    One,
    /// Slices containing any test-class pixel are dropped from training.
    Two,
}

impl TryFrom<u8> for Setting {
    type Error = String;

    fn try_from(v: u8) -> std::result::Result<Self, String> {
        match v {
            1 => Ok(Setting::One),
            2 => Ok(Setting::Two),
            _ => Err(format!("setting must be 1 or 2, got {v}")),
        }
    }
}

impl From<Setting> for u8 {
    fn from(s: Setting) -> u8 {
        match s {
            Setting::One => 1,
            Setting::Two => 2,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct SplitPlan {
    pub setting: Setting,
    pub fold: u32,
    pub test_classes: BTreeSet<u32>,
    pub train_slice_ids: Vec<String>,
    pub test_slice_ids: Vec<String>,
}

impl SplitPlan {
    /// Classes that may be used as labeled foreground during training.
    pub fn train_classes(&self, manifest: &DatasetManifest) -> BTreeSet<u32> {
        manifest.classes().difference(&self.test_classes).copied().collect()
    }
}

/// Patient-level cross-validation split: slices whose record carries `fold`
/// are the test set, everything else trains (filtered under setting 2).
pub fn build_split(
    manifest: &DatasetManifest,
    fold: u32,
    setting: Setting,
    test_classes: &BTreeSet<u32>,
) -> Result<SplitPlan> {
    if fold >= manifest.n_folds {
        return Err(Error::Config(format!("fold {fold} outside [0, {})", manifest.n_folds)));
    }
    if test_classes.is_empty() {
        return Err(Error::Config("test_classes must not be empty".into()));
    }
    let mut train = Vec::new();
    let mut test = Vec::new();
    for r in &manifest.records {
        if r.fold == fold {
            test.push(r.slice_id.clone());
        } else if setting == Setting::One || !r.contains_any(test_classes) {
            train.push(r.slice_id.clone());
        }
    }
    if train.is_empty() {
        return Err(Error::Config(format!(
            "fold {fold} under setting {} leaves no training slices",
            u8::from(setting)
        )));
    }
    Ok(SplitPlan {
        setting,
        fold,
        test_classes: test_classes.clone(),
        train_slice_ids: train,
        test_slice_ids: test,
    })
}
