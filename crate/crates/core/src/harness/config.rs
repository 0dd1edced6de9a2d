use std::collections::BTreeSet;
use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use serde_json::Value;
use sha2::{Digest, Sha256};

use crate::data::Setting;
use crate::encoder::EncoderConfig;
use crate::error::{Error, Result};
use crate::fewshot::{Stage2Config, Unfreeze};
use crate::optim::SgdConfig;
use crate::stage1::Stage1Config;
use crate::superpixel::SuperpixelConfig;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DataConfig {
    pub manifest: PathBuf,
    pub image_size: usize,
    pub setting: Setting,
    pub fold: u32,
    pub n_folds: u32,
    pub test_classes: BTreeSet<u32>,
}

impl Default for DataConfig {
    fn default() -> Self {
        Self {
            manifest: PathBuf::from("data/manifest.jsonl"),
            image_size: 32,
            setting: Setting::Two,
            fold: 0,
            n_folds: crate::data::manifest::DEFAULT_FOLDS,
            test_classes: BTreeSet::from([1, 2]),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct FinetuneConfig {
    pub iterations: usize,
    /// Chance that an iteration uses a ground-truth episode rather than a
    /// superpixel one.
    pub gt_probability: f64,
    pub unfreeze: Unfreeze,
    pub optimizer: SgdConfig,
}

impl Default for FinetuneConfig {
    fn default() -> Self {
        Self {
            iterations: 500,
            gt_probability: 0.5,
            unfreeze: Unfreeze::All,
            optimizer: SgdConfig {
                lr: 0.005,
                ..SgdConfig::default()
            },
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct MonitorConfig {
    /// Fixed episodes scored at the start and end of episodic phases.
    pub holdout_episodes: usize,
}

impl Default for MonitorConfig {
    fn default() -> Self {
        Self { holdout_episodes: 16 }
    }
}

/// Everything a pipeline run depends on.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PipelineConfig {
    pub seed: u64,
    pub out_dir: PathBuf,
    pub data: DataConfig,
    pub encoder: EncoderConfig,
    pub superpixel: SuperpixelConfig,
    pub stage1: Stage1Config,
    pub stage2: Stage2Config,
    pub finetune: FinetuneConfig,
    pub monitor: MonitorConfig,
}

impl Default for PipelineConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            out_dir: PathBuf::from("runs/default"),
            data: DataConfig::default(),
            encoder: EncoderConfig::default(),
            superpixel: SuperpixelConfig::default(),
            stage1: Stage1Config::default(),
            stage2: Stage2Config::default(),
            finetune: FinetuneConfig::default(),
            monitor: MonitorConfig::default(),
        }
    }
}

impl PipelineConfig {
    pub fn validate(&self) -> Result<()> {
        self.encoder.validate()?;
        self.stage1.validate()?;
        self.stage2.validate()?;
        self.superpixel.felz.validate()?;
        self.finetune.optimizer.validate()?;
        if self.data.image_size != self.encoder.input_size {
            return Err(Error::Config(format!(
                "data.image_size {} differs from encoder.input_size {}",
                self.data.image_size, self.encoder.input_size
            )));
        }
        if !(0.0..=1.0).contains(&self.finetune.gt_probability) {
            return Err(Error::Config(format!(
                "finetune.gt_probability must lie in [0, 1], got {}",
                self.finetune.gt_probability
            )));
        }
        if self.data.test_classes.is_empty() {
            return Err(Error::Config("data.test_classes must not be empty".into()));
        }
        if self.data.fold >= self.data.n_folds {
            return Err(Error::Config(format!(
                "data.fold {} outside [0, {})",
                self.data.fold, self.data.n_folds
            )));
        }
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        serde_json::from_str(&text).map_err(|e| Error::Config(format!("{}: {e}", path.display())))
    }

    /// Applies `key.path=value` overrides; values parse as JSON and fall
    /// back to plain strings.
    pub fn with_overrides(self, overrides: &[String]) -> Result<Self> {
        if overrides.is_empty() {
            return Ok(self);
        }
        let mut doc = serde_json::to_value(&self)?;
        for o in overrides {
            let (key, raw) = o
                .split_once('=')
                .ok_or_else(|| Error::Config(format!("override {o:?} is not key=value")))?;
            let value = serde_json::from_str(raw).unwrap_or_else(|_| Value::String(raw.to_string()));
            set_path(&mut doc, key, value)?;
        }
        serde_json::from_value(doc).map_err(|e| Error::Config(format!("after overrides: {e}")))
    }

    /// SHA-256 of the canonical JSON of every setting that affects results
    /// (the output directory is excluded).
    pub fn fingerprint(&self) -> String {
        let mut c = self.clone();
        c.out_dir = PathBuf::new();
        let json = serde_json::to_string(&c).expect("config serializes");
        hex(&Sha256::digest(json.as_bytes()))
    }
}

fn set_path(doc: &mut Value, key: &str, value: Value) -> Result<()> {
    let mut cur = doc;
    let parts: Vec<&str> = key.split('.').collect();
    for (i, part) in parts.iter().enumerate() {
        let obj = cur
            .as_object_mut()
            .ok_or_else(|| Error::Config(format!("override {key:?}: {part:?} is not inside an object")))?;
        if !obj.contains_key(*part) {
            return Err(Error::Config(format!("override {key:?}: unknown key {part:?}")));
        }
        if i + 1 == parts.len() {
            obj.insert((*part).to_string(), value);
            return Ok(());
        }
        cur = obj.get_mut(*part).expect("checked");
    }
    Err(Error::Config("empty override key".into()))
}

pub fn hex(bytes: &[u8]) -> String {
    bytes.iter().map(|b| format!("{b:02x}")).collect()
}
