//! One-way one-shot evaluation on the held-out fold.
//!
//! For each test class the support is the test-fold slice with the most
//! pixels of that class; every slice of another test-fold patient that
//! contains the class is a query.

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use super::config::{hex, PipelineConfig};
use super::phases::save_report;
use crate::data::{build_split, load_labels, load_manifest_with_folds, load_slice, Mask};
use crate::encoder::load_checkpoint;
use crate::error::{Error, Result};
use crate::fewshot::predict_episode;
use crate::metrics::{dice, mean_std};
use crate::superpixel::FewShotEpisode;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct QueryResult {
    pub query_slice: String,
    pub patient_id: String,
    pub dice: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ClassResult {
    pub support_slice: String,
    pub support_patient: String,
    pub mean: f64,
    pub std: f64,
    pub episodes: Vec<QueryResult>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FoldResult {
    pub mean: Option<f64>,
    pub classes: BTreeMap<u32, f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub config_fingerprint: String,
    /// SHA-256 of the evaluated checkpoint file, when one was used.
    pub checkpoint_sha256: Option<String>,
    pub setting: u8,
    pub test_classes: Vec<u32>,
    pub classes: BTreeMap<u32, ClassResult>,
    pub per_fold: BTreeMap<u32, FoldResult>,
    /// Mean over evaluated classes of their mean Dice.
    pub mean_dice: Option<f64>,
    pub warnings: Vec<String>,
}

/// Evaluates `predict` on every test-class episode of the configured fold.
pub fn evaluate_with<F>(cfg: &PipelineConfig, mut predict: F) -> Result<EvalReport>
where
    F: FnMut(&FewShotEpisode) -> Result<Mask>,
{
    cfg.validate()?;
    let manifest = load_manifest_with_folds(&cfg.data.manifest, cfg.data.n_folds)?;
    let split = build_split(&manifest, cfg.data.fold, cfg.data.setting, &cfg.data.test_classes)?;
    if split.test_slice_ids.is_empty() {
        return Err(Error::Config(format!("fold {} has no test slices", cfg.data.fold)));
    }
    let size = cfg.data.image_size;
    let mut slices = Vec::with_capacity(split.test_slice_ids.len());
    for id in &split.test_slice_ids {
        let r = manifest.get(id).expect("split ids come from the manifest");
        let img = load_slice(&manifest, r, size, cfg.encoder.in_channels)?;
        let labels = load_labels(&manifest, r, size)?;
        slices.push((r, img, labels));
    }
    let mut classes = BTreeMap::new();
    let mut warnings = Vec::new();
    for &c in &cfg.data.test_classes {
        let with: Vec<usize> = (0..slices.len()).filter(|&i| slices[i].2.class_count(c) > 0).collect();
        let mut patients: Vec<&str> = with.iter().map(|&i| slices[i].0.patient_id.as_str()).collect();
        patients.sort_unstable();
        patients.dedup();
        if patients.len() < 2 {
            let msg = format!(
                "class {c} skipped: present in {} test patient(s), need 2",
                patients.len()
            );
            eprintln!("warning: {msg}");
            warnings.push(msg);
            continue;
        }
        // Largest foreground wins; ties keep the earlier slice.
        let support = with
            .iter()
            .copied()
            .fold(None::<usize>, |best, i| match best {
                Some(b) if slices[b].2.class_count(c) >= slices[i].2.class_count(c) => Some(b),
                _ => Some(i),
            })
            .expect("at least two patients");
        let (srec, simg, slab) = &slices[support];
        let smask = slab.class_mask(c);
        let mut episodes = Vec::new();
        for &q in &with {
            let (qrec, qimg, qlab) = &slices[q];
            if qrec.patient_id == srec.patient_id {
                continue;
            }
            let ep = FewShotEpisode::from_pair(simg.clone(), smask.clone(), qimg.clone(), qlab.class_mask(c))?;
            let pred = predict(&ep)?;
            episodes.push(QueryResult {
                query_slice: qrec.slice_id.clone(),
                patient_id: qrec.patient_id.clone(),
                dice: dice(&pred, &ep.query_mask)?,
            });
        }
        let d: Vec<f64> = episodes.iter().map(|e| e.dice).collect();
        let (mean, std) = mean_std(&d);
        classes.insert(
            c,
            ClassResult {
                support_slice: srec.slice_id.clone(),
                support_patient: srec.patient_id.clone(),
                mean,
                std,
                episodes,
            },
        );
    }
    let class_means: BTreeMap<u32, f64> = classes.iter().map(|(&c, r)| (c, r.mean)).collect();
    let mean_dice = (!class_means.is_empty()).then(|| mean_std(&class_means.values().copied().collect::<Vec<_>>()).0);
    let per_fold = BTreeMap::from([(
        cfg.data.fold,
        FoldResult {
            mean: mean_dice,
            classes: class_means,
        },
    )]);
    Ok(EvalReport {
        config_fingerprint: cfg.fingerprint(),
        checkpoint_sha256: None,
        setting: cfg.data.setting.into(),
        test_classes: cfg.data.test_classes.iter().copied().collect(),
        classes,
        per_fold,
        mean_dice,
        warnings,
    })
}

/// Evaluates a checkpoint and writes `report.json` into the output
/// directory.
pub fn evaluate(cfg: &PipelineConfig, checkpoint: &Path) -> Result<EvalReport> {
    let encoder = load_checkpoint(checkpoint)?;
    let bytes = fs::read(checkpoint).map_err(|e| Error::io(checkpoint, e))?;
    let mut report = evaluate_with(cfg, |ep| predict_episode(&encoder, ep, &cfg.stage2))?;
    report.checkpoint_sha256 = Some(hex(&Sha256::digest(&bytes)));
    save_report(cfg, &report)?;
    Ok(report)
}

/// Cross-validation summary over per-fold reports.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CrossValidationReport {
    pub config_fingerprint: String,
    pub per_fold: BTreeMap<u32, FoldResult>,
    /// Per-class mean over the folds that evaluated the class.
    pub classes: BTreeMap<u32, f64>,
    /// Mean of the fold means.
    pub mean_dice: Option<f64>,
    pub warnings: Vec<String>,
}

pub fn merge_folds(cfg: &PipelineConfig, reports: &[EvalReport]) -> CrossValidationReport {
    let per_fold: BTreeMap<u32, FoldResult> = reports.iter().flat_map(|r| r.per_fold.clone()).collect();
    let mut by_class: BTreeMap<u32, Vec<f64>> = BTreeMap::new();
    for f in per_fold.values() {
        for (&c, &d) in &f.classes {
            by_class.entry(c).or_default().push(d);
        }
    }
    let fold_means: Vec<f64> = per_fold.values().filter_map(|f| f.mean).collect();
    CrossValidationReport {
        config_fingerprint: cfg.fingerprint(),
        classes: by_class.into_iter().map(|(c, v)| (c, mean_std(&v).0)).collect(),
        mean_dice: (!fold_means.is_empty()).then(|| mean_std(&fold_means).0),
        per_fold,
        warnings: reports.iter().flat_map(|r| r.warnings.clone()).collect(),
    }
}
