//! The three training phases and the full pipeline.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};
use std::time::Instant;

use rand::Rng;
use serde::Serialize;

use super::audit::AuditLog;
use super::config::PipelineConfig;
use super::evaluate::{evaluate, merge_folds, CrossValidationReport, EvalReport};
use crate::data::io::write_file;
use crate::data::{
    build_split, load_labels, load_manifest_with_folds, load_slice, DatasetManifest, ImageSlice, LabelMap, SplitPlan,
};
use crate::encoder::{load_checkpoint, save_checkpoint, Encoder};
use crate::error::{Error, Result};
use crate::fewshot::{episode_dice, Stage2Config, Stage2Trainer, Unfreeze};
use crate::metrics::mean_std;
use crate::rng::{derive_seed, rng_from_seed, stream};
use crate::stage1::train_stage1;
use crate::superpixel::{
    build_episode, felzenszwalb_segment, select_pseudo_label, FewShotEpisode, SuperpixelConfig, SuperpixelMap,
};

pub const STAGE1_CHECKPOINT: &str = "stage1.safetensors";
pub const STAGE2_CHECKPOINT: &str = "stage2.safetensors";
pub const FINETUNE_CHECKPOINT: &str = "finetune.safetensors";
pub const REPORT_NAME: &str = "report.json";
pub const TIMINGS_NAME: &str = "timings.json";
pub const CV_REPORT_NAME: &str = "cv_report.json";

/// Consecutive failed episode draws tolerated before giving up.
pub const MAX_EPISODE_FAILURES: usize = 100;

/// Training slices of one split, loaded at the configured size.
pub struct Dataset {
    pub manifest: DatasetManifest,
    pub split: SplitPlan,
    pub train: Vec<ImageSlice>,
}

impl Dataset {
    pub fn load(cfg: &PipelineConfig) -> Result<Self> {
        let manifest = load_manifest_with_folds(&cfg.data.manifest, cfg.data.n_folds)?;
        let split = build_split(&manifest, cfg.data.fold, cfg.data.setting, &cfg.data.test_classes)?;
        let train = split
            .train_slice_ids
            .iter()
            .map(|id| {
                let r = manifest.get(id).expect("split ids come from the manifest");
                load_slice(&manifest, r, cfg.data.image_size, cfg.encoder.in_channels)
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(Self { manifest, split, train })
    }

    /// Label maps of the training slices.
    pub fn train_labels(&self, size: usize) -> Result<Vec<LabelMap>> {
        self.split
            .train_slice_ids
            .iter()
            .map(|id| load_labels(&self.manifest, self.manifest.get(id).expect("known id"), size))
            .collect()
    }
}

fn csv<T: Serialize>(header: &str, rows: &[T]) -> Result<String> {
    let mut out = String::from(header);
    out.push('\n');
    for r in rows {
        let v = serde_json::to_value(r)?;
        let cells: Vec<String> = header
            .split(',')
            .map(|k| v.get(k).map(|x| x.to_string()).unwrap_or_default())
            .collect();
        let _ = writeln!(out, "{}", cells.join(","));
    }
    Ok(out)
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let mut s = serde_json::to_string_pretty(value)?;
    s.push('\n');
    write_file(path, s.as_bytes())
}

fn copy_checkpoint(from: &Path, to: &Path) -> Result<PathBuf> {
    if from != to {
        let bytes = fs::read(from).map_err(|e| Error::io(from, e))?;
        write_file(to, &bytes)?;
    }
    Ok(to.to_path_buf())
}

/// Contrastive pre-training from a seeded random encoder. Writes the
/// checkpoint, `stage1_loss.csv` and `audit_stage1.jsonl`.
pub fn run_stage1(cfg: &PipelineConfig) -> Result<PathBuf> {
    cfg.validate()?;
    let out = cfg.out_dir.join(STAGE1_CHECKPOINT);
    let init = Encoder::init(cfg.encoder.clone(), cfg.seed)?;
    let mut audit = AuditLog::default();
    let mut curve = Vec::new();
    let encoder = if cfg.stage1.iterations == 0 {
        init
    } else {
        let data = Dataset::load(cfg)?;
        train_stage1(init, &data.train, &cfg.stage1, cfg.seed, |s, batch| {
            audit.push(
                "stage1",
                s.step,
                batch.iter().map(|b| b.slice_id().to_string()).collect(),
                None,
            );
            curve.push(*s);
        })?
    };
    save_checkpoint(&encoder, &out)?;
    write_file(
        &cfg.out_dir.join("stage1_loss.csv"),
        csv("step,lr,loss,dense,global", &curve)?.as_bytes(),
    )?;
    audit.save(&cfg.out_dir.join("audit_stage1.jsonl"))?;
    Ok(out)
}

/// Lazily computed superpixels of the training images.
struct SuperpixelCache<'a> {
    images: &'a [ImageSlice],
    config: &'a SuperpixelConfig,
    maps: Vec<Option<SuperpixelMap>>,
}

impl<'a> SuperpixelCache<'a> {
    fn new(images: &'a [ImageSlice], config: &'a SuperpixelConfig) -> Self {
        Self {
            images,
            config,
            maps: vec![None; images.len()],
        }
    }

    fn get(&mut self, i: usize) -> Result<&SuperpixelMap> {
        if self.maps[i].is_none() {
            self.maps[i] = Some(felzenszwalb_segment(&self.images[i], &self.config.felz)?);
        }
        Ok(self.maps[i].as_ref().expect("filled above"))
    }
}

fn is_episode_failure(e: &Error) -> bool {
    matches!(
        e,
        Error::SelectionExhausted { .. } | Error::EpisodeConstruction(_) | Error::EpisodeSkip(_)
    )
}

/// Superpixel episode from a random training image. Returns the image
/// index with the episode.
fn pseudo_episode(cache: &mut SuperpixelCache<'_>, spec: &Stage2Config, seed: u64) -> Result<(usize, FewShotEpisode)> {
    let i = rng_from_seed(seed).random_range(0..cache.images.len());
    let min_fg = cache.config.min_fg;
    let mask = select_pseudo_label(cache.get(i)?, min_fg, derive_seed(seed, stream::STAGE2, 1))?;
    let ep = build_episode(
        &cache.images[i],
        &mask,
        &spec.augment,
        derive_seed(seed, stream::STAGE2, 2),
    )?;
    Ok((i, ep))
}

/// Ground-truth episode of one training class: support and query from two
/// distinct slices when possible.
struct GtPool {
    /// Training slices containing each class.
    by_class: BTreeMap<u32, Vec<usize>>,
    labels: Vec<LabelMap>,
}

impl GtPool {
    fn new(data: &Dataset, cfg: &PipelineConfig) -> Result<Self> {
        let labels = data.train_labels(cfg.data.image_size)?;
        let train_classes = data.split.train_classes(&data.manifest);
        let mut by_class: BTreeMap<u32, Vec<usize>> = BTreeMap::new();
        for &c in &train_classes {
            let idx: Vec<usize> = (0..labels.len()).filter(|&i| labels[i].class_count(c) > 0).collect();
            if !idx.is_empty() {
                by_class.insert(c, idx);
            }
        }
        Ok(Self { by_class, labels })
    }

    fn episode(&self, images: &[ImageSlice], seed: u64) -> Result<(u32, usize, usize, FewShotEpisode)> {
        let mut rng = rng_from_seed(seed);
        let classes: Vec<u32> = self.by_class.keys().copied().collect();
        let c = classes[rng.random_range(0..classes.len())];
        let idx = &self.by_class[&c];
        let s = idx[rng.random_range(0..idx.len())];
        let q = if idx.len() > 1 {
            let others: Vec<usize> = idx.iter().copied().filter(|&i| i != s).collect();
            others[rng.random_range(0..others.len())]
        } else {
            s
        };
        let ep = FewShotEpisode::from_pair(
            images[s].clone(),
            self.labels[s].class_mask(c),
            images[q].clone(),
            self.labels[q].class_mask(c),
        )?;
        Ok((c, s, q, ep))
    }
}

#[derive(Clone, Copy, Debug, Serialize)]
struct EpisodicRow {
    step: usize,
    lr: f64,
    loss: f64,
    ce: f64,
    par: f64,
    gt: bool,
}

/// Monitoring results of an episodic phase.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct PhaseMetrics {
    pub steps: usize,
    pub failed_draws: usize,
    pub holdout_episodes: usize,
    pub holdout_dice_start: Option<f64>,
    pub holdout_dice_end: Option<f64>,
}

fn mean_dice(encoder: &Encoder, episodes: &[FewShotEpisode], cfg: &Stage2Config) -> Result<Option<f64>> {
    if episodes.is_empty() {
        return Ok(None);
    }
    let d = episodes
        .iter()
        .map(|e| episode_dice(encoder, e, cfg))
        .collect::<Result<Vec<_>>>()?;
    Ok(Some(mean_std(&d).0))
}

fn draw_holdout<F>(n: usize, seed: u64, mut draw: F) -> Result<Vec<FewShotEpisode>>
where
    F: FnMut(u64) -> Result<FewShotEpisode>,
{
    let mut out = Vec::with_capacity(n);
    let mut attempt = 0u64;
    let mut failures = 0;
    while out.len() < n {
        match draw(derive_seed(seed, stream::HOLDOUT, attempt)) {
            Ok(ep) => {
                out.push(ep);
                failures = 0;
            }
            Err(e) if is_episode_failure(&e) => {
                failures += 1;
                if failures > MAX_EPISODE_FAILURES {
                    return Err(Error::Data(format!("could not draw held-out episodes: {e}")));
                }
            }
            Err(e) => return Err(e),
        }
        attempt += 1;
    }
    Ok(out)
}

/// Episodic training on superpixel pseudo labels, starting from
/// `init_checkpoint`.
pub fn run_stage2(cfg: &PipelineConfig, init_checkpoint: &Path) -> Result<PathBuf> {
    cfg.validate()?;
    let out = cfg.out_dir.join(STAGE2_CHECKPOINT);
    if cfg.stage2.iterations == 0 {
        AuditLog::default().save(&cfg.out_dir.join("audit_stage2.jsonl"))?;
        return copy_checkpoint(init_checkpoint, &out);
    }
    let encoder = load_checkpoint(init_checkpoint)?;
    let data = Dataset::load(cfg)?;
    let mut cache = SuperpixelCache::new(&data.train, &cfg.superpixel);
    let root = derive_seed(cfg.seed, stream::STAGE2, 0);
    let holdout = draw_holdout(cfg.monitor.holdout_episodes, root, |s| {
        pseudo_episode(&mut cache, &cfg.stage2, s).map(|(_, e)| e)
    })?;
    let start = mean_dice(&encoder, &holdout, &cfg.stage2)?;
    let total = cfg.stage2.iterations;
    let mut trainer = Stage2Trainer::new(encoder, cfg.stage2.clone(), Unfreeze::All, total)?;
    let mut audit = AuditLog::default();
    let mut rows = Vec::with_capacity(total);
    let (mut attempt, mut consecutive, mut failed) = (0u64, 0usize, 0usize);
    while rows.len() < total {
        let s = derive_seed(root, stream::STAGE2, attempt);
        attempt += 1;
        let step = pseudo_episode(&mut cache, &cfg.stage2, s).and_then(|(i, ep)| Ok((i, trainer.step(&ep)?)));
        match step {
            Ok((i, st)) => {
                consecutive = 0;
                audit.push("stage2", st.step, vec![data.train[i].slice_id().to_string()], None);
                rows.push(EpisodicRow {
                    step: st.step,
                    lr: st.lr,
                    loss: st.loss,
                    ce: st.ce,
                    par: st.par,
                    gt: false,
                });
            }
            Err(e) if is_episode_failure(&e) => {
                consecutive += 1;
                failed += 1;
                if consecutive > MAX_EPISODE_FAILURES {
                    return Err(Error::Data(format!(
                        "{consecutive} consecutive episode draws failed; last: {e}"
                    )));
                }
            }
            Err(e) => return Err(e),
        }
    }
    let encoder = trainer.encoder;
    let metrics = PhaseMetrics {
        steps: rows.len(),
        failed_draws: failed,
        holdout_episodes: holdout.len(),
        holdout_dice_start: start,
        holdout_dice_end: mean_dice(&encoder, &holdout, &cfg.stage2)?,
    };
    save_checkpoint(&encoder, &out)?;
    write_file(
        &cfg.out_dir.join("stage2_loss.csv"),
        csv("step,lr,loss,ce,par", &rows)?.as_bytes(),
    )?;
    write_json(&cfg.out_dir.join("stage2_metrics.json"), &metrics)?;
    audit.save(&cfg.out_dir.join("audit_stage2.jsonl"))?;
    Ok(out)
}

/// Episodic training mixing ground-truth episodes of the training classes
/// with superpixel episodes.
pub fn finetune(cfg: &PipelineConfig, checkpoint: &Path) -> Result<PathBuf> {
    cfg.validate()?;
    let out = cfg.out_dir.join(FINETUNE_CHECKPOINT);
    let ft = &cfg.finetune;
    if ft.iterations == 0 {
        AuditLog::default().save(&cfg.out_dir.join("audit_finetune.jsonl"))?;
        return copy_checkpoint(checkpoint, &out);
    }
    let encoder = load_checkpoint(checkpoint)?;
    let data = Dataset::load(cfg)?;
    let gt = GtPool::new(&data, cfg)?;
    if ft.gt_probability > 0.0 && gt.by_class.is_empty() {
        return Err(Error::Config("no labeled training-class slices for fine-tuning".into()));
    }
    let mut cache = SuperpixelCache::new(&data.train, &cfg.superpixel);
    let root = derive_seed(cfg.seed, stream::FINETUNE, 0);
    let holdout = if gt.by_class.is_empty() {
        Vec::new()
    } else {
        draw_holdout(cfg.monitor.holdout_episodes, root, |s| {
            gt.episode(&data.train, s).map(|(_, _, _, e)| e)
        })?
    };
    let start = mean_dice(&encoder, &holdout, &cfg.stage2)?;
    let mut stage_cfg = cfg.stage2.clone();
    stage_cfg.optimizer = ft.optimizer.clone();
    let mut trainer = Stage2Trainer::new(encoder, stage_cfg, ft.unfreeze, ft.iterations)?;
    let mut audit = AuditLog::default();
    let mut rows = Vec::with_capacity(ft.iterations);
    let (mut attempt, mut consecutive, mut failed) = (0u64, 0usize, 0usize);
    while rows.len() < ft.iterations {
        let s = derive_seed(root, stream::FINETUNE, attempt);
        attempt += 1;
        let use_gt = rng_from_seed(s).random::<f64>() < ft.gt_probability;
        let drawn = if use_gt {
            gt.episode(&data.train, derive_seed(s, stream::FINETUNE, 1))
                .map(|(c, si, qi, ep)| (Some(c), vec![si, qi], ep))
        } else {
            pseudo_episode(&mut cache, &cfg.stage2, derive_seed(s, stream::FINETUNE, 2))
                .map(|(i, ep)| (None, vec![i], ep))
        };
        let step = drawn.and_then(|(c, idx, ep)| Ok((c, idx, trainer.step(&ep)?)));
        match step {
            Ok((c, mut idx, st)) => {
                consecutive = 0;
                idx.dedup();
                let ids = idx.iter().map(|&i| data.train[i].slice_id().to_string()).collect();
                audit.push("finetune", st.step, ids, c);
                rows.push(EpisodicRow {
                    step: st.step,
                    lr: st.lr,
                    loss: st.loss,
                    ce: st.ce,
                    par: st.par,
                    gt: use_gt,
                });
            }
            Err(e) if is_episode_failure(&e) => {
                consecutive += 1;
                failed += 1;
                if consecutive > MAX_EPISODE_FAILURES {
                    return Err(Error::Data(format!(
                        "{consecutive} consecutive episode draws failed; last: {e}"
                    )));
                }
            }
            Err(e) => return Err(e),
        }
    }
    let encoder = trainer.encoder;
    let metrics = PhaseMetrics {
        steps: rows.len(),
        failed_draws: failed,
        holdout_episodes: holdout.len(),
        holdout_dice_start: start,
        holdout_dice_end: mean_dice(&encoder, &holdout, &cfg.stage2)?,
    };
    save_checkpoint(&encoder, &out)?;
    write_file(
        &cfg.out_dir.join("finetune_loss.csv"),
        csv("step,lr,loss,ce,par,gt", &rows)?.as_bytes(),
    )?;
    write_json(&cfg.out_dir.join("finetune_metrics.json"), &metrics)?;
    audit.save(&cfg.out_dir.join("audit_finetune.jsonl"))?;
    Ok(out)
}

/// Wall-clock seconds per phase, kept apart from the reproducible report.
#[derive(Clone, Debug, Default, Serialize)]
pub struct Timings {
    pub stage1: f64,
    pub stage2: f64,
    pub finetune: f64,
    pub evaluate: f64,
}

/// Stage 1, Stage 2, fine-tuning and evaluation in sequence. Writes the
/// resolved configuration, every phase's outputs, the report and timings.
pub fn run_all(cfg: &PipelineConfig) -> Result<EvalReport> {
    cfg.validate()?;
    write_json(&cfg.out_dir.join("config.json"), cfg)?;
    let mut t = Timings::default();
    let clock = Instant::now();
    let c1 = run_stage1(cfg)?;
    t.stage1 = clock.elapsed().as_secs_f64();
    let clock = Instant::now();
    let c2 = run_stage2(cfg, &c1)?;
    t.stage2 = clock.elapsed().as_secs_f64();
    let clock = Instant::now();
    let c3 = finetune(cfg, &c2)?;
    t.finetune = clock.elapsed().as_secs_f64();
    let clock = Instant::now();
    let report = evaluate(cfg, &c3)?;
    t.evaluate = clock.elapsed().as_secs_f64();
    write_json(&cfg.out_dir.join(TIMINGS_NAME), &t)?;
    Ok(report)
}

/// The full pipeline once per fold, each in `out_dir/fold{k}`, followed by
/// `cv_report.json` in `out_dir`.
pub fn run_cross_validation(cfg: &PipelineConfig) -> Result<CrossValidationReport> {
    cfg.validate()?;
    let mut reports = Vec::with_capacity(cfg.data.n_folds as usize);
    for fold in 0..cfg.data.n_folds {
        let mut c = cfg.clone();
        c.data.fold = fold;
        c.out_dir = cfg.out_dir.join(format!("fold{fold}"));
        reports.push(run_all(&c)?);
    }
    let cv = merge_folds(cfg, &reports);
    write_json(&cfg.out_dir.join(CV_REPORT_NAME), &cv)?;
    Ok(cv)
}

pub(crate) fn save_report(cfg: &PipelineConfig, report: &EvalReport) -> Result<PathBuf> {
    let p = cfg.out_dir.join(REPORT_NAME);
    write_json(&p, report)?;
    Ok(p)
}
