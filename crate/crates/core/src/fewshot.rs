//! Prototype-based few-shot segmentation and its episodic training.
//!
//! Support features are summarized by masked-average prototypes: one global
//! prototype per class plus local prototypes over `pooling_window`-sized
//! tiles of the feature grid that the class covers almost entirely. Query
//! pixels are scored by scaled cosine similarity to the closest prototype
//! of each class.

use std::rc::Rc;

use serde::{Deserialize, Serialize};

use crate::data::{Mask, TransformSpec};
use crate::encoder::{pool, BoundEncoder, Encoder, FeatureMap};
use crate::error::{Error, Result};
use crate::graph::{Graph, SpatialMap, Var};
use crate::metrics::dice;
use crate::optim::{Sgd, SgdConfig};
use crate::superpixel::FewShotEpisode;
use crate::tensor::Tensor;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Stage2Config {
    /// Weight of the role-swapped alignment term.
    pub lambda_par: f64,
    /// Cosine similarity scale.
    pub alpha: f64,
    /// Side of a local-prototype tile, in feature cells.
    pub pooling_window: usize,
    pub coverage_threshold: f64,
    pub iterations: usize,
    pub optimizer: SgdConfig,
    /// Transform that synthesizes the query from the support.
    pub augment: TransformSpec,
}

impl Default for Stage2Config {
    fn default() -> Self {
        Self {
            lambda_par: 1.0,
            alpha: 20.0,
            pooling_window: 2,
            coverage_threshold: 0.95,
            iterations: 2000,
            optimizer: SgdConfig {
                lr: 0.01,
                ..SgdConfig::default()
            },
            augment: TransformSpec::default(),
        }
    }
}

impl Stage2Config {
    pub fn validate(&self) -> Result<()> {
        if !(self.alpha > 0.0 && self.alpha.is_finite()) {
            return Err(Error::Config(format!("alpha must be positive, got {}", self.alpha)));
        }
        if !(self.lambda_par >= 0.0 && self.lambda_par.is_finite()) {
            return Err(Error::Config(format!(
                "lambda_par must be >= 0, got {}",
                self.lambda_par
            )));
        }
        if self.pooling_window == 0 {
            return Err(Error::Config("pooling_window must be positive".into()));
        }
        if !(0.0..=1.0).contains(&self.coverage_threshold) {
            return Err(Error::Config(format!(
                "coverage_threshold must lie in [0, 1], got {}",
                self.coverage_threshold
            )));
        }
        self.optimizer.validate()?;
        self.augment.validate()
    }
}

/// Area fraction of foreground in each feature cell. The mask side must be
/// a multiple of the feature side.
pub fn downsample_mask(mask: &Mask, h: usize, w: usize) -> Result<Vec<f64>> {
    let (mh, mw) = (mask.height(), mask.width());
    if h == 0 || w == 0 || mh % h != 0 || mw % w != 0 {
        return Err(Error::Argument(format!(
            "cannot area-average a {mh}x{mw} mask onto {h}x{w}"
        )));
    }
    let (fy, fx) = (mh / h, mw / w);
    let mut out = vec![0.0; h * w];
    for y in 0..mh {
        for x in 0..mw {
            if mask.get(y, x) {
                out[(y / fy) * w + x / fx] += 1.0;
            }
        }
    }
    let area = (fy * fx) as f64;
    out.iter_mut().for_each(|v| *v /= area);
    Ok(out)
}

#[derive(Clone, Debug, PartialEq)]
pub struct Prototype {
    pub vector: Vec<f64>,
    /// Tile coordinates of a local prototype; `None` for the global one.
    pub cell: Option<(usize, usize)>,
}

/// Weights that turn a support feature map into prototypes.
#[derive(Clone, Debug, PartialEq)]
pub struct PrototypePlan {
    /// Rows are background prototypes followed by foreground prototypes.
    pub map: SpatialMap,
    pub n_bg: usize,
    pub n_fg: usize,
    pub cells: Vec<Option<(usize, usize)>>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct PrototypeSet {
    pub bg: Vec<Prototype>,
    pub fg: Vec<Prototype>,
    pub pooling_window: usize,
    pub coverage_threshold: f64,
}

impl PrototypeSet {
    /// `[C, P]` matrix, background prototypes first.
    fn matrix(&self) -> Tensor {
        let all: Vec<&Prototype> = self.bg.iter().chain(&self.fg).collect();
        let c = all[0].vector.len();
        let p = all.len();
        let mut data = vec![0.0; c * p];
        for (k, proto) in all.iter().enumerate() {
            for (i, &v) in proto.vector.iter().enumerate() {
                data[i * p + k] = v;
            }
        }
        Tensor::new(vec![c, p], data)
    }
}

fn uniform_row(idx: &[usize]) -> Vec<(usize, f64)> {
    let w = 1.0 / idx.len() as f64;
    idx.iter().map(|&i| (i, w)).collect()
}

/// Prototype weights for one class given its soft coverage per cell.
/// Prototype weights of one class and the tile each row came from.
type ClassRows = (Vec<Vec<(usize, f64)>>, Vec<Option<(usize, usize)>>);

fn class_rows(
    soft: &[f64],
    hard: &[bool],
    h: usize,
    w: usize,
    window: usize,
    threshold: f64,
) -> Option<ClassRows> {
    let hard_idx: Vec<usize> = (0..h * w).filter(|&i| hard[i]).collect();
    let global = if !hard_idx.is_empty() {
        uniform_row(&hard_idx)
    } else {
        let total: f64 = soft.iter().sum();
        if total <= 0.0 {
            return None;
        }
        soft.iter()
            .enumerate()
            .filter(|(_, &s)| s > 0.0)
            .map(|(i, &s)| (i, s / total))
            .collect()
    };
    let mut rows = vec![global];
    let mut cells = vec![None];
    for ty in 0..h.div_ceil(window) {
        for tx in 0..w.div_ceil(window) {
            let ys = ty * window..((ty + 1) * window).min(h);
            let xs = tx * window..((tx + 1) * window).min(w);
            let tile: Vec<usize> = ys.flat_map(|y| xs.clone().map(move |x| y * w + x)).collect();
            let coverage = tile.iter().map(|&i| soft[i]).sum::<f64>() / tile.len() as f64;
            let members: Vec<usize> = tile.into_iter().filter(|&i| hard[i]).collect();
            if coverage >= threshold && !members.is_empty() {
                rows.push(uniform_row(&members));
                cells.push(Some((ty, tx)));
            }
        }
    }
    Some((rows, cells))
}

/// Prototype weights for a support mask over an `h x w` feature grid.
///
/// The mask is area-averaged to the grid and thresholded at 0.5; a class
/// left without cells falls back to its soft area weights.
pub fn plan_prototypes(mask: &Mask, h: usize, w: usize, window: usize, threshold: f64) -> Result<PrototypePlan> {
    if mask.is_empty() {
        return Err(Error::EpisodeSkip("support mask has no foreground".into()));
    }
    let soft_fg = downsample_mask(mask, h, w)?;
    let soft_bg: Vec<f64> = soft_fg.iter().map(|v| 1.0 - v).collect();
    let hard_fg: Vec<bool> = soft_fg.iter().map(|&v| v >= 0.5).collect();
    let hard_bg: Vec<bool> = hard_fg.iter().map(|b| !b).collect();
    let (bg_rows, bg_cells) = class_rows(&soft_bg, &hard_bg, h, w, window, threshold)
        .ok_or_else(|| Error::EpisodeSkip("support mask leaves no background".into()))?;
    let (fg_rows, fg_cells) = class_rows(&soft_fg, &hard_fg, h, w, window, threshold)
        .ok_or_else(|| Error::EpisodeSkip("support mask has no foreground".into()))?;
    let (n_bg, n_fg) = (bg_rows.len(), fg_rows.len());
    Ok(PrototypePlan {
        map: SpatialMap::new(h * w, bg_rows.into_iter().chain(fg_rows).collect()),
        n_bg,
        n_fg,
        cells: bg_cells.into_iter().chain(fg_cells).collect(),
    })
}

pub fn extract_prototypes(features: &FeatureMap, mask: &Mask, cfg: &Stage2Config) -> Result<PrototypeSet> {
    let plan = plan_prototypes(
        mask,
        features.height(),
        features.width(),
        cfg.pooling_window,
        cfg.coverage_threshold,
    )?;
    let protos = plan.map.apply(features.tensor());
    let all: Vec<Prototype> = plan
        .cells
        .iter()
        .enumerate()
        .map(|(k, &cell)| Prototype {
            vector: protos.column(k),
            cell,
        })
        .collect();
    let (bg, fg) = all.split_at(plan.n_bg);
    Ok(PrototypeSet {
        bg: bg.to_vec(),
        fg: fg.to_vec(),
        pooling_window: cfg.pooling_window,
        coverage_threshold: cfg.coverage_threshold,
    })
}

/// Graph nodes of a query segmentation.
#[derive(Clone, Copy, Debug)]
pub struct SegmentNodes {
    /// `[2, h*w]` class scores, background first.
    pub scores: Var,
    /// `[2, H*W]` upsampled class probabilities.
    pub probs: Var,
}

/// Scores `query [C, h, w]` against `protos [C, n_bg + n_fg]` and upsamples
/// the class probabilities to `out_h x out_w`.
#[allow(clippy::too_many_arguments)]
pub fn segment_node(
    g: &mut Graph,
    protos: Var,
    n_bg: usize,
    n_fg: usize,
    query: Var,
    alpha: f64,
    out_h: usize,
    out_w: usize,
) -> SegmentNodes {
    let qs = g.value(query).shape().to_vec();
    let (h, w) = (qs[1], qs[2]);
    let pn = g.l2_normalize_cols(protos);
    let qn = g.l2_normalize_cols(query);
    let sims = g.mat_tn(pn, qn);
    let sims = g.scale(sims, alpha);
    let groups = [(0..n_bg).collect(), (n_bg..n_bg + n_fg).collect()];
    let scores = g.group_max(sims, &groups);
    let low = g.softmax_rows(scores);
    let probs = g.spatial(low, Rc::new(pool::bilinear_resize(h, w, out_h, out_w)));
    SegmentNodes { scores, probs }
}

/// Query prediction at feature and image resolution.
#[derive(Clone, Debug, PartialEq)]
pub struct SegmentationLogits {
    pub scores: Tensor,
    pub probs: Tensor,
    pub height: usize,
    pub width: usize,
}

impl SegmentationLogits {
    /// Foreground where its probability strictly exceeds background.
    pub fn hard_mask(&self) -> Mask {
        hard_mask(&self.probs, self.height, self.width)
    }
}

fn hard_mask(probs: &Tensor, h: usize, w: usize) -> Mask {
    let n = h * w;
    let d = probs.data();
    let data = (0..n).map(|j| (d[n + j] > d[j]) as u8).collect();
    Mask::new(h, w, data).expect("binary by construction")
}

pub fn similarity_segment(
    protos: &PrototypeSet,
    query: &FeatureMap,
    alpha: f64,
    out_h: usize,
    out_w: usize,
) -> SegmentationLogits {
    let mut g = Graph::new();
    let p = g.constant(protos.matrix());
    let q = g.constant(query.tensor().clone());
    let s = segment_node(&mut g, p, protos.bg.len(), protos.fg.len(), q, alpha, out_h, out_w);
    SegmentationLogits {
        scores: g.value(s.scores).clone(),
        probs: g.value(s.probs).clone(),
        height: out_h,
        width: out_w,
    }
}

pub fn predict_mask(protos: &PrototypeSet, query: &FeatureMap, alpha: f64, out_h: usize, out_w: usize) -> Mask {
    similarity_segment(protos, query, alpha, out_h, out_w).hard_mask()
}

fn targets(mask: &Mask) -> Vec<usize> {
    mask.data().iter().map(|&v| v as usize).collect()
}

/// Mean pixelwise negative log-likelihood of `target`.
pub fn ce_loss(logits: &SegmentationLogits, target: &Mask) -> Result<f64> {
    if (target.height(), target.width()) != (logits.height, logits.width) {
        return Err(Error::Argument("prediction and target differ in shape".into()));
    }
    let mut g = Graph::new();
    let p = g.constant(logits.probs.clone());
    let l = g.nll(p, targets(target));
    Ok(g.value(l).item())
}

/// Role-swapped term: prototypes from the query under `pred`, segment the
/// support, score against `support_mask`. `None` when `pred` yields no
/// usable prototypes.
fn par_node(
    g: &mut Graph,
    support: Var,
    support_mask: &Mask,
    query: Var,
    pred: &Mask,
    cfg: &Stage2Config,
) -> Result<Option<Var>> {
    let qs = g.value(query).shape().to_vec();
    let plan = match plan_prototypes(pred, qs[1], qs[2], cfg.pooling_window, cfg.coverage_threshold) {
        Ok(p) => p,
        Err(Error::EpisodeSkip(_)) => return Ok(None),
        Err(e) => return Err(e),
    };
    let protos = g.spatial(query, Rc::new(plan.map));
    let seg = segment_node(
        g,
        protos,
        plan.n_bg,
        plan.n_fg,
        support,
        cfg.alpha,
        support_mask.height(),
        support_mask.width(),
    );
    Ok(Some(g.nll(seg.probs, targets(support_mask))))
}

pub fn par_loss(
    support: &FeatureMap,
    support_mask: &Mask,
    query: &FeatureMap,
    pred: &Mask,
    cfg: &Stage2Config,
) -> Result<f64> {
    let mut g = Graph::new();
    let s = g.constant(support.tensor().clone());
    let q = g.constant(query.tensor().clone());
    Ok(par_node(&mut g, s, support_mask, q, pred, cfg)?
        .map(|v| g.value(v).item())
        .unwrap_or(0.0))
}

/// Graph nodes of the episodic objective.
#[derive(Clone, Copy, Debug)]
pub struct Stage2Losses {
    pub total: Var,
    pub ce: Var,
    /// Absent when the predicted query mask gives no prototypes.
    pub par: Option<Var>,
    pub query_probs: Var,
}

/// `ce + lambda_par * par` for one episode.
pub fn stage2_objective(
    g: &mut Graph,
    encoder: &Encoder,
    bound: &BoundEncoder,
    episode: &FewShotEpisode,
    cfg: &Stage2Config,
) -> Result<Stage2Losses> {
    let xs = encoder.input(g, &episode.support_image)?;
    let xq = encoder.input(g, &episode.query_image)?;
    let fs = encoder.forward_backbone(g, bound, xs);
    let fq = encoder.forward_backbone(g, bound, xq);
    let shape = g.value(fs).shape().to_vec();
    let plan = plan_prototypes(
        &episode.support_mask,
        shape[1],
        shape[2],
        cfg.pooling_window,
        cfg.coverage_threshold,
    )?;
    let protos = g.spatial(fs, Rc::new(plan.map));
    let (out_h, out_w) = (episode.query_mask.height(), episode.query_mask.width());
    let seg = segment_node(g, protos, plan.n_bg, plan.n_fg, fq, cfg.alpha, out_h, out_w);
    let ce = g.nll(seg.probs, targets(&episode.query_mask));
    if cfg.lambda_par == 0.0 {
        return Ok(Stage2Losses {
            total: ce,
            ce,
            par: None,
            query_probs: seg.probs,
        });
    }
    let pred = hard_mask(g.value(seg.probs), out_h, out_w);
    let par = par_node(g, fs, &episode.support_mask, fq, &pred, cfg)?;
    let total = match par {
        Some(p) => g.lin_comb(&[(ce, 1.0), (p, cfg.lambda_par)]),
        None => ce,
    };
    Ok(Stage2Losses {
        total,
        ce,
        par,
        query_probs: seg.probs,
    })
}

pub fn stage2_loss(episode: &FewShotEpisode, encoder: &Encoder, cfg: &Stage2Config) -> Result<f64> {
    let mut g = Graph::new();
    let bound = encoder.bind(&mut g, |_, _| false);
    let l = stage2_objective(&mut g, encoder, &bound, episode, cfg)?;
    Ok(g.value(l.total).item())
}

/// Predicted query mask for an episode.
pub fn predict_episode(encoder: &Encoder, episode: &FewShotEpisode, cfg: &Stage2Config) -> Result<Mask> {
    let fs = encoder.encode(&episode.support_image)?;
    let fq = encoder.encode(&episode.query_image)?;
    let protos = extract_prototypes(&fs, &episode.support_mask, cfg)?;
    Ok(predict_mask(
        &protos,
        &fq,
        cfg.alpha,
        episode.query_image.height(),
        episode.query_image.width(),
    ))
}

/// Dice of the predicted query mask against the episode's query mask.
pub fn episode_dice(encoder: &Encoder, episode: &FewShotEpisode, cfg: &Stage2Config) -> Result<f64> {
    dice(&predict_episode(encoder, episode, cfg)?, &episode.query_mask)
}

/// Which encoder parameters episodic training updates.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Unfreeze {
    #[default]
    All,
    LastBlock,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize)]
pub struct Stage2Stats {
    pub step: usize,
    pub lr: f64,
    pub loss: f64,
    pub ce: f64,
    pub par: f64,
}

/// Owns the encoder and optimizer state across episodic steps.
#[derive(Clone, Debug)]
pub struct Stage2Trainer {
    pub encoder: Encoder,
    pub config: Stage2Config,
    unfreeze: Unfreeze,
    total_steps: usize,
    optimizer: Sgd,
    step: usize,
}

impl Stage2Trainer {
    /// `total_steps` sets the length of the cosine schedule.
    pub fn new(encoder: Encoder, config: Stage2Config, unfreeze: Unfreeze, total_steps: usize) -> Result<Self> {
        config.validate()?;
        let optimizer = Sgd::new(config.optimizer.clone(), encoder.params());
        Ok(Self {
            encoder,
            config,
            unfreeze,
            total_steps,
            optimizer,
            step: 0,
        })
    }

    pub fn step(&mut self, episode: &FewShotEpisode) -> Result<Stage2Stats> {
        let mut g = Graph::new();
        let first = self.encoder.last_block_start();
        let bound = match self.unfreeze {
            Unfreeze::All => self.encoder.bind_all(&mut g),
            Unfreeze::LastBlock => self.encoder.bind(&mut g, |i, _| i >= first),
        };
        let l = stage2_objective(&mut g, &self.encoder, &bound, episode, &self.config)?;
        let loss = g.value(l.total).item();
        if !loss.is_finite() {
            return Err(Error::Numerical(format!(
                "episodic loss became {loss} at step {}",
                self.step
            )));
        }
        let grads = g.backward(l.total);
        let lr = self.config.optimizer.lr_at(self.step, self.total_steps.max(1));
        self.optimizer.step_encoder(&mut self.encoder, &bound, &grads, lr);
        let stats = Stage2Stats {
            step: self.step,
            lr,
            loss,
            ce: g.value(l.ce).item(),
            par: l.par.map(|p| g.value(p).item()).unwrap_or(0.0),
        };
        self.step += 1;
        Ok(stats)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::ImageSlice;
    use crate::encoder::EncoderConfig;
    use crate::rng::rng_from_seed;
    use rand::Rng;

    fn features(c: usize, h: usize, w: usize, mut f: impl FnMut(usize, usize, usize) -> f64) -> FeatureMap {
        let mut data = Vec::with_capacity(c * h * w);
        for ch in 0..c {
            for y in 0..h {
                for x in 0..w {
                    data.push(f(ch, y, x));
                }
            }
        }
        FeatureMap::new(Tensor::new(vec![c, h, w], data)).unwrap()
    }

    fn cfg() -> Stage2Config {
        Stage2Config::default()
    }

    /// Left half foreground on a 16x16 image over 4x4 features.
    fn half_mask() -> Mask {
        Mask::from_fn(16, 16, |_, x| x < 8)
    }

    /// Full-resolution features along e0 where `x < 8`, else along e1.
    fn separable() -> FeatureMap {
        features(3, 16, 16, |c, _, x| match (c, x < 8) {
            (0, true) | (1, false) => 1.0,
            _ => 0.0,
        })
    }

    #[test]
    fn mask_downsampling_is_area_average() {
        let m = Mask::from_fn(4, 4, |y, x| y == 0 && x < 3);
        assert_eq!(downsample_mask(&m, 2, 2).unwrap(), vec![0.5, 0.25, 0.0, 0.0]);
        assert!(downsample_mask(&m, 3, 3).is_err());
    }

    #[test]
    fn full_mask_fg_is_spatial_mean_and_bg_skips() {
        let f = features(2, 4, 4, |c, y, x| (c * 16 + y * 4 + x) as f64);
        let all = Mask::from_fn(16, 16, |_, _| true);
        assert!(matches!(
            extract_prototypes(&f, &all, &cfg()),
            Err(Error::EpisodeSkip(_))
        ));
        let plan = plan_prototypes(&Mask::from_fn(16, 16, |y, x| y > 0 || x > 0), 4, 4, 2, 0.95).unwrap();
        let mean0 = (0..16).sum::<usize>() as f64 / 16.0;
        let p = plan.map.apply(f.tensor());
        assert!((p.column(plan.n_bg)[0] - mean0).abs() < 1e-12);
    }

    #[test]
    fn empty_mask_is_an_episode_skip() {
        let f = separable();
        assert!(matches!(
            extract_prototypes(&f, &Mask::zeros(16, 16), &cfg()),
            Err(Error::EpisodeSkip(_))
        ));
    }

    #[test]
    fn whole_map_window_reduces_to_global_prototypes() {
        let mut rng = rng_from_seed(2);
        let f = features(3, 4, 4, |_, _, _| rng.random_range(-1.0..1.0));
        let mut c = cfg();
        c.pooling_window = 4;
        c.coverage_threshold = 0.0;
        let p = extract_prototypes(&f, &half_mask(), &c).unwrap();
        assert_eq!((p.bg.len(), p.fg.len()), (2, 2));
        assert_eq!(p.bg[0].vector, p.bg[1].vector);
        assert_eq!(p.fg[0].vector, p.fg[1].vector);
        assert_eq!(p.fg[1].cell, Some((0, 0)));
    }

    #[test]
    fn local_prototypes_need_coverage() {
        let p = extract_prototypes(&separable(), &half_mask(), &cfg()).unwrap();
        // 8 rows x 4 columns of 2x2 tiles per class.
        assert_eq!((p.bg.len(), p.fg.len()), (33, 33));
        assert_eq!(p.fg[1].cell, Some((0, 0)));
        assert_eq!(p.bg[1].cell, Some((0, 4)));
        let m = Mask::from_fn(16, 16, |_, x| x < 7);
        let p = extract_prototypes(&separable(), &m, &cfg()).unwrap();
        assert_eq!((p.bg.len(), p.fg.len()), (33, 25));
    }

    #[test]
    fn thin_structure_falls_back_to_soft_weights() {
        let m = Mask::from_fn(16, 16, |y, x| y == 5 && x == 5);
        let plan = plan_prototypes(&m, 4, 4, 2, 0.95).unwrap();
        assert_eq!(plan.n_fg, 1);
        assert_eq!(plan.map.rows()[plan.n_bg], vec![(5, 1.0)]);
    }

    #[test]
    fn aligned_query_is_confident_foreground() {
        let protos = PrototypeSet {
            bg: vec![Prototype {
                vector: vec![0.0, 1.0],
                cell: None,
            }],
            fg: vec![Prototype {
                vector: vec![1.0, 0.0],
                cell: None,
            }],
            pooling_window: 2,
            coverage_threshold: 0.95,
        };
        let q = features(2, 2, 2, |c, _, _| (c == 0) as u8 as f64);
        let s = similarity_segment(&protos, &q, 20.0, 8, 8);
        let expect = 1.0 / (1.0 + (-20f64).exp());
        for j in 0..64 {
            assert!((s.probs.data()[64 + j] - expect).abs() < 1e-12);
            assert!((s.probs.data()[j] + s.probs.data()[64 + j] - 1.0).abs() < 1e-12);
        }
    }

    #[test]
    fn identical_prototypes_tie_to_background() {
        let v = vec![0.3, 0.4];
        let p = |v: &Vec<f64>| Prototype {
            vector: v.clone(),
            cell: None,
        };
        let protos = PrototypeSet {
            bg: vec![p(&v)],
            fg: vec![p(&v)],
            pooling_window: 2,
            coverage_threshold: 0.95,
        };
        let q = features(2, 2, 2, |c, y, x| (c + y + 2 * x) as f64);
        let s = similarity_segment(&protos, &q, 20.0, 4, 4);
        assert!(s.probs.data().iter().all(|&v| (v - 0.5).abs() < 1e-15));
        assert!(predict_mask(&protos, &q, 20.0, 4, 4).is_empty());
        assert!((ce_loss(&s, &Mask::from_fn(4, 4, |y, _| y < 2)).unwrap() - 2f64.ln()).abs() < 1e-12);
    }

    #[test]
    fn separable_features_segment_exactly() {
        let f = separable();
        let p = extract_prototypes(&f, &half_mask(), &cfg()).unwrap();
        let pred = predict_mask(&p, &f, 20.0, 16, 16);
        assert_eq!(pred, half_mask());
        let s = similarity_segment(&p, &f, 20.0, 16, 16);
        assert!(ce_loss(&s, &half_mask()).unwrap() < 1e-6);
        assert!(par_loss(&f, &half_mask(), &f, &pred, &cfg()).unwrap() < 1e-3);
        assert_eq!(
            par_loss(&f, &half_mask(), &f, &Mask::zeros(16, 16), &cfg()).unwrap(),
            0.0
        );
    }

    fn tiny_episode(seed: u64) -> FewShotEpisode {
        let mut rng = rng_from_seed(seed);
        let mut img = |m: &Mask| {
            let px = (0..256)
                .map(|i| {
                    let base = if m.data()[i] == 1 { 0.7 } else { 0.2 };
                    base + rng.random_range(-0.1..0.1)
                })
                .collect();
            ImageSlice::new("t", 16, 16, px).unwrap()
        };
        let ms = Mask::from_fn(16, 16, |y, x| (4..12).contains(&y) && (3..10).contains(&x));
        let mq = Mask::from_fn(16, 16, |y, x| (5..13).contains(&y) && (5..12).contains(&x));
        FewShotEpisode::from_pair(img(&ms), ms, img(&mq), mq).unwrap()
    }

    fn tiny_encoder() -> Encoder {
        let c = EncoderConfig {
            input_size: 16,
            block_channels: vec![4, 8],
            feature_dim: 8,
            projection_dim: 4,
            grid_size: 2,
            ..Default::default()
        };
        Encoder::init(c, 3).unwrap()
    }

    #[test]
    fn zero_lambda_is_cross_entropy_alone() {
        let (e, ep) = (tiny_encoder(), tiny_episode(1));
        let mut c = cfg();
        c.lambda_par = 0.0;
        let l0 = stage2_loss(&ep, &e, &c).unwrap();
        let fs = e.encode(&ep.support_image).unwrap();
        let fq = e.encode(&ep.query_image).unwrap();
        let p = extract_prototypes(&fs, &ep.support_mask, &c).unwrap();
        let s = similarity_segment(&p, &fq, c.alpha, 16, 16);
        assert_eq!(l0, ce_loss(&s, &ep.query_mask).unwrap());
        c.lambda_par = 1.0;
        let l1 = stage2_loss(&ep, &e, &c).unwrap();
        let pa = par_loss(&fs, &ep.support_mask, &fq, &s.hard_mask(), &c).unwrap();
        assert!((l1 - (l0 + pa)).abs() < 1e-12);
    }

    #[test]
    fn training_steps_are_deterministic_and_last_block_freezes_first() {
        let ep = tiny_episode(2);
        let run = |u| {
            let mut t = Stage2Trainer::new(tiny_encoder(), cfg(), u, 5).unwrap();
            for _ in 0..5 {
                assert!(t.step(&ep).unwrap().loss.is_finite());
            }
            t.encoder
        };
        assert_eq!(run(Unfreeze::All), run(Unfreeze::All));
        let frozen = run(Unfreeze::LastBlock);
        let init = tiny_encoder();
        assert_eq!(frozen.params()[0], init.params()[0]);
        assert_ne!(frozen.params()[4], init.params()[4]);
    }
}
