//! Dense and global contrastive pre-training of the encoder.

use std::collections::VecDeque;

use rand::seq::index::sample;
use serde::{Deserialize, Serialize};

use crate::data::{sample_views, ImageSlice, TransformSpec};
use crate::encoder::{align_node, Encoder, GlobalEmbedding};
use crate::error::{Error, Result};
use crate::graph::{Graph, Var};
use crate::optim::{Sgd, SgdConfig};
use crate::rng::{derive_seed, rng_from_seed, stream};
use crate::tensor::Tensor;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Stage1Config {
    pub tau: f64,
    pub lambda_dense: f64,
    /// Augmented views per image.
    pub views: usize,
    pub batch_images: usize,
    /// Capacity of the FIFO of detached keys and embeddings from earlier
    /// steps that extends the negative pool.
    pub queue_size: usize,
    pub iterations: usize,
    pub optimizer: SgdConfig,
    pub augment: TransformSpec,
}

impl Default for Stage1Config {
    fn default() -> Self {
        Self {
            tau: 0.2,
            lambda_dense: 0.7,
            views: 2,
            batch_images: 8,
            queue_size: 0,
            iterations: 1000,
            optimizer: SgdConfig::default(),
            augment: TransformSpec::default(),
        }
    }
}

impl Stage1Config {
    pub fn validate(&self) -> Result<()> {
        if !(self.tau > 0.0 && self.tau.is_finite()) {
            return Err(Error::Config(format!("tau must be positive, got {}", self.tau)));
        }
        if !(0.0..=1.0).contains(&self.lambda_dense) {
            return Err(Error::Config(format!(
                "lambda_dense must lie in [0, 1], got {}",
                self.lambda_dense
            )));
        }
        if self.views < 2 {
            return Err(Error::Config(format!("views must be at least 2, got {}", self.views)));
        }
        if self.batch_images == 0 || (self.batch_images < 2 && self.queue_size == 0) {
            return Err(Error::Config(
                "negatives need batch_images >= 2 or a non-empty queue".into(),
            ));
        }
        self.optimizer.validate()?;
        self.augment.validate()
    }
}

/// For every key position of view a, the position in view b whose
/// alignment vector is most similar.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct MatchMap(pub Vec<usize>);

/// Matches columns of two `[C, N]` alignment grids by maximal cosine
/// similarity; ties go to the lowest index.
pub fn match_positive_keys(align_a: &Tensor, align_b: &Tensor) -> Result<MatchMap> {
    if align_a.shape() != align_b.shape() || align_a.shape().len() != 2 {
        return Err(Error::Argument(format!(
            "alignment grids differ: {:?} vs {:?}",
            align_a.shape(),
            align_b.shape()
        )));
    }
    let (c, n) = (align_a.rows(), align_a.cols());
    let (a, b) = (align_a.data(), align_b.data());
    let norm = |d: &[f64], j: usize| (0..c).map(|i| d[i * n + j] * d[i * n + j]).sum::<f64>().sqrt();
    let nb: Vec<f64> = (0..n).map(|j| norm(b, j)).collect();
    let mut out = Vec::with_capacity(n);
    for i in 0..n {
        let na = norm(a, i);
        let mut best = (0, f64::NEG_INFINITY);
        for (j, &nbj) in nb.iter().enumerate() {
            let dot: f64 = (0..c).map(|r| a[r * n + i] * b[r * n + j]).sum();
            let cos = dot / (na * nbj).max(f64::MIN_POSITIVE);
            if cos > best.1 {
                best = (j, cos);
            }
        }
        out.push(best.0);
    }
    Ok(MatchMap(out))
}

/// Dense InfoNCE node: key `i` of `keys_a` is pulled towards key
/// `matches[i]` of `keys_b` against every column of `negatives`.
pub fn dense_loss_node(g: &mut Graph, keys_a: Var, keys_b: Var, matches: &MatchMap, negatives: Var, tau: f64) -> Var {
    let partner = g.gather_cols(keys_b, matches.0.clone());
    let pos = g.col_dot(keys_a, partner);
    let neg = g.mat_tn(keys_a, negatives);
    g.info_nce(pos, neg, tau)
}

/// Mean per-key InfoNCE over `[C', N]` key grids.
pub fn dense_loss(
    keys_a: &Tensor,
    keys_b: &Tensor,
    matches: &MatchMap,
    negatives: &[Vec<f64>],
    tau: f64,
) -> Result<f64> {
    if negatives.is_empty() {
        return Err(Error::Argument("dense loss needs at least one negative".into()));
    }
    if keys_a.shape() != keys_b.shape() || matches.0.len() != keys_a.cols() {
        return Err(Error::Argument("dense loss inputs disagree in shape".into()));
    }
    let mut g = Graph::new();
    let a = g.constant(keys_a.clone());
    let b = g.constant(keys_b.clone());
    let n = negative_matrix(negatives, keys_a.rows())?;
    let neg = g.constant(n);
    let l = dense_loss_node(&mut g, a, b, matches, neg, tau);
    Ok(g.value(l).item())
}

/// Single InfoNCE term for a global embedding.
pub fn global_loss(
    anchor: &GlobalEmbedding,
    positive: &GlobalEmbedding,
    negatives: &[GlobalEmbedding],
    tau: f64,
) -> Result<f64> {
    if negatives.is_empty() {
        return Err(Error::Argument("global loss needs at least one negative".into()));
    }
    let c = anchor.0.len();
    if positive.0.len() != c {
        return Err(Error::Argument("global embeddings differ in length".into()));
    }
    let negs: Vec<Vec<f64>> = negatives.iter().map(|e| e.0.clone()).collect();
    let mut g = Graph::new();
    let a = g.constant(Tensor::new(vec![c, 1], anchor.0.clone()));
    let p = g.constant(Tensor::new(vec![c, 1], positive.0.clone()));
    let neg = g.constant(negative_matrix(&negs, c)?);
    let l = dense_loss_node(&mut g, a, p, &MatchMap(vec![0]), neg, tau);
    Ok(g.value(l).item())
}

/// `(1 - lambda) * lg + lambda * lt`.
pub fn combined_loss(lg: f64, lt: f64, lambda_dense: f64) -> f64 {
    (1.0 - lambda_dense) * lg + lambda_dense * lt
}

fn negative_matrix(negatives: &[Vec<f64>], c: usize) -> Result<Tensor> {
    let m = negatives.len();
    let mut data = vec![0.0; c * m];
    for (k, v) in negatives.iter().enumerate() {
        if v.len() != c {
            return Err(Error::Argument(format!(
                "negative {k} has length {}, expected {c}",
                v.len()
            )));
        }
        for (i, &x) in v.iter().enumerate() {
            data[i * m + k] = x;
        }
    }
    Ok(Tensor::new(vec![c, m], data))
}

/// Detached keys and embeddings retained across steps.
#[derive(Clone, Debug, Default)]
pub struct NegativeQueue {
    capacity: usize,
    keys: VecDeque<Vec<f64>>,
    globals: VecDeque<Vec<f64>>,
}

impl NegativeQueue {
    pub fn new(capacity: usize) -> Self {
        Self {
            capacity,
            ..Default::default()
        }
    }

    pub fn keys(&self) -> impl Iterator<Item = &Vec<f64>> {
        self.keys.iter()
    }

    pub fn globals(&self) -> impl Iterator<Item = &Vec<f64>> {
        self.globals.iter()
    }

    pub fn len(&self) -> usize {
        self.keys.len()
    }

    pub fn is_empty(&self) -> bool {
        self.keys.is_empty() && self.globals.is_empty()
    }

    fn push(fifo: &mut VecDeque<Vec<f64>>, cap: usize, v: Vec<f64>) {
        if cap == 0 {
            return;
        }
        if fifo.len() == cap {
            fifo.pop_front();
        }
        fifo.push_back(v);
    }

    pub fn push_key(&mut self, v: Vec<f64>) {
        Self::push(&mut self.keys, self.capacity, v);
    }

    pub fn push_global(&mut self, v: Vec<f64>) {
        Self::push(&mut self.globals, self.capacity, v);
    }
}

/// Graph nodes of one contrastive objective evaluation.
#[derive(Clone, Debug)]
pub struct Stage1Losses {
    pub total: Var,
    pub dense: Var,
    pub global: Var,
    /// Dense negatives seen by each key of image `b`.
    pub dense_negatives: Vec<usize>,
}

/// Per-view outputs kept for negatives and the queue.
struct ViewNodes {
    keys: Var,
    global: Var,
}

/// Builds the combined objective over `views[b][k]` (view `k` of image
/// `b`) on `g`. Every ordered pair of distinct views of an image
/// contributes one dense and one global term; the negatives are all keys
/// (or embeddings) of the other images' views plus the queue.
pub fn stage1_objective(
    g: &mut Graph,
    encoder: &Encoder,
    bound: &crate::encoder::BoundEncoder,
    views: &[Vec<ImageSlice>],
    queue: &NegativeQueue,
    cfg: &Stage1Config,
) -> Result<Stage1Losses> {
    let s = encoder.config().grid_size;
    let mut nodes: Vec<Vec<ViewNodes>> = Vec::with_capacity(views.len());
    let mut aligns: Vec<Vec<Tensor>> = Vec::with_capacity(views.len());
    for image_views in views {
        let mut per = Vec::with_capacity(image_views.len());
        let mut al = Vec::with_capacity(image_views.len());
        for v in image_views {
            let x = encoder.input(g, v)?;
            let f = encoder.forward_backbone(g, bound, x);
            let keys = encoder.forward_dense(g, bound, f);
            let global = encoder.forward_global(g, bound, f);
            let align = align_node(g, f, s)?;
            al.push(g.value(align).clone());
            per.push(ViewNodes { keys, global });
        }
        nodes.push(per);
        aligns.push(al);
    }
    let key_dim = encoder.config().projection_dim;
    let queued_keys: Vec<Vec<f64>> = queue.keys().cloned().collect();
    let queued_globals: Vec<Vec<f64>> = queue.globals().cloned().collect();
    let q_keys = (!queued_keys.is_empty())
        .then(|| negative_matrix(&queued_keys, key_dim).map(|t| g.constant(t)))
        .transpose()?;
    let q_globals = (!queued_globals.is_empty())
        .then(|| negative_matrix(&queued_globals, key_dim).map(|t| g.constant(t)))
        .transpose()?;

    let mut dense_terms = Vec::new();
    let mut global_terms = Vec::new();
    let mut dense_negatives = Vec::with_capacity(nodes.len());
    for (b, per) in nodes.iter().enumerate() {
        let mut neg_keys: Vec<Var> = Vec::new();
        let mut neg_globals: Vec<Var> = Vec::new();
        for (o, other) in nodes.iter().enumerate() {
            if o != b {
                neg_keys.extend(other.iter().map(|v| v.keys));
                neg_globals.extend(other.iter().map(|v| v.global));
            }
        }
        neg_keys.extend(q_keys);
        neg_globals.extend(q_globals);
        if neg_keys.is_empty() || neg_globals.is_empty() {
            return Err(Error::Argument(
                "no negatives available for the contrastive loss".into(),
            ));
        }
        let neg_k = g.concat_cols(&neg_keys);
        let neg_g = g.concat_cols(&neg_globals);
        dense_negatives.push(g.value(neg_k).cols());
        for (ia, va) in per.iter().enumerate() {
            for (ib, vb) in per.iter().enumerate() {
                if ia == ib {
                    continue;
                }
                let m = match_positive_keys(&aligns[b][ia], &aligns[b][ib])?;
                dense_terms.push(dense_loss_node(g, va.keys, vb.keys, &m, neg_k, cfg.tau));
                global_terms.push(dense_loss_node(
                    g,
                    va.global,
                    vb.global,
                    &MatchMap(vec![0]),
                    neg_g,
                    cfg.tau,
                ));
            }
        }
    }
    let dense = g.mean_of(&dense_terms);
    let global = g.mean_of(&global_terms);
    let total = g.lin_comb(&[(global, 1.0 - cfg.lambda_dense), (dense, cfg.lambda_dense)]);
    Ok(Stage1Losses {
        total,
        dense,
        global,
        dense_negatives,
    })
}

/// `cfg.views` augmented views of every image; image `b` draws from
/// `derive_seed(seed, VIEWS, b)`.
pub fn make_views(batch: &[ImageSlice], cfg: &Stage1Config, seed: u64) -> Result<Vec<Vec<ImageSlice>>> {
    batch
        .iter()
        .enumerate()
        .map(|(b, img)| sample_views(img, cfg.views, &cfg.augment, derive_seed(seed, stream::VIEWS, b as u64)))
        .collect()
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize)]
pub struct StepStats {
    pub step: usize,
    pub lr: f64,
    pub loss: f64,
    pub dense: f64,
    pub global: f64,
}

/// Owns the encoder, optimizer state and queue across steps.
#[derive(Clone, Debug)]
pub struct Stage1Trainer {
    pub encoder: Encoder,
    pub config: Stage1Config,
    optimizer: Sgd,
    queue: NegativeQueue,
    step: usize,
}

impl Stage1Trainer {
    pub fn new(encoder: Encoder, config: Stage1Config) -> Result<Self> {
        config.validate()?;
        let optimizer = Sgd::new(config.optimizer.clone(), encoder.params());
        let queue = NegativeQueue::new(config.queue_size);
        Ok(Self {
            encoder,
            config,
            optimizer,
            queue,
            step: 0,
        })
    }

    pub fn steps_taken(&self) -> usize {
        self.step
    }

    /// One gradient step on a batch; `seed` drives the augmentations.
    pub fn step(&mut self, batch: &[ImageSlice], seed: u64) -> Result<StepStats> {
        if batch.len() < 2 && self.queue.is_empty() {
            return Err(Error::Argument("a batch of one image needs queued negatives".into()));
        }
        let views = make_views(batch, &self.config, seed)?;
        let mut g = Graph::new();
        let bound = self.encoder.bind_all(&mut g);
        let losses = stage1_objective(&mut g, &self.encoder, &bound, &views, &self.queue, &self.config)?;
        let loss = g.value(losses.total).item();
        if !loss.is_finite() {
            return Err(Error::Numerical(format!(
                "stage-1 loss became {loss} at step {}",
                self.step
            )));
        }
        let grads = g.backward(losses.total);
        let lr = self.config.optimizer.lr_at(self.step, self.config.iterations.max(1));
        self.optimizer.step_encoder(&mut self.encoder, &bound, &grads, lr);
        if self.config.queue_size > 0 {
            for per in &views {
                let mut g2 = Graph::new();
                let p = self.encoder.bind(&mut g2, |_, _| false);
                let x = self.encoder.input(&mut g2, &per[0])?;
                let f = self.encoder.forward_backbone(&mut g2, &p, x);
                let k = self.encoder.forward_dense(&mut g2, &p, f);
                let e = self.encoder.forward_global(&mut g2, &p, f);
                let kt = g2.value(k);
                for j in 0..kt.cols() {
                    self.queue.push_key(kt.column(j));
                }
                self.queue.push_global(g2.value(e).data().to_vec());
            }
        }
        let stats = StepStats {
            step: self.step,
            lr,
            loss,
            dense: g.value(losses.dense).item(),
            global: g.value(losses.global).item(),
        };
        self.step += 1;
        Ok(stats)
    }
}

/// Runs `cfg.iterations` steps over random batches of `images`. Step `t`
/// draws its batch and augmentations from `derive_seed(seed, STAGE1, t)`.
pub fn train_stage1(
    encoder: Encoder,
    images: &[ImageSlice],
    cfg: &Stage1Config,
    seed: u64,
    mut on_step: impl FnMut(&StepStats, &[ImageSlice]),
) -> Result<Encoder> {
    if cfg.iterations == 0 {
        return Ok(encoder);
    }
    if images.len() < 2 {
        return Err(Error::Config(format!(
            "stage-1 training needs at least 2 images, have {}",
            images.len()
        )));
    }
    let mut trainer = Stage1Trainer::new(encoder, cfg.clone())?;
    let per_batch = cfg.batch_images.min(images.len());
    for t in 0..cfg.iterations {
        let step_seed = derive_seed(seed, stream::STAGE1, t as u64);
        let mut rng = rng_from_seed(step_seed);
        let batch: Vec<ImageSlice> = sample(&mut rng, images.len(), per_batch)
            .into_iter()
            .map(|i| images[i].clone())
            .collect();
        let stats = trainer.step(&batch, step_seed)?;
        on_step(&stats, &batch);
    }
    Ok(trainer.encoder)
}
