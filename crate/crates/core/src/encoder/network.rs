use std::rc::Rc;

use rand_distr::{Distribution, Normal};

use super::config::EncoderConfig;
use super::pool;
use crate::data::ImageSlice;
use crate::error::{Error, Result};
use crate::graph::{Graph, Var};
use crate::rng::{derive_seed, rng_from_seed, stream};
use crate::tensor::Tensor;

/// Backbone output of shape `[C, h, w]`.
#[derive(Clone, Debug, PartialEq)]
pub struct FeatureMap(Tensor);

impl FeatureMap {
    pub fn new(values: Tensor) -> Result<Self> {
        if values.shape().len() != 3 {
            return Err(Error::Argument(format!(
                "feature map must be [C, h, w], got {:?}",
                values.shape()
            )));
        }
        if !values.is_finite() {
            return Err(Error::Numerical("feature map has non-finite values".into()));
        }
        Ok(Self(values))
    }

    pub fn channels(&self) -> usize {
        self.0.shape()[0]
    }

    pub fn height(&self) -> usize {
        self.0.shape()[1]
    }

    pub fn width(&self) -> usize {
        self.0.shape()[2]
    }

    pub fn tensor(&self) -> &Tensor {
        &self.0
    }

    pub fn into_tensor(self) -> Tensor {
        self.0
    }

    /// Feature vector at `(y, x)`.
    pub fn at(&self, y: usize, x: usize) -> Vec<f64> {
        self.0.column(y * self.width() + x)
    }
}

/// Dense keys `[C', S*S]` and alignment vectors `[C, S*S]`, raster order.
#[derive(Clone, Debug, PartialEq)]
pub struct DenseProjection {
    pub keys: Tensor,
    pub alignment: Tensor,
}

#[derive(Clone, Debug, PartialEq)]
pub struct GlobalEmbedding(pub Vec<f64>);

/// Encoder weights, stored in a fixed order with stable names.
#[derive(Clone, Debug, PartialEq)]
pub struct Encoder {
    config: EncoderConfig,
    names: Vec<String>,
    params: Vec<Tensor>,
}

/// Graph handles for every encoder parameter, in [`Encoder::names`] order.
#[derive(Clone, Debug)]
pub struct BoundEncoder {
    vars: Vec<Var>,
    trainable: Vec<bool>,
}

impl BoundEncoder {
    pub fn vars(&self) -> &[Var] {
        &self.vars
    }

    pub fn is_trainable(&self, i: usize) -> bool {
        self.trainable[i]
    }
}

fn param_shapes(c: &EncoderConfig) -> Vec<(String, Vec<usize>)> {
    let mut out = Vec::new();
    let mut cin = c.in_channels;
    let k = c.kernel_size;
    for (i, &cout) in c.block_channels.iter().enumerate() {
        out.push((format!("backbone.{i}.conv.weight"), vec![cout, cin, k, k]));
        out.push((format!("backbone.{i}.conv.bias"), vec![cout]));
        out.push((format!("backbone.{i}.norm.weight"), vec![cout]));
        out.push((format!("backbone.{i}.norm.bias"), vec![cout]));
        cin = cout;
    }
    for head in ["dense_head", "global_head"] {
        out.push((format!("{head}.fc1.weight"), vec![c.feature_dim, c.feature_dim]));
        out.push((format!("{head}.fc1.bias"), vec![c.feature_dim]));
        out.push((format!("{head}.fc2.weight"), vec![c.projection_dim, c.feature_dim]));
        out.push((format!("{head}.fc2.bias"), vec![c.projection_dim]));
    }
    out
}

const PER_BLOCK: usize = 4;
const PER_HEAD: usize = 4;

impl Encoder {
    /// Kaiming-normal weights, zero biases, unit norm gains.
    pub fn init(config: EncoderConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut rng = rng_from_seed(derive_seed(seed, stream::INIT, 0));
        let mut names = Vec::new();
        let mut params = Vec::new();
        for (name, shape) in param_shapes(&config) {
            let n: usize = shape.iter().product();
            let t = if name.ends_with("norm.weight") {
                Tensor::full(shape, 1.0)
            } else if name.ends_with("weight") {
                let fan_in: usize = shape[1..].iter().product();
                let normal = Normal::new(0.0, (2.0 / fan_in as f64).sqrt()).expect("positive std");
                Tensor::new(shape, (0..n).map(|_| normal.sample(&mut rng)).collect())
            } else {
                Tensor::zeros(shape)
            };
            names.push(name);
            params.push(t);
        }
        Ok(Self { config, names, params })
    }

    /// Rebuilds an encoder from named tensors, checking names and shapes.
    pub fn from_named(config: EncoderConfig, mut named: Vec<(String, Tensor)>) -> Result<Self> {
        config.validate()?;
        let mut names = Vec::new();
        let mut params = Vec::new();
        for (name, shape) in param_shapes(&config) {
            let pos = named
                .iter()
                .position(|(n, _)| *n == name)
                .ok_or_else(|| Error::Validation(format!("missing parameter {name}")))?;
            let (_, t) = named.swap_remove(pos);
            if t.shape() != shape.as_slice() {
                return Err(Error::Validation(format!(
                    "parameter {name} has shape {:?}, expected {shape:?}",
                    t.shape()
                )));
            }
            names.push(name);
            params.push(t);
        }
        if let Some((extra, _)) = named.first() {
            return Err(Error::Validation(format!("unexpected parameter {extra}")));
        }
        Ok(Self { config, names, params })
    }

    pub fn config(&self) -> &EncoderConfig {
        &self.config
    }

    pub fn names(&self) -> &[String] {
        &self.names
    }

    pub fn params(&self) -> &[Tensor] {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut [Tensor] {
        &mut self.params
    }

    pub fn param_count(&self) -> usize {
        self.params.iter().map(Tensor::len).sum()
    }

    /// Index of the first parameter of the last backbone block.
    pub fn last_block_start(&self) -> usize {
        (self.config.block_channels.len() - 1) * PER_BLOCK
    }

    /// Places every parameter on `g`; those for which `trainable(index,
    /// name)` holds become differentiable leaves, the rest constants.
    pub fn bind(&self, g: &mut Graph, trainable: impl Fn(usize, &str) -> bool) -> BoundEncoder {
        let mut vars = Vec::with_capacity(self.params.len());
        let mut flags = Vec::with_capacity(self.params.len());
        for (i, (name, t)) in self.names.iter().zip(&self.params).enumerate() {
            let tr = trainable(i, name);
            vars.push(if tr { g.param(t.clone()) } else { g.constant(t.clone()) });
            flags.push(tr);
        }
        BoundEncoder { vars, trainable: flags }
    }

    /// Binds all parameters as trainable.
    pub fn bind_all(&self, g: &mut Graph) -> BoundEncoder {
        self.bind(g, |_, _| true)
    }

    /// Image tensor as a graph constant, after shape checks.
    pub fn input(&self, g: &mut Graph, image: &ImageSlice) -> Result<Var> {
        let c = &self.config;
        if image.height() != c.input_size || image.width() != c.input_size {
            return Err(Error::Argument(format!(
                "image {} is {}x{}, encoder expects {}x{}",
                image.slice_id(),
                image.height(),
                image.width(),
                c.input_size,
                c.input_size
            )));
        }
        if image.channels() != c.in_channels {
            return Err(Error::Argument(format!(
                "image {} has {} channels, encoder expects {}",
                image.slice_id(),
                image.channels(),
                c.in_channels
            )));
        }
        Ok(g.constant(image.to_tensor()))
    }

    /// Backbone forward pass on a `[Cin, H, W]` node; returns `[C, h, w]`.
    pub fn forward_backbone(&self, g: &mut Graph, p: &BoundEncoder, x: Var) -> Var {
        let mut x = x;
        let mut side = self.config.input_size;
        for i in 0..self.config.block_channels.len() {
            let v = &p.vars[i * PER_BLOCK..(i + 1) * PER_BLOCK];
            x = g.conv2d(x, v[0], v[1]);
            x = g.layer_norm(x);
            x = g.channel_affine(x, v[2], v[3]);
            x = g.silu(x);
            if self.config.block_pools(i) {
                x = g.spatial(x, Rc::new(pool::avg_pool2(side, side)));
                side /= 2;
                let c = self.config.block_channels[i];
                x = g.reshape(x, vec![c, side, side]);
            }
        }
        x
    }

    fn head(&self, g: &mut Graph, p: &BoundEncoder, which: usize, x: Var) -> Var {
        let start = self.config.block_channels.len() * PER_BLOCK + which * PER_HEAD;
        let v = &p.vars[start..start + PER_HEAD];
        let h = g.linear(x, v[0], v[1]);
        let h = g.silu(h);
        let y = g.linear(h, v[2], v[3]);
        g.l2_normalize_cols(y)
    }

    /// Dense keys `[C', S*S]` from backbone features `[C, h, w]`.
    pub fn forward_dense(&self, g: &mut Graph, p: &BoundEncoder, features: Var) -> Var {
        let s = self.config.grid_size;
        let (h, w) = feature_hw(g, features);
        let pooled = g.spatial(features, Rc::new(pool::adaptive_avg_pool(h, w, s)));
        self.head(g, p, 0, pooled)
    }

    /// Global embedding `[C', 1]` from backbone features.
    pub fn forward_global(&self, g: &mut Graph, p: &BoundEncoder, features: Var) -> Var {
        let (h, w) = feature_hw(g, features);
        let pooled = g.spatial(features, Rc::new(pool::global_avg_pool(h, w)));
        self.head(g, p, 1, pooled)
    }

    /// Evaluates the backbone with fixed parameters.
    pub fn encode(&self, image: &ImageSlice) -> Result<FeatureMap> {
        let mut g = Graph::new();
        let p = self.bind(&mut g, |_, _| false);
        let x = self.input(&mut g, image)?;
        let f = self.forward_backbone(&mut g, &p, x);
        FeatureMap::new(g.value(f).clone())
    }

    pub fn project_dense(&self, features: &FeatureMap) -> Result<DenseProjection> {
        let mut g = Graph::new();
        let p = self.bind(&mut g, |_, _| false);
        let f = g.constant(features.tensor().clone());
        let keys = self.forward_dense(&mut g, &p, f);
        let alignment = align_node(&mut g, f, self.config.grid_size)?;
        Ok(DenseProjection {
            keys: g.value(keys).clone(),
            alignment: g.value(alignment).clone(),
        })
    }

    pub fn project_global(&self, features: &FeatureMap) -> GlobalEmbedding {
        let mut g = Graph::new();
        let p = self.bind(&mut g, |_, _| false);
        let f = g.constant(features.tensor().clone());
        let e = self.forward_global(&mut g, &p, f);
        GlobalEmbedding(g.value(e).data().to_vec())
    }
}

fn feature_hw(g: &Graph, features: Var) -> (usize, usize) {
    let s = g.value(features).shape();
    assert_eq!(s.len(), 3, "features must be [C, h, w]");
    (s[1], s[2])
}

/// Alignment vectors `[C, S*S]` on the graph: adaptive pooling of the
/// backbone features with no learned projection, normalized per cell.
pub fn align_node(g: &mut Graph, features: Var, s: usize) -> Result<Var> {
    let (h, w) = feature_hw(g, features);
    if s == 0 || h < s || w < s {
        return Err(Error::Argument(format!(
            "cannot pool {h}x{w} features to a {s}x{s} grid"
        )));
    }
    let pooled = g.spatial(features, Rc::new(pool::adaptive_avg_pool(h, w, s)));
    Ok(g.l2_normalize_cols(pooled))
}

/// `[C, S*S]` grid of normalized adaptive-pooled features.
pub fn adaptive_pool_align(features: &FeatureMap, s: usize) -> Result<Tensor> {
    let mut g = Graph::new();
    let f = g.constant(features.tensor().clone());
    let a = align_node(&mut g, f, s)?;
    Ok(g.value(a).clone())
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::Rng;

    fn random_features(c: usize, h: usize, w: usize, seed: u64) -> FeatureMap {
        let mut rng = rng_from_seed(seed);
        let data = (0..c * h * w).map(|_| rng.random_range(-1.0..1.0)).collect();
        FeatureMap::new(Tensor::new(vec![c, h, w], data)).unwrap()
    }

    fn random_image(size: usize, seed: u64) -> ImageSlice {
        let mut rng = rng_from_seed(seed);
        ImageSlice::new("img", size, size, (0..size * size).map(|_| rng.random()).collect()).unwrap()
    }

    fn col_norm(t: &Tensor, j: usize) -> f64 {
        t.column(j).iter().map(|v| v * v).sum::<f64>().sqrt()
    }

    #[test]
    fn encode_shape_and_determinism() {
        let e = Encoder::init(EncoderConfig::default(), 3).unwrap();
        let img = random_image(32, 1);
        let a = e.encode(&img).unwrap();
        assert_eq!(a.tensor().shape(), &[32, 8, 8]);
        assert_eq!(a, e.encode(&img).unwrap());
    }

    #[test]
    fn encode_rejects_wrong_size() {
        let e = Encoder::init(EncoderConfig::default(), 3).unwrap();
        assert!(matches!(e.encode(&random_image(16, 1)), Err(Error::Argument(_))));
    }

    #[test]
    fn param_names_are_unique_and_init_is_seeded() {
        let a = Encoder::init(EncoderConfig::default(), 1).unwrap();
        let b = Encoder::init(EncoderConfig::default(), 1).unwrap();
        let c = Encoder::init(EncoderConfig::default(), 2).unwrap();
        assert_eq!(a, b);
        assert_ne!(a, c);
        let mut names = a.names().to_vec();
        names.sort();
        names.dedup();
        assert_eq!(names.len(), a.names().len());
    }

    #[test]
    fn dense_keys_and_alignment_are_unit_norm() {
        let e = Encoder::init(EncoderConfig::default(), 5).unwrap();
        let f = random_features(32, 8, 8, 9);
        let d = e.project_dense(&f).unwrap();
        assert_eq!(d.keys.shape(), &[16, 16]);
        assert_eq!(d.alignment.shape(), &[32, 16]);
        for j in 0..16 {
            assert!((col_norm(&d.keys, j) - 1.0).abs() < 1e-5);
            assert!((col_norm(&d.alignment, j) - 1.0).abs() < 1e-5);
        }
        let gl = e.project_global(&f);
        let n = gl.0.iter().map(|v| v * v).sum::<f64>().sqrt();
        assert!((n - 1.0).abs() < 1e-5);
    }

    #[test]
    fn constant_features_give_identical_keys() {
        let e = Encoder::init(EncoderConfig::default(), 5).unwrap();
        let col: Vec<f64> = (0..32).map(|i| (i as f64 * 0.37).sin()).collect();
        let data = col.iter().flat_map(|&v| std::iter::repeat_n(v, 64)).collect();
        let f = FeatureMap::new(Tensor::new(vec![32, 8, 8], data)).unwrap();
        let d = e.project_dense(&f).unwrap();
        for j in 1..16 {
            assert_eq!(d.keys.column(j), d.keys.column(0));
        }
    }

    #[test]
    fn single_cell_key_matches_global_mean_projection() {
        let cfg = EncoderConfig {
            grid_size: 1,
            ..Default::default()
        };
        let e = Encoder::init(cfg, 5).unwrap();
        let f = random_features(32, 8, 8, 4);
        let d = e.project_dense(&f).unwrap();
        // With equal head weights the dense and global paths coincide.
        let mut e2 = e.clone();
        let n = e2.params().len();
        for k in 0..PER_HEAD {
            e2.params_mut()[n - PER_HEAD + k] = e.params()[n - 2 * PER_HEAD + k].clone();
        }
        let gl = e2.project_global(&f);
        for (a, b) in d.keys.data().iter().zip(&gl.0) {
            assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn global_embedding_is_permutation_invariant() {
        let e = Encoder::init(EncoderConfig::default(), 5).unwrap();
        let f = random_features(32, 8, 8, 4);
        let t = f.tensor();
        let mut data = vec![0.0; t.len()];
        for c in 0..32 {
            for i in 0..64 {
                data[c * 64 + (i * 37) % 64] = t.data()[c * 64 + i];
            }
        }
        let p = FeatureMap::new(Tensor::new(vec![32, 8, 8], data)).unwrap();
        let (a, b) = (e.project_global(&f), e.project_global(&p));
        for (x, y) in a.0.iter().zip(&b.0) {
            assert!((x - y).abs() < 1e-12);
        }
    }

    #[test]
    fn alignment_matches_direct_cell_means() {
        let f = random_features(5, 8, 8, 2);
        let a = adaptive_pool_align(&f, 4).unwrap();
        for cy in 0..4 {
            for cx in 0..4 {
                let mut mean = [0.0; 5];
                for y in 2 * cy..2 * cy + 2 {
                    for x in 2 * cx..2 * cx + 2 {
                        for (m, v) in mean.iter_mut().zip(f.at(y, x)) {
                            *m += v / 4.0;
                        }
                    }
                }
                let n = mean.iter().map(|v| v * v).sum::<f64>().sqrt();
                for (m, got) in mean.iter().zip(a.column(cy * 4 + cx)) {
                    assert!((m / n - got).abs() < 1e-10);
                }
            }
        }
    }

    #[test]
    fn alignment_identity_and_collapse() {
        let f = random_features(4, 3, 3, 8);
        let a = adaptive_pool_align(&f, 3).unwrap();
        for j in 0..9 {
            let v = f.at(j / 3, j % 3);
            let n = v.iter().map(|x| x * x).sum::<f64>().sqrt();
            for (x, y) in v.iter().zip(a.column(j)) {
                assert!((x / n - y).abs() < 1e-10);
            }
        }
        assert_eq!(adaptive_pool_align(&f, 1).unwrap().shape(), &[4, 1]);
        assert!(matches!(adaptive_pool_align(&f, 4), Err(Error::Argument(_))));
    }
}
