//! Graph-based image segmentation (Felzenszwalb & Huttenlocher, 2004) on a
//! 4-connected pixel grid.

use serde::{Deserialize, Serialize};

use crate::data::ImageSlice;
use crate::error::{Error, Result};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct FelzParams {
    /// Scale of the merge threshold `k / |C|`, in intensity units.
    pub k_scale: f64,
    /// Standard deviation of the Gaussian pre-smoothing, in pixels.
    pub sigma: f64,
    /// Minimum final segment size in pixels.
    pub min_size: usize,
}

impl Default for FelzParams {
    fn default() -> Self {
        Self {
            k_scale: 0.1,
            sigma: 0.8,
            min_size: 6,
        }
    }
}

impl FelzParams {
    pub fn validate(&self) -> Result<()> {
        if !(self.k_scale > 0.0 && self.k_scale.is_finite()) {
            return Err(Error::Config("k_scale must be positive".into()));
        }
        if !(self.sigma >= 0.0 && self.sigma.is_finite()) {
            return Err(Error::Config("sigma must be non-negative".into()));
        }
        if self.min_size == 0 {
            return Err(Error::Config("min_size must be at least 1".into()));
        }
        Ok(())
    }
}

/// Per-pixel segment labels `0..n_segments`, numbered in raster order of
/// first appearance.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct SuperpixelMap {
    height: usize,
    width: usize,
    labels: Vec<u32>,
    n_segments: usize,
}

impl SuperpixelMap {
    /// Relabels arbitrary component ids contiguously in raster order.
    pub fn from_components(height: usize, width: usize, components: &[usize]) -> Self {
        assert_eq!(components.len(), height * width);
        let mut map = std::collections::HashMap::new();
        let labels = components
            .iter()
            .map(|c| {
                let next = map.len() as u32;
                *map.entry(*c).or_insert(next)
            })
            .collect();
        Self {
            height,
            width,
            labels,
            n_segments: map.len(),
        }
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn labels(&self) -> &[u32] {
        &self.labels
    }

    pub fn n_segments(&self) -> usize {
        self.n_segments
    }

    /// Pixel count of every segment, indexed by label.
    pub fn sizes(&self) -> Vec<usize> {
        let mut sizes = vec![0; self.n_segments];
        for &l in &self.labels {
            sizes[l as usize] += 1;
        }
        sizes
    }

    pub fn segment_mask(&self, label: u32) -> crate::data::Mask {
        crate::data::Mask::from_fn(self.height, self.width, |y, x| self.labels[y * self.width + x] == label)
    }
}

/// Grid edge between pixel `a` and its right or lower neighbour `b`.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Edge {
    pub a: usize,
    pub b: usize,
    pub weight: f64,
}

/// Separable Gaussian blur with clamped borders. The kernel has
/// `ceil(4 sigma) + 1` taps per side and is normalized over its full
/// symmetric support.
pub fn gaussian_smooth(plane: &[f64], h: usize, w: usize, sigma: f64) -> Vec<f64> {
    if sigma < 0.01 {
        return plane.to_vec();
    }
    let len = (sigma * 4.0).ceil() as usize + 1;
    let mut kernel: Vec<f64> = (0..len).map(|i| (-0.5 * (i as f64 / sigma).powi(2)).exp()).collect();
    let sum = 2.0 * kernel.iter().sum::<f64>() - kernel[0];
    for v in &mut kernel {
        *v /= sum;
    }
    let rows = convolve_rows(plane, h, w, &kernel);
    let t = transpose(&rows, h, w);
    let cols = convolve_rows(&t, w, h, &kernel);
    transpose(&cols, w, h)
}

fn convolve_rows(src: &[f64], h: usize, w: usize, kernel: &[f64]) -> Vec<f64> {
    let mut out = vec![0.0; h * w];
    for y in 0..h {
        let row = &src[y * w..(y + 1) * w];
        for x in 0..w {
            let mut acc = kernel[0] * row[x];
            for (i, &k) in kernel.iter().enumerate().skip(1) {
                let left = row[x.saturating_sub(i)];
                let right = row[(x + i).min(w - 1)];
                acc += k * (left + right);
            }
            out[y * w + x] = acc;
        }
    }
    out
}

fn transpose(src: &[f64], h: usize, w: usize) -> Vec<f64> {
    let mut out = vec![0.0; h * w];
    for y in 0..h {
        for x in 0..w {
            out[x * h + y] = src[y * w + x];
        }
    }
    out
}

/// 4-connected edges sorted by weight; ties keep `(row, col, direction)`
/// order with right before down.
pub fn sorted_grid_edges(smoothed: &[f64], h: usize, w: usize) -> Vec<Edge> {
    let mut edges = Vec::with_capacity(2 * h * w);
    for y in 0..h {
        for x in 0..w {
            let a = y * w + x;
            if x + 1 < w {
                edges.push(Edge {
                    a,
                    b: a + 1,
                    weight: (smoothed[a] - smoothed[a + 1]).abs(),
                });
            }
            if y + 1 < h {
                edges.push(Edge {
                    a,
                    b: a + w,
                    weight: (smoothed[a] - smoothed[a + w]).abs(),
                });
            }
        }
    }
    edges.sort_by(|p, q| p.weight.total_cmp(&q.weight));
    edges
}

struct DisjointSets {
    parent: Vec<usize>,
    size: Vec<usize>,
}

impl DisjointSets {
    fn new(n: usize) -> Self {
        Self {
            parent: (0..n).collect(),
            size: vec![1; n],
        }
    }

    fn find(&mut self, mut x: usize) -> usize {
        let mut root = x;
        while self.parent[root] != root {
            root = self.parent[root];
        }
        while self.parent[x] != root {
            let next = self.parent[x];
            self.parent[x] = root;
            x = next;
        }
        root
    }

    /// Joins two roots, returning the surviving root.
    fn join(&mut self, a: usize, b: usize) -> usize {
        let (big, small) = if self.size[a] >= self.size[b] { (a, b) } else { (b, a) };
        self.parent[small] = big;
        self.size[big] += self.size[small];
        big
    }
}

/// Segments `image` (first channel) into superpixels.
pub fn felzenszwalb_segment(image: &ImageSlice, params: &FelzParams) -> Result<SuperpixelMap> {
    params.validate()?;
    let (h, w) = (image.height(), image.width());
    let smoothed = gaussian_smooth(image.plane(), h, w, params.sigma);
    let edges = sorted_grid_edges(&smoothed, h, w);

    let mut sets = DisjointSets::new(h * w);
    let mut threshold = vec![params.k_scale; h * w];
    for e in &edges {
        let a = sets.find(e.a);
        let b = sets.find(e.b);
        if a != b && e.weight <= threshold[a] && e.weight <= threshold[b] {
            let r = sets.join(a, b);
            threshold[r] = e.weight + params.k_scale / sets.size[r] as f64;
        }
    }
    for e in &edges {
        let a = sets.find(e.a);
        let b = sets.find(e.b);
        if a != b && (sets.size[a] < params.min_size || sets.size[b] < params.min_size) {
            sets.join(a, b);
        }
    }
    let roots: Vec<usize> = (0..h * w).map(|i| sets.find(i)).collect();
    Ok(SuperpixelMap::from_components(h, w, &roots))
}
