//! Fixed spatial maps over `h x w` grids flattened in raster order.

use crate::data::io::sample_axis;
use crate::graph::SpatialMap;

/// Cell `i` of an adaptive pool from `n` to `s` covers
/// `floor(i n / s) .. ceil((i + 1) n / s)`.
pub fn adaptive_bounds(n: usize, s: usize, i: usize) -> (usize, usize) {
    let start = i * n / s;
    let end = ((i + 1) * n).div_ceil(s);
    (start, end)
}

/// Adaptive average pooling from `h x w` to `s x s`.
pub fn adaptive_avg_pool(h: usize, w: usize, s: usize) -> SpatialMap {
    let mut rows = Vec::with_capacity(s * s);
    for oy in 0..s {
        let (y0, y1) = adaptive_bounds(h, s, oy);
        for ox in 0..s {
            let (x0, x1) = adaptive_bounds(w, s, ox);
            let weight = 1.0 / ((y1 - y0) * (x1 - x0)) as f64;
            let mut row = Vec::with_capacity((y1 - y0) * (x1 - x0));
            for y in y0..y1 {
                for x in x0..x1 {
                    row.push((y * w + x, weight));
                }
            }
            rows.push(row);
        }
    }
    SpatialMap::new(h * w, rows)
}

/// 2x2 average pooling with stride 2 (`h`, `w` even).
pub fn avg_pool2(h: usize, w: usize) -> SpatialMap {
    let (oh, ow) = (h / 2, w / 2);
    let mut rows = Vec::with_capacity(oh * ow);
    for oy in 0..oh {
        for ox in 0..ow {
            let (y, x) = (2 * oy, 2 * ox);
            rows.push(vec![
                (y * w + x, 0.25),
                (y * w + x + 1, 0.25),
                ((y + 1) * w + x, 0.25),
                ((y + 1) * w + x + 1, 0.25),
            ]);
        }
    }
    SpatialMap::new(h * w, rows)
}

/// Mean over all positions.
pub fn global_avg_pool(h: usize, w: usize) -> SpatialMap {
    let n = h * w;
    SpatialMap::new(n, vec![(0..n).map(|i| (i, 1.0 / n as f64)).collect()])
}

/// Bilinear resampling with half-pixel centres, matching
/// [`crate::data::io::resize_bilinear`].
pub fn bilinear_resize(h: usize, w: usize, out_h: usize, out_w: usize) -> SpatialMap {
    let ys: Vec<_> = (0..out_h).map(|y| sample_axis(y, h, out_h)).collect();
    let xs: Vec<_> = (0..out_w).map(|x| sample_axis(x, w, out_w)).collect();
    let mut rows = Vec::with_capacity(out_h * out_w);
    for &(y0, y1, fy) in &ys {
        for &(x0, x1, fx) in &xs {
            let mut row: Vec<(usize, f64)> = Vec::with_capacity(4);
            for (idx, wt) in [
                (y0 * w + x0, (1.0 - fy) * (1.0 - fx)),
                (y0 * w + x1, (1.0 - fy) * fx),
                (y1 * w + x0, fy * (1.0 - fx)),
                (y1 * w + x1, fy * fx),
            ] {
                if wt == 0.0 {
                    continue;
                }
                match row.iter_mut().find(|(i, _)| *i == idx) {
                    Some(e) => e.1 += wt,
                    None => row.push((idx, wt)),
                }
            }
            rows.push(row);
        }
    }
    SpatialMap::new(h * w, rows)
}
