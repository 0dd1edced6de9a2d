//! Backbone activation heatmaps.

use std::path::{Path, PathBuf};

use crate::data::io::{min_max_normalize, read_grid, resize_bilinear, resize_nearest, write_png8};
use crate::data::ImageSlice;
use crate::encoder::{Encoder, FeatureMap};
use crate::error::Result;

/// Per-cell L2 norm over channels, min-max scaled to `[0, 255]` and
/// upscaled to the input size by pixel replication. A constant map is
/// black.
pub fn feature_heatmap(features: &FeatureMap, out_size: usize) -> Vec<u8> {
    let (h, w, c) = (features.height(), features.width(), features.channels());
    let d = features.tensor().data();
    let norms: Vec<f64> = (0..h * w)
        .map(|j| (0..c).map(|i| d[i * h * w + j].powi(2)).sum::<f64>().sqrt())
        .collect();
    let scaled: Vec<u8> = min_max_normalize(&norms)
        .iter()
        .map(|v| (v * 255.0).round() as u8)
        .collect();
    resize_nearest(&scaled, h, w, out_size, out_size)
}

/// Writes `<stem>_features.png` for each image into `out_dir`.
pub fn export_features(encoder: &Encoder, images: &[PathBuf], out_dir: &Path) -> Result<Vec<PathBuf>> {
    let size = encoder.config().input_size;
    let mut written = Vec::with_capacity(images.len());
    for path in images {
        let grid = read_grid(path)?;
        let pixels = min_max_normalize(&resize_bilinear(&grid, size, size).values);
        let stem = path
            .file_stem()
            .map(|s| s.to_string_lossy().into_owned())
            .unwrap_or_else(|| "image".into());
        let slice =
            ImageSlice::new(stem.clone(), size, size, pixels)?.replicate_channels(encoder.config().in_channels)?;
        let heat = feature_heatmap(&encoder.encode(&slice)?, size);
        let out = out_dir.join(format!("{stem}_features.png"));
        write_png8(&out, size, size, &heat)?;
        written.push(out);
    }
    Ok(written)
}
