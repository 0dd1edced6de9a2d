//! Image file reading, writing and resampling.
//!
//! Two formats are understood: PNG (8- or 16-bit grayscale) and a raw grid
//! of little-endian `f32` values preceded by three little-endian `u32`
//! header words `RAW_MAGIC, height, width`.

use std::fs;
use std::io::Write;
use std::path::Path;

use image::{DynamicImage, GrayImage, ImageBuffer, Luma};

use crate::error::{Error, Result};

/// First header word of a raw float grid (`b"RAWF"` read as little-endian).
pub const RAW_MAGIC: u32 = u32::from_le_bytes(*b"RAWF");

const PNG_SIGNATURE: [u8; 8] = [0x89, b'P', b'N', b'G', 0x0D, 0x0A, 0x1A, 0x0A];

/// A row-major grid of raw (unnormalized) intensities.
#[derive(Clone, Debug, PartialEq)]
pub struct Grid {
    pub height: usize,
    pub width: usize,
    pub values: Vec<f64>,
}

impl Grid {
    pub fn new(height: usize, width: usize, values: Vec<f64>) -> Self {
        assert_eq!(values.len(), height * width);
        Self { height, width, values }
    }
}

/// Reads a grayscale PNG or raw float grid.
pub fn read_grid(path: &Path) -> Result<Grid> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    if bytes.starts_with(&PNG_SIGNATURE) {
        decode_png(path, &bytes)
    } else {
        decode_raw(path, &bytes)
    }
}

fn decode_png(path: &Path, bytes: &[u8]) -> Result<Grid> {
    let img = image::load_from_memory_with_format(bytes, image::ImageFormat::Png).map_err(|source| Error::Image {
        path: path.to_path_buf(),
        source,
    })?;
    let (w, h) = (img.width() as usize, img.height() as usize);
    let values = match img {
        DynamicImage::ImageLuma8(buf) => buf.into_raw().into_iter().map(f64::from).collect(),
        DynamicImage::ImageLuma16(buf) => buf.into_raw().into_iter().map(f64::from).collect(),
        other => {
            return Err(Error::Data(format!(
                "{}: expected a grayscale PNG, found {:?}",
                path.display(),
                other.color()
            )))
        }
    };
    Ok(Grid::new(h, w, values))
}

fn decode_raw(path: &Path, bytes: &[u8]) -> Result<Grid> {
    let bad = |msg: &str| Error::Data(format!("{}: {msg}", path.display()));
    if bytes.len() < 12 {
        return Err(bad("file too short for a raw float header"));
    }
    let word = |i: usize| u32::from_le_bytes(bytes[i * 4..i * 4 + 4].try_into().unwrap());
    if word(0) != RAW_MAGIC {
        return Err(bad("neither a PNG nor a raw float grid"));
    }
    let (h, w) = (word(1) as usize, word(2) as usize);
    if h == 0 || w == 0 || bytes.len() != 12 + 4 * h * w {
        return Err(bad("raw float grid size does not match its header"));
    }
    let values: Vec<f64> = bytes[12..]
        .chunks_exact(4)
        .map(|c| f64::from(f32::from_le_bytes(c.try_into().unwrap())))
        .collect();
    if values.iter().any(|v| !v.is_finite()) {
        return Err(bad("non-finite value in raw float grid"));
    }
    Ok(Grid::new(h, w, values))
}

pub fn write_raw(path: &Path, grid: &Grid) -> Result<()> {
    let mut bytes = Vec::with_capacity(12 + 4 * grid.values.len());
    for word in [RAW_MAGIC, grid.height as u32, grid.width as u32] {
        bytes.extend_from_slice(&word.to_le_bytes());
    }
    for &v in &grid.values {
        bytes.extend_from_slice(&(v as f32).to_le_bytes());
    }
    write_file(path, &bytes)
}

pub(crate) fn write_file(path: &Path, bytes: &[u8]) -> Result<()> {
    if let Some(parent) = path.parent() {
        fs::create_dir_all(parent).map_err(|e| Error::io(parent, e))?;
    }
    let mut f = fs::File::create(path).map_err(|e| Error::io(path, e))?;
    f.write_all(bytes).map_err(|e| Error::io(path, e))
}

/// Writes `[0, 1]` intensities as a 16-bit grayscale PNG.
pub fn write_png16(path: &Path, height: usize, width: usize, values: &[f64]) -> Result<()> {
    let raw: Vec<u16> = values
        .iter()
        .map(|v| (v.clamp(0.0, 1.0) * 65535.0).round() as u16)
        .collect();
    let buf: ImageBuffer<Luma<u16>, Vec<u16>> =
        ImageBuffer::from_raw(width as u32, height as u32, raw).expect("buffer size");
    save_png(path, DynamicImage::ImageLuma16(buf))
}

/// Writes raw 8-bit values as a grayscale PNG.
pub fn write_png8(path: &Path, height: usize, width: usize, values: &[u8]) -> Result<()> {
    let buf = GrayImage::from_raw(width as u32, height as u32, values.to_vec()).expect("buffer size");
    save_png(path, DynamicImage::ImageLuma8(buf))
}

fn save_png(path: &Path, img: DynamicImage) -> Result<()> {
    let mut bytes = Vec::new();
    img.write_to(&mut std::io::Cursor::new(&mut bytes), image::ImageFormat::Png)
        .map_err(|source| Error::Image {
            path: path.to_path_buf(),
            source,
        })?;
    write_file(path, &bytes)
}

/// Reads an 8-bit PNG as raw bytes (label maps and masks).
pub fn read_png8(path: &Path) -> Result<(usize, usize, Vec<u8>)> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    let img = image::load_from_memory_with_format(&bytes, image::ImageFormat::Png).map_err(|source| Error::Image {
        path: path.to_path_buf(),
        source,
    })?;
    match img {
        DynamicImage::ImageLuma8(buf) => {
            let (w, h) = (buf.width() as usize, buf.height() as usize);
            Ok((h, w, buf.into_raw()))
        }
        other => Err(Error::Data(format!(
            "{}: expected an 8-bit grayscale PNG, found {:?}",
            path.display(),
            other.color()
        ))),
    }
}

/// Bilinear resampling with half-pixel centres (no corner alignment) and
/// edge clamping.
pub fn resize_bilinear(grid: &Grid, out_h: usize, out_w: usize) -> Grid {
    if (out_h, out_w) == (grid.height, grid.width) {
        return grid.clone();
    }
    let ys: Vec<(usize, usize, f64)> = (0..out_h).map(|y| sample_axis(y, grid.height, out_h)).collect();
    let xs: Vec<(usize, usize, f64)> = (0..out_w).map(|x| sample_axis(x, grid.width, out_w)).collect();
    let v = &grid.values;
    let w = grid.width;
    let mut out = Vec::with_capacity(out_h * out_w);
    for &(y0, y1, fy) in &ys {
        for &(x0, x1, fx) in &xs {
            let top = v[y0 * w + x0] * (1.0 - fx) + v[y0 * w + x1] * fx;
            let bottom = v[y1 * w + x0] * (1.0 - fx) + v[y1 * w + x1] * fx;
            out.push(top * (1.0 - fy) + bottom * fy);
        }
    }
    Grid::new(out_h, out_w, out)
}

/// Source indices and interpolation weight for output coordinate `i`.
pub(crate) fn sample_axis(i: usize, n_in: usize, n_out: usize) -> (usize, usize, f64) {
    let src = ((i as f64 + 0.5) * n_in as f64 / n_out as f64 - 0.5).max(0.0);
    let i0 = (src.floor() as usize).min(n_in - 1);
    let i1 = (i0 + 1).min(n_in - 1);
    let frac = if i0 == n_in - 1 { 0.0 } else { src - i0 as f64 };
    (i0, i1, frac)
}

/// Nearest-neighbour resampling of integer labels.
pub fn resize_nearest<T: Copy>(values: &[T], h: usize, w: usize, out_h: usize, out_w: usize) -> Vec<T> {
    let mut out = Vec::with_capacity(out_h * out_w);
    for y in 0..out_h {
        let sy = ((y as f64 + 0.5) * h as f64 / out_h as f64).floor() as usize;
        for x in 0..out_w {
            let sx = ((x as f64 + 0.5) * w as f64 / out_w as f64).floor() as usize;
            out.push(values[sy.min(h - 1) * w + sx.min(w - 1)]);
        }
    }
    out
}

/// Rescales to `[0, 1]`; a constant grid maps to all zeros.
pub fn min_max_normalize(values: &[f64]) -> Vec<f64> {
    let lo = values.iter().copied().fold(f64::INFINITY, f64::min);
    let hi = values.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let range = hi - lo;
    if range.is_nan() || range <= 0.0 {
        return vec![0.0; values.len()];
    }
    values.iter().map(|v| ((v - lo) / range).clamp(0.0, 1.0)).collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn raw_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("g.f32");
        let g = Grid::new(2, 3, vec![0.0, 1.5, -2.0, 3.25, 4.0, 5.5]);
        write_raw(&p, &g).unwrap();
        assert_eq!(read_grid(&p).unwrap(), g);
    }

    #[test]
    fn png16_and_png8_are_read_back() {
        let dir = tempfile::tempdir().unwrap();
        let p16 = dir.path().join("a.png");
        write_png16(&p16, 2, 2, &[0.0, 1.0, 0.5, 0.25]).unwrap();
        let g = read_grid(&p16).unwrap();
        assert_eq!(g.values, vec![0.0, 65535.0, 32768.0, 16384.0]);
        let p8 = dir.path().join("b.png");
        write_png8(&p8, 1, 3, &[0, 3, 255]).unwrap();
        assert_eq!(read_grid(&p8).unwrap().values, vec![0.0, 3.0, 255.0]);
        assert_eq!(read_png8(&p8).unwrap(), (1, 3, vec![0, 3, 255]));
    }

    #[test]
    fn truncated_raw_file_is_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("bad.f32");
        let mut bytes = RAW_MAGIC.to_le_bytes().to_vec();
        bytes.extend_from_slice(&4u32.to_le_bytes());
        bytes.extend_from_slice(&4u32.to_le_bytes());
        fs::write(&p, bytes).unwrap();
        assert!(matches!(read_grid(&p), Err(Error::Data(_))));
        assert!(matches!(read_grid(&dir.path().join("missing")), Err(Error::Io { .. })));
    }

    #[test]
    fn bilinear_upsample_of_two_pixels() {
        let g = Grid::new(1, 2, vec![0.0, 1.0]);
        let r = resize_bilinear(&g, 1, 4);
        assert_eq!(r.values, vec![0.0, 0.25, 0.75, 1.0]);
    }

    #[test]
    fn constant_grid_normalizes_to_zero() {
        assert_eq!(min_max_normalize(&[3.0; 5]), vec![0.0; 5]);
        assert_eq!(min_max_normalize(&[1.0, 3.0, 2.0]), vec![0.0, 1.0, 0.5]);
    }
}
