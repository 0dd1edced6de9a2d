use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// A square intensity grid with values in `[0, 1]`, optionally replicated
/// over several identical channels.
#[derive(Clone, Debug, PartialEq)]
pub struct ImageSlice {
    slice_id: String,
    height: usize,
    width: usize,
    channels: usize,
    pixels: Vec<f64>,
}

impl ImageSlice {
    /// Single-channel slice from row-major pixels.
    pub fn new(slice_id: impl Into<String>, height: usize, width: usize, pixels: Vec<f64>) -> Result<Self> {
        if height == 0 || width == 0 {
            return Err(Error::Argument(format!("empty image {height}x{width}")));
        }
        if pixels.len() != height * width {
            return Err(Error::Argument(format!(
                "{} pixels for a {height}x{width} image",
                pixels.len()
            )));
        }
        if let Some(v) = pixels.iter().find(|v| !(v.is_finite() && (0.0..=1.0).contains(*v))) {
            return Err(Error::Argument(format!("pixel value {v} outside [0, 1]")));
        }
        Ok(Self {
            slice_id: slice_id.into(),
            height,
            width,
            channels: 1,
            pixels,
        })
    }

    /// Builds a slice from pixels already known to be valid.
    pub(crate) fn from_valid(slice_id: String, height: usize, width: usize, pixels: Vec<f64>) -> Self {
        debug_assert_eq!(pixels.len(), height * width);
        debug_assert!(pixels.iter().all(|v| (0.0..=1.0).contains(v)));
        Self {
            slice_id,
            height,
            width,
            channels: 1,
            pixels,
        }
    }

    pub fn slice_id(&self) -> &str {
        &self.slice_id
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn channels(&self) -> usize {
        self.channels
    }

    /// All channels, channel-major.
    pub fn pixels(&self) -> &[f64] {
        &self.pixels
    }

    /// The first (or only) channel.
    pub fn plane(&self) -> &[f64] {
        &self.pixels[..self.height * self.width]
    }

    pub fn get(&self, y: usize, x: usize) -> f64 {
        self.pixels[y * self.width + x]
    }

    /// Copies the first channel `n` times.
    pub fn replicate_channels(&self, n: usize) -> Result<Self> {
        if n == 0 {
            return Err(Error::Argument("replicate_channels must be positive".into()));
        }
        let plane = self.plane();
        Ok(Self {
            channels: n,
            pixels: plane.iter().copied().cycle().take(plane.len() * n).collect(),
            ..self.clone()
        })
    }

    /// Single-channel slice with the same id and geometry but new pixels.
    pub(crate) fn with_plane(&self, pixels: Vec<f64>) -> Self {
        let s = Self::from_valid(self.slice_id.clone(), self.height, self.width, pixels);
        if self.channels > 1 {
            s.replicate_channels(self.channels).expect("positive channel count")
        } else {
            s
        }
    }

    pub fn to_tensor(&self) -> Tensor {
        Tensor::new(vec![self.channels, self.height, self.width], self.pixels.clone())
    }
}

/// A `{0, 1}`-valued grid.
#[derive(Clone, Debug, PartialEq, Eq, Hash)]
pub struct Mask {
    height: usize,
    width: usize,
    data: Vec<u8>,
}

impl Mask {
    pub fn new(height: usize, width: usize, data: Vec<u8>) -> Result<Self> {
        if data.len() != height * width {
            return Err(Error::Argument(format!(
                "{} mask values for a {height}x{width} grid",
                data.len()
            )));
        }
        if data.iter().any(|&v| v > 1) {
            return Err(Error::Argument("mask values must be 0 or 1".into()));
        }
        Ok(Self { height, width, data })
    }

    pub fn zeros(height: usize, width: usize) -> Self {
        Self {
            height,
            width,
            data: vec![0; height * width],
        }
    }

    pub fn from_fn(height: usize, width: usize, f: impl Fn(usize, usize) -> bool) -> Self {
        let mut data = Vec::with_capacity(height * width);
        for y in 0..height {
            for x in 0..width {
                data.push(f(y, x) as u8);
            }
        }
        Self { height, width, data }
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn data(&self) -> &[u8] {
        &self.data
    }

    pub fn get(&self, y: usize, x: usize) -> bool {
        self.data[y * self.width + x] == 1
    }

    /// Number of foreground pixels.
    pub fn count(&self) -> usize {
        self.data.iter().filter(|&&v| v == 1).count()
    }

    pub fn is_empty(&self) -> bool {
        self.count() == 0
    }
}

/// Per-pixel class ids, 0 being background.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct LabelMap {
    height: usize,
    width: usize,
    labels: Vec<u8>,
}

impl LabelMap {
    pub fn new(height: usize, width: usize, labels: Vec<u8>) -> Result<Self> {
        if labels.len() != height * width {
            return Err(Error::Argument(format!(
                "{} labels for a {height}x{width} grid",
                labels.len()
            )));
        }
        Ok(Self { height, width, labels })
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn labels(&self) -> &[u8] {
        &self.labels
    }

    /// Binary mask of `class`.
    pub fn class_mask(&self, class: u32) -> Mask {
        Mask {
            height: self.height,
            width: self.width,
            data: self.labels.iter().map(|&l| (u32::from(l) == class) as u8).collect(),
        }
    }

    pub fn class_count(&self, class: u32) -> usize {
        self.labels.iter().filter(|&&l| u32::from(l) == class).count()
    }
}
