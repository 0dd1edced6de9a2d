//! Random geometric and intensity transforms.
//!
//! The geometric family is rotation about the image centre, isotropic scale
//! and translation; the intensity family is gamma, additive brightness and
//! Gaussian noise. Images are resampled bilinearly and masks by nearest
//! neighbour; pixels mapped from outside the frame are zero.

use rand::Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use super::slice::{ImageSlice, Mask};
use crate::error::{Error, Result};
use crate::rng::{derive_seed, rng_from_seed, stream};

/// Closed interval `[lo, hi]`, serialized as a two-element array.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(from = "[f64; 2]", into = "[f64; 2]")]
pub struct Interval {
    pub lo: f64,
    pub hi: f64,
}

impl Interval {
    pub const fn new(lo: f64, hi: f64) -> Self {
        Self { lo, hi }
    }

    pub const fn point(v: f64) -> Self {
        Self { lo: v, hi: v }
    }

    pub const fn symmetric(r: f64) -> Self {
        Self { lo: -r, hi: r }
    }

    fn is_valid(&self) -> bool {
        self.lo.is_finite() && self.hi.is_finite() && self.lo <= self.hi
    }

    fn sample(&self, rng: &mut impl Rng) -> f64 {
        let u: f64 = rng.random();
        self.lo + (self.hi - self.lo) * u
    }
}

impl From<[f64; 2]> for Interval {
    fn from(v: [f64; 2]) -> Self {
        Self::new(v[0], v[1])
    }
}

impl From<Interval> for [f64; 2] {
    fn from(i: Interval) -> Self {
        [i.lo, i.hi]
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TransformSpec {
    /// Degrees.
    pub rotation_range: Interval,
    /// Fraction of the image side, per axis.
    pub translation_range: Interval,
    pub scale_range: Interval,
    pub gamma_range: Interval,
    pub brightness_jitter: Interval,
    pub noise_std: f64,
    /// Mixed into every per-call seed.
    pub seed: u64,
}

impl Default for TransformSpec {
    fn default() -> Self {
        Self {
            rotation_range: Interval::symmetric(15.0),
            translation_range: Interval::symmetric(0.1),
            scale_range: Interval::new(0.9, 1.1),
            gamma_range: Interval::new(0.7, 1.5),
            brightness_jitter: Interval::symmetric(0.1),
            noise_std: 0.02,
            seed: 0,
        }
    }
}

impl TransformSpec {
    /// Every range collapsed onto its no-op value.
    pub fn identity() -> Self {
        Self {
            rotation_range: Interval::point(0.0),
            translation_range: Interval::point(0.0),
            scale_range: Interval::point(1.0),
            gamma_range: Interval::point(1.0),
            brightness_jitter: Interval::point(0.0),
            noise_std: 0.0,
            seed: 0,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let named = [
            ("rotation_range", self.rotation_range),
            ("translation_range", self.translation_range),
            ("scale_range", self.scale_range),
            ("gamma_range", self.gamma_range),
            ("brightness_jitter", self.brightness_jitter),
        ];
        for (name, iv) in named {
            if !iv.is_valid() {
                return Err(Error::Config(format!("{name} must be a finite [lo, hi] with lo <= hi")));
            }
        }
        if self.scale_range.lo <= 0.0 || self.gamma_range.lo <= 0.0 {
            return Err(Error::Config("scale and gamma ranges must be positive".into()));
        }
        if !(self.noise_std.is_finite() && self.noise_std >= 0.0) {
            return Err(Error::Config("noise_std must be finite and non-negative".into()));
        }
        Ok(())
    }

    /// Draws one transform for an image of side `size`.
    pub fn sample(&self, size: usize, seed: u64) -> SampledTransform {
        let mut rng = rng_from_seed(derive_seed(self.seed, stream::VIEWS, seed));
        let angle = self.rotation_range.sample(&mut rng);
        let tx = self.translation_range.sample(&mut rng) * size as f64;
        let ty = self.translation_range.sample(&mut rng) * size as f64;
        let scale = self.scale_range.sample(&mut rng);
        let gamma = self.gamma_range.sample(&mut rng);
        let brightness = self.brightness_jitter.sample(&mut rng);
        let noise_seed: u64 = rng.random();
        SampledTransform {
            geometry: Affine::similarity(angle, scale, tx, ty),
            gamma,
            brightness,
            noise_std: self.noise_std,
            noise_seed,
        }
    }
}

/// `p' = m (p - c) + c + t` with `c` the image centre and `p = (x, y)`.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Affine {
    pub m: [[f64; 2]; 2],
    pub t: [f64; 2],
}

impl Affine {
    pub const IDENTITY: Affine = Affine {
        m: [[1.0, 0.0], [0.0, 1.0]],
        t: [0.0, 0.0],
    };

    /// Rotation by `angle_deg`, isotropic `scale`, then translation in pixels.
    /// Multiples of 90 degrees use exact sines and cosines.
    pub fn similarity(angle_deg: f64, scale: f64, tx: f64, ty: f64) -> Self {
        let (s, c) = exact_sin_cos(angle_deg);
        Self {
            m: [[scale * c, -scale * s], [scale * s, scale * c]],
            t: [tx, ty],
        }
    }

    pub fn inverse(&self) -> Self {
        let [[a, b], [c, d]] = self.m;
        let det = a * d - b * c;
        let inv = [[d / det, -b / det], [-c / det, a / det]];
        let t = [
            -(inv[0][0] * self.t[0] + inv[0][1] * self.t[1]),
            -(inv[1][0] * self.t[0] + inv[1][1] * self.t[1]),
        ];
        Self { m: inv, t }
    }

    /// Source coordinates that output pixel `(x, y)` reads from.
    fn source(&self, inv_m: &[[f64; 2]; 2], x: f64, y: f64, centre: f64) -> (f64, f64) {
        let dx = x - centre - self.t[0];
        let dy = y - centre - self.t[1];
        (
            inv_m[0][0] * dx + inv_m[0][1] * dy + centre,
            inv_m[1][0] * dx + inv_m[1][1] * dy + centre,
        )
    }

    fn inverse_linear(&self) -> [[f64; 2]; 2] {
        self.inverse().m
    }

    /// Bilinear warp of a row-major plane.
    pub fn warp_plane(&self, plane: &[f64], h: usize, w: usize) -> Vec<f64> {
        let inv = self.inverse_linear();
        let centre_x = (w as f64 - 1.0) / 2.0;
        let centre_y = (h as f64 - 1.0) / 2.0;
        debug_assert_eq!(centre_x, centre_y, "square images only");
        let at = |y: isize, x: isize| -> f64 {
            if y < 0 || x < 0 || y >= h as isize || x >= w as isize {
                0.0
            } else {
                plane[y as usize * w + x as usize]
            }
        };
        let mut out = Vec::with_capacity(h * w);
        for y in 0..h {
            for x in 0..w {
                let (sx, sy) = self.source(&inv, x as f64, y as f64, centre_x);
                let (x0, y0) = (sx.floor(), sy.floor());
                let (fx, fy) = (sx - x0, sy - y0);
                let (x0, y0) = (x0 as isize, y0 as isize);
                let top = at(y0, x0) * (1.0 - fx) + at(y0, x0 + 1) * fx;
                let bottom = at(y0 + 1, x0) * (1.0 - fx) + at(y0 + 1, x0 + 1) * fx;
                out.push(top * (1.0 - fy) + bottom * fy);
            }
        }
        out
    }

    /// Nearest-neighbour warp of a mask.
    pub fn warp_mask(&self, mask: &Mask) -> Mask {
        let (h, w) = (mask.height(), mask.width());
        let inv = self.inverse_linear();
        let centre = (w as f64 - 1.0) / 2.0;
        Mask::from_fn(h, w, |y, x| {
            let (sx, sy) = self.source(&inv, x as f64, y as f64, centre);
            let (sx, sy) = (sx.round(), sy.round());
            sx >= 0.0 && sy >= 0.0 && sx < w as f64 && sy < h as f64 && mask.get(sy as usize, sx as usize)
        })
    }
}

fn exact_sin_cos(angle_deg: f64) -> (f64, f64) {
    if angle_deg % 90.0 == 0.0 {
        match (angle_deg / 90.0).rem_euclid(4.0) as i64 {
            0 => (0.0, 1.0),
            1 => (1.0, 0.0),
            2 => (0.0, -1.0),
            _ => (-1.0, 0.0),
        }
    } else {
        angle_deg.to_radians().sin_cos()
    }
}

/// One concrete draw from a [`TransformSpec`].
#[derive(Clone, Debug, PartialEq)]
pub struct SampledTransform {
    pub geometry: Affine,
    pub gamma: f64,
    pub brightness: f64,
    pub noise_std: f64,
    pub noise_seed: u64,
}

impl SampledTransform {
    pub fn apply_image(&self, image: &ImageSlice) -> ImageSlice {
        let (h, w) = (image.height(), image.width());
        let mut plane = if self.geometry == Affine::IDENTITY {
            image.plane().to_vec()
        } else {
            self.geometry.warp_plane(image.plane(), h, w)
        };
        let noise = (self.noise_std > 0.0).then(|| {
            let normal = Normal::new(0.0, self.noise_std).expect("finite noise std");
            (normal, rng_from_seed(self.noise_seed))
        });
        let mut noise = noise;
        for v in &mut plane {
            let mut out = v.powf(self.gamma) + self.brightness;
            if let Some((normal, rng)) = noise.as_mut() {
                out += normal.sample(rng);
            }
            *v = out.clamp(0.0, 1.0);
        }
        image.with_plane(plane)
    }

    pub fn apply_mask(&self, mask: &Mask) -> Mask {
        if self.geometry == Affine::IDENTITY {
            mask.clone()
        } else {
            self.geometry.warp_mask(mask)
        }
    }
}

/// `k` independently transformed views of `image`.
pub fn sample_views(image: &ImageSlice, k: usize, spec: &TransformSpec, seed: u64) -> Result<Vec<ImageSlice>> {
    if k < 2 {
        return Err(Error::Argument(format!("need at least 2 views, got {k}")));
    }
    spec.validate()?;
    Ok((0..k)
        .map(|i| {
            spec.sample(image.height(), derive_seed(seed, stream::VIEWS, i as u64))
                .apply_image(image)
        })
        .collect())
}

/// Applies one sampled transform to an image and its mask, returning the
/// transform alongside.
pub fn paired_transform(
    image: &ImageSlice,
    mask: &Mask,
    spec: &TransformSpec,
    seed: u64,
) -> Result<(ImageSlice, Mask, SampledTransform)> {
    if (image.height(), image.width()) != (mask.height(), mask.width()) {
        return Err(Error::Argument(format!(
            "image is {}x{} but mask is {}x{}",
            image.height(),
            image.width(),
            mask.height(),
            mask.width()
        )));
    }
    spec.validate()?;
    let t = spec.sample(image.height(), seed);
    Ok((t.apply_image(image), t.apply_mask(mask), t))
}

/// Same geometric transform on image (bilinear) and mask (nearest);
/// intensity changes on the image only.
pub fn apply_paired_transform(
    image: &ImageSlice,
    mask: &Mask,
    spec: &TransformSpec,
    seed: u64,
) -> Result<(ImageSlice, Mask)> {
    paired_transform(image, mask, spec, seed).map(|(i, m, _)| (i, m))
}
