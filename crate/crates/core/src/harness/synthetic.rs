//! Procedural abdominal-style phantoms with four labeled organ classes.
//!
//! Each patient contributes [`LEVELS`] slices. Classes 1 and 2 occupy the
//! upper levels and classes 3 and 4 the lower ones, with one level where
//! all four appear, so class groups can be excluded from training slices.

use std::collections::BTreeMap;
use std::f64::consts::PI;
use std::path::{Path, PathBuf};

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use crate::data::io::{write_png16, write_png8};
use crate::data::manifest::DEFAULT_FOLDS;
use crate::data::{DatasetManifest, ManifestRecord};
use crate::error::{Error, Result};
use crate::rng::{derive_seed, rng_from_seed, stream};

pub const LEVELS: usize = 4;
pub const CLASSES: [u32; 4] = [1, 2, 3, 4];
pub const MANIFEST_NAME: &str = "manifest.jsonl";

struct OrganSpec {
    class: u32,
    center: (f64, f64),
    radii: (f64, f64),
    intensity: f64,
    levels: [bool; LEVELS],
    /// Spatial frequency of the organ's texture, cycles per image.
    texture_freq: f64,
}

const ORGANS: [OrganSpec; 4] = [
    OrganSpec {
        class: 1,
        center: (0.30, 0.70),
        radii: (0.15, 0.13),
        intensity: 0.80,
        levels: [true, true, false, false],
        texture_freq: 3.0,
    },
    OrganSpec {
        class: 2,
        center: (0.34, 0.32),
        radii: (0.17, 0.16),
        intensity: 0.62,
        levels: [true, true, false, false],
        texture_freq: 2.0,
    },
    OrganSpec {
        class: 3,
        center: (0.68, 0.68),
        radii: (0.16, 0.13),
        intensity: 0.46,
        levels: [false, true, true, true],
        texture_freq: 4.0,
    },
    OrganSpec {
        class: 4,
        center: (0.68, 0.32),
        radii: (0.16, 0.13),
        intensity: 0.50,
        levels: [false, true, true, true],
        texture_freq: 4.0,
    },
];

const BODY_INTENSITY: f64 = 0.28;
const OUTSIDE_INTENSITY: f64 = 0.04;
const TEXTURE_AMPLITUDE: f64 = 0.04;
const PIXEL_NOISE: f64 = 0.015;
/// Unlabeled blobs per slice, drawn under the organs.
const DISTRACTORS: usize = 3;
const DISTRACTOR_RADIUS: (f64, f64) = (0.04, 0.08);
const DISTRACTOR_INTENSITY: (f64, f64) = (0.1, 0.9);
/// Per-organ placement jitter, fraction of the image side.
const ORGAN_JITTER: f64 = 0.02;
/// Organ size at each level relative to its widest cross-section.
const LEVEL_SCALE: [f64; LEVELS] = [0.9, 1.0, 1.0, 0.9];

/// One generated slice: intensities in `[0, 1]` and a class-id label map.
#[derive(Clone, Debug, PartialEq)]
pub struct Phantom {
    pub size: usize,
    pub image: Vec<f64>,
    pub labels: Vec<u8>,
}

/// Smooth random field: a sum of three plane waves.
struct Texture {
    waves: Vec<(f64, f64, f64)>,
}

impl Texture {
    fn new(rng: &mut ChaCha8Rng, freq: f64) -> Self {
        let waves = (0..3)
            .map(|_| {
                let theta = rng.random_range(0.0..PI);
                let phase = rng.random_range(0.0..2.0 * PI);
                (freq * theta.cos(), freq * theta.sin(), phase)
            })
            .collect();
        Self { waves }
    }

    fn at(&self, y: f64, x: f64) -> f64 {
        let s: f64 = self
            .waves
            .iter()
            .map(|&(fy, fx, ph)| (2.0 * PI * (fy * y + fx * x) + ph).sin())
            .sum();
        s / self.waves.len() as f64
    }
}

struct PlacedOrgan {
    class: u32,
    center: (f64, f64),
    radii: (f64, f64),
    angle: f64,
    intensity: f64,
    texture: Texture,
}

impl PlacedOrgan {
    fn contains(&self, y: f64, x: f64) -> bool {
        let (dy, dx) = (y - self.center.0, x - self.center.1);
        let (s, c) = self.angle.sin_cos();
        let u = c * dy + s * dx;
        let v = -s * dy + c * dx;
        (u / self.radii.0).powi(2) + (v / self.radii.1).powi(2) <= 1.0
    }
}

/// Renders slice `level` of patient `patient`.
pub fn render_phantom(size: usize, seed: u64, patient: usize, level: usize) -> Phantom {
    let mut prng = rng_from_seed(derive_seed(seed, stream::SYNTHETIC, patient as u64));
    let scale = prng.random_range(0.92..1.08);
    let shift = (prng.random_range(-0.03..0.03), prng.random_range(-0.03..0.03));
    let body_texture = Texture::new(&mut prng, 1.5);
    let organs: Vec<PlacedOrgan> = ORGANS
        .iter()
        .map(|o| {
            let jitter = (
                prng.random_range(-ORGAN_JITTER..=ORGAN_JITTER),
                prng.random_range(-ORGAN_JITTER..=ORGAN_JITTER),
            );
            let angle = prng.random_range(-0.35..0.35);
            let intensity = o.intensity + prng.random_range(-0.03..0.03);
            let texture = Texture::new(&mut prng, o.texture_freq);
            let center = (
                0.5 + (o.center.0 - 0.5) * scale + shift.0 + jitter.0,
                0.5 + (o.center.1 - 0.5) * scale + shift.1 + jitter.1,
            );
            let r = scale * LEVEL_SCALE[level];
            PlacedOrgan {
                class: o.class,
                center,
                radii: (o.radii.0 * r, o.radii.1 * r),
                angle,
                intensity,
                texture,
            }
        })
        .collect();
    let mut nrng = rng_from_seed(derive_seed(
        derive_seed(seed, stream::NOISE, patient as u64),
        stream::NOISE,
        level as u64,
    ));
    let distractors: Vec<PlacedOrgan> = (0..DISTRACTORS)
        .map(|_| {
            let r = nrng.random_range(DISTRACTOR_RADIUS.0..=DISTRACTOR_RADIUS.1);
            PlacedOrgan {
                class: 0,
                center: (nrng.random_range(0.2..0.8), nrng.random_range(0.2..0.8)),
                radii: (r, r * nrng.random_range(0.6..=1.0)),
                angle: nrng.random_range(0.0..PI),
                intensity: nrng.random_range(DISTRACTOR_INTENSITY.0..=DISTRACTOR_INTENSITY.1),
                texture: Texture::new(&mut nrng, 3.0),
            }
        })
        .collect();
    let noise = Normal::new(0.0, PIXEL_NOISE).expect("positive std");
    let mut image = Vec::with_capacity(size * size);
    let mut labels = Vec::with_capacity(size * size);
    for py in 0..size {
        for px in 0..size {
            let y = (py as f64 + 0.5) / size as f64;
            let x = (px as f64 + 0.5) / size as f64;
            let body =
                ((y - 0.5 - shift.0) / (0.42 * scale)).powi(2) + ((x - 0.5 - shift.1) / (0.46 * scale)).powi(2) <= 1.0;
            let (mut v, mut label) = if body {
                (BODY_INTENSITY + TEXTURE_AMPLITUDE * body_texture.at(y, x), 0u8)
            } else {
                (OUTSIDE_INTENSITY, 0u8)
            };
            if body {
                for d in distractors.iter().filter(|d| d.contains(y, x)) {
                    v = d.intensity + TEXTURE_AMPLITUDE * d.texture.at(y, x);
                }
            }
            for (o, spec) in organs.iter().zip(&ORGANS) {
                if spec.levels[level] && o.contains(y, x) {
                    v = o.intensity + TEXTURE_AMPLITUDE * o.texture.at(y, x);
                    label = o.class as u8;
                }
            }
            v += noise.sample(&mut nrng);
            image.push(v.clamp(0.0, 1.0));
            labels.push(label);
        }
    }
    Phantom { size, image, labels }
}

/// Writes `n_patients x LEVELS` slices and their manifest under `out_dir`;
/// returns the manifest path. Patient `p` lands in fold `p mod 5`.
pub fn gen_synthetic(n_patients: usize, image_size: usize, seed: u64, out_dir: &Path) -> Result<PathBuf> {
    if n_patients == 0 || image_size < 8 {
        return Err(Error::Argument(format!(
            "need at least one patient and 8 px images, got {n_patients} and {image_size}"
        )));
    }
    let mut records = Vec::with_capacity(n_patients * LEVELS);
    for p in 0..n_patients {
        let patient_id = format!("p{p:03}");
        for level in 0..LEVELS {
            let ph = render_phantom(image_size, seed, p, level);
            let slice_id = format!("{patient_id}_s{level}");
            let file = format!("{slice_id}.png");
            write_png16(&out_dir.join(&file), image_size, image_size, &ph.image)?;
            write_png8(
                &out_dir.join(format!("{slice_id}_label.png")),
                image_size,
                image_size,
                &ph.labels,
            )?;
            let mut counts: BTreeMap<u32, u64> = CLASSES.iter().map(|&c| (c, 0)).collect();
            for &l in &ph.labels {
                if l > 0 {
                    *counts.get_mut(&(l as u32)).expect("known class") += 1;
                }
            }
            records.push(ManifestRecord {
                slice_id,
                path: file,
                patient_id: patient_id.clone(),
                fold: (p % DEFAULT_FOLDS as usize) as u32,
                class_pixel_counts: counts,
            });
        }
    }
    let manifest = DatasetManifest::new(records, out_dir.to_path_buf(), DEFAULT_FOLDS)?;
    let path = out_dir.join(MANIFEST_NAME);
    manifest.save(&path)?;
    Ok(path)
}
