use std::fs;
use std::path::Path;

use rand::Rng;
use serde::{Deserialize, Serialize};

use super::felzenszwalb::SuperpixelMap;
use crate::data::io::{read_grid, read_png8, write_file, write_png16, write_png8};
use crate::data::transform::{paired_transform, Affine};
use crate::data::{ImageSlice, Mask, TransformSpec};
use crate::error::{Error, Result};
use crate::rng::{derive_seed, rng_from_seed};

/// Transform draws attempted before giving up on an episode.
pub const MAX_TRANSFORM_ATTEMPTS: u64 = 10;

const ATTEMPT_STREAM: u64 = 0xE915;

/// One support/query pair for 1-way 1-shot segmentation.
#[derive(Clone, Debug, PartialEq)]
pub struct FewShotEpisode {
    pub support_image: ImageSlice,
    pub support_mask: Mask,
    pub query_image: ImageSlice,
    pub query_mask: Mask,
    pub n_ways: usize,
    pub n_shots: usize,
    /// Geometric map from support to query coordinates, when the query was
    /// synthesized from the support.
    pub query_geometry: Option<Affine>,
}

impl FewShotEpisode {
    /// Episode from two labeled slices.
    pub fn from_pair(
        support_image: ImageSlice,
        support_mask: Mask,
        query_image: ImageSlice,
        query_mask: Mask,
    ) -> Result<Self> {
        let ep = Self {
            support_image,
            support_mask,
            query_image,
            query_mask,
            n_ways: 1,
            n_shots: 1,
            query_geometry: None,
        };
        ep.validate()?;
        Ok(ep)
    }

    pub fn validate(&self) -> Result<()> {
        let shape = (self.support_image.height(), self.support_image.width());
        let shapes = [
            (self.support_mask.height(), self.support_mask.width()),
            (self.query_image.height(), self.query_image.width()),
            (self.query_mask.height(), self.query_mask.width()),
        ];
        if shapes.iter().any(|&s| s != shape) {
            return Err(Error::Argument("episode grids differ in shape".into()));
        }
        if self.support_mask.is_empty() {
            return Err(Error::EpisodeSkip("support mask has no foreground".into()));
        }
        Ok(())
    }
}

/// Indicator mask of one segment drawn uniformly from those with at least
/// `min_fg` pixels.
pub fn select_pseudo_label(spmap: &SuperpixelMap, min_fg: usize, seed: u64) -> Result<Mask> {
    let sizes = spmap.sizes();
    let eligible: Vec<u32> = sizes
        .iter()
        .enumerate()
        .filter(|(_, &n)| n >= min_fg)
        .map(|(l, _)| l as u32)
        .collect();
    if eligible.is_empty() {
        return Err(Error::SelectionExhausted {
            min_fg,
            largest: sizes.iter().copied().max().unwrap_or(0),
        });
    }
    let pick = rng_from_seed(seed).random_range(0..eligible.len());
    Ok(spmap.segment_mask(eligible[pick]))
}

/// Support = `(image, pseudo_mask)`; query = a random paired transform of
/// both. Transforms that push the whole foreground out of frame are redrawn.
pub fn build_episode(
    image: &ImageSlice,
    pseudo_mask: &Mask,
    spec: &TransformSpec,
    seed: u64,
) -> Result<FewShotEpisode> {
    if pseudo_mask.is_empty() {
        return Err(Error::Argument("pseudo mask has no foreground".into()));
    }
    for attempt in 0..MAX_TRANSFORM_ATTEMPTS {
        let s = if attempt == 0 {
            seed
        } else {
            derive_seed(seed, ATTEMPT_STREAM, attempt)
        };
        let (query_image, query_mask, t) = paired_transform(image, pseudo_mask, spec, s)?;
        if !query_mask.is_empty() {
            return Ok(FewShotEpisode {
                support_image: image.clone(),
                support_mask: pseudo_mask.clone(),
                query_image,
                query_mask,
                n_ways: 1,
                n_shots: 1,
                query_geometry: Some(t.geometry),
            });
        }
    }
    Err(Error::EpisodeConstruction(format!(
        "query foreground vanished in {MAX_TRANSFORM_ATTEMPTS} transform draws"
    )))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpisodeMeta {
    pub seed: u64,
    pub spec: TransformSpec,
    pub source_slice_id: String,
}

/// Writes `support.png`, `support_mask.png`, `query.png`, `query_mask.png`
/// (16-bit images, masks as 0/255) and `meta.json`.
pub fn save_episode(dir: &Path, episode: &FewShotEpisode, meta: &EpisodeMeta) -> Result<()> {
    let (h, w) = (episode.support_image.height(), episode.support_image.width());
    write_png16(&dir.join("support.png"), h, w, episode.support_image.plane())?;
    write_png16(&dir.join("query.png"), h, w, episode.query_image.plane())?;
    let to_bytes = |m: &Mask| m.data().iter().map(|&v| v * 255).collect::<Vec<u8>>();
    write_png8(&dir.join("support_mask.png"), h, w, &to_bytes(&episode.support_mask))?;
    write_png8(&dir.join("query_mask.png"), h, w, &to_bytes(&episode.query_mask))?;
    write_file(&dir.join("meta.json"), serde_json::to_string_pretty(meta)?.as_bytes())
}

pub fn load_episode(dir: &Path) -> Result<(FewShotEpisode, EpisodeMeta)> {
    let meta_path = dir.join("meta.json");
    let meta: EpisodeMeta =
        serde_json::from_str(&fs::read_to_string(&meta_path).map_err(|e| Error::io(&meta_path, e))?)?;
    let image = |name: &str, id: &str| -> Result<ImageSlice> {
        let g = read_grid(&dir.join(name))?;
        ImageSlice::new(id, g.height, g.width, g.values.iter().map(|v| v / 65535.0).collect())
    };
    let mask = |name: &str| -> Result<Mask> {
        let (h, w, v) = read_png8(&dir.join(name))?;
        Mask::new(h, w, v.into_iter().map(|b| (b > 127) as u8).collect())
    };
    let episode = FewShotEpisode::from_pair(
        image("support.png", &meta.source_slice_id)?,
        mask("support_mask.png")?,
        image("query.png", &meta.source_slice_id)?,
        mask("query_mask.png")?,
    )?;
    Ok((episode, meta))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::Interval;

    fn blob_image(n: usize) -> (ImageSlice, Mask) {
        let mask = Mask::from_fn(n, n, |y, x| {
            let (dy, dx) = (y as f64 - n as f64 / 2.0, x as f64 - n as f64 / 2.5);
            dy * dy / 16.0 + dx * dx / 9.0 <= 1.0
        });
        let px = mask.data().iter().map(|&m| 0.2 + 0.5 * m as f64).collect();
        (ImageSlice::new("blob", n, n, px).unwrap(), mask)
    }

    #[test]
    fn single_segment_is_always_selected() {
        let sp = SuperpixelMap::from_components(4, 4, &[0; 16]);
        for seed in 0..20 {
            assert_eq!(select_pseudo_label(&sp, 6, seed).unwrap().count(), 16);
        }
    }

    #[test]
    fn too_small_segments_exhaust_selection() {
        // 3-pixel stripes.
        let comps: Vec<usize> = (0..12).map(|i| i / 3).collect();
        let sp = SuperpixelMap::from_components(3, 4, &comps);
        match select_pseudo_label(&sp, 6, 0) {
            Err(Error::SelectionExhausted { largest, min_fg }) => assert_eq!((largest, min_fg), (3, 6)),
            other => panic!("{other:?}"),
        }
    }

    #[test]
    fn identity_episode_has_identical_halves() {
        let (img, m) = blob_image(16);
        let ep = build_episode(&img, &m, &TransformSpec::identity(), 5).unwrap();
        assert_eq!(ep.support_image, ep.query_image);
        assert_eq!(ep.support_mask, ep.query_mask);
    }

    #[test]
    fn right_angle_episode_keeps_foreground_count() {
        let (img, m) = blob_image(16);
        let spec = TransformSpec {
            rotation_range: Interval::point(90.0),
            ..TransformSpec::identity()
        };
        let ep = build_episode(&img, &m, &spec, 5).unwrap();
        assert_eq!(ep.query_mask.count(), ep.support_mask.count());
    }

    #[test]
    fn vanishing_foreground_is_an_episode_error() {
        let (img, _) = blob_image(16);
        let corner = Mask::from_fn(16, 16, |y, x| y == 0 && x == 0);
        let spec = TransformSpec {
            translation_range: Interval::point(-0.5),
            ..TransformSpec::identity()
        };
        assert!(matches!(
            build_episode(&img, &corner, &spec, 0),
            Err(Error::EpisodeConstruction(_))
        ));
    }

    #[test]
    fn empty_pseudo_mask_is_rejected() {
        let (img, _) = blob_image(8);
        assert!(build_episode(&img, &Mask::zeros(8, 8), &TransformSpec::identity(), 0).is_err());
    }

    #[test]
    fn episode_directory_round_trip() {
        let (img, m) = blob_image(16);
        let spec = TransformSpec::default();
        let ep = build_episode(&img, &m, &spec, 11).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let meta = EpisodeMeta {
            seed: 11,
            spec: spec.clone(),
            source_slice_id: "blob".into(),
        };
        save_episode(dir.path(), &ep, &meta).unwrap();
        let (back, meta2) = load_episode(dir.path()).unwrap();
        assert_eq!(meta2, meta);
        assert_eq!(back.support_mask, ep.support_mask);
        assert_eq!(back.query_mask, ep.query_mask);
        let err = back
            .query_image
            .pixels()
            .iter()
            .zip(ep.query_image.pixels())
            .map(|(a, b)| (a - b).abs())
            .fold(0.0, f64::max);
        assert!(err <= 0.5 / 65535.0 + 1e-12);
    }
}
