//! Unsupervised superpixels and the pseudo-labeled episodes built on them.

pub mod episode;
pub mod felzenszwalb;

pub use episode::{build_episode, load_episode, save_episode, select_pseudo_label, EpisodeMeta, FewShotEpisode};
pub use felzenszwalb::{felzenszwalb_segment, FelzParams, SuperpixelMap};

use serde::{Deserialize, Serialize};

/// Segmentation parameters plus the pseudo-label size floor.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SuperpixelConfig {
    #[serde(flatten)]
    pub felz: FelzParams,
    /// Smallest segment eligible as a pseudo label, in pixels.
    pub min_fg: usize,
}

impl Default for SuperpixelConfig {
    fn default() -> Self {
        Self {
            felz: FelzParams::default(),
            min_fg: scaled_min_pseudo_label(32),
        }
    }
}

/// Minimum pseudo-label size of 400 px at 256x256, scaled by image area.
pub fn scaled_min_pseudo_label(image_size: usize) -> usize {
    let side = image_size as f64 / 256.0;
    ((400.0 * side * side).floor() as usize).max(1)
}
