//! Loading, normalizing, augmenting and splitting image slices.

pub mod io;
pub mod manifest;
pub mod slice;
pub mod split;
pub mod transform;

pub use manifest::{
    label_path_for, load_labels, load_manifest, load_manifest_with_folds, load_slice, DatasetManifest, ManifestRecord,
};
pub use slice::{ImageSlice, LabelMap, Mask};
pub use split::{build_split, Setting, SplitPlan};
pub use transform::{apply_paired_transform, sample_views, Interval, TransformSpec};
