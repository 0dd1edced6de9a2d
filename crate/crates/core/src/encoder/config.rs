use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Shape of the convolutional backbone and its projection heads.
///
/// Each backbone block is `conv -> layer norm -> SiLU`, followed by a 2x2
/// average pool while the cumulative stride is below `downsample_factor`.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EncoderConfig {
    pub input_size: usize,
    pub in_channels: usize,
    pub block_channels: Vec<usize>,
    pub downsample_factor: usize,
    pub kernel_size: usize,
    /// Backbone output channels `C`; equals the last block's width.
    pub feature_dim: usize,
    /// Key and global embedding width `C'`.
    pub projection_dim: usize,
    /// Side `S` of the dense key grid.
    pub grid_size: usize,
}

impl Default for EncoderConfig {
    fn default() -> Self {
        Self {
            input_size: 32,
            in_channels: 1,
            block_channels: vec![16, 32],
            downsample_factor: 4,
            kernel_size: 3,
            feature_dim: 32,
            projection_dim: 16,
            grid_size: 4,
        }
    }
}

impl EncoderConfig {
    pub fn validate(&self) -> Result<()> {
        let err = |m: String| Err(Error::Config(format!("encoder: {m}")));
        if self.input_size == 0 || self.in_channels == 0 || self.projection_dim == 0 || self.feature_dim == 0 {
            return err("all dimensions must be positive".into());
        }
        if self.block_channels.is_empty() || self.block_channels.contains(&0) {
            return err("block_channels must be non-empty and positive".into());
        }
        if self.kernel_size.is_multiple_of(2) {
            return err(format!("kernel_size {} must be odd", self.kernel_size));
        }
        if !self.downsample_factor.is_power_of_two() {
            return err(format!(
                "downsample_factor {} is not a power of two",
                self.downsample_factor
            ));
        }
        let pools = self.downsample_factor.trailing_zeros() as usize;
        if pools > self.block_channels.len() {
            return err(format!(
                "downsample_factor {} needs {pools} blocks, have {}",
                self.downsample_factor,
                self.block_channels.len()
            ));
        }
        if !self.input_size.is_multiple_of(self.downsample_factor) {
            return err(format!(
                "input_size {} not divisible by downsample_factor {}",
                self.input_size, self.downsample_factor
            ));
        }
        if *self.block_channels.last().unwrap() != self.feature_dim {
            return err("feature_dim must equal the last block's channel count".into());
        }
        if self.grid_size == 0 || self.grid_size > self.feature_size() {
            return err(format!(
                "grid_size {} must lie in [1, {}]",
                self.grid_size,
                self.feature_size()
            ));
        }
        Ok(())
    }

    /// Side of the backbone feature map.
    pub fn feature_size(&self) -> usize {
        self.input_size / self.downsample_factor
    }

    /// Whether block `i` ends with a 2x2 pool.
    pub fn block_pools(&self, i: usize) -> bool {
        i < self.downsample_factor.trailing_zeros() as usize
    }
}
