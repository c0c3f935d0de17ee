//! The change-detection network: a weight-shared encoder producing four
//! feature scales, one attention module per scale and a fusion head.

mod blocks;
pub mod checkpoint;
mod hanet;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nn::norm::{DEFAULT_EPS, DEFAULT_MOMENTUM};

pub use blocks::{AttentionBlock, ConvBlock, HanModule, Pcs};
pub use checkpoint::Checkpoint;
pub use hanet::{predict, EncoderFeatures, HaNet};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct HaNetConfig {
    pub in_channels: usize,
    /// Side length of the square input patches.
    pub tile: usize,
    /// Channel width of each of the four scales.
    pub stage_channels: [usize; 4],
    pub pcs_dilations: [usize; 4],
    /// Group width of each dilated branch as a fraction of its input channels.
    pub pcs_group_size_fraction: f64,
    /// Spatial sizes of scales two to four.
    pub pooled_sizes: [usize; 3],
    pub bn_momentum: f64,
    pub bn_eps: f64,
}

impl Default for HaNetConfig {
    fn default() -> Self {
        Self {
            in_channels: 3,
            tile: 256,
            stage_channels: [16, 32, 64, 128],
            pcs_dilations: [1, 2, 3, 4],
            pcs_group_size_fraction: 0.5,
            pooled_sizes: [128, 64, 32],
            bn_momentum: DEFAULT_MOMENTUM,
            bn_eps: DEFAULT_EPS,
        }
    }
}

impl HaNetConfig {
    /// Same architecture for a smaller tile, with pooled sizes halving per scale.
    pub fn for_tile(tile: usize, stage_channels: [usize; 4]) -> Self {
        Self {
            tile,
            stage_channels,
            pooled_sizes: [tile / 2, tile / 4, tile / 8],
            ..Self::default()
        }
    }

    pub fn scale_sizes(&self) -> [usize; 4] {
        [self.tile, self.pooled_sizes[0], self.pooled_sizes[1], self.pooled_sizes[2]]
    }

    pub fn pcs_groups(&self) -> usize {
        (1.0 / self.pcs_group_size_fraction).round() as usize
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |msg: String| Err(Error::Config(msg));
        if self.in_channels == 0 || self.tile == 0 {
            return bad("in_channels and tile must be positive".into());
        }
        if self.stage_channels.contains(&0) {
            return bad(format!("stage_channels must be positive, got {:?}", self.stage_channels));
        }
        let sizes = self.scale_sizes();
        if sizes.windows(2).any(|p| p[1] >= p[0]) || sizes[3] == 0 {
            return bad(format!("pooled_sizes must be strictly decreasing below the tile, got {sizes:?}"));
        }
        if self.pcs_dilations.contains(&0) {
            return bad("pcs dilations must be positive".into());
        }
        if !(self.pcs_group_size_fraction > 0.0 && self.pcs_group_size_fraction <= 1.0) {
            return bad(format!("pcs_group_size_fraction {} outside (0, 1]", self.pcs_group_size_fraction));
        }
        let groups = self.pcs_groups();
        if let Some(c) = self.stage_channels.iter().find(|&&c| (2 * c) % groups != 0) {
            return bad(format!("2 x {c} channels do not split into {groups} groups"));
        }
        Ok(())
    }
}
