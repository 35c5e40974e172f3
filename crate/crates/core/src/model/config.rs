use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::sampling::{CROP, N_CHANNELS};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelConfig {
    pub depth: usize,
    pub dim: usize,
    pub heads_spatial: usize,
    pub heads_axial: usize,
    /// Patch edge in voxels.
    pub patch: usize,
    /// Patches per crop axis.
    pub grid: usize,
    pub n_queries: usize,
    pub detector_heads: usize,
    pub decoder_depth: usize,
    pub decoder_dim: usize,
    pub decoder_heads: usize,
    pub ffn_ratio: usize,
    /// Column attention window in slices; `None` is full-column attention.
    pub axial_window: Option<usize>,
    /// Size-head output is `exp(raw) * side_prior_mm`.
    pub side_prior_mm: f64,
}

impl Default for ModelConfig {
    /// Desk-scale defaults.
    fn default() -> Self {
        Self {
            depth: 2,
            dim: 64,
            heads_spatial: 8,
            heads_axial: 8,
            patch: 4,
            grid: 16,
            n_queries: 8,
            detector_heads: 8,
            decoder_depth: 2,
            decoder_dim: 64,
            decoder_heads: 8,
            ffn_ratio: 4,
            axial_window: None,
            side_prior_mm: 4.0,
        }
    }
}

impl ModelConfig {
    /// Published full-size setting: 6 layers, width 384, matching decoder.
    pub fn full_scale() -> Self {
        Self {
            depth: 6,
            dim: 384,
            decoder_depth: 6,
            decoder_dim: 384,
            ..Self::default()
        }
    }

    /// Raw values per token: patch^3 voxels times input channels.
    pub fn token_len(&self) -> usize {
        self.patch.pow(3) * N_CHANNELS
    }

    pub fn n_tokens(&self) -> usize {
        self.grid.pow(3)
    }

    pub fn validate(&self) -> Result<()> {
        let err = |m: String| Err(Error::Config(m));
        if self.patch * self.grid != CROP {
            return err(format!("patch {} x grid {} must equal crop {CROP}", self.patch, self.grid));
        }
        for (name, dim, heads) in [
            ("encoder spatial", self.dim, self.heads_spatial),
            ("encoder axial", self.dim, self.heads_axial),
            ("detector", self.dim, self.detector_heads),
            ("decoder", self.decoder_dim, self.decoder_heads),
        ] {
            if heads == 0 || dim % heads != 0 {
                return err(format!("{name}: dim {dim} not divisible by {heads} heads"));
            }
        }
        for (name, dim) in [("dim", self.dim), ("decoder_dim", self.decoder_dim)] {
            if dim < 6 || dim % 2 != 0 {
                return err(format!("{name} {dim} must be even and at least 6 for the 3D sinusoidal encoding"));
            }
        }
        if self.depth == 0 {
            return err("encoder depth must be at least 1".into());
        }
        if self.n_queries == 0 || self.ffn_ratio == 0 {
            return err("n_queries and ffn_ratio must be positive".into());
        }
        if !(self.side_prior_mm > 0.0) {
            return err(format!("side_prior_mm {} must be positive", self.side_prior_mm));
        }
        Ok(())
    }
}
