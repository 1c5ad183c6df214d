use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Architecture of the temporal latent U-Net.
///
/// Per-frame latents enter as `stack` channels over `dim` spatial positions.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct NetConfig {
    /// Latent dimension (spatial axis length).
    pub dim: usize,
    /// Frame stack (input/output channel count).
    pub stack: usize,
    /// Channel width of each resolution level; the middle block uses the last.
    pub widths: Vec<usize>,
    /// Number of down/up levels; each level halves the spatial axis once.
    pub levels: usize,
    pub heads: usize,
    pub cond_dim: usize,
    pub emb_dim: usize,
    /// Noise embedding input is `noise_scale * (c_noise + noise_shift)`, clamped at 0.
    pub noise_scale: f64,
    pub noise_shift: f64,
    /// Disables the temporal position modulation (used by equivariance tests).
    pub temporal_embedding: bool,
}

impl Default for NetConfig {
    fn default() -> Self {
        NetConfig {
            dim: 8,
            stack: 4,
            widths: vec![32],
            levels: 1,
            heads: 4,
            cond_dim: 32,
            emb_dim: 32,
            noise_scale: 100.0,
            noise_shift: 4.0,
            temporal_embedding: true,
        }
    }
}

impl NetConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        if self.dim == 0 || self.stack == 0 {
            return bad("dim and stack must be positive".into());
        }
        if self.widths.is_empty() {
            return bad("widths must not be empty".into());
        }
        if self.levels != self.widths.len() {
            return bad(format!(
                "levels ({}) must equal the number of widths ({})",
                self.levels,
                self.widths.len()
            ));
        }
        if self.heads == 0 {
            return bad("heads must be positive".into());
        }
        if let Some(w) = self.widths.iter().find(|&&w| w == 0 || w % self.heads != 0) {
            return bad(format!("width {w} is not a positive multiple of heads {}", self.heads));
        }
        if self.emb_dim < 2 || self.emb_dim % 2 != 0 {
            return bad(format!("emb_dim must be even, got {}", self.emb_dim));
        }
        if self.cond_dim == 0 {
            return bad("cond_dim must be positive".into());
        }
        // each down level maps length L to ceil(L/2); L stays >= 1 but must start >= 1
        let mut l = self.dim;
        for _ in 0..self.levels {
            l = l.div_ceil(2);
        }
        if l == 0 {
            return bad("spatial axis vanishes after downsampling".into());
        }
        Ok(())
    }

    /// Spatial length at each level, finest first, plus the middle block.
    pub fn spatial_lengths(&self) -> Vec<usize> {
        let mut out = vec![self.dim];
        for _ in 0..self.levels {
            let l = *out.last().unwrap();
            out.push(l.div_ceil(2));
        }
        out
    }
}

/// Largest group count in {8, 4, 2, 1} dividing `channels`.
pub(crate) fn norm_groups(channels: usize) -> usize {
    [8, 4, 2, 1]
        .into_iter()
        .find(|g| channels % g == 0)
        .unwrap_or(1)
}
