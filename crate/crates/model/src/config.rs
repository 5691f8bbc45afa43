use serde::{Deserialize, Serialize};

use crate::error::{ModelError, Result};

pub const HEAD_DIM: usize = 16;

fn default_true() -> bool {
    true
}

fn one() -> f64 {
    1.0
}

/// Architecture hyper-parameters. `num_heads` lists one head count per
/// token width `[C_0, C_1, …, C_L]` with `C_0 = C_1 / 2` the patch-embedding
/// width; leave it empty to derive `max(1, C / 16)`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub grid_height: usize,
    pub grid_width: usize,
    pub curve_len: usize,
    pub d_mat: usize,
    pub magn_channels: usize,
    pub stage_channels: Vec<usize>,
    pub depth: usize,
    pub window_size: usize,
    pub patch_size: usize,
    #[serde(default)]
    pub num_heads: Vec<usize>,
    pub mlp_ratio: f64,
    pub out_channels: usize,
    #[serde(default = "default_true")]
    pub shifted_windows: bool,
    /// Multipliers applied to the raw inputs (heights in mm, stresses in MPa)
    /// before the first layer. Targets are never rescaled.
    #[serde(default = "one")]
    pub height_scale: f64,
    #[serde(default = "one")]
    pub stress_scale: f64,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            grid_height: 64,
            grid_width: 64,
            curve_len: stamp_core::materials::CURVE_LEN,
            d_mat: 32,
            magn_channels: 16,
            stage_channels: vec![32, 64, 128, 256],
            depth: 2,
            window_size: 4,
            patch_size: 2,
            num_heads: Vec::new(),
            mlp_ratio: 4.0,
            out_channels: 1,
            shifted_windows: true,
            height_scale: 1.0,
            stress_scale: 1.0,
        }
    }
}

impl ModelConfig {
    pub fn with_out_channels(mut self, out_channels: usize) -> Self {
        self.out_channels = out_channels;
        self
    }

    /// Small three-stage network used for the desk-scale experiments.
    pub fn toy(out_channels: usize) -> Self {
        Self {
            d_mat: 16,
            magn_channels: 8,
            stage_channels: vec![16, 32, 64],
            mlp_ratio: 2.0,
            out_channels,
            height_scale: 0.1,
            stress_scale: 1e-3,
            ..Self::default()
        }
    }

    /// 16×16 network with every parameter group holding at least 64 values.
    pub fn grad_check() -> Self {
        Self {
            grid_height: 16,
            grid_width: 16,
            d_mat: 64,
            magn_channels: 8,
            stage_channels: vec![16, 32],
            mlp_ratio: 2.0,
            out_channels: 1,
            height_scale: 0.1,
            stress_scale: 1e-3,
            ..Self::default()
        }
    }

    /// Full-blank resolution; 608 is not a multiple of 64, so windows are 2.
    pub fn full(out_channels: usize) -> Self {
        Self {
            grid_height: 608,
            grid_width: 768,
            window_size: 2,
            out_channels,
            ..Self::default()
        }
    }

    pub fn num_stages(&self) -> usize {
        self.stage_channels.len()
    }

    /// Grid dimensions must be multiples of this.
    pub fn alignment(&self) -> usize {
        self.patch_size * (1 << (self.num_stages().saturating_sub(1))) * self.window_size
    }

    /// Token widths `[C_0, …, C_L]`.
    pub fn widths(&self) -> Vec<usize> {
        let mut w = Vec::with_capacity(self.num_stages() + 1);
        w.push(self.stage_channels[0] / 2);
        w.extend_from_slice(&self.stage_channels);
        w
    }

    pub fn heads(&self, level: usize) -> usize {
        if self.num_heads.is_empty() {
            (self.widths()[level] / HEAD_DIM).max(1)
        } else {
            self.num_heads[level]
        }
    }

    pub fn heads_for_width(width: usize) -> usize {
        (width / HEAD_DIM).max(1)
    }

    /// Token-grid resolution `(H_l, W_l)` at level `l` (0 = after patch embedding).
    pub fn resolution(&self, level: usize) -> (usize, usize) {
        let f = self.patch_size << level;
        (self.grid_height / f, self.grid_width / f)
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(ModelError::Config(m));
        if self.stage_channels.is_empty() {
            return bad("stage_channels must not be empty".into());
        }
        if self.stage_channels[0] < 2 || self.stage_channels[0] % 2 != 0 {
            return bad("stage_channels[0] must be even".into());
        }
        for w in self.stage_channels.windows(2) {
            if w[1] != 2 * w[0] {
                return bad(format!("stage_channels must double per stage, got {:?}", self.stage_channels));
            }
        }
        if self.out_channels != 1 && self.out_channels != 3 {
            return bad(format!("out_channels must be 1 or 3, got {}", self.out_channels));
        }
        if self.window_size == 0 || self.patch_size == 0 || self.depth == 0 {
            return bad("window_size, patch_size and depth must be positive".into());
        }
        if self.d_mat == 0 || self.magn_channels == 0 || self.curve_len == 0 {
            return bad("d_mat, magn_channels and curve_len must be positive".into());
        }
        if !(self.mlp_ratio > 0.0) || !(self.height_scale > 0.0) || !(self.stress_scale > 0.0) {
            return bad("mlp_ratio and input scales must be positive".into());
        }
        let a = self.alignment();
        if self.grid_height == 0 || self.grid_height % a != 0 || self.grid_width == 0 || self.grid_width % a != 0 {
            return bad(format!(
                "grid {}x{} must be a multiple of {a} (patch {} x 2^{} x window {})",
                self.grid_height,
                self.grid_width,
                self.patch_size,
                self.num_stages() - 1,
                self.window_size
            ));
        }
        if !self.num_heads.is_empty() && self.num_heads.len() != self.num_stages() + 1 {
            return bad(format!(
                "num_heads needs {} entries (one per width C_0..C_L)",
                self.num_stages() + 1
            ));
        }
        for (l, &w) in self.widths().iter().enumerate() {
            let h = self.heads(l);
            if h == 0 || w % h != 0 {
                return bad(format!("width {w} is not divisible by {h} heads"));
            }
        }
        for d in [self.d_mat] {
            if d % Self::heads_for_width(d) != 0 {
                return bad(format!("d_mat {d} is not divisible by its head count"));
            }
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn presets_validate() {
        for c in [
            ModelConfig::default(),
            ModelConfig::toy(1),
            ModelConfig::toy(3),
            ModelConfig::grad_check(),
            ModelConfig::full(3),
        ] {
            c.validate().unwrap();
        }
        assert_eq!(ModelConfig::default().alignment(), 64);
        assert_eq!(ModelConfig::full(1).alignment(), 32);
    }

    #[test]
    fn rejects_bad_configs() {
        let mut c = ModelConfig::default();
        c.grid_height = 48;
        assert!(c.validate().is_err());
        let mut c = ModelConfig::default();
        c.stage_channels = vec![32, 48];
        assert!(c.validate().is_err());
        let c = ModelConfig::default().with_out_channels(2);
        assert!(c.validate().is_err());
    }

    #[test]
    fn schedule() {
        let c = ModelConfig::default();
        assert_eq!(c.widths(), vec![16, 32, 64, 128, 256]);
        assert_eq!(c.resolution(0), (32, 32));
        assert_eq!(c.resolution(4), (2, 2));
        assert_eq!((0..5).map(|l| c.heads(l)).collect::<Vec<_>>(), vec![1, 2, 4, 8, 16]);
    }
}
