use std::fmt;
use std::str::FromStr;

use crate::error::{Error, Result};
use crate::tensor::UpsampleMode;

/// Which planes of an RGB-D sample the network consumes.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Modality {
    Rgbd,
    Rgb,
    Depth,
}

impl Modality {
    pub fn channels(self) -> usize {
        match self {
            Modality::Rgbd => 4,
            Modality::Rgb => 3,
            Modality::Depth => 1,
        }
    }
}

impl FromStr for Modality {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "rgbd" => Ok(Modality::Rgbd),
            "rgb" => Ok(Modality::Rgb),
            "depth" => Ok(Modality::Depth),
            other => Err(Error::Config(format!("unknown modality `{other}` (expected rgbd, rgb or depth)"))),
        }
    }
}

impl fmt::Display for Modality {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Modality::Rgbd => "rgbd",
            Modality::Rgb => "rgb",
            Modality::Depth => "depth",
        })
    }
}

/// Architecture hyperparameters.
///
/// The defaults are a desk-scale choice; window 5 tiles every stage of a
/// 320×240 input exactly (160×120 down to 20×15).
#[derive(Clone, Debug, PartialEq)]
pub struct ModelConfig {
    pub modality: Modality,
    pub embed_dim: usize,
    pub stage_depths: [usize; 4],
    pub heads: [usize; 4],
    pub window: usize,
    pub use_ffm: bool,
    pub ffm_reduction: usize,
    pub height: usize,
    pub width: usize,
    /// Depth normalization constant in meters.
    pub max_depth: f64,
    pub upsample: UpsampleMode,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            modality: Modality::Rgbd,
            embed_dim: 32,
            stage_depths: [2, 2, 2, 2],
            heads: [2, 4, 8, 16],
            window: 5,
            use_ffm: true,
            ffm_reduction: 4,
            height: 240,
            width: 320,
            max_depth: 10.0,
            upsample: UpsampleMode::Bilinear,
        }
    }
}

/// Resolved geometry of one encoder stage.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct StageGeometry {
    pub height: usize,
    pub width: usize,
    pub channels: usize,
    pub heads: usize,
    /// Window actually used at this stage.
    pub window: usize,
    /// Shift used by the odd (SW-MSA) blocks.
    pub shift: usize,
}

fn gcd(a: usize, b: usize) -> usize {
    if b == 0 {
        a
    } else {
        gcd(b, a % b)
    }
}

/// Largest window not exceeding `window` that tiles an `h×w` map.
pub fn fit_window(h: usize, w: usize, window: usize) -> usize {
    let g = gcd(h, w);
    (1..=window.min(g)).rev().find(|d| g % d == 0).unwrap_or(1)
}

impl ModelConfig {
    pub fn in_channels(&self) -> usize {
        self.modality.channels()
    }

    /// Channels of encoder stage `i` (C, 2C, 4C, 8C).
    pub fn stage_channels(&self, i: usize) -> usize {
        self.embed_dim << i
    }

    /// Output channels of the four decoder stages.
    pub fn decoder_channels(&self) -> [usize; 4] {
        let c = self.embed_dim;
        [4 * c, 2 * c, c, (c / 2).max(1)]
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |msg: String| Err(Error::Config(msg));
        if self.embed_dim == 0 {
            return bad("embed_dim must be positive".into());
        }
        if self.window == 0 {
            return bad("window must be positive".into());
        }
        if self.ffm_reduction == 0 {
            return bad("ffm_reduction must be positive".into());
        }
        if !(self.max_depth > 0.0 && self.max_depth.is_finite()) {
            return bad(format!("max_depth must be positive, got {}", self.max_depth));
        }
        if self.height == 0 || self.width == 0 || self.height % 16 != 0 || self.width % 16 != 0 {
            return bad(format!(
                "input extents {}×{} must be positive multiples of 16 (patch size 2, three merges)",
                self.height, self.width
            ));
        }
        for i in 0..4 {
            let c = self.stage_channels(i);
            if self.heads[i] == 0 || c % self.heads[i] != 0 {
                return bad(format!("stage {i}: {c} channels cannot be split into {} heads", self.heads[i]));
            }
        }
        Ok(())
    }

    /// Per-stage extents, channels and the window/shift used there.
    ///
    /// When the configured window does not tile a stage, the largest
    /// smaller window that does is used. A window covering the whole stage
    /// disables the shift.
    pub fn stages(&self) -> [StageGeometry; 4] {
        std::array::from_fn(|i| {
            let h = self.height >> (i + 1);
            let w = self.width >> (i + 1);
            let window = fit_window(h, w, self.window);
            let shift = if h.min(w) <= window { 0 } else { window / 2 };
            StageGeometry { height: h, width: w, channels: self.stage_channels(i), heads: self.heads[i], window, shift }
        })
    }
}
