use rand::Rng;
use rand_distr::{Distribution, Normal};

use super::sample::{quantize_depth, RgbdSample};
use crate::error::{Error, Result};

/// Sensor failure model on transparent pixels.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct CorruptionConfig {
    /// Probability that a masked pixel reports the surface behind the object.
    pub p_background: f64,
    /// Probability that a masked pixel is missing (0).
    pub p_missing: f64,
    /// Probability that a masked pixel reports a noisy true depth.
    pub p_noise: f64,
    /// Gaussian sensor noise, meters.
    pub sigma: f64,
}

impl Default for CorruptionConfig {
    fn default() -> Self {
        Self { p_background: 0.5, p_missing: 0.3, p_noise: 0.2, sigma: 0.005 }
    }
}

impl CorruptionConfig {
    pub fn validate(&self) -> Result<()> {
        let ps = [self.p_background, self.p_missing, self.p_noise];
        if ps.iter().any(|p| !(0.0..=1.0).contains(p)) || ((ps.iter().sum::<f64>()) - 1.0).abs() > 1e-9 {
            return Err(Error::Config(format!("corruption probabilities {ps:?} must be in [0,1] and sum to 1")));
        }
        if !(self.sigma >= 0.0 && self.sigma.is_finite()) {
            return Err(Error::Config(format!("noise sigma {} must be nonnegative", self.sigma)));
        }
        Ok(())
    }
}

/// Which corruption a masked pixel received.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Corruption {
    Background,
    Missing,
    Noise,
}

pub fn draw_corruption<R: Rng>(cfg: &CorruptionConfig, rng: &mut R) -> Corruption {
    let u: f64 = rng.gen();
    if u < cfg.p_background {
        Corruption::Background
    } else if u < cfg.p_background + cfg.p_missing {
        Corruption::Missing
    } else {
        Corruption::Noise
    }
}

/// Replaces `raw_depth`: masked pixels follow the background / missing /
/// noise mixture, other pixels get ground truth plus Gaussian noise. Depth
/// is rounded to millimeters. `gt_depth` and `mask` are untouched.
pub fn corrupt_depth<R: Rng>(sample: &RgbdSample, behind: &[f32], cfg: &CorruptionConfig, rng: &mut R) -> RgbdSample {
    assert_eq!(behind.len(), sample.gt_depth.len(), "behind-depth plane extent");
    let noise = Normal::new(0.0, cfg.sigma).expect("sigma validated nonnegative");
    let mut out = sample.clone();
    for i in 0..out.raw_depth.len() {
        let gt = sample.gt_depth[i] as f64;
        let value = if sample.mask[i] == 1 {
            match draw_corruption(cfg, rng) {
                Corruption::Background => behind[i] as f64,
                Corruption::Missing => 0.0,
                Corruption::Noise => gt + noise.sample(rng),
            }
        } else if gt > 0.0 {
            gt + noise.sample(rng)
        } else {
            0.0
        };
        out.raw_depth[i] = quantize_depth(value.max(0.0) as f32);
    }
    out
}
