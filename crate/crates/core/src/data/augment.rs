use rand::Rng;

use super::sample::{CameraIntrinsics, RgbdSample};

/// A composition of flips and a clockwise rotation by `quarter_turns·90°`,
/// applied in that order.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub struct Augmentation {
    pub hflip: bool,
    pub vflip: bool,
    pub quarter_turns: u8,
}

impl Augmentation {
    /// Draws a random augmentation. Quarter turns change the extents of a
    /// non-square image, so those only get 0° or 180°.
    pub fn random<R: Rng>(rng: &mut R, square: bool) -> Self {
        let hflip = rng.gen_bool(0.5);
        let vflip = rng.gen_bool(0.5);
        let quarter_turns = if square { rng.gen_range(0..4) } else { 2 * rng.gen_range(0..2) };
        Self { hflip, vflip, quarter_turns }
    }

    pub fn apply(&self, sample: &RgbdSample) -> RgbdSample {
        let mut s = sample.clone();
        if self.hflip {
            s = hflip(&s);
        }
        if self.vflip {
            s = vflip(&s);
        }
        for _ in 0..self.quarter_turns % 4 {
            s = rotate_cw(&s);
        }
        s
    }
}

/// Applies a random augmentation.
pub fn augment<R: Rng>(sample: &RgbdSample, rng: &mut R) -> RgbdSample {
    let square = sample.height() == sample.width();
    Augmentation::random(rng, square).apply(sample)
}

/// Rebuilds every plane with `src(new_index) -> old_index`.
fn remap(
    s: &RgbdSample,
    height: usize,
    width: usize,
    intrinsics: CameraIntrinsics,
    src: impl Fn(usize, usize) -> usize,
) -> RgbdSample {
    let n = height * width;
    let mut rgb = Vec::with_capacity(3 * n);
    let mut raw = Vec::with_capacity(n);
    let mut gt = Vec::with_capacity(n);
    let mut mask = Vec::with_capacity(n);
    for r in 0..height {
        for c in 0..width {
            let i = src(r, c);
            rgb.extend_from_slice(&s.rgb[3 * i..3 * i + 3]);
            raw.push(s.raw_depth[i]);
            gt.push(s.gt_depth[i]);
            mask.push(s.mask[i]);
        }
    }
    RgbdSample::new(height, width, rgb, raw, gt, mask, intrinsics).expect("remap preserves invariants")
}

pub fn hflip(s: &RgbdSample) -> RgbdSample {
    let (h, w) = (s.height(), s.width());
    let k = s.intrinsics;
    let intr = CameraIntrinsics { cx: (w - 1) as f64 - k.cx, ..k };
    remap(s, h, w, intr, |r, c| r * w + (w - 1 - c))
}

pub fn vflip(s: &RgbdSample) -> RgbdSample {
    let (h, w) = (s.height(), s.width());
    let k = s.intrinsics;
    let intr = CameraIntrinsics { cy: (h - 1) as f64 - k.cy, ..k };
    remap(s, h, w, intr, |r, c| (h - 1 - r) * w + c)
}

/// 90° clockwise: `new[r][c] = old[H−1−c][r]`.
pub fn rotate_cw(s: &RgbdSample) -> RgbdSample {
    let (h, w) = (s.height(), s.width());
    let k = s.intrinsics;
    let intr = CameraIntrinsics { fx: k.fy, fy: k.fx, cx: (h - 1) as f64 - k.cy, cy: k.cx };
    remap(s, w, h, intr, |r, c| (h - 1 - c) * w + r)
}
