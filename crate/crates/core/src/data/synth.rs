//! Synthetic tabletop scenes with transparent objects.
//!
//! A camera looks at a slightly tilted table plane carrying low objects
//! (sphere caps, boxes, lying cylinders). Depth is analytic and z-buffered;
//! color is Lambert-shaded over a checker texture, with transparent
//! objects alpha-blended over whatever lies behind them.

use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::corrupt::{corrupt_depth, CorruptionConfig};
use super::sample::{quantize_depth, CameraIntrinsics, RgbdSample};
use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ShapeKind {
    SphereCap,
    Box,
    Cylinder,
}

#[derive(Clone, Debug, PartialEq)]
pub struct SynthConfig {
    pub width: usize,
    pub height: usize,
    pub min_objects: usize,
    pub max_objects: usize,
    pub shapes: Vec<ShapeKind>,
    /// Range of the table depth at the image center, meters.
    pub background_depth: (f64, f64),
    /// Range of object heights above the table, meters.
    pub object_height: (f64, f64),
    /// Object footprint radius as a fraction of the shorter image side.
    pub object_radius: (f64, f64),
    pub transparent_prob: f64,
    /// Opacity of transparent objects in the color image.
    pub transparent_alpha: f64,
    pub corruption: CorruptionConfig,
    pub seed: u64,
}

impl Default for SynthConfig {
    fn default() -> Self {
        Self {
            width: 64,
            height: 48,
            min_objects: 1,
            max_objects: 3,
            shapes: vec![ShapeKind::SphereCap, ShapeKind::Box, ShapeKind::Cylinder],
            background_depth: (0.6, 0.9),
            object_height: (0.02, 0.06),
            object_radius: (0.12, 0.25),
            transparent_prob: 0.7,
            transparent_alpha: 0.15,
            corruption: CorruptionConfig::default(),
            seed: 0,
        }
    }
}

impl SynthConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::Config(m.to_string()));
        if self.width == 0 || self.height == 0 {
            return bad("image extents must be positive");
        }
        if self.min_objects > self.max_objects {
            return bad("min_objects exceeds max_objects");
        }
        if self.max_objects > 0 && self.shapes.is_empty() {
            return bad("no shapes enabled");
        }
        let (lo, hi) = self.background_depth;
        if !(lo > 0.0 && hi >= lo) {
            return bad("background depth range must be positive and ordered");
        }
        let (lo, hi) = self.object_height;
        if !(lo >= 0.0 && hi >= lo) {
            return bad("object height range must be nonnegative and ordered");
        }
        let (lo, hi) = self.object_radius;
        if !(lo > 0.0 && hi >= lo) {
            return bad("object radius range must be positive and ordered");
        }
        if !(0.0..=1.0).contains(&self.transparent_prob) || !(0.0..=1.0).contains(&self.transparent_alpha) {
            return bad("probabilities must lie in [0, 1]");
        }
        self.corruption.validate()
    }

    pub fn intrinsics(&self) -> CameraIntrinsics {
        let f = 0.9 * self.width.max(self.height) as f64;
        CameraIntrinsics { fx: f, fy: f, cx: (self.width as f64 - 1.0) / 2.0, cy: (self.height as f64 - 1.0) / 2.0 }
    }
}

/// Table plane `depth(u, v) = base + tilt_u·(u − cx)/W + tilt_v·(v − cy)/H`.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Plane {
    pub base: f64,
    pub tilt_u: f64,
    pub tilt_v: f64,
    pub cx: f64,
    pub cy: f64,
    pub width: f64,
    pub height: f64,
}

impl Plane {
    pub fn depth(&self, u: f64, v: f64) -> f64 {
        self.base + self.tilt_u * (u - self.cx) / self.width + self.tilt_v * (v - self.cy) / self.height
    }
}

/// An object resting on the table, described in image space.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Primitive {
    pub kind: ShapeKind,
    pub cu: f64,
    pub cv: f64,
    /// Half extent along the object's axis (pixels).
    pub half_len: f64,
    /// Half extent across the axis, or the cap radius (pixels).
    pub radius: f64,
    pub angle: f64,
    /// Height above the table (meters).
    pub rise: f64,
    pub transparent: bool,
    pub albedo: [f64; 3],
}

impl Primitive {
    /// Depth of the object's visible surface at pixel `(u, v)`, if covered.
    pub fn depth_at(&self, u: f64, v: f64, plane: &Plane) -> Option<f64> {
        let (du, dv) = (u - self.cu, v - self.cv);
        let (s, c) = self.angle.sin_cos();
        let along = du * c + dv * s;
        let across = -du * s + dv * c;
        match self.kind {
            ShapeKind::SphereCap => {
                let rho2 = (du * du + dv * dv) / (self.radius * self.radius);
                (rho2 < 1.0).then(|| plane.depth(u, v) - self.rise * (1.0 - rho2).sqrt())
            }
            ShapeKind::Box => (along.abs() <= self.half_len && across.abs() <= self.radius)
                .then(|| plane.depth(self.cu, self.cv) - self.rise),
            ShapeKind::Cylinder => {
                let t = across / self.radius;
                (along.abs() <= self.half_len && t.abs() < 1.0)
                    .then(|| plane.depth(u, v) - self.rise * (1.0 - t * t).sqrt())
            }
        }
    }

    /// Inclusive pixel bounding box `(u0, v0, u1, v1)` clipped to the image.
    pub fn bounds(&self, width: usize, height: usize) -> (usize, usize, usize, usize) {
        let reach = self.half_len.hypot(self.radius).ceil() + 1.0;
        let clip = |x: f64, n: usize| x.clamp(0.0, (n - 1) as f64) as usize;
        (
            clip(self.cu - reach, width),
            clip(self.cv - reach, height),
            clip(self.cu + reach, width),
            clip(self.cv + reach, height),
        )
    }
}

/// A rendered scene: the clean sample plus the depth that is visible when
/// transparent objects are removed.
#[derive(Clone, Debug)]
pub struct Scene {
    pub sample: RgbdSample,
    /// Depth behind transparent objects (meters).
    pub behind_depth: Vec<f32>,
    pub plane: Plane,
    pub primitives: Vec<Primitive>,
}

fn random_primitive<R: Rng>(cfg: &SynthConfig, rng: &mut R) -> Primitive {
    let short = cfg.width.min(cfg.height) as f64;
    let kind = cfg.shapes[rng.gen_range(0..cfg.shapes.len())];
    let radius = short * rng.gen_range(cfg.object_radius.0..=cfg.object_radius.1);
    let half_len = match kind {
        ShapeKind::SphereCap => radius,
        ShapeKind::Box => radius * rng.gen_range(0.6..=1.4),
        ShapeKind::Cylinder => radius * rng.gen_range(1.5..=2.5),
    };
    Primitive {
        kind,
        cu: rng.gen_range(0.0..cfg.width as f64),
        cv: rng.gen_range(0.0..cfg.height as f64),
        half_len,
        radius: match kind {
            ShapeKind::Cylinder => radius * 0.6,
            _ => radius,
        },
        angle: rng.gen_range(0.0..std::f64::consts::PI),
        rise: rng.gen_range(cfg.object_height.0..=cfg.object_height.1),
        transparent: rng.gen_bool(cfg.transparent_prob),
        albedo: [rng.gen_range(0.3..1.0), rng.gen_range(0.3..1.0), rng.gen_range(0.3..1.0)],
    }
}

/// Z-buffers the primitives over the plane. Returns depth and, per pixel,
/// the index of the visible primitive.
pub fn zbuffer(
    width: usize,
    height: usize,
    plane: &Plane,
    primitives: &[Primitive],
    include: impl Fn(&Primitive) -> bool,
) -> (Vec<f64>, Vec<Option<usize>>) {
    let mut depth: Vec<f64> = (0..width * height).map(|i| plane.depth((i % width) as f64, (i / width) as f64)).collect();
    let mut owner = vec![None; width * height];
    for (k, p) in primitives.iter().enumerate().filter(|(_, p)| include(p)) {
        let (u0, v0, u1, v1) = p.bounds(width, height);
        for v in v0..=v1 {
            for u in u0..=u1 {
                if let Some(z) = p.depth_at(u as f64, v as f64, plane) {
                    let i = v * width + u;
                    if z < depth[i] {
                        depth[i] = z;
                        owner[i] = Some(k);
                    }
                }
            }
        }
    }
    (depth, owner)
}

fn shade(depth: &[f64], width: usize, height: usize, i: usize, intr: &CameraIntrinsics) -> f64 {
    let (u, v) = (i % width, i / width);
    let z = depth[i];
    let du = if u + 1 < width { depth[i + 1] - z } else { z - depth[i - 1] };
    let dv = if v + 1 < height { depth[i + width] - z } else { z - depth[i - width] };
    // metric slopes; normal (−∂z/∂x, −∂z/∂y, 1) lit from the upper left
    let (gx, gy) = (du * intr.fx / z, dv * intr.fy / z);
    let n = [-gx, -gy, 1.0];
    let norm = (n[0] * n[0] + n[1] * n[1] + 1.0).sqrt();
    let l = [-0.4, -0.5, 0.77];
    let lambert = (n[0] * l[0] + n[1] * l[1] + n[2] * l[2]) / norm;
    0.35 + 0.65 * lambert.max(0.0)
}

/// Renders one clean scene (raw depth equals ground truth).
pub fn generate_scene(cfg: &SynthConfig) -> Result<Scene> {
    cfg.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let (w, h) = (cfg.width, cfg.height);
    let intr = cfg.intrinsics();
    let plane = Plane {
        base: rng.gen_range(cfg.background_depth.0..=cfg.background_depth.1),
        tilt_u: rng.gen_range(-0.05..=0.05),
        tilt_v: rng.gen_range(-0.15..=0.0),
        cx: intr.cx,
        cy: intr.cy,
        width: w as f64,
        height: h as f64,
    };
    let count = rng.gen_range(cfg.min_objects..=cfg.max_objects);
    let primitives: Vec<Primitive> = (0..count).map(|_| random_primitive(cfg, &mut rng)).collect();
    let checker: [[f64; 3]; 2] = [
        [rng.gen_range(0.5..0.9), rng.gen_range(0.5..0.9), rng.gen_range(0.5..0.9)],
        [rng.gen_range(0.1..0.4), rng.gen_range(0.1..0.4), rng.gen_range(0.1..0.4)],
    ];
    let cell = (w.min(h) / 6).max(2);

    let (depth, owner) = zbuffer(w, h, &plane, &primitives, |_| true);
    let (behind, behind_owner) = zbuffer(w, h, &plane, &primitives, |p| !p.transparent);

    let mut rgb = vec![0u8; 3 * w * h];
    let mut mask = vec![0u8; w * h];
    for i in 0..w * h {
        let (u, v) = (i % w, i / w);
        let back_albedo = match behind_owner[i] {
            Some(k) => primitives[k].albedo,
            None => checker[((u / cell) + (v / cell)) % 2],
        };
        let back_shade = shade(&behind, w, h, i, &intr);
        let mut color = back_albedo.map(|a| a * back_shade);
        if let Some(k) = owner[i].filter(|&k| primitives[k].transparent) {
            mask[i] = 1;
            let p = &primitives[k];
            let s = shade(&depth, w, h, i, &intr);
            let a = cfg.transparent_alpha;
            for (c, alb) in color.iter_mut().zip(p.albedo) {
                *c = (1.0 - a) * *c + a * alb * s;
            }
        }
        for (ch, c) in color.iter().enumerate() {
            rgb[3 * i + ch] = (c.clamp(0.0, 1.0) * 255.0).round() as u8;
        }
    }
    // faint rim on transparent silhouettes
    for i in 0..w * h {
        if mask[i] == 1 {
            let (u, v) = (i % w, i / w);
            let edge = (u > 0 && mask[i - 1] == 0)
                || (u + 1 < w && mask[i + 1] == 0)
                || (v > 0 && mask[i - w] == 0)
                || (v + 1 < h && mask[i + w] == 0);
            if edge {
                for ch in 0..3 {
                    rgb[3 * i + ch] = rgb[3 * i + ch].saturating_add(40);
                }
            }
        }
    }

    let gt: Vec<f32> = depth.iter().map(|&d| quantize_depth(d as f32)).collect();
    let behind_depth = behind.iter().map(|&d| quantize_depth(d as f32)).collect();
    let sample = RgbdSample::new(h, w, rgb, gt.clone(), gt, mask, intr)?;
    Ok(Scene { sample, behind_depth, plane, primitives })
}

/// Renders a scene and corrupts its raw depth, all from `cfg.seed`.
pub fn generate_sample(cfg: &SynthConfig) -> Result<RgbdSample> {
    let scene = generate_scene(cfg)?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed ^ 0x9e37_79b9_7f4a_7c15);
    Ok(corrupt_depth(&scene.sample, &scene.behind_depth, &cfg.corruption, &mut rng))
}
