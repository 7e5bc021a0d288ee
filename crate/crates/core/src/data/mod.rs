//! RGB-D samples: on-disk layout, synthetic scene generation, depth
//! corruption and augmentation.

mod augment;
mod corrupt;
mod sample;
mod synth;

use std::fs;
use std::path::Path;

pub use augment::{augment, hflip, rotate_cw, vflip, Augmentation};
pub use corrupt::{corrupt_depth, draw_corruption, Corruption, CorruptionConfig};
pub use sample::{
    load_sample, quantize_depth, read_depth_png, write_depth_png, write_sample, CameraIntrinsics, RgbdSample,
    DEPTH_SCALE,
};
pub use synth::{generate_sample, generate_scene, zbuffer, Plane, Primitive, Scene, ShapeKind, SynthConfig};

use crate::error::{Error, Result};

/// Name of the file listing sample directories of a dataset, one per line.
pub const MANIFEST: &str = "manifest.txt";

/// Sample directory names listed in a dataset manifest.
pub fn read_manifest(dir: &Path) -> Result<Vec<String>> {
    let text = fs::read_to_string(dir.join(MANIFEST))?;
    Ok(text.lines().map(str::trim).filter(|l| !l.is_empty() && !l.starts_with('#')).map(String::from).collect())
}

pub fn write_manifest(dir: &Path, names: &[String]) -> Result<()> {
    let mut text = String::new();
    for n in names {
        text.push_str(n);
        text.push('\n');
    }
    fs::write(dir.join(MANIFEST), text)?;
    Ok(())
}

/// Loads every sample of a dataset directory, in manifest order.
pub fn load_dataset(dir: &Path) -> Result<Vec<(String, RgbdSample)>> {
    let names = read_manifest(dir).map_err(|e| Error::Format(format!("{}: {e}", dir.join(MANIFEST).display())))?;
    names
        .into_iter()
        .map(|n| {
            let s = load_sample(&dir.join(&n))?;
            Ok((n, s))
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn small_cfg(seed: u64) -> SynthConfig {
        SynthConfig { width: 32, height: 24, seed, ..Default::default() }
    }

    #[test]
    fn empty_scene_is_background_plane() {
        let cfg = SynthConfig { min_objects: 0, max_objects: 0, ..small_cfg(3) };
        let scene = generate_scene(&cfg).unwrap();
        assert_eq!(scene.sample.masked_count(), 0);
        for (i, &d) in scene.sample.gt_depth.iter().enumerate() {
            let want = quantize_depth(scene.plane.depth((i % 32) as f64, (i / 32) as f64) as f32);
            assert_eq!(d, want);
        }
    }

    #[test]
    fn generation_is_deterministic() {
        let a = generate_sample(&small_cfg(11)).unwrap();
        let b = generate_sample(&small_cfg(11)).unwrap();
        assert_eq!(a, b);
        let c = generate_sample(&small_cfg(12)).unwrap();
        assert_ne!(a, c);
    }

    #[test]
    fn generated_samples_satisfy_invariants() {
        for seed in 0..20 {
            let s = generate_sample(&small_cfg(seed)).unwrap();
            s.validate().unwrap();
            assert!(s.gt_depth.iter().all(|&d| d > 0.0));
        }
    }

    #[test]
    fn missing_only_corruption_zeroes_mask() {
        let cfg = SynthConfig { min_objects: 2, transparent_prob: 1.0, ..small_cfg(5) };
        let scene = generate_scene(&cfg).unwrap();
        assert!(scene.sample.masked_count() > 0);
        let corr = CorruptionConfig { p_background: 0.0, p_missing: 1.0, p_noise: 0.0, sigma: 0.0 };
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let out = corrupt_depth(&scene.sample, &scene.behind_depth, &corr, &mut rng);
        for i in 0..out.mask.len() {
            if out.mask[i] == 1 {
                assert_eq!(out.raw_depth[i], 0.0);
            } else {
                assert_eq!(out.raw_depth[i], out.gt_depth[i]);
            }
        }
        assert_eq!(out.gt_depth, scene.sample.gt_depth);
        assert_eq!(out.mask, scene.sample.mask);
    }

    #[test]
    fn empty_mask_without_noise_is_identity() {
        let cfg = SynthConfig { min_objects: 0, max_objects: 0, ..small_cfg(9) };
        let scene = generate_scene(&cfg).unwrap();
        let corr = CorruptionConfig { sigma: 0.0, ..Default::default() };
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let out = corrupt_depth(&scene.sample, &scene.behind_depth, &corr, &mut rng);
        assert_eq!(out.raw_depth, out.gt_depth);
    }

    #[test]
    fn bad_corruption_mixture_rejected() {
        let corr = CorruptionConfig { p_background: 0.5, p_missing: 0.5, p_noise: 0.5, sigma: 0.0 };
        assert!(corr.validate().is_err());
    }

    #[test]
    fn intrinsics_parse() {
        let k = CameraIntrinsics::parse("500 510.5\n320 240\n").unwrap();
        assert_eq!((k.fx, k.fy, k.cx, k.cy), (500.0, 510.5, 320.0, 240.0));
        assert!(CameraIntrinsics::parse("1 2 3").is_err());
        assert!(CameraIntrinsics::parse("0 1 2 3").is_err());
        assert!(CameraIntrinsics::parse("a b c d").is_err());
    }
}
