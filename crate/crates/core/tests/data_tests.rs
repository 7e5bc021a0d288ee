use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use tode_core::data::{
    corrupt_depth, generate_sample, generate_scene, hflip, load_dataset, load_sample, quantize_depth, rotate_cw,
    vflip, write_manifest, write_sample, zbuffer, Augmentation, CameraIntrinsics, CorruptionConfig, RgbdSample,
    SynthConfig,
};

fn random_sample(h: usize, w: usize, seed: u64) -> RgbdSample {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let n = h * w;
    let rgb = (0..3 * n).map(|_| rng.gen()).collect();
    let gt: Vec<f32> = (0..n).map(|_| quantize_depth(rng.gen_range(0.1..6.0))).collect();
    let raw = gt.iter().map(|&g| if rng.gen_bool(0.2) { 0.0 } else { quantize_depth(g + rng.gen_range(-0.05..0.05)) }).collect();
    let mask = (0..n).map(|_| u8::from(rng.gen_bool(0.3))).collect();
    let intr = CameraIntrinsics::new(rng.gen_range(20.0..80.0), rng.gen_range(20.0..80.0), w as f64 / 2.0, h as f64 / 2.0).unwrap();
    RgbdSample::new(h, w, rgb, raw, gt, mask, intr).unwrap()
}

#[test]
fn corruption_frequencies_within_three_sigma() {
    let (h, w) = (250, 400);
    let n = h * w;
    let cfg = CorruptionConfig { p_background: 0.45, p_missing: 0.35, p_noise: 0.2, sigma: 0.003 };
    let intr = CameraIntrinsics::new(100.0, 100.0, 200.0, 125.0).unwrap();
    let clean = RgbdSample::new(h, w, vec![0; 3 * n], vec![1.0; n], vec![1.0; n], vec![1; n], intr).unwrap();
    let behind = vec![3.0f32; n];
    let out = corrupt_depth(&clean, &behind, &cfg, &mut ChaCha8Rng::seed_from_u64(5));
    let (mut bg, mut miss, mut noise) = (0usize, 0usize, 0usize);
    for &d in &out.raw_depth {
        if d == 3.0 {
            bg += 1;
        } else if d == 0.0 {
            miss += 1;
        } else {
            assert!((d - 1.0).abs() < 0.05, "noisy value {d}");
            noise += 1;
        }
    }
    for (count, p) in [(bg, cfg.p_background), (miss, cfg.p_missing), (noise, cfg.p_noise)] {
        let mean = n as f64 * p;
        let sd = (n as f64 * p * (1.0 - p)).sqrt();
        assert!((count as f64 - mean).abs() < 3.0 * sd, "{count} vs {mean} ± {}", 3.0 * sd);
    }
    assert_eq!(out.gt_depth, clean.gt_depth);
    assert_eq!(out.mask, clean.mask);
}

#[test]
fn unmasked_pixels_only_get_small_noise() {
    let s = generate_sample(&SynthConfig { width: 48, height: 32, seed: 9, ..Default::default() }).unwrap();
    for i in 0..s.mask.len() {
        if s.mask[i] == 0 {
            assert!((s.raw_depth[i] - s.gt_depth[i]).abs() < 0.04);
        }
    }
}

#[test]
fn zbuffer_matches_brute_force_minimum() {
    for seed in 0..6 {
        let cfg = SynthConfig { width: 40, height: 30, min_objects: 3, max_objects: 6, seed, ..Default::default() };
        let scene = generate_scene(&cfg).unwrap();
        let (depth, _) = zbuffer(40, 30, &scene.plane, &scene.primitives, |_| true);
        let (behind, _) = zbuffer(40, 30, &scene.plane, &scene.primitives, |p| !p.transparent);
        for v in 0..30 {
            for u in 0..40 {
                let (uf, vf) = (u as f64, v as f64);
                let hits = scene.primitives.iter().map(|p| (p, p.depth_at(uf, vf, &scene.plane)));
                let mut all = scene.plane.depth(uf, vf);
                let mut opaque = all;
                for (p, z) in hits {
                    if let Some(z) = z {
                        all = all.min(z);
                        if !p.transparent {
                            opaque = opaque.min(z);
                        }
                    }
                }
                let i = v * 40 + u;
                assert_eq!(depth[i], all, "seed {seed} pixel ({u},{v})");
                assert_eq!(behind[i], opaque);
                assert_eq!(scene.sample.gt_depth[i], quantize_depth(all as f32));
            }
        }
    }
}

#[test]
fn generated_masks_mark_visible_transparent_surfaces() {
    let cfg = SynthConfig { width: 48, height: 32, transparent_prob: 1.0, min_objects: 2, seed: 3, ..Default::default() };
    let scene = generate_scene(&cfg).unwrap();
    let s = &scene.sample;
    assert!(s.masked_count() > 0);
    for i in 0..s.mask.len() {
        let covered = s.gt_depth[i] < scene.behind_depth[i];
        if s.mask[i] == 1 {
            assert!(s.gt_depth[i] <= scene.behind_depth[i]);
        } else {
            assert!(!covered);
        }
    }
}

#[test]
fn generation_is_seeded() {
    let cfg = SynthConfig { width: 32, height: 32, seed: 42, ..Default::default() };
    assert_eq!(generate_sample(&cfg).unwrap(), generate_sample(&cfg).unwrap());
    let other = SynthConfig { seed: 43, ..cfg };
    assert_ne!(generate_sample(&other).unwrap(), generate_sample(&SynthConfig { seed: 42, ..other.clone() }).unwrap());
}

#[test]
fn sample_directory_round_trip() {
    let dir = tempfile::tempdir().unwrap();
    for seed in 0..5 {
        let s = random_sample(12 + seed as usize, 17, seed);
        let path = dir.path().join(format!("s{seed}"));
        write_sample(&path, &s).unwrap();
        assert_eq!(load_sample(&path).unwrap(), s);
    }
    let gen = generate_sample(&SynthConfig { width: 40, height: 24, seed: 1, ..Default::default() }).unwrap();
    write_sample(&dir.path().join("gen"), &gen).unwrap();
    assert_eq!(load_sample(&dir.path().join("gen")).unwrap(), gen);
}

#[test]
fn dataset_manifest_order() {
    let dir = tempfile::tempdir().unwrap();
    let names: Vec<String> = ["b", "a", "c"].iter().map(|s| s.to_string()).collect();
    for (k, n) in names.iter().enumerate() {
        write_sample(&dir.path().join(n), &random_sample(8, 8, k as u64)).unwrap();
    }
    write_manifest(dir.path(), &names).unwrap();
    let loaded = load_dataset(dir.path()).unwrap();
    assert_eq!(loaded.iter().map(|(n, _)| n.as_str()).collect::<Vec<_>>(), ["b", "a", "c"]);
    assert_eq!(loaded[1].1, random_sample(8, 8, 1));
}

#[test]
fn missing_file_is_reported() {
    let dir = tempfile::tempdir().unwrap();
    write_sample(dir.path(), &random_sample(4, 4, 0)).unwrap();
    std::fs::remove_file(dir.path().join("mask.png")).unwrap();
    let err = load_sample(dir.path()).unwrap_err().to_string();
    assert!(err.contains("mask.png"), "{err}");
}

#[test]
fn tagged_pixel_follows_rotation_and_flips() {
    let (h, w) = (5, 7);
    let mut s = random_sample(h, w, 11);
    s.gt_depth.fill(1.0);
    let (r, c) = (1, 5);
    s.gt_depth[r * w + c] = 2.5;
    let find = |x: &RgbdSample| x.gt_depth.iter().position(|&d| d == 2.5).map(|i| (i / x.width(), i % x.width())).unwrap();
    let rot = rotate_cw(&s);
    assert_eq!((rot.height(), rot.width()), (w, h));
    assert_eq!(find(&rot), (c, h - 1 - r));
    assert_eq!(find(&hflip(&s)), (r, w - 1 - c));
    assert_eq!(find(&vflip(&s)), (h - 1 - r, c));
}

#[test]
fn intrinsics_follow_the_pixels() {
    // The principal point tracks the pixel it sits on.
    let mut s = random_sample(6, 9, 12);
    s.intrinsics = CameraIntrinsics::new(30.0, 40.0, 2.0, 1.0).unwrap();
    let r = rotate_cw(&s);
    assert_eq!((r.intrinsics.cx, r.intrinsics.cy), (4.0, 2.0));
    assert_eq!((r.intrinsics.fx, r.intrinsics.fy), (40.0, 30.0));
    let f = hflip(&s);
    assert_eq!(f.intrinsics.cx, 6.0);
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(32))]

    #[test]
    fn flips_and_full_turns_are_involutions(h in 1usize..7, w in 1usize..7, seed in any::<u64>()) {
        let s = random_sample(h, w, seed);
        prop_assert_eq!(hflip(&hflip(&s)), s.clone());
        prop_assert_eq!(vflip(&vflip(&s)), s.clone());
        let four = (0..4).fold(s.clone(), |acc, _| rotate_cw(&acc));
        prop_assert_eq!(four, s.clone());
        let half = Augmentation { hflip: false, vflip: false, quarter_turns: 2 };
        prop_assert_eq!(half.apply(&s), vflip(&hflip(&s)));
    }

    #[test]
    fn augmentation_preserves_content(h in 2usize..6, seed in any::<u64>()) {
        let s = random_sample(h, h, seed);
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let a = Augmentation::random(&mut rng, true).apply(&s);
        let sorted = |v: &[f32]| { let mut v = v.to_vec(); v.sort_by(f32::total_cmp); v };
        prop_assert_eq!(sorted(&a.gt_depth), sorted(&s.gt_depth));
        prop_assert_eq!(a.masked_count(), s.masked_count());
        let rect = random_sample(h, h + 1, seed);
        let b = Augmentation::random(&mut rng, false).apply(&rect);
        prop_assert_eq!((b.height(), b.width()), (h, h + 1));
    }
}
