use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use tode_core::data::CameraIntrinsics;
use tode_core::geometry::{depth_to_pointcloud, parse_ply, ply_string, pointcloud_to_depth, read_ply, write_ply, PointCloud};

fn random_intrinsics(rng: &mut ChaCha8Rng, h: usize, w: usize) -> CameraIntrinsics {
    CameraIntrinsics::new(
        rng.gen_range(10.0..500.0),
        rng.gen_range(10.0..500.0),
        rng.gen_range(0.0..w as f64),
        rng.gen_range(0.0..h as f64),
    )
    .unwrap()
}

fn round_trip_error(seed: u64) -> f32 {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let (h, w) = (rng.gen_range(1..40), rng.gen_range(1..40));
    let intr = random_intrinsics(&mut rng, h, w);
    let depth: Vec<f32> = (0..h * w).map(|_| if rng.gen_bool(0.1) { 0.0 } else { rng.gen_range(0.05..20.0) }).collect();
    let pc = depth_to_pointcloud(&depth, h, w, None, &intr).unwrap();
    assert_eq!(pc.len(), depth.iter().filter(|&&d| d > 0.0).count());
    let back = pointcloud_to_depth(&pc, &intr, h, w);
    depth.iter().zip(&back).map(|(a, b)| (a - b).abs()).fold(0.0, f32::max)
}

#[test]
fn pinhole_example() {
    let intr = CameraIntrinsics::new(2.0, 3.0, 1.0, 2.0).unwrap();
    let (h, w) = (5, 4);
    let mut depth = vec![0.0f32; h * w];
    depth[2 * w + 3] = 1.0; // (u, v) = (cx + fx, cy)
    let pc = depth_to_pointcloud(&depth, h, w, None, &intr).unwrap();
    assert_eq!(pc.points, vec![[1.0, 0.0, 1.0]]);
}

#[test]
fn colors_come_from_rgb() {
    let intr = CameraIntrinsics::new(1.0, 1.0, 0.0, 0.0).unwrap();
    let rgb = [1, 2, 3, 4, 5, 6];
    let pc = depth_to_pointcloud(&[0.0, 2.0], 1, 2, Some(&rgb), &intr).unwrap();
    assert_eq!(pc.colors, vec![[4, 5, 6]]);
    assert!(depth_to_pointcloud(&[1.0, 2.0], 1, 2, Some(&rgb[..3]), &intr).is_err());
}

#[test]
fn round_trip_over_random_maps_and_intrinsics() {
    let worst = (0..200).map(round_trip_error).fold(0.0, f32::max);
    assert!(worst < 1e-5, "max abs error {worst}");
}

#[test]
fn points_behind_or_outside_are_dropped() {
    let intr = CameraIntrinsics::new(10.0, 10.0, 1.0, 1.0).unwrap();
    let pc = PointCloud::new(vec![[0.0, 0.0, -1.0], [100.0, 0.0, 1.0], [0.0, 0.0, 2.0]], vec![[0; 3]; 3]).unwrap();
    let d = pointcloud_to_depth(&pc, &intr, 3, 3);
    assert_eq!(d, vec![0.0, 0.0, 0.0, 0.0, 2.0, 0.0, 0.0, 0.0, 0.0]);
}

#[test]
fn ply_file_round_trip() {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let points: Vec<[f32; 3]> = (0..50).map(|_| [rng.gen_range(-3.0..3.0), rng.gen(), rng.gen_range(0.1..9.0)]).collect();
    let colors: Vec<[u8; 3]> = (0..50).map(|_| [rng.gen(), rng.gen(), rng.gen()]).collect();
    let pc = PointCloud::new(points, colors).unwrap();
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("cloud.ply");
    write_ply(&pc, &path).unwrap();
    assert_eq!(read_ply(&path).unwrap(), pc);
    let text = std::fs::read_to_string(&path).unwrap();
    assert!(text.starts_with("ply\nformat ascii 1.0\n"));
    assert!(text.contains("element vertex 50\n"));
}

#[test]
fn malformed_ply_is_rejected() {
    let good = ply_string(&PointCloud::new(vec![[1.0, 2.0, 3.0]], vec![[9, 9, 9]]).unwrap());
    for bad in [
        good.replace("element vertex 1", "element vertex 2"),
        good.replace("property uchar red", "property float red"),
        good.replace("9 9 9", "9 9"),
        good.replace("9 9 9", "9 9 300"),
        good.replacen("ply", "plx", 1),
    ] {
        assert!(parse_ply(&bad).is_err(), "accepted:\n{bad}");
    }
}

proptest! {
    #[test]
    fn ply_reparse_is_exact(pts in prop::collection::vec((-1e4f32..1e4, -1e4f32..1e4, 0.0f32..1e4, any::<[u8; 3]>()), 0..40)) {
        let pc = PointCloud::new(pts.iter().map(|p| [p.0, p.1, p.2]).collect(), pts.iter().map(|p| p.3).collect()).unwrap();
        prop_assert_eq!(parse_ply(&ply_string(&pc)).unwrap(), pc);
    }

    #[test]
    fn depth_cloud_depth_is_identity(seed in any::<u64>()) {
        prop_assert!(round_trip_error(seed) < 1e-5);
    }
}
