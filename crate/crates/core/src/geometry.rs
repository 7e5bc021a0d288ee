//! Depth map ↔ point cloud conversion and ASCII PLY I/O.
//!
//! Camera frame: +z forward, +x right, +y down, so pixel `(u, v)` at depth
//! `z` maps to `((u − cx)·z/fx, (v − cy)·z/fy, z)`.

use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use crate::data::CameraIntrinsics;
use crate::error::{dim_err, Error, Result};

#[derive(Clone, Debug, Default, PartialEq)]
pub struct PointCloud {
    pub points: Vec<[f32; 3]>,
    pub colors: Vec<[u8; 3]>,
}

impl PointCloud {
    pub fn new(points: Vec<[f32; 3]>, colors: Vec<[u8; 3]>) -> Result<Self> {
        if points.len() != colors.len() {
            return dim_err(format!("{} points but {} colors", points.len(), colors.len()));
        }
        if points.iter().flatten().any(|v| !v.is_finite()) {
            return Err(Error::Contract("point coordinates must be finite".into()));
        }
        Ok(Self { points, colors })
    }

    pub fn len(&self) -> usize {
        self.points.len()
    }

    pub fn is_empty(&self) -> bool {
        self.points.is_empty()
    }
}

/// Back-projects every pixel with positive depth. `rgb` is interleaved
/// `H×W×3`; without it points are white.
pub fn depth_to_pointcloud(
    depth: &[f32],
    height: usize,
    width: usize,
    rgb: Option<&[u8]>,
    intr: &CameraIntrinsics,
) -> Result<PointCloud> {
    if depth.len() != height * width {
        return dim_err(format!("depth has {} values, expected {height}×{width}", depth.len()));
    }
    if let Some(c) = rgb {
        if c.len() != 3 * depth.len() {
            return dim_err(format!("rgb has {} bytes, expected {}", c.len(), 3 * depth.len()));
        }
    }
    let mut cloud = PointCloud::default();
    for (i, &z) in depth.iter().enumerate() {
        if !(z > 0.0) {
            continue;
        }
        let (u, v, zf) = ((i % width) as f64, (i / width) as f64, z as f64);
        let x = (u - intr.cx) * zf / intr.fx;
        let y = (v - intr.cy) * zf / intr.fy;
        cloud.points.push([x as f32, y as f32, z]);
        cloud.colors.push(match rgb {
            Some(c) => [c[3 * i], c[3 * i + 1], c[3 * i + 2]],
            None => [255; 3],
        });
    }
    Ok(cloud)
}

/// Projects points to the nearest pixel, keeping the smallest depth per
/// pixel. Points behind the camera or outside the image are dropped;
/// unhit pixels are 0.
pub fn pointcloud_to_depth(pc: &PointCloud, intr: &CameraIntrinsics, height: usize, width: usize) -> Vec<f32> {
    let mut depth = vec![0.0f32; height * width];
    for &[x, y, z] in &pc.points {
        if !(z > 0.0) {
            continue;
        }
        let zf = z as f64;
        let u = (x as f64 * intr.fx / zf + intr.cx).round();
        let v = (y as f64 * intr.fy / zf + intr.cy).round();
        if u < 0.0 || v < 0.0 || u >= width as f64 || v >= height as f64 {
            continue;
        }
        let slot = &mut depth[v as usize * width + u as usize];
        if *slot == 0.0 || z < *slot {
            *slot = z;
        }
    }
    depth
}

const PLY_PROPERTIES: [&str; 6] = [
    "property float x",
    "property float y",
    "property float z",
    "property uchar red",
    "property uchar green",
    "property uchar blue",
];

pub fn ply_string(pc: &PointCloud) -> String {
    let mut out = String::from("ply\nformat ascii 1.0\ncomment camera frame: +x right, +y down, +z forward; meters\n");
    let _ = writeln!(out, "element vertex {}", pc.len());
    for p in PLY_PROPERTIES {
        out.push_str(p);
        out.push('\n');
    }
    out.push_str("end_header\n");
    for (p, c) in pc.points.iter().zip(&pc.colors) {
        let _ = writeln!(out, "{} {} {} {} {} {}", p[0], p[1], p[2], c[0], c[1], c[2]);
    }
    out
}

pub fn write_ply(pc: &PointCloud, path: &Path) -> Result<()> {
    fs::write(path, ply_string(pc))?;
    Ok(())
}

/// Parses the ASCII layout written by [`ply_string`].
pub fn parse_ply(text: &str) -> Result<PointCloud> {
    let bad = |msg: String| Error::Format(format!("PLY: {msg}"));
    let mut lines = text.lines();
    if lines.next().map(str::trim) != Some("ply") {
        return Err(bad("missing `ply` magic".into()));
    }
    if lines.next().map(str::trim) != Some("format ascii 1.0") {
        return Err(bad("only `format ascii 1.0` is supported".into()));
    }
    let mut count = None;
    let mut props = Vec::new();
    loop {
        let line = lines.next().ok_or_else(|| bad("header has no end_header".into()))?.trim();
        if line == "end_header" {
            break;
        } else if line.starts_with("comment") {
            continue;
        } else if let Some(n) = line.strip_prefix("element vertex ") {
            count = Some(n.trim().parse::<usize>().map_err(|e| bad(format!("vertex count {n:?}: {e}")))?);
        } else if line.starts_with("property") {
            props.push(line.split_whitespace().collect::<Vec<_>>().join(" "));
        } else {
            return Err(bad(format!("unexpected header line {line:?}")));
        }
    }
    let count = count.ok_or_else(|| bad("no vertex element".into()))?;
    if props != PLY_PROPERTIES {
        return Err(bad(format!("unsupported vertex properties {props:?}")));
    }
    let mut cloud = PointCloud { points: Vec::with_capacity(count), colors: Vec::with_capacity(count) };
    for k in 0..count {
        let line = lines.next().ok_or_else(|| bad(format!("expected {count} vertices, found {k}")))?;
        let f: Vec<&str> = line.split_whitespace().collect();
        if f.len() != 6 {
            return Err(bad(format!("vertex {k} has {} fields", f.len())));
        }
        let mut p = [0f32; 3];
        for (dst, s) in p.iter_mut().zip(&f[..3]) {
            *dst = s.parse().map_err(|e| bad(format!("vertex {k} coordinate {s:?}: {e}")))?;
        }
        let mut c = [0u8; 3];
        for (dst, s) in c.iter_mut().zip(&f[3..]) {
            *dst = s.parse().map_err(|e| bad(format!("vertex {k} color {s:?}: {e}")))?;
        }
        cloud.points.push(p);
        cloud.colors.push(c);
    }
    if lines.any(|l| !l.trim().is_empty()) {
        return Err(bad("trailing data after vertices".into()));
    }
    PointCloud::new(cloud.points, cloud.colors)
}

pub fn read_ply(path: &Path) -> Result<PointCloud> {
    parse_ply(&fs::read_to_string(path)?)
}
