use std::fs;
use std::path::Path;

use image::{GrayImage, ImageBuffer, Luma, RgbImage};

use crate::error::{Error, Result};

/// Scale between stored 16-bit depth values and meters.
pub const DEPTH_SCALE: f32 = 1000.0;

/// Pinhole intrinsics in pixels.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct CameraIntrinsics {
    pub fx: f64,
    pub fy: f64,
    pub cx: f64,
    pub cy: f64,
}

impl CameraIntrinsics {
    pub fn new(fx: f64, fy: f64, cx: f64, cy: f64) -> Result<Self> {
        if !(fx > 0.0 && fy > 0.0) || ![fx, fy, cx, cy].iter().all(|v| v.is_finite()) {
            return Err(Error::Contract(format!("invalid intrinsics fx={fx} fy={fy} cx={cx} cy={cy}")));
        }
        Ok(Self { fx, fy, cx, cy })
    }

    /// Parses four whitespace-separated numbers: `fx fy cx cy`.
    pub fn parse(text: &str) -> Result<Self> {
        let values: Vec<f64> = text
            .split_whitespace()
            .map(|t| t.parse::<f64>().map_err(|e| Error::Format(format!("intrinsics value `{t}`: {e}"))))
            .collect::<Result<_>>()?;
        match values[..] {
            [fx, fy, cx, cy] => Self::new(fx, fy, cx, cy),
            _ => Err(Error::Format(format!("intrinsics need 4 values, found {}", values.len()))),
        }
    }

    pub fn to_text(&self) -> String {
        format!("{} {} {} {}\n", self.fx, self.fy, self.cx, self.cy)
    }
}

/// One RGB-D record. Planes are row-major `H×W`; `rgb` is interleaved.
#[derive(Clone, Debug, PartialEq)]
pub struct RgbdSample {
    height: usize,
    width: usize,
    pub rgb: Vec<u8>,
    /// Sensor depth in meters, 0 where missing.
    pub raw_depth: Vec<f32>,
    pub gt_depth: Vec<f32>,
    /// 1 on transparent pixels.
    pub mask: Vec<u8>,
    pub intrinsics: CameraIntrinsics,
}

impl RgbdSample {
    pub fn new(
        height: usize,
        width: usize,
        rgb: Vec<u8>,
        raw_depth: Vec<f32>,
        gt_depth: Vec<f32>,
        mask: Vec<u8>,
        intrinsics: CameraIntrinsics,
    ) -> Result<Self> {
        let hw = height * width;
        if hw == 0 || rgb.len() != 3 * hw || raw_depth.len() != hw || gt_depth.len() != hw || mask.len() != hw {
            return Err(Error::Dimension(format!(
                "sample planes do not match {height}×{width}: rgb {}, raw {}, gt {}, mask {}",
                rgb.len(),
                raw_depth.len(),
                gt_depth.len(),
                mask.len()
            )));
        }
        let sample = Self { height, width, rgb, raw_depth, gt_depth, mask, intrinsics };
        sample.validate()?;
        Ok(sample)
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    /// Checks the plane invariants.
    pub fn validate(&self) -> Result<()> {
        if let Some(i) = self.mask.iter().position(|&m| m > 1) {
            return Err(Error::Contract(format!("mask value {} at pixel {i} is not binary", self.mask[i])));
        }
        if let Some(i) = self.raw_depth.iter().position(|d| !(*d >= 0.0 && d.is_finite())) {
            return Err(Error::Contract(format!("raw depth {} at pixel {i} is negative or not finite", self.raw_depth[i])));
        }
        if let Some(i) = (0..self.mask.len()).find(|&i| self.mask[i] == 1 && !(self.gt_depth[i] > 0.0)) {
            return Err(Error::Contract(format!("ground truth is not positive on masked pixel {i}")));
        }
        Ok(())
    }

    pub fn masked_count(&self) -> usize {
        self.mask.iter().filter(|&&m| m == 1).count()
    }
}

fn depth_to_png(depth: &[f32], height: usize, width: usize) -> ImageBuffer<Luma<u16>, Vec<u16>> {
    let data = depth.iter().map(|&d| (d * DEPTH_SCALE).round().clamp(0.0, u16::MAX as f32) as u16).collect();
    ImageBuffer::from_raw(width as u32, height as u32, data).expect("depth plane extents")
}

/// Reads a 16-bit millimeter PNG as meters.
pub fn read_depth_png(path: &Path) -> Result<(usize, usize, Vec<f32>)> {
    let img = image::open(path)?.into_luma16();
    let (w, h) = img.dimensions();
    let depth = img.into_raw().into_iter().map(|v| v as f32 / DEPTH_SCALE).collect();
    Ok((h as usize, w as usize, depth))
}

/// Writes meters as a 16-bit millimeter PNG (values rounded, saturating).
pub fn write_depth_png(path: &Path, depth: &[f32], height: usize, width: usize) -> Result<()> {
    depth_to_png(depth, height, width).save(path)?;
    Ok(())
}

fn require(dir: &Path, name: &str) -> Result<std::path::PathBuf> {
    let p = dir.join(name);
    if !p.is_file() {
        return Err(Error::Io(std::io::Error::new(
            std::io::ErrorKind::NotFound,
            format!("missing {}", p.display()),
        )));
    }
    Ok(p)
}

/// Loads a sample directory (`rgb.png`, `depth_raw.png`, `depth_gt.png`,
/// `mask.png`, `intrinsics.txt`).
pub fn load_sample(dir: &Path) -> Result<RgbdSample> {
    let rgb = image::open(require(dir, "rgb.png")?)?.into_rgb8();
    let (w, h) = (rgb.width() as usize, rgb.height() as usize);
    let (rh, rw, raw) = read_depth_png(&require(dir, "depth_raw.png")?)?;
    let (gh, gw, gt) = read_depth_png(&require(dir, "depth_gt.png")?)?;
    let mask_img = image::open(require(dir, "mask.png")?)?.into_luma8();
    let (mw, mh) = (mask_img.width() as usize, mask_img.height() as usize);
    for (name, eh, ew) in [("depth_raw.png", rh, rw), ("depth_gt.png", gh, gw), ("mask.png", mh, mw)] {
        if (eh, ew) != (h, w) {
            return Err(Error::Dimension(format!(
                "{}: {name} is {eh}×{ew} but rgb.png is {h}×{w}",
                dir.display()
            )));
        }
    }
    let mask = mask_img.into_raw().into_iter().map(|v| u8::from(v >= 128)).collect();
    let intr_text = fs::read_to_string(require(dir, "intrinsics.txt")?)?;
    let intrinsics = CameraIntrinsics::parse(&intr_text)
        .map_err(|e| Error::Format(format!("{}: {e}", dir.join("intrinsics.txt").display())))?;
    RgbdSample::new(h, w, rgb.into_raw(), raw, gt, mask, intrinsics)
}

/// Writes a sample directory in the layout read by [`load_sample`].
pub fn write_sample(dir: &Path, sample: &RgbdSample) -> Result<()> {
    fs::create_dir_all(dir)?;
    let (h, w) = (sample.height, sample.width);
    RgbImage::from_raw(w as u32, h as u32, sample.rgb.clone())
        .expect("rgb extents")
        .save(dir.join("rgb.png"))?;
    write_depth_png(&dir.join("depth_raw.png"), &sample.raw_depth, h, w)?;
    write_depth_png(&dir.join("depth_gt.png"), &sample.gt_depth, h, w)?;
    let mask: Vec<u8> = sample.mask.iter().map(|&m| if m == 1 { 255 } else { 0 }).collect();
    GrayImage::from_raw(w as u32, h as u32, mask).expect("mask extents").save(dir.join("mask.png"))?;
    fs::write(dir.join("intrinsics.txt"), sample.intrinsics.to_text())?;
    Ok(())
}

/// Rounds depth to whole millimeters, the precision of the on-disk format.
pub fn quantize_depth(d: f32) -> f32 {
    (d * DEPTH_SCALE).round().clamp(0.0, u16::MAX as f32) / DEPTH_SCALE
}
