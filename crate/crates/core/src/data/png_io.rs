//! PNG codecs for depth and color planes.
//!
//! Depth uses the benchmark convention: 16-bit grayscale, meters = value/256,
//! zero = no measurement. Color planes are 8-bit RGB mapped to [0, 1].

use std::path::Path;

use image::{DynamicImage, ImageBuffer, Luma, Rgb};
use ndarray::{Array2, Array3};

use crate::error::{DepthfillError, Result};

pub const DEPTH_SCALE: f64 = 256.0;

/// Load a 16-bit depth PNG. Anything but single-channel 16-bit is rejected.
pub fn load_depth_png(path: &Path) -> Result<Array2<f64>> {
    let img = image::open(path)
        .map_err(|e| DepthfillError::Format(format!("{}: {e}", path.display())))?;
    let buf = match img {
        DynamicImage::ImageLuma16(buf) => buf,
        other => {
            return Err(DepthfillError::Format(format!(
                "{}: expected 16-bit single-channel PNG, got {:?}",
                path.display(),
                other.color()
            )))
        }
    };
    let (w, h) = buf.dimensions();
    let mut out = Array2::<f64>::zeros((h as usize, w as usize));
    for (x, y, px) in buf.enumerate_pixels() {
        out[[y as usize, x as usize]] = px.0[0] as f64 / DEPTH_SCALE;
    }
    Ok(out)
}

/// Save a depth map as 16-bit grayscale, rounding to the 1/256 m grid.
pub fn save_depth_png(path: &Path, depth: &Array2<f64>) -> Result<()> {
    let (h, w) = depth.dim();
    let buf = ImageBuffer::<Luma<u16>, Vec<u16>>::from_fn(w as u32, h as u32, |x, y| {
        let v = depth[[y as usize, x as usize]] * DEPTH_SCALE;
        Luma([v.round().clamp(0.0, u16::MAX as f64) as u16])
    });
    if let Some(parent) = path.parent() {
        std::fs::create_dir_all(parent)?;
    }
    buf.save(path)
        .map_err(|e| DepthfillError::Format(format!("{}: {e}", path.display())))
}

/// Load an 8-bit RGB PNG into `(3, H, W)` with values in [0, 1].
pub fn load_color_png(path: &Path) -> Result<Array3<f64>> {
    let img = image::open(path)
        .map_err(|e| DepthfillError::Format(format!("{}: {e}", path.display())))?;
    let buf = match img {
        DynamicImage::ImageRgb8(buf) => buf,
        other => {
            return Err(DepthfillError::Format(format!(
                "{}: expected 8-bit RGB PNG, got {:?}",
                path.display(),
                other.color()
            )))
        }
    };
    let (w, h) = buf.dimensions();
    let mut out = Array3::<f64>::zeros((3, h as usize, w as usize));
    for (x, y, px) in buf.enumerate_pixels() {
        for c in 0..3 {
            out[[c, y as usize, x as usize]] = px.0[c] as f64 / 255.0;
        }
    }
    Ok(out)
}

pub fn save_color_png(path: &Path, img: &Array3<f64>) -> Result<()> {
    let (c, h, w) = img.dim();
    if c != 3 {
        return Err(DepthfillError::dimension(
            "color image",
            "3 channels".to_string(),
            format!("{c}"),
        ));
    }
    let buf = ImageBuffer::<Rgb<u8>, Vec<u8>>::from_fn(w as u32, h as u32, |x, y| {
        let px = |ch: usize| {
            (img[[ch, y as usize, x as usize]] * 255.0)
                .round()
                .clamp(0.0, 255.0) as u8
        };
        Rgb([px(0), px(1), px(2)])
    });
    if let Some(parent) = path.parent() {
        std::fs::create_dir_all(parent)?;
    }
    buf.save(path)
        .map_err(|e| DepthfillError::Format(format!("{}: {e}", path.display())))
}
