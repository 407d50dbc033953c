//! Cropping and training-time augmentation.
//!
//! Geometry (crop, flip) hits every plane identically; photometric jitter
//! touches only the RGB image. All randomness derives from
//! `(global_seed, sample id)`, so parallel and serial loading agree.

use ndarray::{Array2, Array3};
use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use sha2::{Digest, Sha256};

use crate::data::SceneSample;
use crate::error::{DepthfillError, Result};

/// Fixed evaluation crop (rows, cols), keeping the bottom of the frame where
/// range returns live.
pub const BOTTOM_CROP: (usize, usize) = (352, 1252);

/// Training crop size (rows, cols).
pub const TRAIN_CROP: (usize, usize) = (320, 1216);

const JITTER_RANGE: f64 = 0.4;

/// Index-select a window from every plane.
pub fn crop_sample(
    sample: &SceneSample,
    y0: usize,
    x0: usize,
    ch: usize,
    cw: usize,
) -> Result<SceneSample> {
    let (h, w) = sample.gt_depth.dim();
    if y0 + ch > h || x0 + cw > w {
        return Err(DepthfillError::dimension(
            "crop window",
            format!("within {h}x{w}"),
            format!("[{y0}..{}, {x0}..{}]", y0 + ch, x0 + cw),
        ));
    }
    let crop3 = |a: &Array3<f64>| {
        Array3::from_shape_fn((3, ch, cw), |(c, y, x)| a[[c, y0 + y, x0 + x]])
    };
    let crop2 = |a: &Array2<f64>| Array2::from_shape_fn((ch, cw), |(y, x)| a[[y0 + y, x0 + x]]);
    SceneSample::new(
        crop3(&sample.rgb),
        crop3(&sample.semantic),
        crop2(&sample.sparse_depth),
        crop2(&sample.gt_depth),
        sample.id.clone(),
    )
}

/// Keep the bottom rows and a width-centered window at the fixed evaluation
/// size. Pure index selection: valid pixels inside the window are preserved.
pub fn bottom_crop(sample: &SceneSample) -> Result<SceneSample> {
    let (th, tw) = BOTTOM_CROP;
    let (h, w) = sample.gt_depth.dim();
    if h < th || w < tw {
        return Err(DepthfillError::dimension(
            "bottom crop input",
            format!("at least {th}x{tw}"),
            format!("{h}x{w}"),
        ));
    }
    crop_sample(sample, h - th, (w - tw) / 2, th, tw)
}

/// Mirror every plane horizontally.
pub fn hflip_sample(sample: &SceneSample) -> SceneSample {
    let (h, w) = sample.gt_depth.dim();
    let flip3 = |a: &Array3<f64>| Array3::from_shape_fn((3, h, w), |(c, y, x)| a[[c, y, w - 1 - x]]);
    let flip2 = |a: &Array2<f64>| Array2::from_shape_fn((h, w), |(y, x)| a[[y, w - 1 - x]]);
    SceneSample::new(
        flip3(&sample.rgb),
        flip3(&sample.semantic),
        flip2(&sample.sparse_depth),
        flip2(&sample.gt_depth),
        sample.id.clone(),
    )
    .expect("flip preserves validity")
}

/// Brightness, contrast, and saturation scaling on a color image, each factor
/// around 1. Results clamp to [0, 1].
pub fn color_jitter(rgb: &Array3<f64>, brightness: f64, contrast: f64, saturation: f64) -> Array3<f64> {
    let (_, h, w) = rgb.dim();
    let mut out = rgb.mapv(|v| (v * brightness).clamp(0.0, 1.0));
    let mean = out.sum() / (3 * h * w) as f64;
    out.mapv_inplace(|v| ((v - mean) * contrast + mean).clamp(0.0, 1.0));
    for y in 0..h {
        for x in 0..w {
            let gray = (out[[0, y, x]] + out[[1, y, x]] + out[[2, y, x]]) / 3.0;
            for c in 0..3 {
                out[[c, y, x]] = (gray + (out[[c, y, x]] - gray) * saturation).clamp(0.0, 1.0);
            }
        }
    }
    out
}

fn sample_rng(global_seed: u64, id: &str) -> ChaCha8Rng {
    let mut hasher = Sha256::new();
    hasher.update(global_seed.to_le_bytes());
    hasher.update(id.as_bytes());
    let digest = hasher.finalize();
    let mut seed = [0u8; 32];
    seed.copy_from_slice(&digest);
    ChaCha8Rng::from_seed(seed)
}

/// Seeded training augmentation: random crop to [`TRAIN_CROP`], horizontal
/// flip with probability one half, color jitter on RGB only.
pub fn augment(sample: &SceneSample, global_seed: u64) -> Result<SceneSample> {
    let (th, tw) = TRAIN_CROP;
    let (h, w) = sample.gt_depth.dim();
    if h < th || w < tw {
        return Err(DepthfillError::dimension(
            "augmentation input",
            format!("at least {th}x{tw}"),
            format!("{h}x{w}"),
        ));
    }
    let mut rng = sample_rng(global_seed, &sample.id);
    let y0 = rng.random_range(0..=h - th);
    let x0 = rng.random_range(0..=w - tw);
    let mut out = crop_sample(sample, y0, x0, th, tw)?;
    if rng.random::<f64>() < 0.5 {
        out = hflip_sample(&out);
    }
    let b = 1.0 + (rng.random::<f64>() * 2.0 - 1.0) * JITTER_RANGE;
    let c = 1.0 + (rng.random::<f64>() * 2.0 - 1.0) * JITTER_RANGE;
    let s = 1.0 + (rng.random::<f64>() * 2.0 - 1.0) * JITTER_RANGE;
    out.rgb = color_jitter(&out.rgb, b, c, s);
    Ok(out)
}
