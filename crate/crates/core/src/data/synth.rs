//! Deterministic procedural scenes with analytic dense ground truth.
//!
//! A receding ground plane carries a handful of fronto-parallel rectangles at
//! random depths, resolved through a depth buffer. The semantic image colors
//! each surface by class; the RGB image shades by depth with class tints,
//! optional dark illumination bands, and light noise — so color is an
//! unreliable cue exactly where the semantic plane stays clean. Sparse depth
//! subsamples the ground truth at the benchmark's ~5.9% density.

use ndarray::{Array2, Array3};
use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::data::png_io::DEPTH_SCALE;
use crate::data::SceneSample;
use crate::error::{DepthfillError, Result};

/// Fraction of pixels that keep a sparse measurement.
pub const SPARSE_TARGET_RATIO: f64 = 0.059;

const GROUND_NEAR_M: f64 = 3.0;
const GROUND_FAR_M: f64 = 28.0;

const SEMANTIC_PALETTE: [[f64; 3]; 8] = [
    [0.30, 0.30, 0.30], // ground
    [0.85, 0.10, 0.10],
    [0.10, 0.75, 0.15],
    [0.15, 0.20, 0.90],
    [0.90, 0.80, 0.10],
    [0.70, 0.15, 0.80],
    [0.10, 0.80, 0.80],
    [0.95, 0.55, 0.10],
];

/// Render one scene. Identical `(seed, h, w)` produce bitwise-identical
/// samples; depths are snapped to the 1/256 m PNG grid so materializing a
/// sample to disk loses nothing.
pub fn synth_scene(seed: u64, h: usize, w: usize) -> Result<SceneSample> {
    if h % 32 != 0 || w % 32 != 0 {
        return Err(DepthfillError::dimension(
            "synthetic scene",
            "height and width divisible by 32".to_string(),
            format!("{h}x{w}"),
        ));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);

    // ground plane: near at the bottom, far at the top
    let mut gt = Array2::<f64>::zeros((h, w));
    let mut class = Array2::<usize>::zeros((h, w));
    for y in 0..h {
        let t = y as f64 / (h - 1).max(1) as f64;
        let d = GROUND_FAR_M - (GROUND_FAR_M - GROUND_NEAR_M) * t;
        for x in 0..w {
            gt[[y, x]] = d;
        }
    }

    // rectangles resolved by a depth buffer: nearer surfaces win
    let n_rects = rng.random_range(3..=7);
    for _ in 0..n_rects {
        let cls = rng.random_range(1..SEMANTIC_PALETTE.len());
        let depth = rng.random_range(1.5..24.0);
        let rw = rng.random_range(w / 8..=w / 2);
        let rh = rng.random_range(h / 8..=h / 2);
        let x0 = rng.random_range(0..w - rw + 1);
        let y0 = rng.random_range(0..h - rh + 1);
        for y in y0..y0 + rh {
            for x in x0..x0 + rw {
                if depth < gt[[y, x]] {
                    gt[[y, x]] = depth;
                    class[[y, x]] = cls;
                }
            }
        }
    }

    // snap to the PNG grid (values stay > 0: 1.5 m is 384/256)
    gt.mapv_inplace(|d| (d * DEPTH_SCALE).round() / DEPTH_SCALE);

    let mut semantic = Array3::<f64>::zeros((3, h, w));
    for y in 0..h {
        for x in 0..w {
            let color = SEMANTIC_PALETTE[class[[y, x]]];
            for c in 0..3 {
                semantic[[c, y, x]] = color[c];
            }
        }
    }

    // shade by depth with a faint class tint
    let mut rgb = Array3::<f64>::zeros((3, h, w));
    for y in 0..h {
        for x in 0..w {
            let d = gt[[y, x]];
            let brightness =
                (1.0 - (d - 1.5) / (GROUND_FAR_M - 1.5)).clamp(0.15, 1.0);
            let tint = SEMANTIC_PALETTE[class[[y, x]]];
            for c in 0..3 {
                rgb[[c, y, x]] = (brightness * (0.65 + 0.35 * tint[c])).clamp(0.0, 1.0);
            }
        }
    }

    // illumination bands darken the color image without touching depth or
    // semantics — the failure mode color-only guidance struggles with
    let n_bands = rng.random_range(1..=3usize);
    for _ in 0..n_bands {
        let bh = rng.random_range(h / 16..=h / 6 + 1);
        let y0 = rng.random_range(0..h.saturating_sub(bh).max(1));
        let gain = rng.random_range(0.35..0.6);
        for y in y0..(y0 + bh).min(h) {
            for x in 0..w {
                for c in 0..3 {
                    rgb[[c, y, x]] *= gain;
                }
            }
        }
    }

    // light sensor noise, quantized away from the depth planes
    for v in rgb.iter_mut() {
        *v = (*v + (rng.random::<f64>() - 0.5) * 0.03).clamp(0.0, 1.0);
    }

    // exact-count uniform subsampling keeps the ratio pinned
    let total = h * w;
    let k = (SPARSE_TARGET_RATIO * total as f64).floor() as usize;
    let mut indices: Vec<usize> = (0..total).collect();
    for i in 0..k {
        let j = rng.random_range(i..total);
        indices.swap(i, j);
    }
    let mut sparse = Array2::<f64>::zeros((h, w));
    for &idx in &indices[..k] {
        let (y, x) = (idx / w, idx % w);
        sparse[[y, x]] = gt[[y, x]];
    }

    SceneSample::new(rgb, semantic, sparse, gt, format!("synth-{seed:016x}-{h}x{w}"))
}
