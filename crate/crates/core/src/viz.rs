//! Colormapped image outputs: per-branch depth/confidence panels, fused and
//! refined depth, and an error map where cool means accurate and warm means
//! wrong.

use std::path::{Path, PathBuf};

use ndarray::{Array2, Array3};

use crate::data::save_color_png;
use crate::error::Result;
use crate::fusion::fusion_weights;
use crate::model::Prediction;

/// Piecewise-linear jet-style map for depth images, t in [0, 1].
fn jet(t: f64) -> [f64; 3] {
    let t = t.clamp(0.0, 1.0);
    let r = ((1.5 - (4.0 * t - 3.0).abs()).clamp(0.0, 1.0)).min(1.0);
    let g = ((1.5 - (4.0 * t - 2.0).abs()).clamp(0.0, 1.0)).min(1.0);
    let b = ((1.5 - (4.0 * t - 1.0).abs()).clamp(0.0, 1.0)).min(1.0);
    [r, g, b]
}

/// Blue → white → red diverging map for error images.
fn coolwarm(t: f64) -> [f64; 3] {
    let t = t.clamp(0.0, 1.0);
    if t < 0.5 {
        let u = t * 2.0;
        [0.2 + 0.8 * u, 0.3 + 0.7 * u, 1.0]
    } else {
        let u = (t - 0.5) * 2.0;
        [1.0, 1.0 - 0.7 * u, 1.0 - 0.8 * u]
    }
}

fn apply_map(values: &Array2<f64>, lo: f64, hi: f64, map: fn(f64) -> [f64; 3]) -> Array3<f64> {
    let (h, w) = values.dim();
    let span = (hi - lo).max(1e-12);
    let mut out = Array3::<f64>::zeros((3, h, w));
    for y in 0..h {
        for x in 0..w {
            let c = map((values[[y, x]] - lo) / span);
            for ch in 0..3 {
                out[[ch, y, x]] = c[ch];
            }
        }
    }
    out
}

/// Depth map colorized over its own min/max range.
pub fn render_depth(depth: &Array2<f64>) -> Array3<f64> {
    let lo = depth.iter().cloned().fold(f64::INFINITY, f64::min);
    let hi = depth.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    apply_map(depth, lo, hi, jet)
}

/// Absolute error at valid pixels, cool for accurate, warm for wrong.
/// Invalid pixels render cool. A perfect prediction is uniformly cool.
pub fn render_error(pred: &Array2<f64>, gt: &Array2<f64>) -> Array3<f64> {
    let (h, w) = gt.dim();
    let mut err = Array2::<f64>::zeros((h, w));
    let mut cap = 0.0f64;
    for y in 0..h {
        for x in 0..w {
            if gt[[y, x]] > 0.0 {
                let e = (pred[[y, x]] - gt[[y, x]]).abs();
                err[[y, x]] = e;
                cap = cap.max(e);
            }
        }
    }
    apply_map(&err, 0.0, cap.max(1e-12), coolwarm)
}

/// Grayscale panel for a weight map in [0, 1].
pub fn render_weight(weight: &Array2<f64>) -> Array3<f64> {
    let (h, w) = weight.dim();
    Array3::from_shape_fn((3, h, w), |(_, y, x)| weight[[y, x]].clamp(0.0, 1.0))
}

fn stack_vertical(top: &Array3<f64>, bottom: &Array3<f64>) -> Array3<f64> {
    let (_, h1, w) = top.dim();
    let (_, h2, _) = bottom.dim();
    let mut out = Array3::<f64>::zeros((3, h1 + h2, w));
    for c in 0..3 {
        for y in 0..h1 {
            for x in 0..w {
                out[[c, y, x]] = top[[c, y, x]];
            }
        }
        for y in 0..h2 {
            for x in 0..w {
                out[[c, h1 + y, x]] = bottom[[c, y, x]];
            }
        }
    }
    out
}

/// Write the visualization set for one prediction: one panel per branch
/// (depth over its softmax confidence weight), the fused map, the refined map
/// when present, and the error map. Returns the files written.
pub fn visualize(pred: &Prediction, gt: &Array2<f64>, out_dir: &Path) -> Result<Vec<PathBuf>> {
    std::fs::create_dir_all(out_dir)?;
    let mut confs = vec![pred.conf_cg.clone()];
    let mut names = vec!["branch_cg"];
    let mut depths = vec![&pred.depth_cg];
    if let (Some(ds), Some(cs)) = (&pred.depth_sg, &pred.conf_sg) {
        confs.push(cs.clone());
        names.push("branch_sg");
        depths.push(ds);
    }
    confs.push(pred.conf_dg.clone());
    names.push("branch_dg");
    depths.push(&pred.depth_dg);

    // softmax weights sum to one across branches at every pixel
    let weights = fusion_weights(&confs)?;

    let mut written = Vec::new();
    for ((name, depth), weight) in names.iter().zip(depths.iter()).zip(weights.iter()) {
        let panel = stack_vertical(&render_depth(depth), &render_weight(weight));
        let path = out_dir.join(format!("{name}.png"));
        save_color_png(&path, &panel)?;
        written.push(path);
    }
    let fused_path = out_dir.join("fused.png");
    save_color_png(&fused_path, &render_depth(&pred.fused))?;
    written.push(fused_path);
    if let Some(refined) = &pred.refined {
        let p = out_dir.join("refined.png");
        save_color_png(&p, &render_depth(refined))?;
        written.push(p);
    }
    let err_path = out_dir.join("error_map.png");
    save_color_png(&err_path, &render_error(pred.final_depth(), gt))?;
    written.push(err_path);
    Ok(written)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn zero_error_map_is_uniformly_cool() {
        let gt = Array2::from_elem((4, 4), 5.0);
        let img = render_error(&gt.clone(), &gt);
        let cool = coolwarm(0.0);
        for y in 0..4 {
            for x in 0..4 {
                for c in 0..3 {
                    assert!((img[[c, y, x]] - cool[c]).abs() < 1e-12);
                }
            }
        }
    }

    #[test]
    fn colormaps_stay_in_unit_range() {
        for i in 0..=100 {
            let t = i as f64 / 100.0;
            for v in jet(t).iter().chain(coolwarm(t).iter()) {
                assert!((0.0..=1.0).contains(v));
            }
        }
    }

    #[test]
    fn error_map_warm_where_wrong() {
        let gt = Array2::from_elem((2, 2), 5.0);
        let mut pred = gt.clone();
        pred[[1, 1]] = 9.0;
        let img = render_error(&pred, &gt);
        // wrong pixel is red-dominant, correct pixel blue-dominant
        assert!(img[[0, 1, 1]] > img[[2, 1, 1]]);
        assert!(img[[2, 0, 0]] > img[[0, 0, 0]]);
    }
}
