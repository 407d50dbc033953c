//! Dataset ingestion, on-disk layout, and the synthetic scene generator.
//!
//! Depth maps ride in 16-bit grayscale PNGs (value / 256 = meters, zero marks
//! missing); RGB and semantic images in 8-bit color PNGs. A dataset root
//! holds one directory per split with `rgb/`, `semantic/`, `sparse/`, `gt/`
//! subdirectories and a `splits/<name>.txt` id list, so synthetic and real
//! data flow through identical code paths.

mod augment;
mod png_io;
mod synth;

pub use augment::{augment, bottom_crop, color_jitter, crop_sample, hflip_sample, BOTTOM_CROP, TRAIN_CROP};
pub use png_io::{load_color_png, load_depth_png, save_color_png, save_depth_png};
pub use synth::{synth_scene, SPARSE_TARGET_RATIO};

use std::fs;
use std::path::{Path, PathBuf};

use ndarray::{Array2, Array3};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;

use crate::error::{DepthfillError, Result};
use crate::loss::valid_mask;

/// An aligned bundle of every plane one training example needs.
#[derive(Debug, Clone)]
pub struct SceneSample {
    pub rgb: Array3<f64>,
    pub semantic: Array3<f64>,
    pub sparse_depth: Array2<f64>,
    pub gt_depth: Array2<f64>,
    pub valid_mask: Array2<bool>,
    pub id: String,
}

impl SceneSample {
    pub fn new(
        rgb: Array3<f64>,
        semantic: Array3<f64>,
        sparse_depth: Array2<f64>,
        gt_depth: Array2<f64>,
        id: String,
    ) -> Result<Self> {
        let (c_rgb, h, w) = rgb.dim();
        let (c_sem, hs, ws) = semantic.dim();
        if c_rgb != 3 || c_sem != 3 {
            return Err(DepthfillError::dimension(
                "scene sample images",
                "3 channels".to_string(),
                format!("rgb {c_rgb}, semantic {c_sem}"),
            ));
        }
        if (hs, ws) != (h, w) || sparse_depth.dim() != (h, w) || gt_depth.dim() != (h, w) {
            return Err(DepthfillError::dimension(
                "scene sample planes",
                format!("{h}x{w}"),
                "mismatched plane sizes".to_string(),
            ));
        }
        if sparse_depth.iter().any(|&v| v < 0.0) || gt_depth.iter().any(|&v| v < 0.0) {
            return Err(DepthfillError::Validation(
                "depth planes must be nonnegative".into(),
            ));
        }
        let valid_mask = valid_mask(&gt_depth);
        Ok(SceneSample {
            rgb,
            semantic,
            sparse_depth,
            gt_depth,
            valid_mask,
            id,
        })
    }

    pub fn height(&self) -> usize {
        self.gt_depth.dim().0
    }

    pub fn width(&self) -> usize {
        self.gt_depth.dim().1
    }

    pub fn sparse_ratio(&self) -> f64 {
        let n = self.sparse_depth.len() as f64;
        self.sparse_depth.iter().filter(|&&v| v > 0.0).count() as f64 / n
    }
}

/// Where a split's files live relative to the dataset root.
#[derive(Debug, Clone)]
pub struct DatasetLayout {
    pub root: PathBuf,
    pub split: String,
}

impl DatasetLayout {
    pub fn new(root: impl Into<PathBuf>, split: impl Into<String>) -> Self {
        DatasetLayout {
            root: root.into(),
            split: split.into(),
        }
    }

    pub fn split_file(&self) -> PathBuf {
        self.root.join("splits").join(format!("{}.txt", self.split))
    }

    pub fn rgb_path(&self, id: &str) -> PathBuf {
        self.root.join(&self.split).join("rgb").join(format!("{id}.png"))
    }

    pub fn semantic_path(&self, id: &str) -> PathBuf {
        self.root
            .join(&self.split)
            .join("semantic")
            .join(format!("{id}.png"))
    }

    pub fn sparse_path(&self, id: &str) -> PathBuf {
        self.root
            .join(&self.split)
            .join("sparse")
            .join(format!("{id}.png"))
    }

    pub fn gt_path(&self, id: &str) -> PathBuf {
        self.root.join(&self.split).join("gt").join(format!("{id}.png"))
    }
}

/// A validated split: every listed id has all four planes on disk.
pub struct Dataset {
    layout: DatasetLayout,
    ids: Vec<String>,
}

impl Dataset {
    pub fn open(layout: DatasetLayout) -> Result<Self> {
        let list = layout.split_file();
        let text = fs::read_to_string(&list).map_err(|e| {
            DepthfillError::Config(format!("cannot read split file {}: {e}", list.display()))
        })?;
        let ids: Vec<String> = text
            .lines()
            .map(str::trim)
            .filter(|l| !l.is_empty() && !l.starts_with('#'))
            .map(String::from)
            .collect();
        if ids.is_empty() {
            return Err(DepthfillError::Config(format!(
                "split {} lists no samples",
                layout.split
            )));
        }
        for id in &ids {
            for path in [
                layout.rgb_path(id),
                layout.semantic_path(id),
                layout.sparse_path(id),
                layout.gt_path(id),
            ] {
                if !path.exists() {
                    return Err(DepthfillError::Format(format!(
                        "sample {id} is missing {}",
                        path.display()
                    )));
                }
            }
        }
        Ok(Dataset { layout, ids })
    }

    pub fn len(&self) -> usize {
        self.ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ids.is_empty()
    }

    pub fn ids(&self) -> &[String] {
        &self.ids
    }

    pub fn layout(&self) -> &DatasetLayout {
        &self.layout
    }

    pub fn load(&self, index: usize) -> Result<SceneSample> {
        let id = &self.ids[index];
        let rgb = load_color_png(&self.layout.rgb_path(id))?;
        let semantic = load_color_png(&self.layout.semantic_path(id))?;
        let sparse = load_depth_png(&self.layout.sparse_path(id))?;
        let gt = load_depth_png(&self.layout.gt_path(id))?;
        SceneSample::new(rgb, semantic, sparse, gt, id.clone())
    }

    /// Deterministic shuffle for one epoch.
    pub fn shuffled_indices(&self, seed: u64) -> Vec<usize> {
        let mut idx: Vec<usize> = (0..self.ids.len()).collect();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        idx.shuffle(&mut rng);
        idx
    }

    /// Parallel prefetch preserving index order; identical to serial loading
    /// because samples are independent.
    pub fn load_many(&self, indices: &[usize]) -> Result<Vec<SceneSample>> {
        indices
            .par_iter()
            .map(|&i| self.load(i))
            .collect::<std::result::Result<Vec<_>, _>>()
    }
}

/// Write a sample to the standard layout.
pub fn save_sample(layout: &DatasetLayout, sample: &SceneSample) -> Result<()> {
    for dir in ["rgb", "semantic", "sparse", "gt"] {
        fs::create_dir_all(layout.root.join(&layout.split).join(dir))?;
    }
    save_color_png(&layout.rgb_path(&sample.id), &sample.rgb)?;
    save_color_png(&layout.semantic_path(&sample.id), &sample.semantic)?;
    save_depth_png(&layout.sparse_path(&sample.id), &sample.sparse_depth)?;
    save_depth_png(&layout.gt_path(&sample.id), &sample.gt_depth)?;
    Ok(())
}

/// Generate `count` synthetic scenes and materialize them as a split.
pub fn materialize_synth(
    root: &Path,
    split: &str,
    count: usize,
    seed: u64,
    h: usize,
    w: usize,
) -> Result<Vec<String>> {
    let layout = DatasetLayout::new(root, split);
    let mut ids = Vec::with_capacity(count);
    for i in 0..count {
        let sample = synth_scene(seed.wrapping_add(i as u64), h, w)?;
        save_sample(&layout, &sample)?;
        ids.push(sample.id);
    }
    fs::create_dir_all(root.join("splits"))?;
    fs::write(layout.split_file(), ids.join("\n") + "\n")?;
    Ok(ids)
}
