//! Run configuration: presets, ablation toggles, and a flat key = value file
//! format with stable hashing for checkpoint compatibility checks.

use std::fmt;
use std::path::PathBuf;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{DepthfillError, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Preset {
    Tiny,
    Full,
}

impl Preset {
    /// Stem width followed by the five stride-2 stage widths.
    pub fn stage_widths(self) -> Vec<usize> {
        match self {
            Preset::Tiny => vec![4, 8, 16, 32, 64, 128],
            Preset::Full => vec![32, 64, 128, 256, 512, 1024],
        }
    }

    /// Default training resolution (rows, cols).
    pub fn input_size(self) -> (usize, usize) {
        match self {
            Preset::Tiny => (64, 96),
            Preset::Full => (320, 1216),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum FusionMode {
    Add,
    Concat,
    Sammafb,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Branches {
    CgDg,
    CgSgDg,
}

impl Branches {
    pub fn uses_semantics(self) -> bool {
        matches!(self, Branches::CgSgDg)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct OptimizerConfig {
    pub learning_rate: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub weight_decay: f64,
    pub batch_size: usize,
}

impl Default for OptimizerConfig {
    fn default() -> Self {
        OptimizerConfig {
            learning_rate: 0.00128,
            beta1: 0.9,
            beta2: 0.99,
            weight_decay: 1e-6,
            batch_size: 8,
        }
    }
}

/// Everything one run needs; every ablation row is expressible here.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunConfig {
    pub preset: Preset,
    pub fusion_mode: FusionMode,
    pub branches: Branches,
    pub refinement: bool,
    pub optimizer: OptimizerConfig,
    pub epochs: u32,
    /// Additional epochs for the refinement stage when enabled.
    pub refine_epochs: u32,
    pub seed: u64,
    pub dataset_root: PathBuf,
    pub train_split: String,
    pub val_split: String,
    pub output_dir: PathBuf,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            preset: Preset::Tiny,
            fusion_mode: FusionMode::Sammafb,
            branches: Branches::CgSgDg,
            refinement: true,
            optimizer: OptimizerConfig::default(),
            epochs: 30,
            refine_epochs: 10,
            seed: 0,
            dataset_root: PathBuf::from("data"),
            train_split: "train".into(),
            val_split: "val".into(),
            output_dir: PathBuf::from("runs/default"),
        }
    }
}

impl RunConfig {
    /// The seven ablation rows (a)–(g): branch set, fusion style, refinement.
    pub fn ablation_row(row: char) -> Result<RunConfig> {
        let mut cfg = RunConfig {
            refinement: false,
            ..RunConfig::default()
        };
        match row {
            'a' => {
                cfg.branches = Branches::CgDg;
                cfg.fusion_mode = FusionMode::Add;
            }
            'b' => {
                cfg.branches = Branches::CgDg;
                cfg.fusion_mode = FusionMode::Concat;
            }
            'c' => {
                cfg.branches = Branches::CgDg;
                cfg.fusion_mode = FusionMode::Concat;
                cfg.refinement = true;
            }
            'd' => {
                cfg.branches = Branches::CgSgDg;
                cfg.fusion_mode = FusionMode::Concat;
            }
            'e' => {
                cfg.branches = Branches::CgSgDg;
                cfg.fusion_mode = FusionMode::Concat;
                cfg.refinement = true;
            }
            'f' => {
                cfg.branches = Branches::CgSgDg;
                cfg.fusion_mode = FusionMode::Sammafb;
            }
            'g' => {
                cfg.branches = Branches::CgSgDg;
                cfg.fusion_mode = FusionMode::Sammafb;
                cfg.refinement = true;
            }
            other => {
                return Err(DepthfillError::Config(format!(
                    "unknown ablation row '{other}' (expected a..g)"
                )))
            }
        }
        Ok(cfg)
    }

    /// Serialize to the flat `key = value` file format.
    pub fn to_kv_string(&self) -> String {
        let mut s = String::new();
        s.push_str("# depthfill run configuration\n");
        let mut kv = |k: &str, v: String| {
            s.push_str(k);
            s.push_str(" = ");
            s.push_str(&v);
            s.push('\n');
        };
        kv("preset", format!("{}", self.preset));
        kv("fusion_mode", format!("{}", self.fusion_mode));
        kv("branches", format!("{}", self.branches));
        kv("refinement", if self.refinement { "on" } else { "off" }.into());
        kv("learning_rate", fmt_f64(self.optimizer.learning_rate));
        kv("beta1", fmt_f64(self.optimizer.beta1));
        kv("beta2", fmt_f64(self.optimizer.beta2));
        kv("weight_decay", fmt_f64(self.optimizer.weight_decay));
        kv("batch_size", self.optimizer.batch_size.to_string());
        kv("epochs", self.epochs.to_string());
        kv("refine_epochs", self.refine_epochs.to_string());
        kv("seed", self.seed.to_string());
        kv("dataset_root", self.dataset_root.display().to_string());
        kv("train_split", self.train_split.clone());
        kv("val_split", self.val_split.clone());
        kv("output_dir", self.output_dir.display().to_string());
        s
    }

    /// Parse the flat key = value format; unknown keys are rejected so typos
    /// surface immediately.
    pub fn from_kv_str(text: &str) -> Result<RunConfig> {
        let mut cfg = RunConfig::default();
        for (lineno, raw) in text.lines().enumerate() {
            let line = raw.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let (key, value) = line.split_once('=').ok_or_else(|| {
                DepthfillError::Config(format!("line {}: expected key = value", lineno + 1))
            })?;
            let (key, value) = (key.trim(), value.trim());
            let bad = |what: &str| {
                DepthfillError::Config(format!("line {}: bad {what}: {value}", lineno + 1))
            };
            match key {
                "preset" => {
                    cfg.preset = match value {
                        "tiny" => Preset::Tiny,
                        "full" => Preset::Full,
                        _ => return Err(bad("preset")),
                    }
                }
                "fusion_mode" => {
                    cfg.fusion_mode = match value {
                        "add" => FusionMode::Add,
                        "concat" => FusionMode::Concat,
                        "sammafb" => FusionMode::Sammafb,
                        _ => return Err(bad("fusion_mode")),
                    }
                }
                "branches" => {
                    cfg.branches = match value {
                        "cg_dg" => Branches::CgDg,
                        "cg_sg_dg" => Branches::CgSgDg,
                        _ => return Err(bad("branches")),
                    }
                }
                "refinement" => {
                    cfg.refinement = match value {
                        "on" | "true" => true,
                        "off" | "false" => false,
                        _ => return Err(bad("refinement")),
                    }
                }
                "learning_rate" => cfg.optimizer.learning_rate = value.parse().map_err(|_| bad("learning_rate"))?,
                "beta1" => cfg.optimizer.beta1 = value.parse().map_err(|_| bad("beta1"))?,
                "beta2" => cfg.optimizer.beta2 = value.parse().map_err(|_| bad("beta2"))?,
                "weight_decay" => cfg.optimizer.weight_decay = value.parse().map_err(|_| bad("weight_decay"))?,
                "batch_size" => cfg.optimizer.batch_size = value.parse().map_err(|_| bad("batch_size"))?,
                "epochs" => cfg.epochs = value.parse().map_err(|_| bad("epochs"))?,
                "refine_epochs" => cfg.refine_epochs = value.parse().map_err(|_| bad("refine_epochs"))?,
                "seed" => cfg.seed = value.parse().map_err(|_| bad("seed"))?,
                "dataset_root" => cfg.dataset_root = PathBuf::from(value),
                "train_split" => cfg.train_split = value.into(),
                "val_split" => cfg.val_split = value.into(),
                "output_dir" => cfg.output_dir = PathBuf::from(value),
                other => {
                    return Err(DepthfillError::Config(format!(
                        "line {}: unknown key '{other}'",
                        lineno + 1
                    )))
                }
            }
        }
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        let o = &self.optimizer;
        if !(o.learning_rate > 0.0 && o.learning_rate.is_finite()) {
            return Err(DepthfillError::Config("learning_rate must be positive".into()));
        }
        if !(0.0..1.0).contains(&o.beta1) || !(0.0..1.0).contains(&o.beta2) {
            return Err(DepthfillError::Config("betas must lie in [0, 1)".into()));
        }
        if o.batch_size == 0 {
            return Err(DepthfillError::Config("batch_size must be >= 1".into()));
        }
        Ok(())
    }

    /// Hash of the architecture-relevant fields; stored in checkpoints and
    /// verified on load. Paths, seeds, and schedule lengths may differ
    /// between training and evaluation without invalidating weights.
    pub fn architecture_hash(&self) -> String {
        let canon = format!(
            "preset={};fusion={};branches={};refinement={}",
            self.preset, self.fusion_mode, self.branches, self.refinement
        );
        let mut hasher = Sha256::new();
        hasher.update(canon.as_bytes());
        hex(&hasher.finalize())
    }
}

fn fmt_f64(v: f64) -> String {
    // round-trippable exact float formatting
    format!("{v:?}")
}

fn hex(bytes: &[u8]) -> String {
    bytes.iter().map(|b| format!("{b:02x}")).collect()
}

impl fmt::Display for Preset {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Preset::Tiny => "tiny",
            Preset::Full => "full",
        })
    }
}

impl fmt::Display for FusionMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            FusionMode::Add => "add",
            FusionMode::Concat => "concat",
            FusionMode::Sammafb => "sammafb",
        })
    }
}

impl fmt::Display for Branches {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Branches::CgDg => "cg_dg",
            Branches::CgSgDg => "cg_sg_dg",
        })
    }
}
