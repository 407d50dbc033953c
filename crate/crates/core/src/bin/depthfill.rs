//! Command-line entry points: train, eval, infer, visualize, synth-data.

use std::fs;
use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use serde_json::json;

use depthfill::config::{Branches, FusionMode, Preset, RunConfig};
use depthfill::data::{materialize_synth, save_depth_png, Dataset, DatasetLayout, SceneSample};
use depthfill::error::{DepthfillError, Result};
use depthfill::metrics::metrics;
use depthfill::train::{load_model, run_dir_paths, Trainer};
use depthfill::viz::visualize;

const DATA_ROOT_ENV: &str = "DEPTHFILL_DATA_ROOT";

#[derive(Parser)]
#[command(
    name = "depthfill",
    about = "Sparse-to-dense depth completion with semantic guidance",
    version
)]
struct Cli {
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Subcommand)]
enum Cmd {
    /// Train a model (two-stage when refinement is enabled).
    Train(TrainArgs),
    /// Evaluate a checkpoint over a split and emit a metric report.
    Eval(EvalArgs),
    /// Run inference and write 16-bit depth PNGs.
    Infer(InferArgs),
    /// Write colormapped depth, confidence, and error images for one sample.
    Visualize(VisualizeArgs),
    /// Generate a synthetic dataset split.
    SynthData(SynthArgs),
}

/// Flags mirroring the run-configuration fields; a config file provides the
/// base and flags override it.
#[derive(Args, Clone)]
struct ConfigArgs {
    /// Flat key = value configuration file.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Model size preset: tiny | full.
    #[arg(long)]
    preset: Option<String>,
    /// Cross-branch fusion: add | concat | sammafb.
    #[arg(long)]
    fusion: Option<String>,
    /// Branch set: cg_dg | cg_sg_dg.
    #[arg(long)]
    branches: Option<String>,
    /// Propagation refinement: on | off.
    #[arg(long)]
    refinement: Option<String>,
    /// Shortcut: configure one ablation row (a..g).
    #[arg(long)]
    ablation: Option<char>,
    #[arg(long)]
    learning_rate: Option<f64>,
    #[arg(long)]
    batch_size: Option<usize>,
    #[arg(long)]
    epochs: Option<u32>,
    #[arg(long)]
    refine_epochs: Option<u32>,
    #[arg(long)]
    seed: Option<u64>,
    /// Dataset root (env DEPTHFILL_DATA_ROOT overrides).
    #[arg(long)]
    data_root: Option<PathBuf>,
    #[arg(long)]
    train_split: Option<String>,
    #[arg(long)]
    val_split: Option<String>,
    /// Output directory for checkpoints, logs, and reports.
    #[arg(long, short)]
    out: Option<PathBuf>,
}

impl ConfigArgs {
    fn resolve(&self) -> Result<RunConfig> {
        let mut cfg = match (&self.ablation, &self.config) {
            (Some(row), _) => RunConfig::ablation_row(*row)?,
            (None, Some(path)) => {
                let text = fs::read_to_string(path).map_err(|e| {
                    DepthfillError::Config(format!("cannot read {}: {e}", path.display()))
                })?;
                RunConfig::from_kv_str(&text)?
            }
            (None, None) => RunConfig::default(),
        };
        if let Some(p) = &self.preset {
            cfg.preset = match p.as_str() {
                "tiny" => Preset::Tiny,
                "full" => Preset::Full,
                other => return Err(DepthfillError::Config(format!("unknown preset '{other}'"))),
            };
        }
        if let Some(f) = &self.fusion {
            cfg.fusion_mode = match f.as_str() {
                "add" => FusionMode::Add,
                "concat" => FusionMode::Concat,
                "sammafb" => FusionMode::Sammafb,
                other => return Err(DepthfillError::Config(format!("unknown fusion '{other}'"))),
            };
        }
        if let Some(b) = &self.branches {
            cfg.branches = match b.as_str() {
                "cg_dg" => Branches::CgDg,
                "cg_sg_dg" => Branches::CgSgDg,
                other => {
                    return Err(DepthfillError::Config(format!("unknown branches '{other}'")))
                }
            };
        }
        if let Some(r) = &self.refinement {
            cfg.refinement = match r.as_str() {
                "on" | "true" => true,
                "off" | "false" => false,
                other => {
                    return Err(DepthfillError::Config(format!(
                        "refinement must be on|off, got '{other}'"
                    )))
                }
            };
        }
        if let Some(v) = self.learning_rate {
            cfg.optimizer.learning_rate = v;
        }
        if let Some(v) = self.batch_size {
            cfg.optimizer.batch_size = v;
        }
        if let Some(v) = self.epochs {
            cfg.epochs = v;
        }
        if let Some(v) = self.refine_epochs {
            cfg.refine_epochs = v;
        }
        if let Some(v) = self.seed {
            cfg.seed = v;
        }
        if let Some(v) = &self.data_root {
            cfg.dataset_root = v.clone();
        }
        if let Ok(env_root) = std::env::var(DATA_ROOT_ENV) {
            if !env_root.is_empty() {
                cfg.dataset_root = PathBuf::from(env_root);
            }
        }
        if let Some(v) = &self.train_split {
            cfg.train_split = v.clone();
        }
        if let Some(v) = &self.val_split {
            cfg.val_split = v.clone();
        }
        if let Some(v) = &self.out {
            cfg.output_dir = v.clone();
        }
        cfg.validate()?;
        Ok(cfg)
    }
}

#[derive(Args)]
struct TrainArgs {
    #[command(flatten)]
    cfg: ConfigArgs,
}

#[derive(Args)]
struct EvalArgs {
    #[command(flatten)]
    cfg: ConfigArgs,
    #[arg(long)]
    checkpoint: PathBuf,
    /// Split to evaluate (defaults to the configured validation split).
    #[arg(long)]
    split: Option<String>,
}

#[derive(Args)]
struct InferArgs {
    #[command(flatten)]
    cfg: ConfigArgs,
    #[arg(long)]
    checkpoint: PathBuf,
    #[arg(long)]
    split: Option<String>,
}

#[derive(Args)]
struct VisualizeArgs {
    #[command(flatten)]
    cfg: ConfigArgs,
    #[arg(long)]
    checkpoint: PathBuf,
    /// Sample id within the split (defaults to the first listed).
    #[arg(long)]
    sample: Option<String>,
    #[arg(long)]
    split: Option<String>,
}

#[derive(Args)]
struct SynthArgs {
    /// Dataset root to create or extend.
    #[arg(long)]
    root: PathBuf,
    #[arg(long, default_value = "train")]
    split: String,
    #[arg(long, default_value_t = 8)]
    count: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long, default_value_t = 64)]
    height: usize,
    #[arg(long, default_value_t = 96)]
    width: usize,
}

fn write_resolved_config(cfg: &RunConfig) -> Result<()> {
    fs::create_dir_all(&cfg.output_dir)?;
    let (cfg_path, _, _) = run_dir_paths(&cfg.output_dir);
    fs::write(cfg_path, cfg.to_kv_string())?;
    Ok(())
}

fn open_split(cfg: &RunConfig, split: &str) -> Result<(Dataset, Vec<SceneSample>)> {
    let ds = Dataset::open(DatasetLayout::new(&cfg.dataset_root, split))?;
    let indices: Vec<usize> = (0..ds.len()).collect();
    let samples = ds.load_many(&indices)?;
    Ok((ds, samples))
}

fn cmd_train(args: &TrainArgs) -> Result<()> {
    let cfg = args.cfg.resolve()?;
    write_resolved_config(&cfg)?;
    let (_, train_samples) = open_split(&cfg, &cfg.train_split)?;
    let val_samples = match open_split(&cfg, &cfg.val_split) {
        Ok((_, s)) => s,
        Err(_) => Vec::new(), // validate on the training split when no val split exists
    };
    let (_, metrics_path, _) = run_dir_paths(&cfg.output_dir);
    let mut metrics_file = fs::File::create(&metrics_path)?;
    let out_dir = cfg.output_dir.clone();
    let mut trainer = Trainer::new(cfg)?;
    trainer.fit(&train_samples, &val_samples, Some(&out_dir), |log| {
        use std::io::Write;
        let line = serde_json::to_string(log).expect("epoch log serializes");
        println!("{line}");
        let _ = writeln!(metrics_file, "{line}");
    })?;
    Ok(())
}

fn cmd_eval(args: &EvalArgs) -> Result<()> {
    let cfg = args.cfg.resolve()?;
    write_resolved_config(&cfg)?;
    let split = args.split.clone().unwrap_or_else(|| cfg.val_split.clone());
    let (ds, samples) = open_split(&cfg, &split)?;
    let (model, _) = load_model(&cfg, &args.checkpoint)?;
    let mut per_sample = Vec::new();
    let mut reports = Vec::new();
    for (id, sample) in ds.ids().iter().zip(samples.iter()) {
        let pred = model.predict_sample(sample)?;
        let report = metrics(&pred.final_depth_clamped(), &sample.gt_depth)?;
        per_sample.push(json!({
            "id": id,
            "rmse_mm": report.rmse_mm,
            "mae_mm": report.mae_mm,
            "irmse_per_km": report.irmse_per_km,
            "imae_per_km": report.imae_per_km,
        }));
        reports.push(report);
    }
    let agg = depthfill::metrics::aggregate(&reports)?;
    let doc = json!({
        "split": split,
        "aggregate": agg,
        "per_sample": per_sample,
    });
    println!("{}", serde_json::to_string(&doc).expect("report serializes"));
    fs::create_dir_all(&cfg.output_dir)?;
    fs::write(
        cfg.output_dir.join(format!("eval_{split}.json")),
        serde_json::to_string_pretty(&doc).expect("report serializes"),
    )?;
    Ok(())
}

fn cmd_infer(args: &InferArgs) -> Result<()> {
    let cfg = args.cfg.resolve()?;
    write_resolved_config(&cfg)?;
    let split = args.split.clone().unwrap_or_else(|| cfg.val_split.clone());
    let (ds, samples) = open_split(&cfg, &split)?;
    let (model, _) = load_model(&cfg, &args.checkpoint)?;
    let out = cfg.output_dir.join("predictions");
    fs::create_dir_all(&out)?;
    for (id, sample) in ds.ids().iter().zip(samples.iter()) {
        let pred = model.predict_sample(sample)?;
        save_depth_png(&out.join(format!("{id}.png")), &pred.final_depth_clamped())?;
    }
    println!("wrote {} prediction(s) to {}", ds.len(), out.display());
    Ok(())
}

fn cmd_visualize(args: &VisualizeArgs) -> Result<()> {
    let cfg = args.cfg.resolve()?;
    write_resolved_config(&cfg)?;
    let split = args.split.clone().unwrap_or_else(|| cfg.val_split.clone());
    let (ds, samples) = open_split(&cfg, &split)?;
    let index = match &args.sample {
        Some(id) => ds
            .ids()
            .iter()
            .position(|s| s == id)
            .ok_or_else(|| DepthfillError::Config(format!("sample '{id}' not in split {split}")))?,
        None => 0,
    };
    let (model, _) = load_model(&cfg, &args.checkpoint)?;
    let sample = &samples[index];
    let pred = model.predict_sample(sample)?;
    let out = cfg.output_dir.join("viz").join(&sample.id);
    let files = visualize(&pred, &sample.gt_depth, &out)?;
    for f in &files {
        println!("{}", f.display());
    }
    Ok(())
}

fn cmd_synth(args: &SynthArgs) -> Result<()> {
    let ids = materialize_synth(
        &args.root,
        &args.split,
        args.count,
        args.seed,
        args.height,
        args.width,
    )?;
    let manifest = format!(
        "# synthetic split manifest\nsplit = {}\ncount = {}\nseed = {}\nheight = {}\nwidth = {}\n",
        args.split,
        args.count,
        args.seed,
        args.height,
        args.width
    );
    fs::write(
        args.root.join("splits").join(format!("{}.manifest.txt", args.split)),
        manifest,
    )?;
    println!(
        "wrote {} sample(s) to {} (split {})",
        ids.len(),
        args.root.display(),
        args.split
    );
    Ok(())
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let result = match &cli.cmd {
        Cmd::Train(a) => cmd_train(a),
        Cmd::Eval(a) => cmd_eval(a),
        Cmd::Infer(a) => cmd_infer(a),
        Cmd::Visualize(a) => cmd_visualize(a),
        Cmd::SynthData(a) => cmd_synth(a),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
