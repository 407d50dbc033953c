//! Training loop: batched gradient steps, plateau learning-rate scheduling,
//! two-stage refinement training, and checkpointing.

mod adam;
mod checkpoint;

pub use adam::Adam;
pub use checkpoint::{load_checkpoint, save_checkpoint, CheckpointManifest};

use std::collections::HashMap;
use std::path::{Path, PathBuf};

use ndarray::ArrayD;
use rayon::prelude::*;

use crate::autograd::{Ctx, ParamId};
use crate::backbone::ModelConfig;
use crate::config::RunConfig;
use crate::data::SceneSample;
use crate::error::{DepthfillError, Result};
use crate::loss::LossWeights;
use crate::metrics::{aggregate, metrics, MetricReport};
use crate::model::Model;

pub const PLATEAU_FACTOR: f64 = 0.5;
pub const PLATEAU_PATIENCE: u32 = 3;

/// Loss values of one optimizer step (means over the batch).
#[derive(Debug, Clone, Copy)]
pub struct StepStats {
    pub total: f64,
    pub l_cg: f64,
    pub l_sg: Option<f64>,
    pub l_dg: f64,
    pub l_final: f64,
}

/// Which part of the two-stage protocol an epoch belongs to.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Stage {
    /// Branches and fusion only; the refinement head sits idle.
    Backbone,
    /// Refinement active, backbone frozen for one warm-up epoch.
    RefineWarmup,
    /// Refinement active, everything trains.
    Joint,
}

impl Stage {
    pub fn refine_active(self) -> bool {
        !matches!(self, Stage::Backbone)
    }

    fn freeze_prefix(self) -> Option<&'static str> {
        matches!(self, Stage::RefineWarmup).then_some("refine.")
    }

    pub fn label(self) -> &'static str {
        match self {
            Stage::Backbone => "backbone",
            Stage::RefineWarmup => "refine_warmup",
            Stage::Joint => "joint",
        }
    }
}

#[derive(Debug, Clone, serde::Serialize)]
pub struct EpochLog {
    pub epoch: u32,
    pub stage: &'static str,
    pub mean_loss: f64,
    pub learning_rate: f64,
    pub val: MetricReport,
}

pub struct Trainer {
    pub model: Model,
    pub run: RunConfig,
    adam: Adam,
    pub epoch: u32,
    pub global_step: u64,
    pub learning_rate: f64,
    plateau_best: Option<f64>,
    plateau_bad: u32,
    pub weights: LossWeights,
}

impl Trainer {
    pub fn new(run: RunConfig) -> Result<Self> {
        run.validate()?;
        let model = Model::new(ModelConfig::from_run(&run), run.seed);
        let adam = Adam::new(
            &model.params,
            run.optimizer.beta1,
            run.optimizer.beta2,
            run.optimizer.weight_decay,
        );
        let learning_rate = run.optimizer.learning_rate;
        Ok(Trainer {
            model,
            run,
            adam,
            epoch: 0,
            global_step: 0,
            learning_rate,
            plateau_best: None,
            plateau_bad: 0,
            weights: LossWeights::default(),
        })
    }

    /// One optimizer update from the mean gradient over `samples`. Samples
    /// are processed independently (in parallel) and reduced in index order,
    /// so a batch behaves exactly like its single-sample runs.
    pub fn train_step(
        &mut self,
        samples: &[SceneSample],
        refine_active: bool,
        only_prefix: Option<&str>,
    ) -> Result<StepStats> {
        assert!(!samples.is_empty());
        let model = &self.model;
        let weights = self.weights;
        let epoch = self.epoch;
        let per_sample: Vec<Result<(StepStats, Vec<(ParamId, Option<ArrayD<f64>>)>)>> = samples
            .par_iter()
            .map(|sample| {
                let mut cx = Ctx::new(&model.params);
                let (_, lg) = model.loss_graph_with(&mut cx, sample, &weights, epoch, refine_active)?;
                let grads = cx.tape.backward(lg.total);
                let pg = cx.param_grads(&grads);
                Ok((
                    StepStats {
                        total: lg.total_value,
                        l_cg: lg.l_cg,
                        l_sg: lg.l_sg,
                        l_dg: lg.l_dg,
                        l_final: lg.l_final,
                    },
                    pg,
                ))
            })
            .collect();

        let n = samples.len() as f64;
        let mut acc: HashMap<usize, ArrayD<f64>> = HashMap::new();
        let mut stats = StepStats {
            total: 0.0,
            l_cg: 0.0,
            l_sg: None,
            l_dg: 0.0,
            l_final: 0.0,
        };
        for item in per_sample {
            let (s, grads) = item?;
            stats.total += s.total / n;
            stats.l_cg += s.l_cg / n;
            stats.l_dg += s.l_dg / n;
            stats.l_final += s.l_final / n;
            if let Some(sg) = s.l_sg {
                *stats.l_sg.get_or_insert(0.0) += sg / n;
            }
            for (id, g) in grads {
                if let Some(g) = g {
                    match acc.get_mut(&id.0) {
                        Some(a) => *a += &g,
                        None => {
                            acc.insert(id.0, g);
                        }
                    }
                }
            }
        }
        if !stats.total.is_finite() {
            return Err(DepthfillError::Numeric(format!(
                "non-finite loss at step {}: cg={} sg={:?} dg={} final={}",
                self.global_step, stats.l_cg, stats.l_sg, stats.l_dg, stats.l_final
            )));
        }
        let mut grad_list: Vec<(ParamId, Option<ArrayD<f64>>)> = acc
            .into_iter()
            .map(|(raw, mut g)| {
                g.mapv_inplace(|v| v / n);
                (ParamId(raw), Some(g))
            })
            .collect();
        grad_list.sort_by_key(|(id, _)| id.0);
        for (id, g) in &grad_list {
            if let Some(g) = g {
                if !g.iter().all(|v| v.is_finite()) {
                    return Err(DepthfillError::Numeric(format!(
                        "non-finite gradient for parameter {}",
                        self.model.params.name(*id)
                    )));
                }
            }
        }
        self.adam.step(
            &mut self.model.params,
            &grad_list,
            self.learning_rate,
            only_prefix,
        );
        self.global_step += 1;
        Ok(stats)
    }

    /// Metrics over a validation set, evaluated on the stage-appropriate
    /// output and clamped to the reporting floor.
    pub fn validate(&self, samples: &[SceneSample], refine_active: bool) -> Result<MetricReport> {
        let reports: Vec<MetricReport> = samples
            .par_iter()
            .map(|s| -> Result<MetricReport> {
                let pred = self.model.predict_sample(s)?;
                let depth = if refine_active {
                    pred.final_depth_clamped()
                } else {
                    pred.fused.mapv(|v| v.max(crate::model::MIN_REPORTED_DEPTH_M))
                };
                metrics(&depth, &s.gt_depth)
            })
            .collect::<Result<Vec<_>>>()?;
        aggregate(&reports)
    }

    fn plateau_update(&mut self, val_rmse: f64) -> bool {
        let improved = self
            .plateau_best
            .map(|best| val_rmse < best - 1e-9)
            .unwrap_or(true);
        if improved {
            self.plateau_best = Some(val_rmse);
            self.plateau_bad = 0;
            false
        } else {
            self.plateau_bad += 1;
            if self.plateau_bad >= PLATEAU_PATIENCE {
                self.learning_rate *= PLATEAU_FACTOR;
                self.plateau_bad = 0;
                true
            } else {
                false
            }
        }
    }

    /// Stage plan for this run configuration.
    pub fn stages(&self) -> Vec<(Stage, u32)> {
        if self.run.refinement {
            let joint = self.run.refine_epochs.saturating_sub(1);
            vec![
                (Stage::Backbone, self.run.epochs),
                (Stage::RefineWarmup, 1),
                (Stage::Joint, joint),
            ]
        } else {
            vec![(Stage::Backbone, self.run.epochs)]
        }
    }

    /// Full training run. Checkpoints land under `out_dir/checkpoints` when
    /// an output directory is given; `on_epoch` observes every epoch log.
    pub fn fit(
        &mut self,
        train: &[SceneSample],
        val: &[SceneSample],
        out_dir: Option<&Path>,
        mut on_epoch: impl FnMut(&EpochLog),
    ) -> Result<Vec<EpochLog>> {
        if train.is_empty() {
            return Err(DepthfillError::Config("empty training set".into()));
        }
        let batch = self.run.optimizer.batch_size.min(train.len());
        let mut logs = Vec::new();
        for (stage, n_epochs) in self.stages() {
            for _ in 0..n_epochs {
                let order = shuffled(train.len(), self.run.seed ^ self.epoch as u64);
                let mut loss_sum = 0.0;
                let mut n_steps = 0usize;
                for chunk in order.chunks(batch) {
                    let refs: Vec<SceneSample> =
                        chunk.iter().map(|&i| train[i].clone()).collect();
                    let stats =
                        self.train_step(&refs, stage.refine_active(), stage.freeze_prefix())?;
                    loss_sum += stats.total;
                    n_steps += 1;
                }
                let val_report = self.validate(
                    if val.is_empty() { train } else { val },
                    stage.refine_active(),
                )?;
                self.plateau_update(val_report.rmse_mm);
                let log = EpochLog {
                    epoch: self.epoch,
                    stage: stage.label(),
                    mean_loss: loss_sum / n_steps.max(1) as f64,
                    learning_rate: self.learning_rate,
                    val: val_report,
                };
                on_epoch(&log);
                if let Some(dir) = out_dir {
                    self.save_checkpoint(
                        &dir.join("checkpoints")
                            .join(format!("epoch_{:04}.ckpt", self.epoch)),
                        Some(val_report),
                    )?;
                }
                logs.push(log);
                self.epoch += 1;
            }
        }
        if let Some(dir) = out_dir {
            let last_metrics = logs.last().map(|l| l.val);
            self.save_checkpoint(&dir.join("checkpoints").join("final.ckpt"), last_metrics)?;
        }
        Ok(logs)
    }

    pub fn manifest(&self, metrics: Option<MetricReport>) -> CheckpointManifest {
        CheckpointManifest {
            arch_hash: self.run.architecture_hash(),
            epoch: self.epoch,
            global_step: self.global_step,
            adam_step: self.adam.step_count,
            learning_rate: self.learning_rate,
            plateau_best: self.plateau_best,
            plateau_bad_epochs: self.plateau_bad,
            metrics,
        }
    }

    pub fn save_checkpoint(&self, path: &Path, metrics: Option<MetricReport>) -> Result<()> {
        let mut tensors: Vec<(String, &ArrayD<f64>)> = self
            .model
            .params
            .iter()
            .map(|(n, v)| (n.to_string(), v))
            .collect();
        tensors.extend(self.adam.state_tensors(&self.model.params));
        save_checkpoint(path, &self.manifest(metrics), &tensors)
    }

    /// Rebuild a trainer from a checkpoint; the stored architecture hash must
    /// match the run configuration.
    pub fn from_checkpoint(run: RunConfig, path: &Path) -> Result<Self> {
        let (manifest, tensors) = load_checkpoint(path)?;
        if manifest.arch_hash != run.architecture_hash() {
            return Err(DepthfillError::CheckpointMismatch(format!(
                "checkpoint was trained with a different architecture (hash {} vs {})",
                manifest.arch_hash,
                run.architecture_hash()
            )));
        }
        let mut trainer = Trainer::new(run)?;
        restore_params(&mut trainer.model, &tensors)?;
        trainer
            .adam
            .restore_state(&trainer.model.params, &tensors, manifest.adam_step);
        trainer.epoch = manifest.epoch;
        trainer.global_step = manifest.global_step;
        trainer.learning_rate = manifest.learning_rate;
        trainer.plateau_best = manifest.plateau_best;
        trainer.plateau_bad = manifest.plateau_bad_epochs;
        Ok(trainer)
    }
}

/// Load model weights (no optimizer state) for evaluation or inference.
pub fn load_model(run: &RunConfig, path: &Path) -> Result<(Model, CheckpointManifest)> {
    let (manifest, tensors) = load_checkpoint(path)?;
    if manifest.arch_hash != run.architecture_hash() {
        return Err(DepthfillError::CheckpointMismatch(format!(
            "checkpoint architecture hash {} does not match configuration hash {}",
            manifest.arch_hash,
            run.architecture_hash()
        )));
    }
    let mut model = Model::new(ModelConfig::from_run(run), run.seed);
    restore_params(&mut model, &tensors)?;
    Ok((model, manifest))
}

fn restore_params(model: &mut Model, tensors: &HashMap<String, ArrayD<f64>>) -> Result<()> {
    let ids: Vec<ParamId> = model.params.ids().collect();
    for id in ids {
        let name = model.params.name(id).to_string();
        let stored = tensors.get(&name).ok_or_else(|| {
            DepthfillError::CheckpointMismatch(format!("checkpoint is missing parameter {name}"))
        })?;
        if stored.shape() != model.params.value(id).shape() {
            return Err(DepthfillError::CheckpointMismatch(format!(
                "parameter {name}: shape {:?} in checkpoint, {:?} in model",
                stored.shape(),
                model.params.value(id).shape()
            )));
        }
        *model.params.value_mut(id) = stored.clone();
    }
    Ok(())
}

fn shuffled(n: usize, seed: u64) -> Vec<usize> {
    use rand::seq::SliceRandom;
    use rand::SeedableRng;
    let mut idx: Vec<usize> = (0..n).collect();
    let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
    idx.shuffle(&mut rng);
    idx
}

/// Standard sidecar files of a run directory.
pub fn run_dir_paths(out_dir: &Path) -> (PathBuf, PathBuf, PathBuf) {
    (
        out_dir.join("run_config.txt"),
        out_dir.join("metrics.jsonl"),
        out_dir.join("checkpoints"),
    )
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::config::{Branches, FusionMode, Preset};
    use crate::data::synth_scene;

    fn micro_run() -> RunConfig {
        let mut run = RunConfig::default();
        run.preset = Preset::Tiny;
        run.fusion_mode = FusionMode::Add;
        run.branches = Branches::CgSgDg;
        run.refinement = false;
        run.optimizer.batch_size = 2;
        run.epochs = 1;
        run.seed = 11;
        run
    }

    fn micro_samples(n: usize) -> Vec<SceneSample> {
        (0..n).map(|i| synth_scene(100 + i as u64, 32, 32).unwrap()).collect()
    }

    #[test]
    fn batch_step_equals_mean_of_single_sample_losses() {
        let samples = micro_samples(2);
        let mut t_batch = Trainer::new(micro_run()).unwrap();
        let stats = t_batch.train_step(&samples, false, None).unwrap();

        let t_single = Trainer::new(micro_run()).unwrap();
        let mut cx0 = Ctx::new(&t_single.model.params);
        let (_, a) = t_single
            .model
            .loss_graph_with(&mut cx0, &samples[0], &LossWeights::default(), 0, false)
            .unwrap();
        let mut cx1 = Ctx::new(&t_single.model.params);
        let (_, b) = t_single
            .model
            .loss_graph_with(&mut cx1, &samples[1], &LossWeights::default(), 0, false)
            .unwrap();
        let mean = (a.total_value + b.total_value) / 2.0;
        assert!(
            (stats.total - mean).abs() < 1e-9 * mean.abs().max(1.0),
            "batch {} vs mean of singles {}",
            stats.total,
            mean
        );
    }

    #[test]
    fn training_reduces_loss_on_one_sample() {
        let samples = micro_samples(1);
        let mut t = Trainer::new(micro_run()).unwrap();
        let first = t.train_step(&samples, false, None).unwrap().total;
        let mut last = first;
        for _ in 0..30 {
            last = t.train_step(&samples, false, None).unwrap().total;
        }
        assert!(
            last < first,
            "loss should drop when overfitting one sample: {first} -> {last}"
        );
    }

    #[test]
    fn checkpoint_resume_reproduces_the_next_step_bitwise() {
        let samples = micro_samples(2);
        let mut t = Trainer::new(micro_run()).unwrap();
        t.train_step(&samples, false, None).unwrap();
        let dir = tempfile::TempDir::new().unwrap();
        let ckpt = dir.path().join("state.ckpt");
        t.save_checkpoint(&ckpt, None).unwrap();

        let step_once = || -> Vec<ArrayD<f64>> {
            let mut r = Trainer::from_checkpoint(micro_run(), &ckpt).unwrap();
            r.train_step(&samples, false, None).unwrap();
            r.model
                .params
                .ids()
                .map(|id| r.model.params.value(id).clone())
                .collect()
        };
        let a = step_once();
        let b = step_once();
        for (x, y) in a.iter().zip(b.iter()) {
            assert_eq!(x, y);
        }
    }

    #[test]
    fn checkpoint_arch_mismatch_is_rejected() {
        let mut t = Trainer::new(micro_run()).unwrap();
        let dir = tempfile::TempDir::new().unwrap();
        let ckpt = dir.path().join("state.ckpt");
        t.train_step(&micro_samples(1), false, None).unwrap();
        t.save_checkpoint(&ckpt, None).unwrap();
        let mut other = micro_run();
        other.fusion_mode = FusionMode::Concat;
        assert!(matches!(
            Trainer::from_checkpoint(other, &ckpt),
            Err(DepthfillError::CheckpointMismatch(_))
        ));
    }

    #[test]
    fn plateau_halves_learning_rate_after_patience() {
        let mut t = Trainer::new(micro_run()).unwrap();
        let lr0 = t.learning_rate;
        assert!(!t.plateau_update(10.0));
        assert!(!t.plateau_update(11.0));
        assert!(!t.plateau_update(11.0));
        assert!(t.plateau_update(11.0));
        assert!((t.learning_rate - lr0 * 0.5).abs() < 1e-15);
    }

    #[test]
    fn fit_produces_logs_and_checkpoints() {
        let samples = micro_samples(2);
        let mut run = micro_run();
        run.epochs = 2;
        let dir = tempfile::TempDir::new().unwrap();
        let mut t = Trainer::new(run).unwrap();
        let logs = t
            .fit(&samples, &samples, Some(dir.path()), |_| {})
            .unwrap();
        assert_eq!(logs.len(), 2);
        assert!(dir.path().join("checkpoints/epoch_0000.ckpt").exists());
        assert!(dir.path().join("checkpoints/final.ckpt").exists());
        assert!(logs.iter().all(|l| l.mean_loss.is_finite()));
    }
}
