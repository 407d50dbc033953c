//! The complete pipeline: backbone branches, confidence fusion, and optional
//! propagation refinement, behind one inference and one training surface.

use ndarray::{Array2, Array3, ArrayD, IxDyn};

use crate::autograd::{Ctx, ParamStore, Var};
use crate::backbone::{Backbone, BackboneGraph, ModelConfig};
use crate::cspn::{refine_graph, DilationSchedule};
use crate::data::SceneSample;
use crate::error::{DepthfillError, Result};
use crate::loss::LossWeights;

/// Smallest depth the inference path reports; predictions below the PNG
/// depth grid's first step are not meaningful and break inverse metrics.
pub const MIN_REPORTED_DEPTH_M: f64 = 1.0 / 256.0;

pub struct Model {
    pub params: ParamStore,
    backbone: Backbone,
    schedule: DilationSchedule,
}

/// Tape handles for one forward pass.
pub struct ModelGraph {
    pub backbone: BackboneGraph,
    pub refined: Option<Var>,
}

impl ModelGraph {
    pub fn final_depth(&self) -> Var {
        self.refined.unwrap_or(self.backbone.fused)
    }
}

/// Plain-array outputs for inference and evaluation.
#[derive(Debug, Clone)]
pub struct Prediction {
    pub depth_cg: Array2<f64>,
    pub conf_cg: Array2<f64>,
    pub depth_sg: Option<Array2<f64>>,
    pub conf_sg: Option<Array2<f64>>,
    pub depth_dg: Array2<f64>,
    pub conf_dg: Array2<f64>,
    pub fused: Array2<f64>,
    pub refined: Option<Array2<f64>>,
}

impl Prediction {
    pub fn final_depth(&self) -> &Array2<f64> {
        self.refined.as_ref().unwrap_or(&self.fused)
    }

    /// Final depth clamped to the reporting floor, safe for inverse metrics
    /// and PNG export.
    pub fn final_depth_clamped(&self) -> Array2<f64> {
        self.final_depth().mapv(|v| v.max(MIN_REPORTED_DEPTH_M))
    }
}

/// Per-sample loss terms on the tape plus their scalar values.
pub struct LossGraph {
    pub total: Var,
    pub l_cg: f64,
    pub l_sg: Option<f64>,
    pub l_dg: f64,
    pub l_final: f64,
    pub total_value: f64,
}

impl Model {
    pub fn new(cfg: ModelConfig, seed: u64) -> Self {
        let mut params = ParamStore::new();
        let backbone = Backbone::new(&mut params, cfg, seed);
        Model {
            params,
            backbone,
            schedule: DilationSchedule::standard(),
        }
    }

    pub fn cfg(&self) -> &ModelConfig {
        &self.backbone.cfg
    }

    pub fn schedule(&self) -> &DilationSchedule {
        &self.schedule
    }

    /// Build the forward graph on a caller-provided context.
    pub fn forward_graph(
        &self,
        cx: &mut Ctx,
        rgb: &Array3<f64>,
        sparse: &Array2<f64>,
        semantic: Option<&Array3<f64>>,
    ) -> Result<ModelGraph> {
        let backbone = self.backbone.forward(cx, rgb, sparse, semantic)?;
        let refined = match backbone.raw_affinity {
            Some(raw) => Some(refine_graph(
                &mut cx.tape,
                backbone.fused,
                raw,
                sparse,
                self.cfg().cspn_kernel,
                &self.schedule,
            )),
            None => None,
        };
        Ok(ModelGraph { backbone, refined })
    }

    /// Forward plus masked losses on the final map (refined when refinement
    /// is active).
    pub fn loss_graph(
        &self,
        cx: &mut Ctx,
        sample: &SceneSample,
        weights: &LossWeights,
        epoch: u32,
    ) -> Result<(ModelGraph, LossGraph)> {
        self.loss_graph_with(cx, sample, weights, epoch, true)
    }

    /// Forward plus masked losses. The fused-output term is evaluated on the
    /// refined map when `refine_active` (and the head exists), otherwise on
    /// the confidence-fused map; the branch terms carry the decayed weights.
    /// Stage-one training runs with refinement idle even when the head is
    /// built, so its parameters stay untouched until the warm-up epoch.
    pub fn loss_graph_with(
        &self,
        cx: &mut Ctx,
        sample: &SceneSample,
        weights: &LossWeights,
        epoch: u32,
        refine_active: bool,
    ) -> Result<(ModelGraph, LossGraph)> {
        if !sample.valid_mask.iter().any(|&m| m) {
            return Err(DepthfillError::EmptyMask);
        }
        let semantic = self
            .cfg()
            .branches
            .uses_semantics()
            .then_some(&sample.semantic);
        let graph = self.forward_graph(cx, &sample.rgb, &sample.sparse_depth, semantic)?;

        let (h, w) = sample.gt_depth.dim();
        let gt: ArrayD<f64> = sample
            .gt_depth
            .clone()
            .into_shape_with_order(IxDyn(&[1, h, w]))
            .unwrap();
        let mask: Vec<bool> = sample.valid_mask.iter().copied().collect();

        let l_cg = cx.tape.masked_l2(graph.backbone.cg.depth, &gt, &mask);
        let l_sg = graph
            .backbone
            .sg
            .as_ref()
            .map(|sg| cx.tape.masked_l2(sg.depth, &gt, &mask));
        let l_dg = cx.tape.masked_l2(graph.backbone.dg.depth, &gt, &mask);
        let final_map = if refine_active {
            graph.final_depth()
        } else {
            graph.backbone.fused
        };
        let l_final = cx.tape.masked_l2(final_map, &gt, &mask);

        let (lam_cg, lam_sg, lam_dg) = crate::loss::lambda_schedule(epoch, weights);
        let mut terms = vec![(l_cg, lam_cg)];
        if let Some(sg) = l_sg {
            terms.push((sg, lam_sg));
        }
        terms.push((l_dg, lam_dg));
        terms.push((l_final, 1.0));
        let total = cx.tape.weighted_sum(&terms);

        let lg = LossGraph {
            total,
            l_cg: cx.tape.scalar(l_cg),
            l_sg: l_sg.map(|v| cx.tape.scalar(v)),
            l_dg: cx.tape.scalar(l_dg),
            l_final: cx.tape.scalar(l_final),
            total_value: cx.tape.scalar(total),
        };
        Ok((graph, lg))
    }

    /// Inference to plain arrays.
    pub fn infer(
        &self,
        rgb: &Array3<f64>,
        sparse: &Array2<f64>,
        semantic: Option<&Array3<f64>>,
    ) -> Result<Prediction> {
        let mut cx = Ctx::new(&self.params);
        let graph = self.forward_graph(&mut cx, rgb, sparse, semantic)?;
        let to2d = |v: Var| -> Array2<f64> {
            let val = cx.tape.value(v);
            let s = val.shape();
            val.clone()
                .into_shape_with_order((s[1], s[2]))
                .unwrap()
        };
        Ok(Prediction {
            depth_cg: to2d(graph.backbone.cg.depth),
            conf_cg: to2d(graph.backbone.cg.confidence),
            depth_sg: graph.backbone.sg.as_ref().map(|b| to2d(b.depth)),
            conf_sg: graph.backbone.sg.as_ref().map(|b| to2d(b.confidence)),
            depth_dg: to2d(graph.backbone.dg.depth),
            conf_dg: to2d(graph.backbone.dg.confidence),
            fused: to2d(graph.backbone.fused),
            refined: graph.refined.map(to2d),
        })
    }

    /// Inference on a dataset sample, passing the semantic plane only to
    /// configurations that consume it.
    pub fn predict_sample(&self, sample: &SceneSample) -> Result<Prediction> {
        let semantic = self
            .cfg()
            .branches
            .uses_semantics()
            .then_some(&sample.semantic);
        self.infer(&sample.rgb, &sample.sparse_depth, semantic)
    }
}
