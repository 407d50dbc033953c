//! Three encoder–decoder branches with cross-branch feature fusion.
//!
//! Each branch is a stem convolution, five stride-2 stages of two residual
//! blocks (ten blocks total), then one bottleneck convolution and five
//! transposed convolutions with additive skips back to full resolution. The
//! color-guided branch reads `[rgb; sparse]`, the semantic-guided branch
//! `[color depth; semantic; sparse]`, the depth-guided branch
//! `[color depth; semantic depth; sparse]`. Later branches absorb the
//! decoder features of earlier ones at every encoder stage through the
//! configured fusion (add / concat / attention block), and the depth-guided
//! branch carries two extra absorption layers.
//!
//! Normalization is per-channel over the spatial plane, so samples never
//! interact: a batch is processed one sample at a time and behaves exactly
//! like the concatenation of single-sample runs.

use ndarray::{Array2, Array3, ArrayD, IxDyn};
use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::attention::FusionBlock;
use crate::autograd::{Ctx, ParamId, ParamStore, Var};
use crate::config::{Branches, FusionMode};
use crate::error::{DepthfillError, Result};

pub const NORM_EPS: f64 = 1e-5;

fn he_uniform(rng: &mut impl Rng, shape: &[usize], fan_in: usize) -> ArrayD<f64> {
    let bound = (6.0 / fan_in as f64).sqrt();
    ArrayD::from_shape_fn(IxDyn(shape), |_| (rng.random::<f64>() * 2.0 - 1.0) * bound)
}

pub(crate) struct Conv2dLayer {
    w: ParamId,
    b: Option<ParamId>,
    stride: usize,
    pad: usize,
}

impl Conv2dLayer {
    #[allow(clippy::too_many_arguments)]
    fn new(
        ps: &mut ParamStore,
        rng: &mut impl Rng,
        name: &str,
        cin: usize,
        cout: usize,
        k: usize,
        stride: usize,
        bias: bool,
    ) -> Self {
        let w = ps.register(
            format!("{name}.w"),
            he_uniform(rng, &[cout, cin, k, k], cin * k * k),
        );
        let b = bias.then(|| ps.register(format!("{name}.b"), ArrayD::zeros(IxDyn(&[cout]))));
        Conv2dLayer {
            w,
            b,
            stride,
            pad: (k - 1) / 2,
        }
    }

    fn forward(&self, cx: &mut Ctx, x: Var) -> Var {
        let w = cx.param(self.w);
        let b = self.b.map(|b| cx.param(b));
        cx.tape.conv2d(x, w, b, self.stride, self.pad)
    }
}

struct ConvT2dLayer {
    w: ParamId,
    b: Option<ParamId>,
    stride: usize,
    pad: usize,
}

impl ConvT2dLayer {
    fn new(
        ps: &mut ParamStore,
        rng: &mut impl Rng,
        name: &str,
        cin: usize,
        cout: usize,
        k: usize,
    ) -> Self {
        let w = ps.register(
            format!("{name}.w"),
            he_uniform(rng, &[cin, cout, k, k], cin * k * k),
        );
        let b = Some(ps.register(format!("{name}.b"), ArrayD::zeros(IxDyn(&[cout]))));
        ConvT2dLayer {
            w,
            b,
            stride: 2,
            pad: (k - 1) / 2,
        }
    }

    fn forward(&self, cx: &mut Ctx, x: Var, out_hw: (usize, usize)) -> Var {
        let w = cx.param(self.w);
        let b = self.b.map(|b| cx.param(b));
        cx.tape.conv_transpose2d(x, w, b, self.stride, self.pad, out_hw)
    }
}

struct NormLayer {
    gamma: ParamId,
    beta: ParamId,
}

impl NormLayer {
    fn new(ps: &mut ParamStore, name: &str, channels: usize) -> Self {
        NormLayer {
            gamma: ps.register(format!("{name}.gamma"), ArrayD::from_elem(IxDyn(&[channels]), 1.0)),
            beta: ps.register(format!("{name}.beta"), ArrayD::zeros(IxDyn(&[channels]))),
        }
    }

    fn forward(&self, cx: &mut Ctx, x: Var) -> Var {
        let g = cx.param(self.gamma);
        let b = cx.param(self.beta);
        cx.tape.instance_norm(x, g, b, NORM_EPS)
    }
}

/// conv → norm → relu
struct ConvBlock {
    conv: Conv2dLayer,
    norm: NormLayer,
}

impl ConvBlock {
    fn new(
        ps: &mut ParamStore,
        rng: &mut impl Rng,
        name: &str,
        cin: usize,
        cout: usize,
        k: usize,
        stride: usize,
    ) -> Self {
        ConvBlock {
            conv: Conv2dLayer::new(ps, rng, &format!("{name}.conv"), cin, cout, k, stride, false),
            norm: NormLayer::new(ps, &format!("{name}.norm"), cout),
        }
    }

    fn forward(&self, cx: &mut Ctx, x: Var) -> Var {
        let y = self.conv.forward(cx, x);
        let y = self.norm.forward(cx, y);
        cx.tape.relu(y)
    }
}

/// Basic two-convolution residual block with a projection shortcut whenever
/// the shape changes.
struct ResidualBlock {
    conv1: Conv2dLayer,
    norm1: NormLayer,
    conv2: Conv2dLayer,
    norm2: NormLayer,
    proj: Option<(Conv2dLayer, NormLayer)>,
}

impl ResidualBlock {
    fn new(
        ps: &mut ParamStore,
        rng: &mut impl Rng,
        name: &str,
        cin: usize,
        cout: usize,
        stride: usize,
    ) -> Self {
        let proj = (stride != 1 || cin != cout).then(|| {
            (
                Conv2dLayer::new(ps, rng, &format!("{name}.proj.conv"), cin, cout, 1, stride, false),
                NormLayer::new(ps, &format!("{name}.proj.norm"), cout),
            )
        });
        ResidualBlock {
            conv1: Conv2dLayer::new(ps, rng, &format!("{name}.conv1"), cin, cout, 3, stride, false),
            norm1: NormLayer::new(ps, &format!("{name}.norm1"), cout),
            conv2: Conv2dLayer::new(ps, rng, &format!("{name}.conv2"), cout, cout, 3, 1, false),
            norm2: NormLayer::new(ps, &format!("{name}.norm2"), cout),
            proj,
        }
    }

    fn forward(&self, cx: &mut Ctx, x: Var) -> Var {
        let y = self.conv1.forward(cx, x);
        let y = self.norm1.forward(cx, y);
        let y = cx.tape.relu(y);
        let y = self.conv2.forward(cx, y);
        let y = self.norm2.forward(cx, y);
        let shortcut = match &self.proj {
            Some((conv, norm)) => {
                let s = conv.forward(cx, x);
                norm.forward(cx, s)
            }
            None => x,
        };
        let sum = cx.tape.add(y, shortcut);
        cx.tape.relu(sum)
    }
}

struct Stage {
    block1: ResidualBlock,
    block2: ResidualBlock,
}

impl Stage {
    fn new(ps: &mut ParamStore, rng: &mut impl Rng, name: &str, cin: usize, cout: usize) -> Self {
        Stage {
            block1: ResidualBlock::new(ps, rng, &format!("{name}.block1"), cin, cout, 2),
            block2: ResidualBlock::new(ps, rng, &format!("{name}.block2"), cout, cout, 1),
        }
    }

    fn forward(&self, cx: &mut Ctx, x: Var) -> Var {
        let y = self.block1.forward(cx, x);
        self.block2.forward(cx, y)
    }
}

/// Cross-branch fusion at one encoder stage. Concat and attention modes end
/// with a 1×1 projection back to the stage width.
struct StageFusion {
    mode: FusionMode,
    attention: Option<FusionBlock>,
    proj: Option<Conv2dLayer>,
}

impl StageFusion {
    fn new(
        ps: &mut ParamStore,
        rng: &mut impl Rng,
        name: &str,
        mode: FusionMode,
        width: usize,
        n_donors: usize,
        spatial_kernel: usize,
    ) -> Self {
        let total = width * (1 + n_donors);
        let attention = matches!(mode, FusionMode::Sammafb)
            .then(|| FusionBlock::new(ps, rng, &format!("{name}.attn"), total, spatial_kernel));
        let proj = (!matches!(mode, FusionMode::Add)).then(|| {
            Conv2dLayer::new(ps, rng, &format!("{name}.proj"), total, width, 1, 1, true)
        });
        StageFusion {
            mode,
            attention,
            proj,
        }
    }

    fn forward(&self, cx: &mut Ctx, own: Var, donors: &[Var]) -> Var {
        if donors.is_empty() {
            return own;
        }
        match self.mode {
            FusionMode::Add => {
                let mut acc = own;
                for &d in donors {
                    acc = cx.tape.add(acc, d);
                }
                acc
            }
            FusionMode::Concat => {
                let mut parts = vec![own];
                parts.extend_from_slice(donors);
                let cat = cx.tape.concat_channels(&parts);
                self.proj.as_ref().expect("concat projection").forward(cx, cat)
            }
            FusionMode::Sammafb => {
                let mut parts = vec![own];
                parts.extend_from_slice(donors);
                let fused = self
                    .attention
                    .as_ref()
                    .expect("attention block")
                    .forward(cx, &parts);
                self.proj.as_ref().expect("attention projection").forward(cx, fused)
            }
        }
    }
}

struct UpBlock {
    convt: ConvT2dLayer,
    norm: NormLayer,
}

impl UpBlock {
    fn new(ps: &mut ParamStore, rng: &mut impl Rng, name: &str, cin: usize, cout: usize) -> Self {
        UpBlock {
            convt: ConvT2dLayer::new(ps, rng, &format!("{name}.convt"), cin, cout, 3),
            norm: NormLayer::new(ps, &format!("{name}.norm"), cout),
        }
    }

    fn forward(&self, cx: &mut Ctx, x: Var, out_hw: (usize, usize)) -> Var {
        let y = self.convt.forward(cx, x, out_hw);
        let y = self.norm.forward(cx, y);
        cx.tape.relu(y)
    }
}

/// Decoder features a branch exposes to the branches after it.
pub struct BranchFeatures {
    /// Bottleneck feature at the deepest stride.
    pub bottleneck: Var,
    /// Post-skip decoder features, deepest first (strides 16, 8, 4, 2, 1 for
    /// the five-stage configuration).
    pub by_stride: Vec<Var>,
}

impl BranchFeatures {
    /// Donor feature matching encoder stage `k` (1-based).
    fn for_stage(&self, k: usize) -> Var {
        let n = self.by_stride.len();
        if k == n {
            self.bottleneck
        } else {
            self.by_stride[n - 1 - k]
        }
    }
}

pub struct BranchOutput {
    pub depth: Var,
    pub confidence: Var,
    pub feats: BranchFeatures,
}

/// One encoder–decoder branch.
pub struct Branch {
    input_channels: usize,
    stem: ConvBlock,
    stages: Vec<Stage>,
    fusions: Vec<Option<StageFusion>>,
    extra_enc: Option<ConvBlock>,
    bottleneck: ConvBlock,
    ups: Vec<UpBlock>,
    extra_dec: Option<ConvBlock>,
    depth_head: Conv2dLayer,
    conf_head: Conv2dLayer,
}

pub struct BranchSpec<'a> {
    pub name: &'a str,
    pub input_channels: usize,
    pub widths: &'a [usize],
    pub n_donors: usize,
    pub fusion_mode: FusionMode,
    pub spatial_kernel: usize,
    /// Extra absorption layers for the branch that digests both earlier ones.
    pub extra_layers: bool,
}

impl Branch {
    pub fn new(ps: &mut ParamStore, rng: &mut impl Rng, spec: &BranchSpec) -> Self {
        let name = spec.name;
        let widths = spec.widths;
        let n_stages = widths.len() - 1;
        let stem = ConvBlock::new(
            ps,
            rng,
            &format!("{name}.stem"),
            spec.input_channels,
            widths[0],
            3,
            1,
        );
        let mut stages = Vec::with_capacity(n_stages);
        let mut fusions = Vec::with_capacity(n_stages);
        for k in 1..=n_stages {
            stages.push(Stage::new(
                ps,
                rng,
                &format!("{name}.stage{k}"),
                widths[k - 1],
                widths[k],
            ));
            fusions.push((spec.n_donors > 0).then(|| {
                StageFusion::new(
                    ps,
                    rng,
                    &format!("{name}.fuse{k}"),
                    spec.fusion_mode,
                    widths[k],
                    spec.n_donors,
                    spec.spatial_kernel,
                )
            }));
        }
        let deepest = widths[n_stages];
        let extra_enc = spec.extra_layers.then(|| {
            ConvBlock::new(ps, rng, &format!("{name}.extra_enc"), deepest, deepest, 3, 1)
        });
        let bottleneck = ConvBlock::new(
            ps,
            rng,
            &format!("{name}.bottleneck"),
            deepest,
            deepest,
            3,
            1,
        );
        let mut ups = Vec::with_capacity(n_stages);
        for k in (0..n_stages).rev() {
            ups.push(UpBlock::new(
                ps,
                rng,
                &format!("{name}.up{}", n_stages - k),
                widths[k + 1],
                widths[k],
            ));
        }
        let extra_dec = spec.extra_layers.then(|| {
            ConvBlock::new(ps, rng, &format!("{name}.extra_dec"), widths[0], widths[0], 3, 1)
        });
        let depth_head =
            Conv2dLayer::new(ps, rng, &format!("{name}.depth_head"), widths[0], 1, 3, 1, true);
        // start depth predictions inside the scenes' working range
        if let Some(b) = depth_head.b {
            *ps.value_mut(b) = ArrayD::from_elem(IxDyn(&[1]), 10.0);
        }
        let conf_head =
            Conv2dLayer::new(ps, rng, &format!("{name}.conf_head"), widths[0], 1, 3, 1, true);
        Branch {
            input_channels: spec.input_channels,
            stem,
            stages,
            fusions,
            extra_enc,
            bottleneck,
            ups,
            extra_dec,
            depth_head,
            conf_head,
        }
    }

    pub fn num_stages(&self) -> usize {
        self.stages.len()
    }

    /// Run the branch. `donors` are the decoder features of earlier branches,
    /// fused into each encoder stage (and the bottleneck) at matching
    /// resolution. Both heads are linear.
    pub fn forward(&self, cx: &mut Ctx, x: Var, donors: &[&BranchFeatures]) -> Result<BranchOutput> {
        let xs = cx.tape.shape(x).to_vec();
        if xs.len() != 3 || xs[0] != self.input_channels {
            return Err(DepthfillError::dimension(
                "branch input",
                format!("({}, H, W)", self.input_channels),
                format!("{xs:?}"),
            ));
        }
        let factor = 1usize << self.num_stages();
        if xs[1] % factor != 0 || xs[2] % factor != 0 {
            return Err(DepthfillError::dimension(
                "branch input size",
                format!("H and W divisible by {factor}"),
                format!("{}x{}", xs[1], xs[2]),
            ));
        }

        let stem = self.stem.forward(cx, x);
        let mut enc = vec![stem];
        let mut cur = stem;
        for (i, stage) in self.stages.iter().enumerate() {
            cur = stage.forward(cx, cur);
            if let Some(fusion) = &self.fusions[i] {
                let stage_no = i + 1;
                let donor_feats: Vec<Var> =
                    donors.iter().map(|d| d.for_stage(stage_no)).collect();
                cur = fusion.forward(cx, cur, &donor_feats);
            }
            enc.push(cur);
        }
        if let Some(extra) = &self.extra_enc {
            cur = extra.forward(cx, cur);
        }
        let bneck = self.bottleneck.forward(cx, cur);

        let mut d = bneck;
        let mut by_stride = Vec::with_capacity(self.ups.len());
        for (i, up) in self.ups.iter().enumerate() {
            let mirror = enc[enc.len() - 2 - i];
            let ms = cx.tape.shape(mirror);
            let target = (ms[1], ms[2]);
            d = up.forward(cx, d, target);
            d = cx.tape.add(d, mirror);
            by_stride.push(d);
        }
        let head_in = match &self.extra_dec {
            Some(extra) => extra.forward(cx, d),
            None => d,
        };
        let depth = self.depth_head.forward(cx, head_in);
        let confidence = self.conf_head.forward(cx, head_in);
        Ok(BranchOutput {
            depth,
            confidence,
            feats: BranchFeatures {
                bottleneck: bneck,
                by_stride,
            },
        })
    }
}

/// Architecture description shared by training and inference.
#[derive(Debug, Clone, PartialEq)]
pub struct ModelConfig {
    pub stage_widths: Vec<usize>,
    pub fusion_mode: FusionMode,
    pub branches: Branches,
    pub refinement: bool,
    pub cspn_kernel: usize,
    pub spatial_kernel: usize,
}

impl ModelConfig {
    pub fn from_run(cfg: &crate::config::RunConfig) -> Self {
        ModelConfig {
            stage_widths: cfg.preset.stage_widths(),
            fusion_mode: cfg.fusion_mode,
            branches: cfg.branches,
            refinement: cfg.refinement,
            cspn_kernel: 3,
            spatial_kernel: crate::attention::DEFAULT_SPATIAL_KERNEL,
        }
    }

    pub fn divisibility(&self) -> usize {
        1 << (self.stage_widths.len() - 1)
    }
}

/// The full three-branch (or two-branch) backbone with confidence fusion and
/// the optional affinity head feeding refinement.
pub struct Backbone {
    pub cfg: ModelConfig,
    cg: Branch,
    sg: Option<Branch>,
    dg: Branch,
    affinity_head: Option<Conv2dLayer>,
}

pub struct BackboneGraph {
    pub cg: BranchOutput,
    pub sg: Option<BranchOutput>,
    pub dg: BranchOutput,
    pub fused: Var,
    pub raw_affinity: Option<Var>,
}

impl Backbone {
    pub fn new(ps: &mut ParamStore, cfg: ModelConfig, seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let widths = cfg.stage_widths.clone();
        let three = cfg.branches.uses_semantics();
        let cg = Branch::new(
            ps,
            &mut rng,
            &BranchSpec {
                name: "cg",
                input_channels: 4,
                widths: &widths,
                n_donors: 0,
                fusion_mode: cfg.fusion_mode,
                spatial_kernel: cfg.spatial_kernel,
                extra_layers: false,
            },
        );
        let sg = three.then(|| {
            Branch::new(
                ps,
                &mut rng,
                &BranchSpec {
                    name: "sg",
                    input_channels: 5,
                    widths: &widths,
                    n_donors: 1,
                    fusion_mode: cfg.fusion_mode,
                    spatial_kernel: cfg.spatial_kernel,
                    extra_layers: false,
                },
            )
        });
        let dg = Branch::new(
            ps,
            &mut rng,
            &BranchSpec {
                name: "dg",
                input_channels: if three { 3 } else { 2 },
                widths: &widths,
                n_donors: if three { 2 } else { 1 },
                fusion_mode: cfg.fusion_mode,
                spatial_kernel: cfg.spatial_kernel,
                extra_layers: true,
            },
        );
        let affinity_head = cfg.refinement.then(|| {
            Conv2dLayer::new(
                ps,
                &mut rng,
                "refine.affinity",
                widths[0],
                cfg.cspn_kernel * cfg.cspn_kernel - 1,
                3,
                1,
                true,
            )
        });
        Backbone {
            cfg,
            cg,
            sg,
            dg,
            affinity_head,
        }
    }

    /// Wire the branch DAG: color-guided first, its depth feeding the
    /// semantic-guided input, both feeding the depth-guided branch, then
    /// confidence-weighted fusion of the branch depths.
    pub fn forward(
        &self,
        cx: &mut Ctx,
        rgb: &Array3<f64>,
        sparse: &Array2<f64>,
        semantic: Option<&Array3<f64>>,
    ) -> Result<BackboneGraph> {
        let (h, w) = sparse.dim();
        let rgb_v = cx.tape.constant(rgb.clone().into_dyn());
        let sparse_v = cx
            .tape
            .constant(sparse.clone().into_shape_with_order(IxDyn(&[1, h, w])).unwrap());

        let x_cg = cx.tape.concat_channels(&[rgb_v, sparse_v]);
        let cg = self.cg.forward(cx, x_cg, &[])?;

        let sg = match (&self.sg, semantic) {
            (Some(branch), Some(sem)) => {
                let sem_v = cx.tape.constant(sem.clone().into_dyn());
                let x_sg = cx.tape.concat_channels(&[cg.depth, sem_v, sparse_v]);
                Some(branch.forward(cx, x_sg, &[&cg.feats])?)
            }
            (Some(_), None) => {
                return Err(DepthfillError::Config(
                    "three-branch configuration requires a semantic image".into(),
                ))
            }
            (None, Some(_)) => {
                return Err(DepthfillError::Config(
                    "two-branch configuration (cg_dg) does not accept semantic input".into(),
                ))
            }
            (None, None) => None,
        };

        let (x_dg, donors): (Var, Vec<&BranchFeatures>) = match &sg {
            Some(sg_out) => (
                cx.tape
                    .concat_channels(&[cg.depth, sg_out.depth, sparse_v]),
                vec![&cg.feats, &sg_out.feats],
            ),
            None => (
                cx.tape.concat_channels(&[cg.depth, sparse_v]),
                vec![&cg.feats],
            ),
        };
        let dg = self.dg.forward(cx, x_dg, &donors)?;

        let (depths, confs): (Vec<Var>, Vec<Var>) = match &sg {
            Some(sg_out) => (
                vec![cg.depth, sg_out.depth, dg.depth],
                vec![cg.confidence, sg_out.confidence, dg.confidence],
            ),
            None => (
                vec![cg.depth, dg.depth],
                vec![cg.confidence, dg.confidence],
            ),
        };
        let fused = cx.tape.softmax_fuse(&depths, &confs);

        let raw_affinity = self
            .affinity_head
            .as_ref()
            .map(|head| head.forward(cx, *dg.feats.by_stride.last().expect("decoder features")));

        Ok(BackboneGraph {
            cg,
            sg,
            dg,
            fused,
            raw_affinity,
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::config::{Branches, FusionMode};

    fn tiny_cfg(fusion: FusionMode, branches: Branches, refinement: bool) -> ModelConfig {
        ModelConfig {
            stage_widths: vec![4, 8, 16, 32, 64, 128],
            fusion_mode: fusion,
            branches,
            refinement,
            cspn_kernel: 3,
            spatial_kernel: 7,
        }
    }

    fn micro_cfg() -> ModelConfig {
        ModelConfig {
            stage_widths: vec![2, 4, 8],
            fusion_mode: FusionMode::Sammafb,
            branches: Branches::CgSgDg,
            refinement: true,
            cspn_kernel: 3,
            spatial_kernel: 3,
        }
    }

    fn inputs(h: usize, w: usize) -> (Array3<f64>, Array2<f64>, Array3<f64>) {
        let s = crate::data::synth_scene(3, h, w).unwrap();
        (s.rgb, s.sparse_depth, s.semantic)
    }

    #[test]
    fn shape_contract_and_decoder_strides() {
        let mut ps = ParamStore::new();
        let bb = Backbone::new(&mut ps, tiny_cfg(FusionMode::Sammafb, Branches::CgSgDg, true), 0);
        let (rgb, sparse, sem) = inputs(64, 96);
        let mut cx = Ctx::new(&ps);
        let g = bb.forward(&mut cx, &rgb, &sparse, Some(&sem)).unwrap();
        assert_eq!(cx.tape.shape(g.cg.depth), &[1, 64, 96]);
        assert_eq!(cx.tape.shape(g.cg.confidence), &[1, 64, 96]);
        assert_eq!(cx.tape.shape(g.fused), &[1, 64, 96]);
        let strides = [16usize, 8, 4, 2, 1];
        for (i, &v) in g.cg.feats.by_stride.iter().enumerate() {
            let s = cx.tape.shape(v);
            assert_eq!(s[1], 64 / strides[i]);
            assert_eq!(s[2], 96 / strides[i]);
        }
        let aff = g.raw_affinity.unwrap();
        assert_eq!(cx.tape.shape(aff), &[8, 64, 96]);
        assert!(cx.tape.value(g.fused).iter().all(|v| v.is_finite()));
    }

    #[test]
    fn rejects_indivisible_input() {
        let mut ps = ParamStore::new();
        let bb = Backbone::new(&mut ps, tiny_cfg(FusionMode::Add, Branches::CgSgDg, false), 0);
        let (rgb, sparse, sem) = inputs(64, 96);
        let rgb = rgb.slice(ndarray::s![.., ..60, ..]).to_owned();
        let sparse = sparse.slice(ndarray::s![..60, ..]).to_owned();
        let sem = sem.slice(ndarray::s![.., ..60, ..]).to_owned();
        let mut cx = Ctx::new(&ps);
        assert!(matches!(
            bb.forward(&mut cx, &rgb, &sparse, Some(&sem)),
            Err(DepthfillError::Dimension { .. })
        ));
    }

    #[test]
    fn forward_is_deterministic() {
        let mut ps = ParamStore::new();
        let bb = Backbone::new(&mut ps, micro_cfg(), 7);
        let (rgb, sparse, sem) = inputs(32, 32);
        let run = || {
            let mut cx = Ctx::new(&ps);
            let g = bb.forward(&mut cx, &rgb, &sparse, Some(&sem)).unwrap();
            cx.tape.value(g.fused).clone()
        };
        let a = run();
        let b = run();
        assert_eq!(a, b);
    }

    #[test]
    fn semantic_toggles_enforced_per_branch_set() {
        let mut ps = ParamStore::new();
        let three = Backbone::new(&mut ps, micro_cfg(), 0);
        let (rgb, sparse, sem) = inputs(32, 32);
        let mut cx = Ctx::new(&ps);
        assert!(matches!(
            three.forward(&mut cx, &rgb, &sparse, None),
            Err(DepthfillError::Config(_))
        ));

        let mut ps2 = ParamStore::new();
        let mut cfg2 = micro_cfg();
        cfg2.branches = Branches::CgDg;
        let two = Backbone::new(&mut ps2, cfg2, 0);
        let mut cx2 = Ctx::new(&ps2);
        assert!(matches!(
            two.forward(&mut cx2, &rgb, &sparse, Some(&sem)),
            Err(DepthfillError::Config(_))
        ));
        // and without semantics it runs
        let mut cx3 = Ctx::new(&ps2);
        let g = two.forward(&mut cx3, &rgb, &sparse, None).unwrap();
        assert!(cx3.tape.value(g.fused).iter().all(|v| v.is_finite()));
    }

    #[test]
    fn zero_sparse_depth_stays_finite() {
        let mut ps = ParamStore::new();
        let bb = Backbone::new(&mut ps, micro_cfg(), 1);
        let (rgb, _, sem) = inputs(32, 32);
        let sparse = Array2::zeros((32, 32));
        let mut cx = Ctx::new(&ps);
        let g = bb.forward(&mut cx, &rgb, &sparse, Some(&sem)).unwrap();
        for v in [g.cg.depth, g.fused, g.dg.confidence] {
            assert!(cx.tape.value(v).iter().all(|x| x.is_finite()));
        }
        // gradients stay finite as well
        let loss = cx.tape.sum(g.fused);
        let grads = cx.tape.backward(loss);
        for (_, g) in cx.param_grads(&grads) {
            if let Some(g) = g {
                assert!(g.iter().all(|v| v.is_finite()));
            }
        }
    }

    #[test]
    fn cg_output_is_isolated_from_sg_input() {
        // the branch DAG runs CG -> SG -> DG: touching the semantic plane
        // must leave the CG depth bitwise unchanged while SG/DG move
        let mut ps = ParamStore::new();
        let bb = Backbone::new(&mut ps, micro_cfg(), 5);
        let (rgb, sparse, sem) = inputs(32, 32);
        let mut cx_a = Ctx::new(&ps);
        let a = bb.forward(&mut cx_a, &rgb, &sparse, Some(&sem)).unwrap();
        let mut sem_b = sem.clone();
        sem_b[[0, 7, 9]] = 1.0 - sem_b[[0, 7, 9]];
        let mut cx_b = Ctx::new(&ps);
        let b = bb.forward(&mut cx_b, &rgb, &sparse, Some(&sem_b)).unwrap();
        assert_eq!(
            cx_a.tape.value(a.cg.depth),
            cx_b.tape.value(b.cg.depth),
            "CG must not see semantic input"
        );
        assert_ne!(
            cx_a.tape.value(a.sg.as_ref().unwrap().depth),
            cx_b.tape.value(b.sg.as_ref().unwrap().depth)
        );
        assert_ne!(cx_a.tape.value(a.dg.depth), cx_b.tape.value(b.dg.depth));
    }

    #[test]
    fn all_fusion_modes_run() {
        for mode in [FusionMode::Add, FusionMode::Concat, FusionMode::Sammafb] {
            let mut ps = ParamStore::new();
            let mut cfg = micro_cfg();
            cfg.fusion_mode = mode;
            let bb = Backbone::new(&mut ps, cfg, 2);
            let (rgb, sparse, sem) = inputs(32, 32);
            let mut cx = Ctx::new(&ps);
            let g = bb.forward(&mut cx, &rgb, &sparse, Some(&sem)).unwrap();
            assert!(cx.tape.value(g.fused).iter().all(|v| v.is_finite()));
        }
    }
}
