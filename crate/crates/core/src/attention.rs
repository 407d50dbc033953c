//! Channel- and spatial-wise attention over concatenated modality features.
//!
//! The fusion block concatenates two or three same-shaped feature maps
//! depth-wise, gates channels with pooled statistics pushed through a shared
//! two-layer perceptron, then gates locations with a convolution over the
//! channel-wise mean and max planes. Both gates are sigmoids, so the output
//! never exceeds the concatenated input in magnitude.

use ndarray::{Array1, Array2, Array3, ArrayD, IxDyn};
use rand::Rng;

use crate::autograd::{Ctx, ParamId, ParamStore, Tape, Var};
use crate::error::{DepthfillError, Result};

/// A `(C, H, W)` activation tensor with finite entries.
#[derive(Debug, Clone)]
pub struct FeatureMap(Array3<f64>);

impl FeatureMap {
    pub fn new(data: Array3<f64>) -> Result<Self> {
        let (c, h, w) = data.dim();
        if c == 0 || h == 0 || w == 0 {
            return Err(DepthfillError::Validation(
                "feature map dimensions must all be >= 1".into(),
            ));
        }
        if !data.iter().all(|v| v.is_finite()) {
            return Err(DepthfillError::Validation(
                "feature map contains non-finite entries".into(),
            ));
        }
        Ok(FeatureMap(data))
    }

    pub fn channels(&self) -> usize {
        self.0.dim().0
    }

    pub fn data(&self) -> &Array3<f64> {
        &self.0
    }

    pub fn into_inner(self) -> Array3<f64> {
        self.0
    }

    fn to_dyn(&self) -> ArrayD<f64> {
        self.0.clone().into_dyn()
    }
}

/// Shared-MLP weights for channel attention. No bias terms.
#[derive(Debug, Clone)]
pub struct ChannelAttentionParams {
    w0: Array2<f64>,
    w1: Array2<f64>,
    reduction: usize,
}

impl ChannelAttentionParams {
    pub fn new(w0: Array2<f64>, w1: Array2<f64>) -> Result<Self> {
        let (hidden, c) = w0.dim();
        let (c_out, hidden_in) = w1.dim();
        if c_out != c || hidden_in != hidden {
            return Err(DepthfillError::dimension(
                "channel attention MLP",
                format!("w1 of shape ({c}, {hidden})"),
                format!("({c_out}, {hidden_in})"),
            ));
        }
        if hidden == 0 || c % hidden != 0 {
            return Err(DepthfillError::Validation(format!(
                "reduction must divide the channel count: C={c}, C/r={hidden}"
            )));
        }
        if !w0.iter().chain(w1.iter()).all(|v| v.is_finite()) {
            return Err(DepthfillError::Validation(
                "channel attention weights must be finite".into(),
            ));
        }
        Ok(ChannelAttentionParams {
            w0,
            w1,
            reduction: c / hidden,
        })
    }

    /// Random init for `channels` inputs with the default reduction.
    pub fn init(channels: usize, rng: &mut impl Rng) -> Self {
        let r = default_reduction(channels);
        let hidden = channels / r;
        let s0 = (2.0 / channels as f64).sqrt();
        let s1 = (2.0 / hidden as f64).sqrt();
        let w0 = Array2::from_shape_fn((hidden, channels), |_| (rng.random::<f64>() * 2.0 - 1.0) * s0);
        let w1 = Array2::from_shape_fn((channels, hidden), |_| (rng.random::<f64>() * 2.0 - 1.0) * s1);
        ChannelAttentionParams { w0, w1, reduction: r }
    }

    pub fn reduction(&self) -> usize {
        self.reduction
    }

    pub fn channels(&self) -> usize {
        self.w0.dim().1
    }

    pub fn w0(&self) -> &Array2<f64> {
        &self.w0
    }

    pub fn w1(&self) -> &Array2<f64> {
        &self.w1
    }
}

/// Largest divisor of `c` no greater than the conventional target (16 for
/// wide inputs, C/2 for narrow ones), so the hidden width is always integral.
pub fn default_reduction(c: usize) -> usize {
    let target = if c >= 16 { 16 } else { (c / 2).max(1) };
    (1..=target).rev().find(|d| c % d == 0).unwrap_or(1)
}

/// Spatial attention: one odd-sized convolution over the stacked channel-mean
/// and channel-max planes, plus a scalar bias.
#[derive(Debug, Clone)]
pub struct SpatialAttentionParams {
    kernel: ArrayD<f64>,
    bias: f64,
}

impl SpatialAttentionParams {
    pub fn new(kernel: ArrayD<f64>, bias: f64) -> Result<Self> {
        let s = kernel.shape().to_vec();
        if s.len() != 4 || s[0] != 1 || s[1] != 2 || s[2] != s[3] {
            return Err(DepthfillError::dimension(
                "spatial attention kernel",
                "(1, 2, k, k)".to_string(),
                format!("{s:?}"),
            ));
        }
        if s[2] % 2 == 0 {
            return Err(DepthfillError::Validation(
                "spatial attention kernel size must be odd".into(),
            ));
        }
        if !kernel.iter().all(|v| v.is_finite()) || !bias.is_finite() {
            return Err(DepthfillError::Validation(
                "spatial attention parameters must be finite".into(),
            ));
        }
        Ok(SpatialAttentionParams { kernel, bias })
    }

    pub fn init(kernel_size: usize, rng: &mut impl Rng) -> Self {
        let s = (2.0 / (2.0 * (kernel_size * kernel_size) as f64)).sqrt();
        let kernel = ArrayD::from_shape_fn(IxDyn(&[1, 2, kernel_size, kernel_size]), |_| {
            (rng.random::<f64>() * 2.0 - 1.0) * s
        });
        SpatialAttentionParams { kernel, bias: 0.0 }
    }

    pub fn kernel_size(&self) -> usize {
        self.kernel.shape()[2]
    }

    pub fn kernel(&self) -> &ArrayD<f64> {
        &self.kernel
    }

    pub fn bias(&self) -> f64 {
        self.bias
    }
}

pub const DEFAULT_SPATIAL_KERNEL: usize = 7;

/// Graph form of channel attention: `sigmoid(MLP(avg) + MLP(max))` with
/// `MLP(x) = w1 · relu(w0 · x)`. Returns a `(C,)` gate vector.
pub fn channel_attention_graph(tape: &mut Tape, f: Var, w0: Var, w1: Var) -> Var {
    let avg = tape.global_avg_pool(f);
    let max = tape.global_max_pool(f);
    let ha = tape.linear(w0, avg);
    let ha = tape.relu(ha);
    let ha = tape.linear(w1, ha);
    let hm = tape.linear(w0, max);
    let hm = tape.relu(hm);
    let hm = tape.linear(w1, hm);
    let logits = tape.add(ha, hm);
    tape.sigmoid(logits)
}

/// Graph form of spatial attention: `sigmoid(conv([mean_c(f); max_c(f)]))`,
/// symmetric zero padding so the gate matches the input plane.
pub fn spatial_attention_graph(tape: &mut Tape, f: Var, kernel: Var, bias: Var) -> Var {
    let mean = tape.channel_mean(f);
    let max = tape.channel_max(f);
    let stacked = tape.concat_channels(&[mean, max]);
    let k = tape.shape(kernel)[2];
    let logits = tape.conv2d(stacked, kernel, Some(bias), 1, (k - 1) / 2);
    tape.sigmoid(logits)
}

/// Graph form of the full fusion block over already-inserted feature vars.
pub fn sammafb_graph(
    tape: &mut Tape,
    parts: &[Var],
    w0: Var,
    w1: Var,
    kernel: Var,
    bias: Var,
) -> Var {
    let f = tape.concat_channels(parts);
    let gate_c = channel_attention_graph(tape, f, w0, w1);
    let f_prime = tape.scale_channels(f, gate_c);
    let gate_s = spatial_attention_graph(tape, f_prime, kernel, bias);
    tape.scale_spatial(f_prime, gate_s)
}

fn validate_channel_params(f: &FeatureMap, p: &ChannelAttentionParams) -> Result<()> {
    if p.channels() != f.channels() {
        return Err(DepthfillError::dimension(
            "channel attention input",
            format!("{} channels", p.channels()),
            format!("{} channels", f.channels()),
        ));
    }
    Ok(())
}

/// Per-channel attention weights, each strictly inside (0, 1).
pub fn channel_attention(f: &FeatureMap, p: &ChannelAttentionParams) -> Result<Array1<f64>> {
    validate_channel_params(f, p)?;
    let mut tape = Tape::new();
    let fv = tape.constant(f.to_dyn());
    let w0 = tape.constant(p.w0.clone().into_dyn());
    let w1 = tape.constant(p.w1.clone().into_dyn());
    let out = channel_attention_graph(&mut tape, fv, w0, w1);
    let v = tape.value(out);
    Ok(Array1::from_iter(v.iter().copied()))
}

/// Single-channel spatial attention map with entries in (0, 1).
pub fn spatial_attention(f: &FeatureMap, p: &SpatialAttentionParams) -> Result<Array3<f64>> {
    let mut tape = Tape::new();
    let fv = tape.constant(f.to_dyn());
    let kv = tape.constant(p.kernel.clone());
    let bv = tape.constant(ArrayD::from_elem(IxDyn(&[1]), p.bias));
    let out = spatial_attention_graph(&mut tape, fv, kv, bv);
    let s = tape.shape(out).to_vec();
    let v = tape.value(out).clone();
    Ok(v.into_dimensionality::<ndarray::Ix3>()
        .unwrap_or_else(|_| panic!("unexpected gate shape {s:?}")))
}

/// Fuse two or three same-shaped modality feature maps into refined features
/// of `(n·C, H, W)`.
pub fn sammafb_fuse(
    modality_features: &[FeatureMap],
    cap: &ChannelAttentionParams,
    sap: &SpatialAttentionParams,
) -> Result<FeatureMap> {
    if modality_features.len() < 2 || modality_features.len() > 3 {
        return Err(DepthfillError::Validation(format!(
            "fusion expects 2 or 3 modalities, got {}",
            modality_features.len()
        )));
    }
    let dim0 = modality_features[0].0.dim();
    for fm in modality_features.iter().skip(1) {
        if fm.0.dim() != dim0 {
            return Err(DepthfillError::dimension(
                "fusion inputs",
                format!("{dim0:?}"),
                format!("{:?}", fm.0.dim()),
            ));
        }
    }
    let total_c = dim0.0 * modality_features.len();
    if cap.channels() != total_c {
        return Err(DepthfillError::dimension(
            "fusion channel attention",
            format!("{total_c} channels"),
            format!("{} channels", cap.channels()),
        ));
    }
    let mut tape = Tape::new();
    let parts: Vec<Var> = modality_features
        .iter()
        .map(|fm| tape.constant(fm.to_dyn()))
        .collect();
    let w0 = tape.constant(cap.w0.clone().into_dyn());
    let w1 = tape.constant(cap.w1.clone().into_dyn());
    let kv = tape.constant(sap.kernel.clone());
    let bv = tape.constant(ArrayD::from_elem(IxDyn(&[1]), sap.bias));
    let out = sammafb_graph(&mut tape, &parts, w0, w1, kv, bv);
    let v = tape.value(out).clone();
    FeatureMap::new(v.into_dimensionality::<ndarray::Ix3>().expect("3-d output"))
}

/// Trainable fusion block bound to a parameter store.
pub struct FusionBlock {
    w0: ParamId,
    w1: ParamId,
    kernel: ParamId,
    bias: ParamId,
}

impl FusionBlock {
    pub fn new(
        store: &mut ParamStore,
        rng: &mut impl Rng,
        name: &str,
        total_channels: usize,
        kernel_size: usize,
    ) -> Self {
        let cap = ChannelAttentionParams::init(total_channels, rng);
        let sap = SpatialAttentionParams::init(kernel_size, rng);
        FusionBlock {
            w0: store.register(format!("{name}.channel.w0"), cap.w0.into_dyn()),
            w1: store.register(format!("{name}.channel.w1"), cap.w1.into_dyn()),
            kernel: store.register(format!("{name}.spatial.kernel"), sap.kernel),
            bias: store.register(
                format!("{name}.spatial.bias"),
                ArrayD::from_elem(IxDyn(&[1]), 0.0),
            ),
        }
    }

    pub fn forward(&self, cx: &mut Ctx, parts: &[Var]) -> Var {
        let w0 = cx.param(self.w0);
        let w1 = cx.param(self.w1);
        let kernel = cx.param(self.kernel);
        let bias = cx.param(self.bias);
        sammafb_graph(&mut cx.tape, parts, w0, w1, kernel, bias)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;
    use ndarray::Array3;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn seeded_feature(c: usize, h: usize, w: usize, seed: u64) -> FeatureMap {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        FeatureMap::new(Array3::from_shape_fn((c, h, w), |_| {
            rng.random::<f64>() * 2.0 - 1.0
        }))
        .unwrap()
    }

    #[test]
    fn zero_input_gives_half_weights() {
        let f = FeatureMap::new(Array3::zeros((6, 4, 4))).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let cap = ChannelAttentionParams::init(6, &mut rng);
        let a = channel_attention(&f, &cap).unwrap();
        for v in a.iter() {
            assert_abs_diff_eq!(*v, 0.5, epsilon = 1e-12);
        }
        let sap = SpatialAttentionParams::init(7, &mut rng);
        let s = spatial_attention(&f, &sap).unwrap();
        for v in s.iter() {
            assert_abs_diff_eq!(*v, 0.5, epsilon = 1e-12);
        }
    }

    #[test]
    fn constant_planes_make_avg_equal_max() {
        // per-channel constant input: avgpool == maxpool, so the logit is
        // exactly twice the shared MLP output.
        let mut data = Array3::zeros((4, 3, 3));
        for c in 0..4 {
            data.index_axis_mut(ndarray::Axis(0), c)
                .fill(0.3 * (c as f64 + 1.0));
        }
        let f = FeatureMap::new(data).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let cap = ChannelAttentionParams::init(4, &mut rng);
        let a = channel_attention(&f, &cap).unwrap();

        // direct evaluation of sigmoid(2 * MLP(c-vector))
        let x: Vec<f64> = (0..4).map(|c| 0.3 * (c as f64 + 1.0)).collect();
        let hidden = 4 / cap.reduction();
        let mut hvec = vec![0.0; hidden];
        for i in 0..hidden {
            let mut acc = 0.0;
            for (j, xv) in x.iter().enumerate() {
                acc += cap.w0()[[i, j]] * xv;
            }
            hvec[i] = acc.max(0.0);
        }
        for c in 0..4 {
            let mut acc = 0.0;
            for (i, hv) in hvec.iter().enumerate() {
                acc += cap.w1()[[c, i]] * hv;
            }
            let expect = 1.0 / (1.0 + (-2.0 * acc).exp());
            assert_abs_diff_eq!(a[c], expect, epsilon = 1e-12);
        }
    }

    #[test]
    fn spatially_constant_input_gives_constant_interior_gate() {
        let mut data = Array3::zeros((3, 9, 9));
        for c in 0..3 {
            data.index_axis_mut(ndarray::Axis(0), c).fill(c as f64 - 1.0);
        }
        let f = FeatureMap::new(data).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let sap = SpatialAttentionParams::init(3, &mut rng);
        let s = spatial_attention(&f, &sap).unwrap();
        let center = s[[0, 4, 4]];
        // interior pixels see the full kernel support
        for y in 1..8 {
            for x in 1..8 {
                assert_abs_diff_eq!(s[[0, y, x]], center, epsilon = 1e-12);
            }
        }
    }

    #[test]
    fn gates_are_strictly_inside_unit_interval() {
        let f = seeded_feature(8, 5, 5, 21);
        let mut rng = ChaCha8Rng::seed_from_u64(22);
        let cap = ChannelAttentionParams::init(8, &mut rng);
        let sap = SpatialAttentionParams::init(7, &mut rng);
        for v in channel_attention(&f, &cap).unwrap().iter() {
            assert!(*v > 0.0 && *v < 1.0);
        }
        for v in spatial_attention(&f, &sap).unwrap().iter() {
            assert!(*v > 0.0 && *v < 1.0);
        }
    }

    #[test]
    fn fuse_zero_inputs_gives_zero_output() {
        let z = FeatureMap::new(Array3::zeros((4, 4, 4))).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let cap = ChannelAttentionParams::init(8, &mut rng);
        let sap = SpatialAttentionParams::init(7, &mut rng);
        let out = sammafb_fuse(&[z.clone(), z], &cap, &sap).unwrap();
        assert!(out.data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn saturated_attention_approaches_identity_concat() {
        // strictly positive features + large positive weights push both
        // sigmoids to 1, so the block reduces to plain concatenation.
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let a = FeatureMap::new(Array3::from_shape_fn((3, 4, 4), |_| {
            rng.random::<f64>() * 0.9 + 0.1
        }))
        .unwrap();
        let b = FeatureMap::new(Array3::from_shape_fn((3, 4, 4), |_| {
            rng.random::<f64>() * 0.9 + 0.1
        }))
        .unwrap();
        let hidden = 3;
        let w0 = Array2::from_elem((hidden, 6), 60.0);
        let w1 = Array2::from_elem((6, hidden), 60.0);
        let cap = ChannelAttentionParams::new(w0, w1).unwrap();
        let kernel = ArrayD::from_elem(IxDyn(&[1, 2, 3, 3]), 60.0);
        let sap = SpatialAttentionParams::new(kernel, 60.0).unwrap();
        let out = sammafb_fuse(&[a.clone(), b.clone()], &cap, &sap).unwrap();
        for c in 0..6 {
            let src = if c < 3 { a.data() } else { b.data() };
            for y in 0..4 {
                for x in 0..4 {
                    let expect = src[[c % 3, y, x]];
                    let got = out.data()[[c, y, x]];
                    assert!(
                        ((got - expect) / expect).abs() < 1e-3,
                        "c={c} y={y} x={x}: {got} vs {expect}"
                    );
                }
            }
        }
    }

    #[test]
    fn fused_output_never_exceeds_input_magnitude() {
        let a = seeded_feature(4, 6, 6, 31);
        let b = seeded_feature(4, 6, 6, 32);
        let c = seeded_feature(4, 6, 6, 33);
        let mut rng = ChaCha8Rng::seed_from_u64(34);
        let cap = ChannelAttentionParams::init(12, &mut rng);
        let sap = SpatialAttentionParams::init(7, &mut rng);
        let out = sammafb_fuse(&[a.clone(), b.clone(), c.clone()], &cap, &sap).unwrap();
        let inputs = [a, b, c];
        for (ci, input) in inputs.iter().enumerate() {
            for ch in 0..4 {
                for y in 0..6 {
                    for x in 0..6 {
                        let f = input.data()[[ch, y, x]];
                        let o = out.data()[[ci * 4 + ch, y, x]];
                        assert!(o.abs() <= f.abs() + 1e-15);
                    }
                }
            }
        }
    }

    #[test]
    fn channel_attention_invariant_to_spatial_permutation() {
        let f = seeded_feature(5, 4, 4, 40);
        let mut rng = ChaCha8Rng::seed_from_u64(41);
        let cap = ChannelAttentionParams::init(5, &mut rng);
        let base = channel_attention(&f, &cap).unwrap();

        // fixed permutation of the 16 spatial sites applied to all channels
        let mut perm: Vec<usize> = (0..16).collect();
        let mut prng = ChaCha8Rng::seed_from_u64(42);
        for i in (1..16).rev() {
            let j = prng.random_range(0..=i);
            perm.swap(i, j);
        }
        let mut permuted = Array3::zeros((5, 4, 4));
        for c in 0..5 {
            for (dst, &src) in perm.iter().enumerate() {
                permuted[[c, dst / 4, dst % 4]] = f.data()[[c, src / 4, src % 4]];
            }
        }
        let p = channel_attention(&FeatureMap::new(permuted).unwrap(), &cap).unwrap();
        for c in 0..5 {
            assert_abs_diff_eq!(base[c], p[c], epsilon = 1e-14);
        }
    }

    #[test]
    fn rejects_bad_inputs() {
        let f = seeded_feature(5, 4, 4, 50);
        let mut rng = ChaCha8Rng::seed_from_u64(51);
        let cap = ChannelAttentionParams::init(6, &mut rng);
        assert!(matches!(
            channel_attention(&f, &cap),
            Err(DepthfillError::Dimension { .. })
        ));

        let nonfinite = Array3::from_elem((2, 2, 2), f64::NAN);
        assert!(FeatureMap::new(nonfinite).is_err());

        let sap = SpatialAttentionParams::init(7, &mut rng);
        let one = seeded_feature(2, 4, 4, 52);
        assert!(matches!(
            sammafb_fuse(&[one], &ChannelAttentionParams::init(2, &mut rng), &sap),
            Err(DepthfillError::Validation(_))
        ));
    }

    #[test]
    fn default_reduction_divides() {
        for c in 1..200 {
            let r = default_reduction(c);
            assert_eq!(c % r, 0, "c={c} r={r}");
            assert!(r >= 1);
            if c >= 16 && c % 16 == 0 {
                assert_eq!(r, 16);
            }
        }
        assert_eq!(default_reduction(1), 1);
        assert_eq!(default_reduction(12), 6);
    }

    #[test]
    fn attention_gradients_match_finite_differences() {
        // loss = sum(fused) over a 2-modality block on 3x4x4 inputs
        use crate::autograd::{finite_difference, relative_error};
        let mut rng = ChaCha8Rng::seed_from_u64(60);
        let a = Array3::from_shape_fn((3, 4, 4), |_| rng.random::<f64>() * 2.0 - 1.0).into_dyn();
        let b = Array3::from_shape_fn((3, 4, 4), |_| rng.random::<f64>() * 2.0 - 1.0).into_dyn();
        let cap = ChannelAttentionParams::init(6, &mut rng);
        let sap = SpatialAttentionParams::init(3, &mut rng);
        let inputs: Vec<ArrayD<f64>> = vec![
            a,
            b,
            cap.w0().clone().into_dyn(),
            cap.w1().clone().into_dyn(),
            sap.kernel().clone(),
            ArrayD::from_elem(IxDyn(&[1]), sap.bias()),
        ];
        let build = |t: &mut Tape, v: &[Var]| {
            let out = sammafb_graph(t, &[v[0], v[1]], v[2], v[3], v[4], v[5]);
            t.sum(out)
        };
        let mut tape = Tape::new();
        let vars: Vec<Var> = inputs.iter().map(|x| tape.leaf(x.clone())).collect();
        let loss = build(&mut tape, &vars);
        let grads = tape.backward(loss);
        for (i, input) in inputs.iter().enumerate() {
            let analytic = grads.wrt(vars[i]).unwrap();
            let mut probe = input.clone();
            // sample a handful of coordinates per tensor
            let total = input.len();
            for k in (0..total).step_by((total / 7).max(1)) {
                let idx = unravel(input.shape(), k);
                let fd = finite_difference(
                    |x| {
                        let mut t = Tape::new();
                        let vs: Vec<Var> = inputs
                            .iter()
                            .enumerate()
                            .map(|(j, a)| if j == i { t.leaf(x.clone()) } else { t.leaf(a.clone()) })
                            .collect();
                        let l = build(&mut t, &vs);
                        t.scalar(l)
                    },
                    &mut probe,
                    &idx,
                    1e-4,
                );
                let an = analytic[IxDyn(&idx)];
                assert!(
                    relative_error(an, fd, 1e-6) < 1e-3,
                    "tensor {i} idx {idx:?}: {an} vs {fd}"
                );
            }
        }
    }

    fn unravel(shape: &[usize], mut flat: usize) -> Vec<usize> {
        let mut idx = vec![0; shape.len()];
        for d in (0..shape.len()).rev() {
            idx[d] = flat % shape[d];
            flat /= shape[d];
        }
        idx
    }
}
