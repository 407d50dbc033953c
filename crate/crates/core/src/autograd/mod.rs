//! Reverse-mode automatic differentiation over `ndarray` tensors.
//!
//! A [`Tape`] records every operation as a node; [`Tape::backward`] walks the
//! record in reverse and accumulates gradients. Values are `f64` throughout so
//! finite-difference verification is not drowned by rounding noise.
//!
//! Feature maps are `(C, H, W)`, pooled vectors `(C,)`, depth/confidence maps
//! `(1, H, W)`, losses 0-dimensional scalars.

mod conv;
mod params;

pub use params::{Ctx, ParamId, ParamStore};

use ndarray::{ArrayD, Axis, IxDyn};

/// Handle to a node on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Var(pub(crate) usize);

pub(crate) enum Op {
    Leaf,
    Relu {
        x: Var,
    },
    Sigmoid {
        x: Var,
    },
    Add {
        a: Var,
        b: Var,
    },
    Scale {
        x: Var,
        c: f64,
    },
    Sum {
        x: Var,
    },
    /// Weighted sum of scalar nodes.
    WeightedSum {
        terms: Vec<(Var, f64)>,
    },
    /// y = w.dot(x) with w `(m, n)` and x `(n,)`.
    Linear {
        x: Var,
        w: Var,
    },
    Conv2d {
        x: Var,
        w: Var,
        b: Option<Var>,
        stride: usize,
        pad: usize,
    },
    ConvTranspose2d {
        x: Var,
        w: Var,
        b: Option<Var>,
        stride: usize,
        pad: usize,
    },
    /// Per-channel normalization over the spatial plane.
    InstanceNorm {
        x: Var,
        gamma: Var,
        beta: Var,
        mean: Vec<f64>,
        inv_std: Vec<f64>,
    },
    GlobalAvgPool {
        x: Var,
    },
    GlobalMaxPool {
        x: Var,
        argmax: Vec<usize>,
    },
    ChannelMean {
        x: Var,
    },
    ChannelMax {
        x: Var,
        argmax: Vec<usize>,
    },
    /// Broadcast multiply `(C,H,W) * (C,)`.
    ScaleChannels {
        x: Var,
        gate: Var,
    },
    /// Broadcast multiply `(C,H,W) * (1,H,W)`.
    ScaleSpatial {
        x: Var,
        gate: Var,
    },
    ConcatChannels {
        parts: Vec<Var>,
    },
    /// Per-pixel softmax over confidence logits, applied to depths.
    SoftmaxFuse {
        depths: Vec<Var>,
        confs: Vec<Var>,
        weights: ArrayD<f64>,
    },
    /// Mean squared error over valid ground-truth pixels.
    MaskedL2 {
        pred: Var,
        grad_coeff: ArrayD<f64>,
    },
    /// Per-pixel L1 normalization of neighbor affinities, sign preserved.
    AffinityNorm {
        raw: Var,
        inv_l1: ArrayD<f64>,
    },
    /// One dilated propagation step; out-of-bounds neighbor mass folds into self.
    CspnStep {
        h: Var,
        kappa: Var,
        kernel: usize,
        dilation: usize,
    },
    /// Overwrite pixels that carry a sparse measurement.
    Reinject {
        h: Var,
        mask: Vec<bool>,
    },
}

pub(crate) struct Node {
    pub value: ArrayD<f64>,
    op: Op,
    requires_grad: bool,
}

/// Gradients produced by [`Tape::backward`], indexed by [`Var`].
pub struct Gradients {
    grads: Vec<Option<ArrayD<f64>>>,
}

impl Gradients {
    /// Gradient of the loss w.r.t. `v`; zeros if the node never received one.
    pub fn wrt(&self, v: Var) -> Option<&ArrayD<f64>> {
        self.grads.get(v.0).and_then(|g| g.as_ref())
    }
}

#[derive(Default)]
pub struct Tape {
    nodes: Vec<Node>,
}

impl Tape {
    pub fn new() -> Self {
        Tape { nodes: Vec::new() }
    }

    fn push(&mut self, value: ArrayD<f64>, op: Op, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn rg(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    pub fn value(&self, v: Var) -> &ArrayD<f64> {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    pub fn scalar(&self, v: Var) -> f64 {
        debug_assert!(self.nodes[v.0].value.len() == 1);
        self.nodes[v.0].value.iter().next().copied().unwrap()
    }

    /// Insert a value that does not take gradients.
    pub fn constant(&mut self, value: ArrayD<f64>) -> Var {
        self.push(value, Op::Leaf, false)
    }

    /// Insert a value that accumulates gradients (parameters, probed inputs).
    pub fn leaf(&mut self, value: ArrayD<f64>) -> Var {
        self.push(value, Op::Leaf, true)
    }

    pub fn relu(&mut self, x: Var) -> Var {
        let value = self.value(x).mapv(|v| v.max(0.0));
        let rg = self.rg(x);
        self.push(value, Op::Relu { x }, rg)
    }

    pub fn sigmoid(&mut self, x: Var) -> Var {
        let value = self.value(x).mapv(|v| 1.0 / (1.0 + (-v).exp()));
        let rg = self.rg(x);
        self.push(value, Op::Sigmoid { x }, rg)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Var {
        assert_eq!(self.shape(a), self.shape(b), "add: shape mismatch");
        let value = &self.nodes[a.0].value + &self.nodes[b.0].value;
        let rg = self.rg(a) || self.rg(b);
        self.push(value, Op::Add { a, b }, rg)
    }

    pub fn scale(&mut self, x: Var, c: f64) -> Var {
        let value = self.value(x).mapv(|v| v * c);
        let rg = self.rg(x);
        self.push(value, Op::Scale { x, c }, rg)
    }

    pub fn sum(&mut self, x: Var) -> Var {
        let s = self.value(x).sum();
        let rg = self.rg(x);
        self.push(scalar_array(s), Op::Sum { x }, rg)
    }

    /// Weighted sum of scalar nodes; the workhorse for composite losses.
    pub fn weighted_sum(&mut self, terms: &[(Var, f64)]) -> Var {
        let mut acc = 0.0;
        let mut rg = false;
        for &(v, c) in terms {
            assert!(self.value(v).len() == 1, "weighted_sum expects scalars");
            acc += self.scalar(v) * c;
            rg |= self.rg(v);
        }
        self.push(
            scalar_array(acc),
            Op::WeightedSum {
                terms: terms.to_vec(),
            },
            rg,
        )
    }

    pub fn linear(&mut self, w: Var, x: Var) -> Var {
        let ws = self.shape(w);
        let xs = self.shape(x);
        assert!(ws.len() == 2 && xs.len() == 1 && ws[1] == xs[0], "linear: shape mismatch");
        let (m, n) = (ws[0], ws[1]);
        let wv = &self.nodes[w.0].value;
        let xv = &self.nodes[x.0].value;
        let mut out = ArrayD::zeros(IxDyn(&[m]));
        for i in 0..m {
            let mut acc = 0.0;
            for j in 0..n {
                acc += wv[[i, j]] * xv[[j]];
            }
            out[[i]] = acc;
        }
        let rg = self.rg(w) || self.rg(x);
        self.push(out, Op::Linear { x, w }, rg)
    }

    pub fn conv2d(&mut self, x: Var, w: Var, b: Option<Var>, stride: usize, pad: usize) -> Var {
        let value = conv::conv2d_forward(
            &self.nodes[x.0].value,
            &self.nodes[w.0].value,
            b.map(|b| &self.nodes[b.0].value),
            stride,
            pad,
        );
        let rg = self.rg(x) || self.rg(w) || b.map(|b| self.rg(b)).unwrap_or(false);
        self.push(value, Op::Conv2d { x, w, b, stride, pad }, rg)
    }

    /// Transposed convolution targeting an explicit output size so decoders
    /// mirror their encoder exactly.
    pub fn conv_transpose2d(
        &mut self,
        x: Var,
        w: Var,
        b: Option<Var>,
        stride: usize,
        pad: usize,
        out_hw: (usize, usize),
    ) -> Var {
        let value = conv::conv_transpose2d_forward(
            &self.nodes[x.0].value,
            &self.nodes[w.0].value,
            b.map(|b| &self.nodes[b.0].value),
            stride,
            pad,
            out_hw,
        );
        let rg = self.rg(x) || self.rg(w) || b.map(|b| self.rg(b)).unwrap_or(false);
        self.push(value, Op::ConvTranspose2d { x, w, b, stride, pad }, rg)
    }

    pub fn instance_norm(&mut self, x: Var, gamma: Var, beta: Var, eps: f64) -> Var {
        let xs = self.shape(x).to_vec();
        assert_eq!(xs.len(), 3, "instance_norm expects (C,H,W)");
        let (c, h, w) = (xs[0], xs[1], xs[2]);
        let n = (h * w) as f64;
        let xv = &self.nodes[x.0].value;
        let gv = &self.nodes[gamma.0].value;
        let bv = &self.nodes[beta.0].value;
        let mut mean = vec![0.0; c];
        let mut inv_std = vec![0.0; c];
        let mut out = ArrayD::zeros(IxDyn(&[c, h, w]));
        for ci in 0..c {
            let mut m = 0.0;
            for hi in 0..h {
                for wi in 0..w {
                    m += xv[[ci, hi, wi]];
                }
            }
            m /= n;
            let mut var = 0.0;
            for hi in 0..h {
                for wi in 0..w {
                    let d = xv[[ci, hi, wi]] - m;
                    var += d * d;
                }
            }
            var /= n;
            let is = 1.0 / (var + eps).sqrt();
            mean[ci] = m;
            inv_std[ci] = is;
            let (g, bb) = (gv[[ci]], bv[[ci]]);
            for hi in 0..h {
                for wi in 0..w {
                    out[[ci, hi, wi]] = g * (xv[[ci, hi, wi]] - m) * is + bb;
                }
            }
        }
        let rg = self.rg(x) || self.rg(gamma) || self.rg(beta);
        self.push(
            out,
            Op::InstanceNorm {
                x,
                gamma,
                beta,
                mean,
                inv_std,
            },
            rg,
        )
    }

    pub fn global_avg_pool(&mut self, x: Var) -> Var {
        let xs = self.shape(x).to_vec();
        assert_eq!(xs.len(), 3);
        let n = (xs[1] * xs[2]) as f64;
        let xv = &self.nodes[x.0].value;
        let mut out = ArrayD::zeros(IxDyn(&[xs[0]]));
        for ci in 0..xs[0] {
            out[[ci]] = xv.index_axis(Axis(0), ci).sum() / n;
        }
        let rg = self.rg(x);
        self.push(out, Op::GlobalAvgPool { x }, rg)
    }

    pub fn global_max_pool(&mut self, x: Var) -> Var {
        let xs = self.shape(x).to_vec();
        assert_eq!(xs.len(), 3);
        let xv = &self.nodes[x.0].value;
        let plane = xs[1] * xs[2];
        let mut out = ArrayD::zeros(IxDyn(&[xs[0]]));
        let mut argmax = vec![0usize; xs[0]];
        let flat = xv.as_slice().expect("contiguous");
        for ci in 0..xs[0] {
            let base = ci * plane;
            let (mut best, mut best_i) = (f64::NEG_INFINITY, 0);
            for i in 0..plane {
                let v = flat[base + i];
                if v > best {
                    best = v;
                    best_i = i;
                }
            }
            out[[ci]] = best;
            argmax[ci] = best_i;
        }
        let rg = self.rg(x);
        self.push(out, Op::GlobalMaxPool { x, argmax }, rg)
    }

    pub fn channel_mean(&mut self, x: Var) -> Var {
        let xs = self.shape(x).to_vec();
        assert_eq!(xs.len(), 3);
        let (c, h, w) = (xs[0], xs[1], xs[2]);
        let xv = &self.nodes[x.0].value;
        let mut out = ArrayD::zeros(IxDyn(&[1, h, w]));
        for ci in 0..c {
            for hi in 0..h {
                for wi in 0..w {
                    out[[0, hi, wi]] += xv[[ci, hi, wi]];
                }
            }
        }
        out.mapv_inplace(|v| v / c as f64);
        let rg = self.rg(x);
        self.push(out, Op::ChannelMean { x }, rg)
    }

    pub fn channel_max(&mut self, x: Var) -> Var {
        let xs = self.shape(x).to_vec();
        assert_eq!(xs.len(), 3);
        let (c, h, w) = (xs[0], xs[1], xs[2]);
        let xv = &self.nodes[x.0].value;
        let mut out = ArrayD::zeros(IxDyn(&[1, h, w]));
        let mut argmax = vec![0usize; h * w];
        for hi in 0..h {
            for wi in 0..w {
                let (mut best, mut best_c) = (f64::NEG_INFINITY, 0);
                for ci in 0..c {
                    let v = xv[[ci, hi, wi]];
                    if v > best {
                        best = v;
                        best_c = ci;
                    }
                }
                out[[0, hi, wi]] = best;
                argmax[hi * w + wi] = best_c;
            }
        }
        let rg = self.rg(x);
        self.push(out, Op::ChannelMax { x, argmax }, rg)
    }

    pub fn scale_channels(&mut self, x: Var, gate: Var) -> Var {
        let xs = self.shape(x).to_vec();
        assert_eq!(xs.len(), 3);
        assert_eq!(self.shape(gate), &[xs[0]], "scale_channels: gate length");
        let xv = &self.nodes[x.0].value;
        let gv = &self.nodes[gate.0].value;
        let mut out = xv.clone();
        for ci in 0..xs[0] {
            let g = gv[[ci]];
            out.index_axis_mut(Axis(0), ci).mapv_inplace(|v| v * g);
        }
        let rg = self.rg(x) || self.rg(gate);
        self.push(out, Op::ScaleChannels { x, gate }, rg)
    }

    pub fn scale_spatial(&mut self, x: Var, gate: Var) -> Var {
        let xs = self.shape(x).to_vec();
        assert_eq!(xs.len(), 3);
        assert_eq!(self.shape(gate), &[1, xs[1], xs[2]], "scale_spatial: gate shape");
        let xv = &self.nodes[x.0].value;
        let gv = &self.nodes[gate.0].value;
        let mut out = xv.clone();
        for ci in 0..xs[0] {
            for hi in 0..xs[1] {
                for wi in 0..xs[2] {
                    out[[ci, hi, wi]] *= gv[[0, hi, wi]];
                }
            }
        }
        let rg = self.rg(x) || self.rg(gate);
        self.push(out, Op::ScaleSpatial { x, gate }, rg)
    }

    pub fn concat_channels(&mut self, parts: &[Var]) -> Var {
        assert!(!parts.is_empty());
        let first = self.shape(parts[0]).to_vec();
        assert_eq!(first.len(), 3);
        let (h, w) = (first[1], first[2]);
        let mut c_total = 0;
        for &p in parts {
            let s = self.shape(p);
            assert_eq!(&s[1..], &[h, w], "concat_channels: spatial mismatch");
            c_total += s[0];
        }
        let mut out = ArrayD::zeros(IxDyn(&[c_total, h, w]));
        let mut offset = 0;
        for &p in parts {
            let pv = &self.nodes[p.0].value;
            let pc = pv.shape()[0];
            for ci in 0..pc {
                out.index_axis_mut(Axis(0), offset + ci)
                    .assign(&pv.index_axis(Axis(0), ci));
            }
            offset += pc;
        }
        let rg = parts.iter().any(|&p| self.rg(p));
        self.push(
            out,
            Op::ConcatChannels {
                parts: parts.to_vec(),
            },
            rg,
        )
    }

    /// Per-pixel softmax weighting of branch depths by confidence logits,
    /// stabilized by max subtraction.
    pub fn softmax_fuse(&mut self, depths: &[Var], confs: &[Var]) -> Var {
        assert_eq!(depths.len(), confs.len());
        let n = depths.len();
        assert!(n >= 2);
        let s = self.shape(depths[0]).to_vec();
        assert_eq!(s.len(), 3);
        assert_eq!(s[0], 1);
        for &v in depths.iter().chain(confs.iter()) {
            assert_eq!(self.shape(v), &s[..], "softmax_fuse: shape mismatch");
        }
        let (h, w) = (s[1], s[2]);
        let mut weights = ArrayD::zeros(IxDyn(&[n, h, w]));
        let mut out = ArrayD::zeros(IxDyn(&[1, h, w]));
        for hi in 0..h {
            for wi in 0..w {
                let mut m = f64::NEG_INFINITY;
                for &cv in confs {
                    m = m.max(self.nodes[cv.0].value[[0, hi, wi]]);
                }
                let mut z = 0.0;
                for (bi, &cv) in confs.iter().enumerate() {
                    let e = (self.nodes[cv.0].value[[0, hi, wi]] - m).exp();
                    weights[[bi, hi, wi]] = e;
                    z += e;
                }
                let mut acc = 0.0;
                for (bi, &dv) in depths.iter().enumerate() {
                    let wgt = weights[[bi, hi, wi]] / z;
                    weights[[bi, hi, wi]] = wgt;
                    acc += wgt * self.nodes[dv.0].value[[0, hi, wi]];
                }
                out[[0, hi, wi]] = acc;
            }
        }
        let rg = depths.iter().chain(confs.iter()).any(|&v| self.rg(v));
        self.push(
            out,
            Op::SoftmaxFuse {
                depths: depths.to_vec(),
                confs: confs.to_vec(),
                weights,
            },
            rg,
        )
    }

    /// Mean of squared error over pixels where `mask` is true.
    ///
    /// Panics if the mask has no valid pixel; public wrappers report
    /// [`crate::error::DepthfillError::EmptyMask`] before reaching here.
    pub fn masked_l2(&mut self, pred: Var, gt: &ArrayD<f64>, mask: &[bool]) -> Var {
        let s = self.shape(pred).to_vec();
        assert_eq!(gt.shape(), &s[..], "masked_l2: gt shape");
        assert_eq!(mask.len(), gt.len(), "masked_l2: mask length");
        let n_valid = mask.iter().filter(|&&m| m).count();
        assert!(n_valid > 0, "masked_l2 requires at least one valid pixel");
        let pv = &self.nodes[pred.0].value;
        let pf = pv.as_slice().expect("contiguous");
        let gf = gt.as_slice().expect("contiguous");
        let mut acc = 0.0;
        let mut coeff = ArrayD::zeros(IxDyn(&s));
        {
            let cf = coeff.as_slice_mut().unwrap();
            for i in 0..pf.len() {
                if mask[i] {
                    let d = gf[i] - pf[i];
                    acc += d * d;
                    cf[i] = 2.0 * (pf[i] - gf[i]) / n_valid as f64;
                }
            }
        }
        acc /= n_valid as f64;
        let rg = self.rg(pred);
        self.push(
            scalar_array(acc),
            Op::MaskedL2 {
                pred,
                grad_coeff: coeff,
            },
            rg,
        )
    }

    /// L1-normalize raw neighbor affinities per pixel, preserving sign.
    /// A pixel whose affinities are all zero maps to all zeros (identity
    /// propagation once the self-weight is formed).
    pub fn affinity_normalize(&mut self, raw: Var) -> Var {
        let s = self.shape(raw).to_vec();
        assert_eq!(s.len(), 3, "affinity_normalize expects (k*k-1, H, W)");
        let (a, h, w) = (s[0], s[1], s[2]);
        let rv = &self.nodes[raw.0].value;
        let mut out = ArrayD::zeros(IxDyn(&s));
        let mut inv_l1 = ArrayD::zeros(IxDyn(&[h, w]));
        for hi in 0..h {
            for wi in 0..w {
                let mut l1 = 0.0;
                for ai in 0..a {
                    l1 += rv[[ai, hi, wi]].abs();
                }
                if l1 > 0.0 {
                    let inv = 1.0 / l1;
                    inv_l1[[hi, wi]] = inv;
                    for ai in 0..a {
                        out[[ai, hi, wi]] = rv[[ai, hi, wi]] * inv;
                    }
                }
            }
        }
        let rg = self.rg(raw);
        self.push(out, Op::AffinityNorm { raw, inv_l1 }, rg)
    }

    /// One propagation step over the dilated k×k stencil. `kappa` must be the
    /// output of [`Tape::affinity_normalize`]; the self-weight is
    /// `1 - Σ in-bounds neighbors`, so per-pixel weight mass is exactly one.
    pub fn cspn_step(&mut self, h: Var, kappa: Var, kernel: usize, dilation: usize) -> Var {
        assert!(kernel % 2 == 1 && kernel >= 3, "kernel must be odd and >= 3");
        assert!(dilation >= 1);
        let hs = self.shape(h).to_vec();
        assert_eq!(hs.len(), 3);
        assert_eq!(hs[0], 1, "cspn_step propagates a single-channel map");
        let ks = self.shape(kappa).to_vec();
        assert_eq!(
            ks,
            vec![kernel * kernel - 1, hs[1], hs[2]],
            "cspn_step: affinity shape mismatch"
        );
        let (hh, ww) = (hs[1], hs[2]);
        let hv = &self.nodes[h.0].value;
        let kv = &self.nodes[kappa.0].value;
        let offsets = stencil_offsets(kernel, dilation);
        let mut out = ArrayD::zeros(IxDyn(&hs));
        for y in 0..hh {
            for x in 0..ww {
                let mut neigh = 0.0;
                let mut in_bounds_sum = 0.0;
                for (ai, &(dy, dx)) in offsets.iter().enumerate() {
                    let ny = y as isize + dy;
                    let nx = x as isize + dx;
                    if ny >= 0 && ny < hh as isize && nx >= 0 && nx < ww as isize {
                        let k = kv[[ai, y, x]];
                        in_bounds_sum += k;
                        neigh += k * hv[[0, ny as usize, nx as usize]];
                    }
                }
                out[[0, y, x]] = (1.0 - in_bounds_sum) * hv[[0, y, x]] + neigh;
            }
        }
        let rg = self.rg(h) || self.rg(kappa);
        self.push(
            out,
            Op::CspnStep {
                h,
                kappa,
                kernel,
                dilation,
            },
            rg,
        )
    }

    /// Reset pixels with a valid sparse measurement back to the measurement.
    pub fn reinject(&mut self, h: Var, sparse: &ArrayD<f64>) -> Var {
        let s = self.shape(h).to_vec();
        assert_eq!(sparse.shape(), &s[..], "reinject: shape mismatch");
        let sv = sparse.as_slice().expect("contiguous");
        let mask: Vec<bool> = sv.iter().map(|&v| v > 0.0).collect();
        let mut value = self.nodes[h.0].value.clone();
        {
            let vf = value.as_slice_mut().unwrap();
            for i in 0..vf.len() {
                if mask[i] {
                    vf[i] = sv[i];
                }
            }
        }
        let rg = self.rg(h);
        self.push(value, Op::Reinject { h, mask }, rg)
    }

    /// Reverse sweep from `loss`, which must be scalar.
    pub fn backward(&self, loss: Var) -> Gradients {
        assert!(
            self.nodes[loss.0].value.len() == 1,
            "backward starts from a scalar loss"
        );
        let mut grads: Vec<Option<ArrayD<f64>>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[loss.0] = Some(ArrayD::from_elem(
            IxDyn(self.nodes[loss.0].value.shape()),
            1.0,
        ));
        for i in (0..=loss.0).rev() {
            if !self.nodes[i].requires_grad {
                grads[i] = None;
                continue;
            }
            let g = match grads[i].take() {
                Some(g) => g,
                None => continue,
            };
            match &self.nodes[i].op {
                Op::Leaf => {
                    grads[i] = Some(g);
                }
                Op::Relu { x } => {
                    let mut dx = g;
                    let yv = &self.nodes[i].value;
                    azip_mul_mask(&mut dx, yv);
                    accumulate(self, &mut grads, *x, dx);
                }
                Op::Sigmoid { x } => {
                    let yv = &self.nodes[i].value;
                    let mut dx = g;
                    {
                        let df = dx.as_slice_mut().unwrap();
                        let yf = yv.as_slice().unwrap();
                        for k in 0..df.len() {
                            df[k] *= yf[k] * (1.0 - yf[k]);
                        }
                    }
                    accumulate(self, &mut grads, *x, dx);
                }
                Op::Add { a, b } => {
                    accumulate(self, &mut grads, *a, g.clone());
                    accumulate(self, &mut grads, *b, g);
                }
                Op::Scale { x, c } => {
                    accumulate(self, &mut grads, *x, g.mapv(|v| v * c));
                }
                Op::Sum { x } => {
                    let gs = g.iter().next().copied().unwrap();
                    let dx = ArrayD::from_elem(IxDyn(self.shape(*x)), gs);
                    accumulate(self, &mut grads, *x, dx);
                }
                Op::WeightedSum { terms } => {
                    let gs = g.iter().next().copied().unwrap();
                    for &(v, c) in terms {
                        accumulate(self, &mut grads, v, scalar_array(gs * c));
                    }
                }
                Op::Linear { x, w } => {
                    let wv = &self.nodes[w.0].value;
                    let xv = &self.nodes[x.0].value;
                    let (m, n) = (wv.shape()[0], wv.shape()[1]);
                    if self.rg(*x) {
                        let mut dx = ArrayD::zeros(IxDyn(&[n]));
                        for j in 0..n {
                            let mut acc = 0.0;
                            for ii in 0..m {
                                acc += wv[[ii, j]] * g[[ii]];
                            }
                            dx[[j]] = acc;
                        }
                        accumulate(self, &mut grads, *x, dx);
                    }
                    if self.rg(*w) {
                        let mut dw = ArrayD::zeros(IxDyn(&[m, n]));
                        for ii in 0..m {
                            for j in 0..n {
                                dw[[ii, j]] = g[[ii]] * xv[[j]];
                            }
                        }
                        accumulate(self, &mut grads, *w, dw);
                    }
                }
                Op::Conv2d { x, w, b, stride, pad } => {
                    let (dx, dw, db) = conv::conv2d_backward(
                        &self.nodes[x.0].value,
                        &self.nodes[w.0].value,
                        &g,
                        *stride,
                        *pad,
                        self.rg(*x),
                        self.rg(*w),
                        b.map(|bv| self.rg(bv)).unwrap_or(false),
                    );
                    if let Some(dx) = dx {
                        accumulate(self, &mut grads, *x, dx);
                    }
                    if let Some(dw) = dw {
                        accumulate(self, &mut grads, *w, dw);
                    }
                    if let (Some(bvar), Some(db)) = (b, db) {
                        accumulate(self, &mut grads, *bvar, db);
                    }
                }
                Op::ConvTranspose2d { x, w, b, stride, pad } => {
                    let (dx, dw, db) = conv::conv_transpose2d_backward(
                        &self.nodes[x.0].value,
                        &self.nodes[w.0].value,
                        &g,
                        *stride,
                        *pad,
                        self.rg(*x),
                        self.rg(*w),
                        b.map(|bv| self.rg(bv)).unwrap_or(false),
                    );
                    if let Some(dx) = dx {
                        accumulate(self, &mut grads, *x, dx);
                    }
                    if let Some(dw) = dw {
                        accumulate(self, &mut grads, *w, dw);
                    }
                    if let (Some(bvar), Some(db)) = (b, db) {
                        accumulate(self, &mut grads, *bvar, db);
                    }
                }
                Op::InstanceNorm {
                    x,
                    gamma,
                    beta,
                    mean,
                    inv_std,
                } => {
                    let xv = &self.nodes[x.0].value;
                    let gv = &self.nodes[gamma.0].value;
                    let s = xv.shape();
                    let (c, h, w) = (s[0], s[1], s[2]);
                    let n = (h * w) as f64;
                    let mut dgamma = ArrayD::zeros(IxDyn(&[c]));
                    let mut dbeta = ArrayD::zeros(IxDyn(&[c]));
                    let mut dx = ArrayD::zeros(IxDyn(&[c, h, w]));
                    for ci in 0..c {
                        let (m, is) = (mean[ci], inv_std[ci]);
                        let mut sum_g = 0.0;
                        let mut sum_gx = 0.0;
                        for hi in 0..h {
                            for wi in 0..w {
                                let xh = (xv[[ci, hi, wi]] - m) * is;
                                let go = g[[ci, hi, wi]];
                                sum_g += go;
                                sum_gx += go * xh;
                                dgamma[[ci]] += go * xh;
                                dbeta[[ci]] += go;
                            }
                        }
                        let gc = gv[[ci]];
                        for hi in 0..h {
                            for wi in 0..w {
                                let xh = (xv[[ci, hi, wi]] - m) * is;
                                let go = g[[ci, hi, wi]];
                                dx[[ci, hi, wi]] =
                                    gc * is * (go - sum_g / n - xh * sum_gx / n);
                            }
                        }
                    }
                    accumulate(self, &mut grads, *x, dx);
                    accumulate(self, &mut grads, *gamma, dgamma);
                    accumulate(self, &mut grads, *beta, dbeta);
                }
                Op::GlobalAvgPool { x } => {
                    let s = self.shape(*x).to_vec();
                    let n = (s[1] * s[2]) as f64;
                    let mut dx = ArrayD::zeros(IxDyn(&s));
                    for ci in 0..s[0] {
                        let gc = g[[ci]] / n;
                        dx.index_axis_mut(Axis(0), ci).fill(gc);
                    }
                    accumulate(self, &mut grads, *x, dx);
                }
                Op::GlobalMaxPool { x, argmax } => {
                    let s = self.shape(*x).to_vec();
                    let plane = s[1] * s[2];
                    let mut dx = ArrayD::zeros(IxDyn(&s));
                    {
                        let df = dx.as_slice_mut().unwrap();
                        for ci in 0..s[0] {
                            df[ci * plane + argmax[ci]] = g[[ci]];
                        }
                    }
                    accumulate(self, &mut grads, *x, dx);
                }
                Op::ChannelMean { x } => {
                    let s = self.shape(*x).to_vec();
                    let c = s[0] as f64;
                    let mut dx = ArrayD::zeros(IxDyn(&s));
                    for ci in 0..s[0] {
                        for hi in 0..s[1] {
                            for wi in 0..s[2] {
                                dx[[ci, hi, wi]] = g[[0, hi, wi]] / c;
                            }
                        }
                    }
                    accumulate(self, &mut grads, *x, dx);
                }
                Op::ChannelMax { x, argmax } => {
                    let s = self.shape(*x).to_vec();
                    let mut dx = ArrayD::zeros(IxDyn(&s));
                    for hi in 0..s[1] {
                        for wi in 0..s[2] {
                            dx[[argmax[hi * s[2] + wi], hi, wi]] = g[[0, hi, wi]];
                        }
                    }
                    accumulate(self, &mut grads, *x, dx);
                }
                Op::ScaleChannels { x, gate } => {
                    let xv = &self.nodes[x.0].value;
                    let gv = &self.nodes[gate.0].value;
                    let s = xv.shape();
                    if self.rg(*x) {
                        let mut dx = g.clone();
                        for ci in 0..s[0] {
                            let gc = gv[[ci]];
                            dx.index_axis_mut(Axis(0), ci).mapv_inplace(|v| v * gc);
                        }
                        accumulate(self, &mut grads, *x, dx);
                    }
                    if self.rg(*gate) {
                        let mut dgate = ArrayD::zeros(IxDyn(&[s[0]]));
                        for ci in 0..s[0] {
                            let mut acc = 0.0;
                            for hi in 0..s[1] {
                                for wi in 0..s[2] {
                                    acc += g[[ci, hi, wi]] * xv[[ci, hi, wi]];
                                }
                            }
                            dgate[[ci]] = acc;
                        }
                        accumulate(self, &mut grads, *gate, dgate);
                    }
                }
                Op::ScaleSpatial { x, gate } => {
                    let xv = &self.nodes[x.0].value;
                    let gv = &self.nodes[gate.0].value;
                    let s = xv.shape();
                    if self.rg(*x) {
                        let mut dx = g.clone();
                        for ci in 0..s[0] {
                            for hi in 0..s[1] {
                                for wi in 0..s[2] {
                                    dx[[ci, hi, wi]] *= gv[[0, hi, wi]];
                                }
                            }
                        }
                        accumulate(self, &mut grads, *x, dx);
                    }
                    if self.rg(*gate) {
                        let mut dgate = ArrayD::zeros(IxDyn(&[1, s[1], s[2]]));
                        for ci in 0..s[0] {
                            for hi in 0..s[1] {
                                for wi in 0..s[2] {
                                    dgate[[0, hi, wi]] += g[[ci, hi, wi]] * xv[[ci, hi, wi]];
                                }
                            }
                        }
                        accumulate(self, &mut grads, *gate, dgate);
                    }
                }
                Op::ConcatChannels { parts } => {
                    let mut offset = 0;
                    for &p in parts {
                        let pc = self.shape(p)[0];
                        if self.rg(p) {
                            let s = self.shape(p).to_vec();
                            let mut dp = ArrayD::zeros(IxDyn(&s));
                            for ci in 0..pc {
                                dp.index_axis_mut(Axis(0), ci)
                                    .assign(&g.index_axis(Axis(0), offset + ci));
                            }
                            accumulate(self, &mut grads, p, dp);
                        }
                        offset += pc;
                    }
                }
                Op::SoftmaxFuse {
                    depths,
                    confs,
                    weights,
                } => {
                    let out = &self.nodes[i].value;
                    let s = out.shape();
                    let (h, w) = (s[1], s[2]);
                    for (bi, (&dv, &cv)) in depths.iter().zip(confs.iter()).enumerate() {
                        if self.rg(dv) {
                            let mut dd = ArrayD::zeros(IxDyn(&[1, h, w]));
                            for hi in 0..h {
                                for wi in 0..w {
                                    dd[[0, hi, wi]] = g[[0, hi, wi]] * weights[[bi, hi, wi]];
                                }
                            }
                            accumulate(self, &mut grads, dv, dd);
                        }
                        if self.rg(cv) {
                            let dvv = &self.nodes[dv.0].value;
                            let mut dc = ArrayD::zeros(IxDyn(&[1, h, w]));
                            for hi in 0..h {
                                for wi in 0..w {
                                    dc[[0, hi, wi]] = g[[0, hi, wi]]
                                        * weights[[bi, hi, wi]]
                                        * (dvv[[0, hi, wi]] - out[[0, hi, wi]]);
                                }
                            }
                            accumulate(self, &mut grads, cv, dc);
                        }
                    }
                }
                Op::MaskedL2 { pred, grad_coeff } => {
                    let gs = g.iter().next().copied().unwrap();
                    accumulate(self, &mut grads, *pred, grad_coeff.mapv(|v| v * gs));
                }
                Op::AffinityNorm { raw, inv_l1 } => {
                    let rv = &self.nodes[raw.0].value;
                    let out = &self.nodes[i].value;
                    let s = rv.shape();
                    let (a, h, w) = (s[0], s[1], s[2]);
                    let mut dr = ArrayD::zeros(IxDyn(&[a, h, w]));
                    for hi in 0..h {
                        for wi in 0..w {
                            let inv = inv_l1[[hi, wi]];
                            if inv == 0.0 {
                                continue;
                            }
                            let mut dot = 0.0;
                            for ai in 0..a {
                                dot += g[[ai, hi, wi]] * out[[ai, hi, wi]];
                            }
                            for ai in 0..a {
                                let sign = sign_of(rv[[ai, hi, wi]]);
                                dr[[ai, hi, wi]] = (g[[ai, hi, wi]] - sign * dot) * inv;
                            }
                        }
                    }
                    accumulate(self, &mut grads, *raw, dr);
                }
                Op::CspnStep {
                    h,
                    kappa,
                    kernel,
                    dilation,
                } => {
                    let hv = &self.nodes[h.0].value;
                    let kv = &self.nodes[kappa.0].value;
                    let s = hv.shape();
                    let (hh, ww) = (s[1], s[2]);
                    let offsets = stencil_offsets(*kernel, *dilation);
                    if self.rg(*h) {
                        let mut dh = ArrayD::zeros(IxDyn(&[1, hh, ww]));
                        for y in 0..hh {
                            for x in 0..ww {
                                let mut in_bounds_sum = 0.0;
                                for (ai, &(dy, dx)) in offsets.iter().enumerate() {
                                    let ny = y as isize + dy;
                                    let nx = x as isize + dx;
                                    if ny >= 0 && ny < hh as isize && nx >= 0 && nx < ww as isize {
                                        let k = kv[[ai, y, x]];
                                        in_bounds_sum += k;
                                        dh[[0, ny as usize, nx as usize]] += g[[0, y, x]] * k;
                                    }
                                }
                                dh[[0, y, x]] += g[[0, y, x]] * (1.0 - in_bounds_sum);
                            }
                        }
                        accumulate(self, &mut grads, *h, dh);
                    }
                    if self.rg(*kappa) {
                        let a = kv.shape()[0];
                        let mut dk = ArrayD::zeros(IxDyn(&[a, hh, ww]));
                        for y in 0..hh {
                            for x in 0..ww {
                                for (ai, &(dy, dx)) in offsets.iter().enumerate() {
                                    let ny = y as isize + dy;
                                    let nx = x as isize + dx;
                                    if ny >= 0 && ny < hh as isize && nx >= 0 && nx < ww as isize {
                                        dk[[ai, y, x]] = g[[0, y, x]]
                                            * (hv[[0, ny as usize, nx as usize]] - hv[[0, y, x]]);
                                    }
                                }
                            }
                        }
                        accumulate(self, &mut grads, *kappa, dk);
                    }
                }
                Op::Reinject { h, mask, .. } => {
                    let mut dh = g;
                    {
                        let df = dh.as_slice_mut().unwrap();
                        for (k, &m) in mask.iter().enumerate() {
                            if m {
                                df[k] = 0.0;
                            }
                        }
                    }
                    accumulate(self, &mut grads, *h, dh);
                }
            }
        }
        Gradients { grads }
    }
}

fn accumulate(tape: &Tape, grads: &mut [Option<ArrayD<f64>>], v: Var, delta: ArrayD<f64>) {
    if !tape.nodes[v.0].requires_grad {
        return;
    }
    match &mut grads[v.0] {
        Some(acc) => *acc += &delta,
        slot @ None => *slot = Some(delta),
    }
}

fn azip_mul_mask(g: &mut ArrayD<f64>, y: &ArrayD<f64>) {
    let gf = g.as_slice_mut().unwrap();
    let yf = y.as_slice().unwrap();
    for k in 0..gf.len() {
        if yf[k] <= 0.0 {
            gf[k] = 0.0;
        }
    }
}

fn sign_of(v: f64) -> f64 {
    if v > 0.0 {
        1.0
    } else if v < 0.0 {
        -1.0
    } else {
        0.0
    }
}

pub(crate) fn scalar_array(v: f64) -> ArrayD<f64> {
    ArrayD::from_elem(IxDyn(&[]), v)
}

/// Neighbor offsets of the k×k stencil (center excluded), row-major, spaced
/// by the dilation rate. The channel order of affinity fields follows this.
pub fn stencil_offsets(kernel: usize, dilation: usize) -> Vec<(isize, isize)> {
    let r = (kernel / 2) as isize;
    let d = dilation as isize;
    let mut out = Vec::with_capacity(kernel * kernel - 1);
    for dy in -r..=r {
        for dx in -r..=r {
            if dy == 0 && dx == 0 {
                continue;
            }
            out.push((dy * d, dx * d));
        }
    }
    out
}

/// Finite-difference checking shared by unit and acceptance tests.
pub fn relative_error(analytic: f64, numeric: f64, floor: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(floor)
}

pub fn finite_difference<F>(f: F, x: &mut ArrayD<f64>, idx: &[usize], step: f64) -> f64
where
    F: Fn(&ArrayD<f64>) -> f64,
{
    let orig = x[IxDyn(idx)];
    x[IxDyn(idx)] = orig + step;
    let fp = f(x);
    x[IxDyn(idx)] = orig - step;
    let fm = f(x);
    x[IxDyn(idx)] = orig;
    (fp - fm) / (2.0 * step)
}

#[allow(unused_imports)]
pub use ndarray_helpers::*;

mod ndarray_helpers {
    use super::*;

    /// Convenience constructor used by tests and data plumbing.
    pub fn tensor3(c: usize, h: usize, w: usize, data: Vec<f64>) -> ArrayD<f64> {
        assert_eq!(data.len(), c * h * w);
        ArrayD::from_shape_vec(IxDyn(&[c, h, w]), data).unwrap()
    }

    pub fn view_as_2d(a: &ArrayD<f64>) -> ndarray::ArrayView2<'_, f64> {
        let s = a.shape();
        let (h, w) = match s.len() {
            2 => (s[0], s[1]),
            3 => {
                assert_eq!(s[0], 1);
                (s[1], s[2])
            }
            _ => panic!("expected 2-d or (1,H,W) array"),
        };
        a.view()
            .into_shape_with_order((h, w))
            .expect("contiguous reshape")
    }
}

#[cfg(test)]
mod tests;
