//! Iterative depth refinement by learned affinity propagation.
//!
//! Raw per-pixel neighbor affinities are L1-normalized (sign preserved), the
//! self-weight absorbs the remaining mass, and the depth map is propagated
//! over a dilated stencil for a fixed iteration schedule. Pixels carrying a
//! sparse measurement are reset to it after every step.

use ndarray::{Array2, Array3, ArrayD, IxDyn};

use crate::autograd::{stencil_offsets, Tape};
use crate::error::{DepthfillError, Result};

/// Unnormalized neighbor affinities, `(k·k − 1, H, W)` with the row-major
/// stencil order of [`stencil_offsets`].
#[derive(Debug, Clone)]
pub struct AffinityField {
    raw: Array3<f64>,
    kernel: usize,
}

impl AffinityField {
    pub fn new(raw: Array3<f64>, kernel: usize) -> Result<Self> {
        if kernel % 2 == 0 || kernel < 3 {
            return Err(DepthfillError::Validation(format!(
                "affinity kernel must be odd and >= 3, got {kernel}"
            )));
        }
        let (a, _, _) = raw.dim();
        if a != kernel * kernel - 1 {
            return Err(DepthfillError::dimension(
                "affinity field",
                format!("{} channels", kernel * kernel - 1),
                format!("{a} channels"),
            ));
        }
        if !raw.iter().all(|v| v.is_finite()) {
            return Err(DepthfillError::Validation(
                "affinity field contains non-finite entries".into(),
            ));
        }
        Ok(AffinityField { raw, kernel })
    }

    pub fn kernel(&self) -> usize {
        self.kernel
    }

    pub fn raw(&self) -> &Array3<f64> {
        &self.raw
    }
}

/// Per-iteration dilation rates. The reference schedule runs twelve steps:
/// six at dilation 2 followed by six at dilation 1.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct DilationSchedule(Vec<usize>);

pub const SCHEDULE_LEN: usize = 12;

impl DilationSchedule {
    pub fn new(rates: Vec<usize>) -> Result<Self> {
        if rates.len() != SCHEDULE_LEN {
            return Err(DepthfillError::Validation(format!(
                "dilation schedule must have {SCHEDULE_LEN} entries, got {}",
                rates.len()
            )));
        }
        if rates.iter().any(|&r| r < 1) {
            return Err(DepthfillError::Validation(
                "dilation rates must be >= 1".into(),
            ));
        }
        Ok(DilationSchedule(rates))
    }

    pub fn standard() -> Self {
        DilationSchedule(vec![2, 2, 2, 2, 2, 2, 1, 1, 1, 1, 1, 1])
    }

    pub fn rates(&self) -> &[usize] {
        &self.0
    }

    /// Worst-case influence radius in pixels for a given kernel size.
    pub fn reach(&self, kernel: usize) -> usize {
        let half = kernel / 2;
        self.0.iter().map(|&r| r * half).sum()
    }
}

/// Normalized affinities plus the per-pixel self-weight
/// `1 − Σ_j κ_j`, which together always carry unit mass.
pub fn normalize_affinity(field: &AffinityField) -> (Array3<f64>, Array2<f64>) {
    let (a, h, w) = field.raw.dim();
    let mut kappa = Array3::<f64>::zeros((a, h, w));
    let mut self_weight = Array2::<f64>::zeros((h, w));
    for y in 0..h {
        for x in 0..w {
            let mut l1 = 0.0;
            for ai in 0..a {
                l1 += field.raw[[ai, y, x]].abs();
            }
            let mut sum = 0.0;
            if l1 > 0.0 {
                for ai in 0..a {
                    let v = field.raw[[ai, y, x]] / l1;
                    kappa[[ai, y, x]] = v;
                    sum += v;
                }
            }
            self_weight[[y, x]] = 1.0 - sum;
        }
    }
    (kappa, self_weight)
}

fn check_normalized(kappa: &Array3<f64>) -> Result<()> {
    let (a, h, w) = kappa.dim();
    for y in 0..h {
        for x in 0..w {
            let mut l1 = 0.0;
            for ai in 0..a {
                l1 += kappa[[ai, y, x]].abs();
            }
            if l1 > 1.0 + 1e-9 {
                return Err(DepthfillError::Validation(format!(
                    "affinities at ({y},{x}) are not normalized: |kappa|_1 = {l1}"
                )));
            }
        }
    }
    Ok(())
}

/// One propagation step over the dilated stencil. Out-of-image neighbors
/// contribute nothing and their weight folds into the self-weight, so the
/// per-pixel mass stays exactly one.
pub fn propagate_step(h: &Array2<f64>, kappa: &Array3<f64>, dilation: usize) -> Result<Array2<f64>> {
    if dilation < 1 {
        return Err(DepthfillError::Validation("dilation must be >= 1".into()));
    }
    let (a, hh, ww) = kappa.dim();
    let kernel = ((a + 1) as f64).sqrt() as usize;
    if kernel * kernel != a + 1 || kernel % 2 == 0 {
        return Err(DepthfillError::dimension(
            "propagation affinities",
            "k*k-1 channels for odd k".to_string(),
            format!("{a} channels"),
        ));
    }
    if h.dim() != (hh, ww) {
        return Err(DepthfillError::dimension(
            "propagation state",
            format!("{hh}x{ww}"),
            format!("{}x{}", h.dim().0, h.dim().1),
        ));
    }
    check_normalized(kappa)?;
    let offsets = stencil_offsets(kernel, dilation);
    let mut out = Array2::<f64>::zeros((hh, ww));
    for y in 0..hh {
        for x in 0..ww {
            let mut acc = 0.0;
            let mut in_bounds = 0.0;
            for (ai, &(dy, dx)) in offsets.iter().enumerate() {
                let ny = y as isize + dy;
                let nx = x as isize + dx;
                if ny >= 0 && ny < hh as isize && nx >= 0 && nx < ww as isize {
                    let k = kappa[[ai, y, x]];
                    in_bounds += k;
                    acc += k * h[[ny as usize, nx as usize]];
                }
            }
            out[[y, x]] = (1.0 - in_bounds) * h[[y, x]] + acc;
        }
    }
    Ok(out)
}

/// Full refinement: normalize once, then run the schedule with sparse
/// re-injection after every step.
pub fn refine(
    d_f: &Array2<f64>,
    sparse: &Array2<f64>,
    raw_affinity: &AffinityField,
    schedule: &DilationSchedule,
) -> Result<Array2<f64>> {
    let (_, h, w) = raw_affinity.raw.dim();
    if d_f.dim() != (h, w) || sparse.dim() != (h, w) {
        return Err(DepthfillError::dimension(
            "refinement inputs",
            format!("{h}x{w}"),
            format!("{:?} / {:?}", d_f.dim(), sparse.dim()),
        ));
    }
    let (kappa, _) = normalize_affinity(raw_affinity);
    let mut state = d_f.clone();
    for &rate in schedule.rates() {
        state = propagate_step(&state, &kappa, rate)?;
        for y in 0..h {
            for x in 0..w {
                if sparse[[y, x]] > 0.0 {
                    state[[y, x]] = sparse[[y, x]];
                }
            }
        }
    }
    if !state.iter().all(|v| v.is_finite()) {
        return Err(DepthfillError::Numeric(
            "refinement produced non-finite depths".into(),
        ));
    }
    Ok(state)
}

/// Tape-graph refinement used during training; mirrors [`refine`] exactly.
pub fn refine_graph(
    tape: &mut Tape,
    d_f: crate::autograd::Var,
    raw_affinity: crate::autograd::Var,
    sparse: &Array2<f64>,
    kernel: usize,
    schedule: &DilationSchedule,
) -> crate::autograd::Var {
    let (h, w) = sparse.dim();
    let sparse_dyn: ArrayD<f64> = sparse
        .clone()
        .into_shape_with_order(IxDyn(&[1, h, w]))
        .unwrap();
    let kappa = tape.affinity_normalize(raw_affinity);
    let mut state = d_f;
    for &rate in schedule.rates() {
        state = tape.cspn_step(state, kappa, kernel, rate);
        state = tape.reinject(state, &sparse_dyn);
    }
    state
}
