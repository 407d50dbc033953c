//! Masked regression losses and the decayed branch-weight schedule.

use ndarray::Array2;

use crate::error::{DepthfillError, Result};

/// Boolean mask of pixels with valid ground truth (depth > 0).
pub fn valid_mask(gt: &Array2<f64>) -> Array2<bool> {
    gt.mapv(|v| v > 0.0)
}

/// Mean squared error over valid ground-truth pixels. Invalid pixels never
/// contribute, whatever the prediction holds there.
pub fn masked_l2(pred: &Array2<f64>, gt: &Array2<f64>) -> Result<f64> {
    if pred.dim() != gt.dim() {
        return Err(DepthfillError::dimension(
            "masked l2",
            format!("{:?}", gt.dim()),
            format!("{:?}", pred.dim()),
        ));
    }
    let mut acc = 0.0;
    let mut n = 0usize;
    for (p, g) in pred.iter().zip(gt.iter()) {
        if *g > 0.0 {
            let d = g - p;
            acc += d * d;
            n += 1;
        }
    }
    if n == 0 {
        return Err(DepthfillError::EmptyMask);
    }
    Ok(acc / n as f64)
}

/// Branch loss weights with linear decay to zero.
#[derive(Debug, Clone, Copy, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct LossWeights {
    pub lambda_cg: f64,
    pub lambda_sg: f64,
    pub lambda_dg: f64,
    pub decay_end_epoch: u32,
}

impl Default for LossWeights {
    fn default() -> Self {
        LossWeights {
            lambda_cg: 0.2,
            lambda_sg: 0.2,
            lambda_dg: 0.2,
            decay_end_epoch: 10,
        }
    }
}

impl LossWeights {
    pub fn validate(&self) -> Result<()> {
        if self.lambda_cg < 0.0 || self.lambda_sg < 0.0 || self.lambda_dg < 0.0 {
            return Err(DepthfillError::Validation(
                "branch loss weights must be nonnegative".into(),
            ));
        }
        if self.decay_end_epoch == 0 {
            return Err(DepthfillError::Validation(
                "decay_end_epoch must be positive".into(),
            ));
        }
        Ok(())
    }
}

/// Linear interpolation of each branch weight from its initial value at epoch
/// zero down to zero at `decay_end_epoch`, clamped afterwards.
pub fn lambda_schedule(epoch: u32, w: &LossWeights) -> (f64, f64, f64) {
    let frac = if epoch >= w.decay_end_epoch {
        0.0
    } else {
        1.0 - epoch as f64 / w.decay_end_epoch as f64
    };
    (
        w.lambda_cg * frac,
        w.lambda_sg * frac,
        w.lambda_dg * frac,
    )
}

/// Weighted training loss: decayed branch terms plus the fused term.
pub fn total_loss(
    l_cg: f64,
    l_sg: f64,
    l_dg: f64,
    l_fused: f64,
    w: &LossWeights,
    epoch: u32,
) -> Result<f64> {
    w.validate()?;
    for (name, v) in [
        ("l_cg", l_cg),
        ("l_sg", l_sg),
        ("l_dg", l_dg),
        ("l_fused", l_fused),
    ] {
        if !v.is_finite() || v < 0.0 {
            return Err(DepthfillError::Validation(format!(
                "{name} must be finite and nonnegative, got {v}"
            )));
        }
    }
    let (lc, ls, ld) = lambda_schedule(epoch, w);
    Ok(lc * l_cg + ls * l_sg + ld * l_dg + l_fused)
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;
    use proptest::prelude::*;

    #[test]
    fn perfect_prediction_has_zero_loss() {
        let gt = Array2::from_shape_fn((3, 3), |(y, x)| (y + x) as f64);
        assert_eq!(masked_l2(&gt.clone(), &gt).unwrap(), 0.0);
    }

    #[test]
    fn hand_computed_single_and_double_pixel_cases() {
        // one valid pixel: gt 5, pred 3 -> (5-3)^2 = 4
        let mut gt = Array2::zeros((2, 2));
        gt[[0, 0]] = 5.0;
        let mut pred = Array2::zeros((2, 2));
        pred[[0, 0]] = 3.0;
        assert_abs_diff_eq!(masked_l2(&pred, &gt).unwrap(), 4.0, epsilon = 1e-15);

        // errors 1 and 3 -> (1 + 9) / 2 = 5
        let mut gt = Array2::zeros((2, 2));
        gt[[0, 0]] = 2.0;
        gt[[1, 1]] = 10.0;
        let mut pred = Array2::zeros((2, 2));
        pred[[0, 0]] = 1.0;
        pred[[1, 1]] = 7.0;
        assert_abs_diff_eq!(masked_l2(&pred, &gt).unwrap(), 5.0, epsilon = 1e-15);
    }

    #[test]
    fn empty_mask_is_an_error() {
        let gt = Array2::zeros((2, 2));
        let pred = Array2::from_elem((2, 2), 3.0);
        assert!(matches!(masked_l2(&pred, &gt), Err(DepthfillError::EmptyMask)));
    }

    #[test]
    fn schedule_endpoints_and_midpoint() {
        let w = LossWeights::default();
        assert_eq!(lambda_schedule(0, &w), (0.2, 0.2, 0.2));
        assert_eq!(lambda_schedule(10, &w), (0.0, 0.0, 0.0));
        assert_eq!(lambda_schedule(25, &w), (0.0, 0.0, 0.0));
        let (a, b, c) = lambda_schedule(5, &w);
        assert_abs_diff_eq!(a, 0.1, epsilon = 1e-15);
        assert_abs_diff_eq!(b, 0.1, epsilon = 1e-15);
        assert_abs_diff_eq!(c, 0.1, epsilon = 1e-15);
    }

    #[test]
    fn total_loss_examples() {
        let w = LossWeights::default();
        assert_eq!(total_loss(0.0, 0.0, 0.0, 0.0, &w, 0).unwrap(), 0.0);
        // epoch past decay: only the fused term survives
        assert_eq!(total_loss(3.0, 4.0, 5.0, 1.25, &w, 10).unwrap(), 1.25);
        // epoch 0: 0.2 * 3 + 1 = 1.6
        assert_abs_diff_eq!(
            total_loss(1.0, 1.0, 1.0, 1.0, &w, 0).unwrap(),
            1.6,
            epsilon = 1e-15
        );
    }

    #[test]
    fn total_loss_rejects_negative_inputs() {
        let w = LossWeights::default();
        assert!(total_loss(-1.0, 0.0, 0.0, 0.0, &w, 0).is_err());
        assert!(total_loss(0.0, 0.0, 0.0, f64::NAN, &w, 0).is_err());
    }

    proptest! {
        #[test]
        fn loss_ignores_invalid_pixels(seed in 0u64..500) {
            use rand::prelude::*;
            use rand_chacha::ChaCha8Rng;
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let gt = Array2::from_shape_fn((4, 4), |_| {
                if rng.random::<f64>() < 0.5 { rng.random::<f64>() * 10.0 + 0.1 } else { 0.0 }
            });
            prop_assume!(gt.iter().any(|&v| v > 0.0));
            let pred = Array2::from_shape_fn((4, 4), |_| rng.random::<f64>() * 10.0);
            let base = masked_l2(&pred, &gt).unwrap();
            // scribble over invalid pixels only
            let mut scribbled = pred.clone();
            for (p, g) in scribbled.iter_mut().zip(gt.iter()) {
                if *g <= 0.0 {
                    *p = rng.random::<f64>() * 1e6 - 5e5;
                }
            }
            let after = masked_l2(&scribbled, &gt).unwrap();
            prop_assert_eq!(base.to_bits(), after.to_bits());
        }

        #[test]
        fn total_loss_monotone_in_each_term(
            l in 0.0f64..10.0, bump in 0.0f64..5.0, epoch in 0u32..12
        ) {
            let w = LossWeights::default();
            let base = total_loss(l, l, l, l, &w, epoch).unwrap();
            for slot in 0..4 {
                let mut ls = [l, l, l, l];
                ls[slot] += bump;
                let up = total_loss(ls[0], ls[1], ls[2], ls[3], &w, epoch).unwrap();
                prop_assert!(up >= base - 1e-12);
            }
        }
    }
}
