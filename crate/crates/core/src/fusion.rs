//! Confidence-weighted fusion of branch depth predictions.
//!
//! Per pixel the fused depth is a softmax over confidence logits applied to
//! the branch depths, computed with max subtraction so large logits cannot
//! overflow the exponentials.

use ndarray::Array2;

use crate::error::{DepthfillError, Result};

fn validate(depths: &[Array2<f64>], confidences: &[Array2<f64>]) -> Result<(usize, usize)> {
    if depths.len() != confidences.len() || depths.len() < 2 {
        return Err(DepthfillError::Validation(format!(
            "fusion needs matching depth/confidence lists of length >= 2, got {} and {}",
            depths.len(),
            confidences.len()
        )));
    }
    let dim = depths[0].dim();
    for d in depths.iter().chain(confidences.iter()) {
        if d.dim() != dim {
            return Err(DepthfillError::dimension(
                "confidence fusion",
                format!("{dim:?}"),
                format!("{:?}", d.dim()),
            ));
        }
    }
    for d in depths {
        if !d.iter().all(|v| v.is_finite()) {
            return Err(DepthfillError::Validation("non-finite depth input".into()));
        }
    }
    for c in confidences {
        if !c.iter().all(|v| v.is_finite()) {
            return Err(DepthfillError::Validation(
                "non-finite confidence logits".into(),
            ));
        }
    }
    Ok(dim)
}

/// Per-pixel softmax weights of the confidence logits. Each pixel's weights
/// sum to one.
pub fn fusion_weights(confidences: &[Array2<f64>]) -> Result<Vec<Array2<f64>>> {
    if confidences.is_empty() {
        return Err(DepthfillError::Validation("no confidence maps".into()));
    }
    let (h, w) = confidences[0].dim();
    let n = confidences.len();
    let mut weights = vec![Array2::<f64>::zeros((h, w)); n];
    for y in 0..h {
        for x in 0..w {
            let m = confidences
                .iter()
                .map(|c| c[[y, x]])
                .fold(f64::NEG_INFINITY, f64::max);
            let mut z = 0.0;
            for c in confidences {
                z += (c[[y, x]] - m).exp();
            }
            for (b, c) in confidences.iter().enumerate() {
                weights[b][[y, x]] = (c[[y, x]] - m).exp() / z;
            }
        }
    }
    Ok(weights)
}

/// Blend branch depths with learned confidence logits. The result lies within
/// the per-pixel min/max of the inputs.
pub fn confidence_fuse(
    depths: &[Array2<f64>],
    confidences: &[Array2<f64>],
) -> Result<Array2<f64>> {
    let (h, w) = validate(depths, confidences)?;
    let weights = fusion_weights(confidences)?;
    let mut out = Array2::<f64>::zeros((h, w));
    for (b, d) in depths.iter().enumerate() {
        for y in 0..h {
            for x in 0..w {
                out[[y, x]] += weights[b][[y, x]] * d[[y, x]];
            }
        }
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::autograd::{finite_difference, relative_error, Tape, Var};
    use approx::assert_abs_diff_eq;
    use ndarray::{ArrayD, IxDyn};
    use rand::prelude::*;
    use rand_chacha::ChaCha8Rng;

    fn rand_map(rng: &mut ChaCha8Rng, h: usize, w: usize, scale: f64) -> Array2<f64> {
        Array2::from_shape_fn((h, w), |_| rng.random::<f64>() * scale)
    }

    #[test]
    fn equal_confidences_average_depths() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let d1 = rand_map(&mut rng, 4, 4, 10.0);
        let d2 = rand_map(&mut rng, 4, 4, 10.0);
        let d3 = rand_map(&mut rng, 4, 4, 10.0);
        let c = rand_map(&mut rng, 4, 4, 5.0);
        let out = confidence_fuse(
            &[d1.clone(), d2.clone(), d3.clone()],
            &[c.clone(), c.clone(), c],
        )
        .unwrap();
        for y in 0..4 {
            for x in 0..4 {
                let mean = (d1[[y, x]] + d2[[y, x]] + d3[[y, x]]) / 3.0;
                assert_abs_diff_eq!(out[[y, x]], mean, epsilon = 1e-12);
            }
        }
    }

    #[test]
    fn equal_depths_pass_through() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let d = rand_map(&mut rng, 3, 5, 20.0);
        let c1 = rand_map(&mut rng, 3, 5, 9.0);
        let c2 = rand_map(&mut rng, 3, 5, 9.0);
        let c3 = rand_map(&mut rng, 3, 5, 9.0);
        let out = confidence_fuse(&[d.clone(), d.clone(), d.clone()], &[c1, c2, c3]).unwrap();
        for (o, e) in out.iter().zip(d.iter()) {
            assert_abs_diff_eq!(*o, *e, epsilon = 1e-12);
        }
    }

    #[test]
    fn dominant_confidence_selects_its_depth() {
        // logit margin of 40: the winning weight is 1/(1 + 2e^-40)
        let d = [
            Array2::from_elem((1, 1), 10.0),
            Array2::from_elem((1, 1), 20.0),
            Array2::from_elem((1, 1), 30.0),
        ];
        let c = [
            Array2::from_elem((1, 1), 40.0),
            Array2::from_elem((1, 1), 0.0),
            Array2::from_elem((1, 1), 0.0),
        ];
        let out = confidence_fuse(&d, &c).unwrap();
        assert_abs_diff_eq!(out[[0, 0]], 10.0, epsilon = 1e-6);
    }

    #[test]
    fn weights_sum_to_one_and_shift_invariant() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let c1 = rand_map(&mut rng, 6, 6, 30.0);
        let c2 = rand_map(&mut rng, 6, 6, 30.0);
        let c3 = rand_map(&mut rng, 6, 6, 30.0);
        let w = fusion_weights(&[c1.clone(), c2.clone(), c3.clone()]).unwrap();
        for y in 0..6 {
            for x in 0..6 {
                let s = w[0][[y, x]] + w[1][[y, x]] + w[2][[y, x]];
                assert_abs_diff_eq!(s, 1.0, epsilon = 1e-6);
            }
        }
        let d1 = rand_map(&mut rng, 6, 6, 15.0);
        let d2 = rand_map(&mut rng, 6, 6, 15.0);
        let d3 = rand_map(&mut rng, 6, 6, 15.0);
        let base = confidence_fuse(
            &[d1.clone(), d2.clone(), d3.clone()],
            &[c1.clone(), c2.clone(), c3.clone()],
        )
        .unwrap();
        let shift = 123.456;
        let shifted = confidence_fuse(
            &[d1, d2, d3],
            &[
                c1.mapv(|v| v + shift),
                c2.mapv(|v| v + shift),
                c3.mapv(|v| v + shift),
            ],
        )
        .unwrap();
        for (a, b) in base.iter().zip(shifted.iter()) {
            assert_abs_diff_eq!(*a, *b, epsilon = 1e-6);
        }
    }

    #[test]
    fn huge_logits_do_not_overflow() {
        let d = [
            Array2::from_elem((2, 2), 1.0),
            Array2::from_elem((2, 2), 2.0),
            Array2::from_elem((2, 2), 3.0),
        ];
        let c = [
            Array2::from_elem((2, 2), 5000.0),
            Array2::from_elem((2, 2), 4000.0),
            Array2::from_elem((2, 2), 3000.0),
        ];
        let out = confidence_fuse(&d, &c).unwrap();
        assert!(out.iter().all(|v| v.is_finite()));
        assert_abs_diff_eq!(out[[0, 0]], 1.0, epsilon = 1e-9);
    }

    #[test]
    fn fused_depth_bounded_by_branch_extremes() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let ds = [
            rand_map(&mut rng, 5, 5, 40.0),
            rand_map(&mut rng, 5, 5, 40.0),
            rand_map(&mut rng, 5, 5, 40.0),
        ];
        let cs = [
            rand_map(&mut rng, 5, 5, 8.0),
            rand_map(&mut rng, 5, 5, 8.0),
            rand_map(&mut rng, 5, 5, 8.0),
        ];
        let out = confidence_fuse(&ds, &cs).unwrap();
        for y in 0..5 {
            for x in 0..5 {
                let lo = ds.iter().map(|d| d[[y, x]]).fold(f64::INFINITY, f64::min);
                let hi = ds
                    .iter()
                    .map(|d| d[[y, x]])
                    .fold(f64::NEG_INFINITY, f64::max);
                assert!(out[[y, x]] >= lo - 1e-12 && out[[y, x]] <= hi + 1e-12);
            }
        }
    }

    #[test]
    fn raising_one_confidence_moves_toward_its_depth() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let ds = [
            rand_map(&mut rng, 3, 3, 10.0),
            rand_map(&mut rng, 3, 3, 10.0),
            rand_map(&mut rng, 3, 3, 10.0),
        ];
        let cs = [
            rand_map(&mut rng, 3, 3, 2.0),
            rand_map(&mut rng, 3, 3, 2.0),
            rand_map(&mut rng, 3, 3, 2.0),
        ];
        let base = confidence_fuse(&ds, &cs).unwrap();
        let mut cs_up = cs.clone();
        cs_up[2][[1, 1]] += 1.0;
        let up = confidence_fuse(&ds, &cs_up).unwrap();
        let target = ds[2][[1, 1]];
        assert!(
            (up[[1, 1]] - target).abs() <= (base[[1, 1]] - target).abs() + 1e-12,
            "raising the third branch's confidence must pull the output toward it"
        );
        // other pixels untouched
        assert_abs_diff_eq!(up[[0, 0]], base[[0, 0]], epsilon = 1e-15);
    }

    #[test]
    fn rejects_shape_mismatch_and_nonfinite() {
        let a = Array2::zeros((2, 2));
        let b = Array2::zeros((3, 2));
        assert!(matches!(
            confidence_fuse(&[a.clone(), b], &[a.clone(), a.clone()]),
            Err(DepthfillError::Dimension { .. })
        ));
        let nan = Array2::from_elem((2, 2), f64::NAN);
        assert!(confidence_fuse(&[a.clone(), a.clone()], &[a.clone(), nan]).is_err());
    }

    #[test]
    fn gradients_match_finite_differences() {
        // random-weighted projection of the fused map exercises every entry
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let shape = [1usize, 4, 4];
        let mk = |rng: &mut ChaCha8Rng, s: f64| {
            ArrayD::from_shape_fn(IxDyn(&shape), |_| rng.random::<f64>() * s)
        };
        let inputs: Vec<ArrayD<f64>> = vec![
            mk(&mut rng, 10.0),
            mk(&mut rng, 10.0),
            mk(&mut rng, 10.0),
            mk(&mut rng, 3.0),
            mk(&mut rng, 3.0),
            mk(&mut rng, 3.0),
        ];
        let proj = mk(&mut rng, 1.0);
        let build = |t: &mut Tape, v: &[Var]| {
            let fused = t.softmax_fuse(&[v[0], v[1], v[2]], &[v[3], v[4], v[5]]);
            let p = t.constant(proj.clone());
            // sum(fused * proj) via channel gate of a 1-channel map
            let prod = t.scale_spatial(fused, p);
            t.sum(prod)
        };
        let mut tape = Tape::new();
        let vars: Vec<Var> = inputs.iter().map(|x| tape.leaf(x.clone())).collect();
        let loss = build(&mut tape, &vars);
        let grads = tape.backward(loss);
        for (i, input) in inputs.iter().enumerate() {
            let analytic = grads.wrt(vars[i]).unwrap();
            let mut probe = input.clone();
            for y in 0..4 {
                for x in 0..4 {
                    let idx = [0usize, y, x];
                    let fd = finite_difference(
                        |arr| {
                            let mut t = Tape::new();
                            let vs: Vec<Var> = inputs
                                .iter()
                                .enumerate()
                                .map(|(j, a)| {
                                    if j == i {
                                        t.leaf(arr.clone())
                                    } else {
                                        t.leaf(a.clone())
                                    }
                                })
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
                        relative_error(an, fd, 1e-6) < 1e-4,
                        "tensor {i} ({y},{x}): {an} vs {fd}"
                    );
                }
            }
        }
    }
}
