use super::*;
use ndarray::{ArrayD, IxDyn};
use rand::prelude::*;
use rand_chacha::ChaCha8Rng;

fn randn(rng: &mut ChaCha8Rng, shape: &[usize]) -> ArrayD<f64> {
    ArrayD::from_shape_fn(IxDyn(shape), |_| rng.random::<f64>() * 2.0 - 1.0)
}

/// Check analytic gradients of `build` against central differences for every
/// element of every input.
fn check_grads<F>(inputs: &[ArrayD<f64>], build: F, tol: f64)
where
    F: Fn(&mut Tape, &[Var]) -> Var,
{
    let mut tape = Tape::new();
    let vars: Vec<Var> = inputs.iter().map(|a| tape.leaf(a.clone())).collect();
    let loss = build(&mut tape, &vars);
    let grads = tape.backward(loss);
    let eval = |probe: usize, arr: &ArrayD<f64>| -> f64 {
        let mut t = Tape::new();
        let vs: Vec<Var> = inputs
            .iter()
            .enumerate()
            .map(|(i, a)| {
                if i == probe {
                    t.leaf(arr.clone())
                } else {
                    t.leaf(a.clone())
                }
            })
            .collect();
        let l = build(&mut t, &vs);
        t.scalar(l)
    };
    for (i, input) in inputs.iter().enumerate() {
        let analytic = grads
            .wrt(vars[i])
            .cloned()
            .unwrap_or_else(|| ArrayD::zeros(IxDyn(input.shape())));
        let mut probe = input.clone();
        let idx_list: Vec<Vec<usize>> = indices_of(input.shape());
        for idx in idx_list {
            let fd = finite_difference(|a| eval(i, a), &mut probe, &idx, 1e-5);
            let an = analytic[IxDyn(&idx)];
            let err = relative_error(an, fd, 1e-6);
            assert!(
                err < tol,
                "input {i} idx {idx:?}: analytic {an} vs fd {fd} (rel {err})"
            );
        }
    }
}

fn indices_of(shape: &[usize]) -> Vec<Vec<usize>> {
    let mut out = vec![vec![]];
    for &d in shape {
        let mut next = Vec::new();
        for prefix in &out {
            for k in 0..d {
                let mut p = prefix.clone();
                p.push(k);
                next.push(p);
            }
        }
        out = next;
    }
    out
}

#[test]
fn relu_sigmoid_add_scale_grads() {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let a = randn(&mut rng, &[2, 3, 3]);
    let b = randn(&mut rng, &[2, 3, 3]);
    check_grads(
        &[a, b],
        |t, v| {
            let r = t.relu(v[0]);
            let s = t.sigmoid(v[1]);
            let sum = t.add(r, s);
            let scaled = t.scale(sum, 1.7);
            t.sum(scaled)
        },
        1e-5,
    );
}

#[test]
fn linear_grads() {
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let w = randn(&mut rng, &[3, 5]);
    let x = randn(&mut rng, &[5]);
    check_grads(
        &[w, x],
        |t, v| {
            let y = t.linear(v[0], v[1]);
            let y = t.sigmoid(y);
            t.sum(y)
        },
        1e-5,
    );
}

#[test]
fn conv2d_grads() {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let x = randn(&mut rng, &[2, 5, 6]);
    let w = randn(&mut rng, &[3, 2, 3, 3]);
    let b = randn(&mut rng, &[3]);
    for stride in [1usize, 2] {
        check_grads(
            &[x.clone(), w.clone(), b.clone()],
            move |t, v| {
                let y = t.conv2d(v[0], v[1], Some(v[2]), stride, 1);
                let y = t.relu(y);
                t.sum(y)
            },
            1e-5,
        );
    }
}

#[test]
fn conv_transpose2d_grads() {
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let x = randn(&mut rng, &[3, 3, 4]);
    let w = randn(&mut rng, &[3, 2, 3, 3]);
    let b = randn(&mut rng, &[2]);
    check_grads(
        &[x, w, b],
        |t, v| {
            let y = t.conv_transpose2d(v[0], v[1], Some(v[2]), 2, 1, (6, 8));
            let y = t.sigmoid(y);
            t.sum(y)
        },
        1e-5,
    );
}

#[test]
fn conv_transpose_matches_adjoint_size_relation() {
    // encoder 5 -> 3 under stride 2, decoder 3 -> 5 must round-trip.
    assert_eq!(conv::conv_out_size(5, 3, 2, 1), 3);
    assert_eq!(conv::conv_out_size(64, 3, 2, 1), 32);
}

#[test]
fn instance_norm_grads() {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let x = randn(&mut rng, &[2, 3, 4]);
    let gamma = randn(&mut rng, &[2]);
    let beta = randn(&mut rng, &[2]);
    check_grads(
        &[x, gamma, beta],
        |t, v| {
            let y = t.instance_norm(v[0], v[1], v[2], 1e-5);
            let y = t.sigmoid(y);
            t.sum(y)
        },
        1e-4,
    );
}

#[test]
fn pool_grads() {
    let mut rng = ChaCha8Rng::seed_from_u64(6);
    let x = randn(&mut rng, &[3, 4, 4]);
    check_grads(
        &[x.clone()],
        |t, v| {
            let a = t.global_avg_pool(v[0]);
            let m = t.global_max_pool(v[0]);
            let s = t.add(a, m);
            let s = t.sigmoid(s);
            t.sum(s)
        },
        1e-5,
    );
    check_grads(
        &[x],
        |t, v| {
            let a = t.channel_mean(v[0]);
            let m = t.channel_max(v[0]);
            let s = t.add(a, m);
            t.sum(s)
        },
        1e-5,
    );
}

#[test]
fn broadcast_scale_grads() {
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    let x = randn(&mut rng, &[3, 2, 4]);
    let gate_c = randn(&mut rng, &[3]);
    let gate_s = randn(&mut rng, &[1, 2, 4]);
    check_grads(
        &[x, gate_c, gate_s],
        |t, v| {
            let y = t.scale_channels(v[0], v[1]);
            let y = t.scale_spatial(y, v[2]);
            t.sum(y)
        },
        1e-5,
    );
}

#[test]
fn concat_grads() {
    let mut rng = ChaCha8Rng::seed_from_u64(8);
    let a = randn(&mut rng, &[2, 3, 3]);
    let b = randn(&mut rng, &[1, 3, 3]);
    check_grads(
        &[a, b],
        |t, v| {
            let c = t.concat_channels(&[v[0], v[1]]);
            let c = t.sigmoid(c);
            t.sum(c)
        },
        1e-5,
    );
}

#[test]
fn softmax_fuse_grads() {
    let mut rng = ChaCha8Rng::seed_from_u64(9);
    let d1 = randn(&mut rng, &[1, 3, 3]);
    let d2 = randn(&mut rng, &[1, 3, 3]);
    let d3 = randn(&mut rng, &[1, 3, 3]);
    let c1 = randn(&mut rng, &[1, 3, 3]);
    let c2 = randn(&mut rng, &[1, 3, 3]);
    let c3 = randn(&mut rng, &[1, 3, 3]);
    check_grads(
        &[d1, d2, d3, c1, c2, c3],
        |t, v| {
            let f = t.softmax_fuse(&[v[0], v[1], v[2]], &[v[3], v[4], v[5]]);
            t.sum(f)
        },
        1e-5,
    );
}

#[test]
fn masked_l2_grads() {
    let mut rng = ChaCha8Rng::seed_from_u64(10);
    let pred = randn(&mut rng, &[1, 3, 4]);
    let gt = randn(&mut rng, &[1, 3, 4]).mapv(f64::abs);
    let mask: Vec<bool> = (0..12).map(|i| i % 3 != 0).collect();
    check_grads(
        &[pred],
        move |t, v| t.masked_l2(v[0], &gt, &mask),
        1e-5,
    );
}

#[test]
fn affinity_and_propagation_grads() {
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    let raw = randn(&mut rng, &[8, 4, 4]);
    let h = randn(&mut rng, &[1, 4, 4]);
    check_grads(
        &[raw, h],
        |t, v| {
            let kappa = t.affinity_normalize(v[0]);
            let step1 = t.cspn_step(v[1], kappa, 3, 2);
            let step2 = t.cspn_step(step1, kappa, 3, 1);
            let s = t.sigmoid(step2);
            t.sum(s)
        },
        1e-4,
    );
}

#[test]
fn reinject_grads_and_values() {
    let mut rng = ChaCha8Rng::seed_from_u64(12);
    let h = randn(&mut rng, &[1, 3, 3]);
    let mut sparse = ArrayD::zeros(IxDyn(&[1, 3, 3]));
    sparse[[0, 1, 1]] = 4.5;
    sparse[[0, 2, 0]] = 2.0;
    {
        let mut t = Tape::new();
        let hv = t.leaf(h.clone());
        let out = t.reinject(hv, &sparse);
        assert_eq!(t.value(out)[[0, 1, 1]], 4.5);
        assert_eq!(t.value(out)[[0, 0, 0]], h[[0, 0, 0]]);
    }
    let sparse2 = sparse.clone();
    check_grads(
        &[h],
        move |t, v| {
            let r = t.reinject(v[0], &sparse2);
            let r = t.sigmoid(r);
            t.sum(r)
        },
        1e-5,
    );
}

#[test]
fn weighted_sum_grads() {
    let mut rng = ChaCha8Rng::seed_from_u64(13);
    let a = randn(&mut rng, &[2, 2, 2]);
    let b = randn(&mut rng, &[2, 2, 2]);
    check_grads(
        &[a, b],
        |t, v| {
            let sa = t.sum(v[0]);
            let sb = t.sum(v[1]);
            t.weighted_sum(&[(sa, 0.2), (sb, 1.0)])
        },
        1e-6,
    );
}

#[test]
fn param_binding_is_shared() {
    let mut store = ParamStore::new();
    let id = store.register("w", ArrayD::from_elem(IxDyn(&[2]), 3.0));
    let mut cx = Ctx::new(&store);
    let a = cx.param(id);
    let b = cx.param(id);
    assert_eq!(a, b);
    // loss = sum(w) + sum(w) => dL/dw = 2 everywhere
    let s1 = cx.tape.sum(a);
    let s2 = cx.tape.sum(b);
    let loss = cx.tape.weighted_sum(&[(s1, 1.0), (s2, 1.0)]);
    let grads = cx.tape.backward(loss);
    let pg = cx.param_grads(&grads);
    let g = pg[0].1.as_ref().unwrap();
    assert_eq!(g[[0]], 2.0);
    assert_eq!(g[[1]], 2.0);
}

#[test]
fn stencil_offset_order_is_row_major() {
    let o = stencil_offsets(3, 1);
    assert_eq!(
        o,
        vec![
            (-1, -1),
            (-1, 0),
            (-1, 1),
            (0, -1),
            (0, 1),
            (1, -1),
            (1, 0),
            (1, 1)
        ]
    );
    let o2 = stencil_offsets(3, 2);
    assert_eq!(o2[0], (-2, -2));
    assert_eq!(o2[7], (2, 2));
}
