use super::grad_check::{finite_difference_gradient, max_relative_error};
use super::*;
use crate::rng;
use rand::Rng;

const FD_H: f64 = 1e-4;
const KERNEL_TOL: f64 = 1e-4;
const REL_FLOOR: f64 = 1e-6;

fn rand_vec(seed: u64, tag: u64, n: usize) -> Vec<f64> {
    let mut r = rng::derive(seed, &[999, tag]);
    (0..n).map(|_| r.gen_range(-1.0..1.0)).collect()
}

/// Gradient-check a graph builder against the finite-difference oracle at
/// five seeds. The output is contracted with a fixed random vector so the
/// whole Jacobian is exercised, not just its row sums.
fn check_grads(
    shapes: &[&[usize]],
    build: impl Fn(&mut Tape, &[TensorId]) -> TensorId,
    tol: f64,
) {
    for seed in 0..5u64 {
        let inputs: Vec<Vec<f64>> = shapes
            .iter()
            .enumerate()
            .map(|(i, s)| rand_vec(seed, i as u64, s.iter().product()))
            .collect();

        let mut tape = Tape::new();
        let ids: Vec<TensorId> = inputs
            .iter()
            .zip(shapes)
            .map(|(v, s)| tape.leaf(v.clone(), s, true).unwrap())
            .collect();
        let out = build(&mut tape, &ids);
        let contract = rand_vec(seed, 7777, tape.data(out).len());
        let w = tape.leaf(contract.clone(), tape.shape(out).to_vec().as_slice(), false).unwrap();
        let prod = tape.mul(out, w).unwrap();
        let loss = tape.sum_all(prod);
        tape.backward(loss).unwrap();

        for (which, shape) in shapes.iter().enumerate() {
            let analytic = tape
                .grad(ids[which])
                .expect("input should have received a gradient")
                .to_vec();
            let mut eval = |x: &[f64]| -> f64 {
                let mut t = Tape::new();
                let ids2: Vec<TensorId> = inputs
                    .iter()
                    .enumerate()
                    .map(|(i, v)| {
                        let data = if i == which { x.to_vec() } else { v.clone() };
                        t.leaf(data, shapes[i], false).unwrap()
                    })
                    .collect();
                let o = build(&mut t, &ids2);
                t.data(o)
                    .iter()
                    .zip(&contract)
                    .map(|(&a, &b)| a * b)
                    .sum()
            };
            let numeric = finite_difference_gradient(&mut eval, &inputs[which], FD_H);
            let err = max_relative_error(&analytic, &numeric, REL_FLOOR);
            assert!(
                err <= tol,
                "seed {} input {} shape {:?}: rel err {:.3e} > {:.1e}",
                seed,
                which,
                shape,
                err,
                tol
            );
        }
    }
}

// ── matmul ──────────────────────────────────────────────────────────────

#[test]
fn matmul_identity_preserves_matrix() {
    let mut t = Tape::new();
    let eye = t.leaf(vec![1.0, 0.0, 0.0, 1.0], &[2, 2], false).unwrap();
    let m = t.leaf(vec![3.0, -1.5, 0.25, 9.0], &[2, 2], false).unwrap();
    let out = t.matmul(eye, m).unwrap();
    assert_eq!(t.data(out), t.data(m));
}

#[test]
fn matmul_hand_case() {
    let mut t = Tape::new();
    let a = t.leaf(vec![1.0, 2.0, 3.0, 4.0], &[2, 2], false).unwrap();
    let b = t.leaf(vec![1.0, 1.0], &[2, 1], false).unwrap();
    let out = t.matmul(a, b).unwrap();
    assert_eq!(t.data(out), &[3.0, 7.0]);
}

#[test]
fn matmul_zeros_annihilate() {
    let mut t = Tape::new();
    let z = t.leaf(vec![0.0; 4], &[2, 2], false).unwrap();
    let m = t.leaf(vec![5.0, 6.0, 7.0, 8.0], &[2, 2], false).unwrap();
    let out = t.matmul(z, m).unwrap();
    assert!(t.data(out).iter().all(|&v| v == 0.0));
}

#[test]
fn matmul_shape_error_names_both_shapes() {
    let mut t = Tape::new();
    let a = t.leaf(vec![0.0; 6], &[2, 3], false).unwrap();
    let b = t.leaf(vec![0.0; 4], &[2, 2], false).unwrap();
    let err = t.matmul(a, b).unwrap_err();
    let msg = err.to_string();
    assert!(msg.contains("[2, 3]") && msg.contains("[2, 2]"), "{msg}");
}

// ── softmax ─────────────────────────────────────────────────────────────

#[test]
fn softmax_uniform_input_gives_uniform_output() {
    let mut t = Tape::new();
    let x = t.leaf(vec![0.7; 5], &[5], false).unwrap();
    let y = t.softmax(x, 0).unwrap();
    for &v in t.data(y) {
        assert!((v - 0.2).abs() < 1e-15);
    }
}

#[test]
fn softmax_hand_case() {
    let mut t = Tape::new();
    let x = t.leaf(vec![0.0, 2.0f64.ln()], &[2], false).unwrap();
    let y = t.softmax(x, 0).unwrap();
    assert!((t.data(y)[0] - 1.0 / 3.0).abs() < 1e-15);
    assert!((t.data(y)[1] - 2.0 / 3.0).abs() < 1e-15);
}

#[test]
fn softmax_shift_invariance() {
    let base = rand_vec(3, 0, 8);
    let mut t = Tape::new();
    let x = t.leaf(base.clone(), &[8], false).unwrap();
    let y1 = t.softmax(x, 0).unwrap();
    let shifted: Vec<f64> = base.iter().map(|&v| v + 13.25).collect();
    let xs = t.leaf(shifted, &[8], false).unwrap();
    let y2 = t.softmax(xs, 0).unwrap();
    for (a, b) in t.data(y1).iter().zip(t.data(y2)) {
        assert!((a - b).abs() < 1e-12);
    }
}

#[test]
fn softmax_rows_sum_to_one_for_large_inputs() {
    for seed in 0..10u64 {
        let mut r = rng::derive(seed, &[4242]);
        let x: Vec<f64> = (0..6 * 9).map(|_| r.gen_range(-50.0..50.0)).collect();
        let mut t = Tape::new();
        let id = t.leaf(x, &[6, 9], false).unwrap();
        let y = t.softmax(id, 1).unwrap();
        for row in 0..6 {
            let s: f64 = t.data(y)[row * 9..(row + 1) * 9].iter().sum();
            assert!((s - 1.0).abs() <= 1e-9);
        }
    }
}

// ── layer norm ──────────────────────────────────────────────────────────

#[test]
fn layer_norm_constant_token_is_zero() {
    let mut t = Tape::new();
    let x = t.leaf(vec![4.2; 6], &[1, 6], false).unwrap();
    let g = t.leaf(vec![1.0; 6], &[6], false).unwrap();
    let b = t.leaf(vec![0.0; 6], &[6], false).unwrap();
    let y = t.layer_norm(x, g, b, 1e-6).unwrap();
    assert!(t.data(y).iter().all(|&v| v.abs() < 1e-9));
}

#[test]
fn layer_norm_moments_match_affine() {
    let x = rand_vec(1, 0, 2 * 16);
    let mut t = Tape::new();
    let id = t.leaf(x, &[2, 16], false).unwrap();
    let g = t.leaf(vec![1.7; 16], &[16], false).unwrap();
    let b = t.leaf(vec![-0.4; 16], &[16], false).unwrap();
    let y = t.layer_norm(id, g, b, 1e-6).unwrap();
    for row in 0..2 {
        let vals = &t.data(y)[row * 16..(row + 1) * 16];
        let mean = vals.iter().sum::<f64>() / 16.0;
        let std = (vals.iter().map(|&v| (v - mean) * (v - mean)).sum::<f64>() / 16.0).sqrt();
        assert!((mean + 0.4).abs() < 1e-9);
        assert!((std - 1.7).abs() < 1e-4);
    }
}

#[test]
fn layer_norm_gradient_matches_finite_difference_tightly() {
    // Dedicated 1e-5 tolerance case.
    let x = rand_vec(2, 0, 3 * 8);
    let gamma = rand_vec(2, 1, 8);
    let beta = rand_vec(2, 2, 8);
    let mut t = Tape::new();
    let id = t.leaf(x.clone(), &[3, 8], true).unwrap();
    let g = t.leaf(gamma.clone(), &[8], false).unwrap();
    let b = t.leaf(beta.clone(), &[8], false).unwrap();
    let y = t.layer_norm(id, g, b, 1e-6).unwrap();
    let contract = rand_vec(2, 3, 24);
    let w = t.leaf(contract.clone(), &[3, 8], false).unwrap();
    let p = t.mul(y, w).unwrap();
    let loss = t.sum_all(p);
    t.backward(loss).unwrap();
    let analytic = t.grad(id).unwrap().to_vec();
    let numeric = finite_difference_gradient(
        &mut |v| {
            let mut t2 = Tape::new();
            let id2 = t2.leaf(v.to_vec(), &[3, 8], false).unwrap();
            let g2 = t2.leaf(gamma.clone(), &[8], false).unwrap();
            let b2 = t2.leaf(beta.clone(), &[8], false).unwrap();
            let y2 = t2.layer_norm(id2, g2, b2, 1e-6).unwrap();
            t2.data(y2).iter().zip(&contract).map(|(&a, &c)| a * c).sum()
        },
        &x,
        FD_H,
    );
    assert!(max_relative_error(&analytic, &numeric, REL_FLOOR) <= 1e-5);
}

// ── cosine similarity ───────────────────────────────────────────────────

#[test]
fn cosine_self_and_antipodal() {
    let v = rand_vec(4, 0, 7);
    let mut t = Tape::new();
    let a = t.leaf(v.clone(), &[7], false).unwrap();
    let neg: Vec<f64> = v.iter().map(|&x| -x).collect();
    let b = t.leaf(neg, &[7], false).unwrap();
    let same = t.cosine_similarity(a, a, 1e-8).unwrap();
    let anti = t.cosine_similarity(a, b, 1e-8).unwrap();
    assert!((t.value(same) - 1.0).abs() < 1e-12);
    assert!((t.value(anti) + 1.0).abs() < 1e-12);
}

#[test]
fn cosine_hand_case() {
    let mut t = Tape::new();
    let a = t.leaf(vec![1.0, 0.0], &[2], false).unwrap();
    let b = t.leaf(vec![1.0, 1.0], &[2], false).unwrap();
    let s = t.cosine_similarity(a, b, 1e-8).unwrap();
    assert!((t.value(s) - 1.0 / 2.0f64.sqrt()).abs() < 1e-15);
}

#[test]
fn cosine_zero_vector_yields_zero() {
    let mut t = Tape::new();
    let a = t.leaf(vec![0.0, 0.0], &[2], false).unwrap();
    let b = t.leaf(vec![3.0, 4.0], &[2], false).unwrap();
    let s = t.cosine_similarity(a, b, 1e-8).unwrap();
    assert_eq!(t.value(s), 0.0);
}

// ── gradient checks, one per kernel ─────────────────────────────────────

#[test]
fn grad_matmul() {
    check_grads(&[&[3, 4], &[4, 2]], |t, ids| t.matmul(ids[0], ids[1]).unwrap(), KERNEL_TOL);
}

#[test]
fn grad_transpose() {
    check_grads(&[&[3, 5]], |t, ids| t.transpose(ids[0]).unwrap(), KERNEL_TOL);
}

#[test]
fn grad_add_sub_mul() {
    check_grads(&[&[2, 3], &[2, 3]], |t, ids| t.add(ids[0], ids[1]).unwrap(), KERNEL_TOL);
    check_grads(&[&[2, 3], &[2, 3]], |t, ids| t.sub(ids[0], ids[1]).unwrap(), KERNEL_TOL);
    check_grads(&[&[2, 3], &[2, 3]], |t, ids| t.mul(ids[0], ids[1]).unwrap(), KERNEL_TOL);
}

#[test]
fn grad_scale_add_scalar_bias() {
    check_grads(&[&[7]], |t, ids| t.scale(ids[0], -2.25), KERNEL_TOL);
    check_grads(&[&[7]], |t, ids| t.add_scalar(ids[0], 0.75), KERNEL_TOL);
    check_grads(&[&[4, 3], &[3]], |t, ids| t.add_bias(ids[0], ids[1]).unwrap(), KERNEL_TOL);
}

#[test]
fn grad_unary_activations() {
    // Inputs away from the relu kink by construction of rand_vec ranges.
    check_grads(&[&[9]], |t, ids| t.relu(ids[0]), KERNEL_TOL);
    check_grads(&[&[9]], |t, ids| t.gelu(ids[0]), KERNEL_TOL);
    check_grads(&[&[9]], |t, ids| t.sigmoid(ids[0]), KERNEL_TOL);
    check_grads(&[&[9]], |t, ids| t.exp(ids[0]), KERNEL_TOL);
    check_grads(&[&[9]], |t, ids| {
        let shifted = t.add_scalar(ids[0], 3.0); // keep log argument positive
        t.log(shifted)
    }, KERNEL_TOL);
    check_grads(&[&[9]], |t, ids| t.clamp(ids[0], -0.9, 0.9), KERNEL_TOL);
}

#[test]
fn grad_softmax_all_axes() {
    check_grads(&[&[6]], |t, ids| t.softmax(ids[0], 0).unwrap(), KERNEL_TOL);
    check_grads(&[&[3, 5]], |t, ids| t.softmax(ids[0], 1).unwrap(), KERNEL_TOL);
    check_grads(&[&[3, 5]], |t, ids| t.softmax(ids[0], 0).unwrap(), KERNEL_TOL);
}

#[test]
fn grad_layer_norm_all_inputs() {
    check_grads(
        &[&[3, 6], &[6], &[6]],
        |t, ids| t.layer_norm(ids[0], ids[1], ids[2], 1e-6).unwrap(),
        KERNEL_TOL,
    );
}

#[test]
fn grad_reductions() {
    check_grads(&[&[3, 4]], |t, ids| t.sum_all(ids[0]), KERNEL_TOL);
    check_grads(&[&[3, 4]], |t, ids| t.mean_all(ids[0]), KERNEL_TOL);
    check_grads(&[&[3, 4]], |t, ids| t.sum_axis(ids[0], 0).unwrap(), KERNEL_TOL);
    check_grads(&[&[3, 4]], |t, ids| t.sum_axis(ids[0], 1).unwrap(), KERNEL_TOL);
    check_grads(&[&[3, 4]], |t, ids| t.mean_axis(ids[0], 0).unwrap(), KERNEL_TOL);
    check_grads(&[&[3, 4]], |t, ids| t.mean_axis(ids[0], 1).unwrap(), KERNEL_TOL);
}

#[test]
fn grad_shape_ops() {
    check_grads(&[&[2, 3], &[4, 3]], |t, ids| t.concat(&[ids[0], ids[1]], 0).unwrap(), KERNEL_TOL);
    check_grads(&[&[3, 2], &[3, 4]], |t, ids| t.concat(&[ids[0], ids[1]], 1).unwrap(), KERNEL_TOL);
    check_grads(&[&[5, 3]], |t, ids| t.slice(ids[0], 0, 1, 3).unwrap(), KERNEL_TOL);
    check_grads(&[&[3, 5]], |t, ids| t.slice(ids[0], 1, 2, 2).unwrap(), KERNEL_TOL);
    check_grads(&[&[3, 4]], |t, ids| t.reshape(ids[0], &[2, 6]).unwrap(), KERNEL_TOL);
    check_grads(&[&[5]], |t, ids| t.repeat_rows(ids[0], 3).unwrap(), KERNEL_TOL);
    check_grads(&[&[6, 4]], |t, ids| t.mean_rows_masked(ids[0], &[0, 2, 5]).unwrap(), KERNEL_TOL);
}

#[test]
fn grad_spatial_ops() {
    check_grads(&[&[3, 4, 2]], |t, ids| t.bilinear_resize(ids[0], 6, 8).unwrap(), KERNEL_TOL);
    check_grads(&[&[3, 4, 2]], |t, ids| t.bilinear_resize(ids[0], 2, 3).unwrap(), KERNEL_TOL);
    check_grads(
        &[&[2, 3, 4], &[4, 5], &[5]],
        |t, ids| t.pointwise_conv(ids[0], ids[1], ids[2]).unwrap(),
        KERNEL_TOL,
    );
    check_grads(
        &[&[2, 2, 3], &[4, 3, 2], &[2]],
        |t, ids| t.transposed_conv_2x2(ids[0], ids[1], ids[2]).unwrap(),
        KERNEL_TOL,
    );
}

#[test]
fn grad_cosine_similarity() {
    check_grads(
        &[&[6], &[6]],
        |t, ids| t.cosine_similarity(ids[0], ids[1], 1e-8).unwrap(),
        KERNEL_TOL,
    );
}

#[test]
fn grad_fg_prob_map() {
    check_grads(
        &[&[5, 4], &[4], &[4], &[4]],
        |t, ids| t.fg_prob_map(ids[0], ids[1], &[ids[2], ids[3]], 0.5, 1e-8).unwrap(),
        KERNEL_TOL,
    );
    // Degenerate path without background proxies.
    check_grads(
        &[&[5, 4], &[4]],
        |t, ids| t.fg_prob_map(ids[0], ids[1], &[], 0.5, 1e-8).unwrap(),
        KERNEL_TOL,
    );
}

#[test]
fn grad_pairwise_bce() {
    let yq = vec![1, 0, 1, 0];
    let ys = vec![vec![1, 1, 0, 0]];
    let mut pairs = Vec::new();
    for i in 0..4u32 {
        for j in 0..4u32 {
            if yq[i as usize] + ys[0][j as usize] >= 1 {
                pairs.push((0u32, i, j));
            }
        }
    }
    check_grads(
        &[&[4, 3], &[4, 3]],
        move |t, ids| {
            t.pairwise_bce(
                ids[0],
                &[ids[1]],
                yq.clone(),
                ys.clone(),
                0.5,
                1e-8,
                pairs.clone(),
            )
            .unwrap()
        },
        KERNEL_TOL,
    );
}

#[test]
fn grad_three_op_composition_within_relaxed_tolerance() {
    // matmul -> gelu -> layer_norm -> mean, a representative deep chain.
    check_grads(
        &[&[4, 6], &[6, 6], &[6], &[6]],
        |t, ids| {
            let h = t.matmul(ids[0], ids[1]).unwrap();
            let a = t.gelu(h);
            let n = t.layer_norm(a, ids[2], ids[3], 1e-6).unwrap();
            t.mean_all(n)
        },
        1e-3,
    );
}

// ── structural invariants ───────────────────────────────────────────────

#[test]
fn fanout_accumulates_gradients() {
    // x feeds two consumers; d(x*x + 3x)/dx = 2x + 3.
    let x = vec![0.8, -1.1, 2.0];
    let mut t = Tape::new();
    let id = t.leaf(x.clone(), &[3], true).unwrap();
    let sq = t.mul(id, id).unwrap();
    let tr = t.scale(id, 3.0);
    let s = t.add(sq, tr).unwrap();
    let loss = t.sum_all(s);
    t.backward(loss).unwrap();
    let analytic = t.grad(id).unwrap().to_vec();
    let numeric = finite_difference_gradient(
        &mut |v| v.iter().map(|&a| a * a + 3.0 * a).sum(),
        &x,
        FD_H,
    );
    assert!(max_relative_error(&analytic, &numeric, REL_FLOOR) <= KERNEL_TOL);
    for (g, xi) in analytic.iter().zip(&x) {
        assert!((g - (2.0 * xi + 3.0)).abs() < 1e-9);
    }
}

#[test]
fn replay_is_bitwise_deterministic() {
    let run = || -> (Vec<f64>, Vec<f64>) {
        let x = rand_vec(11, 0, 12);
        let w = rand_vec(11, 1, 12);
        let mut t = Tape::new();
        let a = t.leaf(x, &[3, 4], true).unwrap();
        let b = t.leaf(w, &[4, 3], true).unwrap();
        let m = t.matmul(a, b).unwrap();
        let act = t.gelu(m);
        let loss = t.mean_all(act);
        t.backward(loss).unwrap();
        (t.data(loss).to_vec(), t.grad(a).unwrap().to_vec())
    };
    let (l1, g1) = run();
    let (l2, g2) = run();
    assert_eq!(l1[0].to_bits(), l2[0].to_bits());
    for (a, b) in g1.iter().zip(&g2) {
        assert_eq!(a.to_bits(), b.to_bits());
    }
}

#[test]
fn grad_absent_for_non_participating_tensors() {
    let mut t = Tape::new();
    let a = t.leaf(vec![1.0, 2.0], &[2], true).unwrap();
    let unused = t.leaf(vec![3.0], &[1], true).unwrap();
    let frozen = t.leaf(vec![4.0, 5.0], &[2], false).unwrap();
    let m = t.mul(a, frozen).unwrap();
    let loss = t.sum_all(m);
    t.backward(loss).unwrap();
    assert!(t.grad(a).is_some());
    assert!(t.grad(unused).is_none());
    assert!(t.grad(frozen).is_none());
}

#[test]
fn leaf_rejects_inconsistent_shape() {
    let mut t = Tape::new();
    assert!(t.leaf(vec![1.0, 2.0, 3.0], &[2, 2], false).is_err());
}

#[test]
fn split_roundtrips_concat() {
    let x = rand_vec(5, 0, 4 * 6);
    let mut t = Tape::new();
    let id = t.leaf(x.clone(), &[4, 6], false).unwrap();
    let parts = t.split(id, 1, &[2, 3, 1]).unwrap();
    let back = t.concat(&parts, 1).unwrap();
    assert_eq!(t.data(back), &x[..]);
}
