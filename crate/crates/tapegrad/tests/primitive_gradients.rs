//! Finite-difference checks for every recorded primitive. Inputs are drawn
//! away from ReLU kinks so central differences are valid.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use tapegrad::{grad_check, GruParams, Tape, TensorId};

const EPS: f64 = 1e-5;
const TOL: f64 = 1e-6;

fn rand_vec(rng: &mut ChaCha8Rng, n: usize) -> Vec<f64> {
    (0..n)
        .map(|_| {
            // keep magnitudes in [0.15, 1.15] so relu/masks stay off kinks
            let v: f64 = rng.gen_range(0.15..1.15);
            if rng.gen_bool(0.5) {
                v
            } else {
                -v
            }
        })
        .collect()
}

/// Checks d(sum of some scalar reduction of op(x, fixed...))/dx for a
/// builder closure that maps a leaf to an output tensor.
fn check_unary(
    name: &str,
    shape: &[usize],
    build: impl Fn(&mut Tape, TensorId) -> TensorId,
    x0: &[f64],
) {
    let mut t = Tape::new();
    let leaf = t.leaf(shape, x0.to_vec(), true).unwrap();
    let out = build(&mut t, leaf);
    let sq = t.square(out);
    let s = t.sum_all(sq);
    t.backward(s).unwrap();
    let g = t.grad(leaf).expect("gradient missing").to_vec();
    let eval = |x: &[f64]| {
        let mut t = Tape::new();
        let leaf = t.leaf(shape, x.to_vec(), true).unwrap();
        let out = build(&mut t, leaf);
        let sq = t.square(out);
        let s = t.sum_all(sq);
        t.value(s)[0]
    };
    let report = grad_check(eval, &g, x0, EPS, TOL);
    assert!(
        report.pass,
        "{name}: max rel err {} at index {}",
        report.max_rel_err, report.worst_index
    );
}

#[test]
fn elementwise_ops() {
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    let x = rand_vec(&mut rng, 12);
    check_unary("relu", &[3, 4], |t, a| t.relu(a), &x);
    check_unary("sigmoid", &[3, 4], |t, a| t.sigmoid(a), &x);
    check_unary("tanh", &[3, 4], |t, a| t.tanh(a), &x);
    check_unary("square", &[3, 4], |t, a| t.square(a), &x);
    check_unary("scale", &[3, 4], |t, a| t.scale(a, -1.7), &x);
    check_unary("add_scalar", &[3, 4], |t, a| t.add_scalar(a, 0.9), &x);
}

#[test]
fn binary_ops_against_fixed_operand() {
    let mut rng = ChaCha8Rng::seed_from_u64(12);
    let x = rand_vec(&mut rng, 12);
    let w = rand_vec(&mut rng, 12);
    let wc = w.clone();
    check_unary(
        "add",
        &[3, 4],
        move |t, a| {
            let b = t.constant(&[3, 4], wc.clone()).unwrap();
            t.add(a, b).unwrap()
        },
        &x,
    );
    let wc = w.clone();
    check_unary(
        "sub",
        &[3, 4],
        move |t, a| {
            let b = t.constant(&[3, 4], wc.clone()).unwrap();
            t.sub(b, a).unwrap()
        },
        &x,
    );
    let wc = w.clone();
    check_unary(
        "mul",
        &[3, 4],
        move |t, a| {
            let b = t.constant(&[3, 4], wc.clone()).unwrap();
            t.mul(a, b).unwrap()
        },
        &x,
    );
}

#[test]
fn matmul_both_sides() {
    let mut rng = ChaCha8Rng::seed_from_u64(13);
    let a0 = rand_vec(&mut rng, 6);
    let b0 = rand_vec(&mut rng, 8);
    let bc = b0.clone();
    check_unary(
        "matmul_lhs",
        &[3, 2],
        move |t, a| {
            let b = t.constant(&[2, 4], bc.clone()).unwrap();
            t.matmul(a, b).unwrap()
        },
        &a0,
    );
    let ac = a0.clone();
    check_unary(
        "matmul_rhs",
        &[2, 4],
        move |t, b| {
            let a = t.constant(&[3, 2], ac.clone()).unwrap();
            t.matmul(a, b).unwrap()
        },
        &b0,
    );
    let bc = b0.clone();
    check_unary(
        "matmul_trans_b_lhs",
        &[3, 2],
        move |t, a| {
            let b = t.constant(&[4, 2], bc.clone()).unwrap();
            t.matmul_trans_b(a, b).unwrap()
        },
        &a0,
    );
    let ac = a0.clone();
    check_unary(
        "matmul_trans_b_rhs",
        &[4, 2],
        move |t, b| {
            let a = t.constant(&[3, 2], ac.clone()).unwrap();
            t.matmul_trans_b(a, b).unwrap()
        },
        &b0,
    );
}

#[test]
fn structural_ops() {
    let mut rng = ChaCha8Rng::seed_from_u64(14);
    let x = rand_vec(&mut rng, 12);
    check_unary("softmax_rows", &[3, 4], |t, a| t.softmax_rows(a).unwrap(), &x);
    check_unary(
        "masked_fill",
        &[3, 4],
        |t, a| {
            let mask: Vec<bool> = (0..12).map(|i| i % 3 == 0).collect();
            t.masked_fill(a, &mask, -5.0).unwrap()
        },
        &x,
    );
    check_unary(
        "slice_cols",
        &[3, 4],
        |t, a| t.slice_cols(a, 1, 2).unwrap(),
        &x,
    );
    check_unary(
        "gather_rows",
        &[3, 4],
        |t, a| t.gather_rows(a, &[2, 0, 0, 1]).unwrap(),
        &x,
    );
    check_unary("reshape", &[3, 4], |t, a| t.reshape(a, &[4, 3]).unwrap(), &x);
    check_unary("mean_rows", &[3, 4], |t, a| t.mean_rows(a).unwrap(), &x);
    check_unary("sum_all", &[3, 4], |t, a| t.sum_all(a), &x);
    let y = rand_vec(&mut rng, 4);
    check_unary("repeat_rows", &[4], |t, a| t.repeat_rows(a, 3).unwrap(), &y);
    let cc = rand_vec(&mut rng, 6);
    check_unary(
        "concat_cols",
        &[3, 4],
        move |t, a| {
            let b = t.constant(&[3, 2], cc.clone()).unwrap();
            t.concat_cols(a, b).unwrap()
        },
        &x,
    );
    check_unary(
        "stack_rows",
        &[3, 4],
        |t, a| {
            let r0 = t.slice_cols(a, 0, 4).unwrap();
            let r0 = t.reshape(r0, &[12 / 4 * 4]).unwrap();
            r0
        },
        &x,
    );
    let z = rand_vec(&mut rng, 4);
    check_unary(
        "add_row_bias",
        &[4],
        move |t, bias| {
            let m = t.constant(&[3, 4], vec![0.4; 12]).unwrap();
            t.add_row_bias(m, bias).unwrap()
        },
        &z,
    );
}

#[test]
fn norm_layers() {
    let mut rng = ChaCha8Rng::seed_from_u64(15);
    let x = rand_vec(&mut rng, 12);
    let gamma = rand_vec(&mut rng, 4);
    let beta = rand_vec(&mut rng, 4);
    let (g, b) = (gamma.clone(), beta.clone());
    check_unary(
        "layer_norm_x",
        &[3, 4],
        move |t, a| {
            let gm = t.constant(&[4], g.clone()).unwrap();
            let bt = t.constant(&[4], b.clone()).unwrap();
            t.layer_norm(a, gm, bt, 1e-5).unwrap()
        },
        &x,
    );
    let xc = x.clone();
    check_unary(
        "layer_norm_gamma",
        &[4],
        move |t, gm| {
            let a = t.constant(&[3, 4], xc.clone()).unwrap();
            let bt = t.constant(&[4], vec![0.1; 4]).unwrap();
            t.layer_norm(a, gm, bt, 1e-5).unwrap()
        },
        &gamma,
    );
    // batch norm, train mode, batch of 4 rows
    let xb = rand_vec(&mut rng, 4 * 3);
    let (g, b) = (vec![1.1, 0.9, 1.3], vec![0.1, -0.2, 0.05]);
    let (gc, bc) = (g.clone(), b.clone());
    check_unary(
        "batch_norm_train_x",
        &[4, 3],
        move |t, a| {
            let gm = t.constant(&[3], gc.clone()).unwrap();
            let bt = t.constant(&[3], bc.clone()).unwrap();
            t.batch_norm_train(a, gm, bt, 1e-5).unwrap().0
        },
        &xb,
    );
    let xbc = xb.clone();
    check_unary(
        "batch_norm_train_gamma",
        &[3],
        move |t, gm| {
            let a = t.constant(&[4, 3], xbc.clone()).unwrap();
            let bt = t.constant(&[3], vec![0.0; 3]).unwrap();
            t.batch_norm_train(a, gm, bt, 1e-5).unwrap().0
        },
        &g,
    );
    let (gc, bc) = (g.clone(), b.clone());
    check_unary(
        "batch_norm_eval_x",
        &[4, 3],
        move |t, a| {
            let gm = t.constant(&[3], gc.clone()).unwrap();
            let bt = t.constant(&[3], bc.clone()).unwrap();
            t.batch_norm_eval(a, gm, bt, &[0.2, -0.1, 0.4], &[1.3, 0.8, 2.0], 1e-5)
                .unwrap()
        },
        &xb,
    );
}

#[test]
fn gru_cell_all_inputs() {
    let mut rng = ChaCha8Rng::seed_from_u64(16);
    let d = 3;
    let weights: Vec<Vec<f64>> = (0..6).map(|_| rand_vec(&mut rng, d * d)).collect();
    let biases: Vec<Vec<f64>> = (0..3).map(|_| rand_vec(&mut rng, d)).collect();
    let h0 = rand_vec(&mut rng, 2 * d);
    let x0 = rand_vec(&mut rng, 2 * d);

    let build = |t: &mut Tape, h: TensorId, x: TensorId, ws: &[Vec<f64>], bs: &[Vec<f64>]| {
        let p = GruParams {
            w_update: t.constant(&[d, d], ws[0].clone()).unwrap(),
            u_update: t.constant(&[d, d], ws[1].clone()).unwrap(),
            b_update: t.constant(&[d], bs[0].clone()).unwrap(),
            w_reset: t.constant(&[d, d], ws[2].clone()).unwrap(),
            u_reset: t.constant(&[d, d], ws[3].clone()).unwrap(),
            b_reset: t.constant(&[d], bs[1].clone()).unwrap(),
            w_cand: t.constant(&[d, d], ws[4].clone()).unwrap(),
            u_cand: t.constant(&[d, d], ws[5].clone()).unwrap(),
            b_cand: t.constant(&[d], bs[2].clone()).unwrap(),
        };
        t.gru_cell(h, x, &p).unwrap()
    };

    // gradient w.r.t. the hidden state
    let (wc, bc, xc) = (weights.clone(), biases.clone(), x0.clone());
    check_unary(
        "gru_hidden",
        &[2, 3],
        move |t, h| {
            let x = t.constant(&[2, 3], xc.clone()).unwrap();
            build(t, h, x, &wc, &bc)
        },
        &h0,
    );
    // gradient w.r.t. the input
    let (wc, bc, hc) = (weights.clone(), biases.clone(), h0.clone());
    check_unary(
        "gru_input",
        &[2, 3],
        move |t, x| {
            let h = t.constant(&[2, 3], hc.clone()).unwrap();
            build(t, h, x, &wc, &bc)
        },
        &x0,
    );
}
