use std::sync::Arc;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha20Rng;

use super::*;

fn rng(seed: u64) -> ChaCha20Rng {
    ChaCha20Rng::seed_from_u64(seed)
}

fn rand_tensor(rng: &mut ChaCha20Rng, rows: usize, cols: usize) -> Tensor {
    Tensor::uniform(rng, rows, cols, -1.5, 1.5)
}

#[test]
fn softmax_single_unmasked_key() {
    let tape = Tape::new();
    let x = tape.constant(&Tensor::row(&[1.0, 1.0]));
    let mask = Arc::new(vec![0.0, NEG_INF]);
    let y = tape.softmax_rows_masked(x, Some(mask));
    assert_eq!(tape.value(y).data(), &[1.0, 0.0]);
}

#[test]
fn softmax_fully_masked_row_is_zero() {
    let tape = Tape::new();
    let x = tape.constant(&Tensor::row(&[2.0, 3.0]));
    let mask = Arc::new(vec![NEG_INF, NEG_INF]);
    let y = tape.softmax_rows_masked(x, Some(mask));
    assert_eq!(tape.value(y).data(), &[0.0, 0.0]);
}

#[test]
fn softmax_unmasked_rows_sum_to_one() {
    let mut r = rng(7);
    for _ in 0..50 {
        let m = r.random_range(1..6);
        let n = r.random_range(1..7);
        let x = rand_tensor(&mut r, m, n);
        // random mask, guaranteeing one unmasked entry per row
        let mut mask = vec![0.0; m * n];
        for i in 0..m {
            for j in 0..n {
                if r.random::<f64>() < 0.4 {
                    mask[i * n + j] = NEG_INF;
                }
            }
            let keep = r.random_range(0..n);
            mask[i * n + keep] = 0.0;
        }
        let tape = Tape::new();
        let xv = tape.constant(&x);
        let y = tape.softmax_rows_masked(xv, Some(Arc::new(mask.clone())));
        let yv = tape.value(y);
        for i in 0..m {
            let sum: Scalar = (0..n).map(|j| yv.get(i, j)).sum();
            assert!((sum - 1.0).abs() < 1e-9, "row sum {sum}");
            for j in 0..n {
                if mask[i * n + j] <= NEG_INF {
                    assert_eq!(yv.get(i, j), 0.0);
                }
            }
        }
    }
}

#[test]
fn softplus_at_zero_is_ln_two() {
    let tape = Tape::new();
    let x = tape.constant(&Tensor::scalar(0.0));
    let y = tape.softplus(x);
    assert!((tape.value_scalar(y) - std::f64::consts::LN_2 as Scalar).abs() < 1e-12);
}

#[test]
fn layer_norm_constant_row_is_zero() {
    let tape = Tape::new();
    let x = tape.constant(&Tensor::row(&[3.5, 3.5, 3.5, 3.5]));
    let gain = tape.constant(&Tensor::row(&[1.0; 4]));
    let bias = tape.constant(&Tensor::row(&[0.0; 4]));
    let y = tape.layer_norm(x, gain, bias);
    for &v in tape.value(y).data() {
        assert_eq!(v, 0.0);
    }
}

#[test]
fn backward_square_sum() {
    let tape = Tape::new();
    let x = tape.input(&Tensor::scalar(3.0));
    let loss = tape.sum_all(tape.mul(x, x));
    tape.backward(loss);
    assert_eq!(tape.grad_of(x).unwrap().data(), &[6.0]);
}

#[test]
fn backward_linear_map() {
    let tape = Tape::new();
    let a = tape.input(&Tensor::row(&[1.0, 2.0]));
    let b = tape.constant(&Tensor::column(&[4.0, 5.0]));
    let loss = tape.sum_all(tape.matmul(a, b));
    tape.backward(loss);
    assert_eq!(tape.grad_of(a).unwrap().data(), &[4.0, 5.0]);
}

#[test]
fn masked_attention_toy_masked_score_grad_is_zero() {
    // 1 query, 2 keys, second key masked: the masked score must get exactly
    // zero gradient, and the unmasked path must match finite differences.
    let scores = Tensor::row(&[0.3, -0.7]);
    let values = Tensor::new(2, 1, vec![1.0, -2.0]);
    let mask = Arc::new(vec![0.0, NEG_INF]);
    let f = |tape: &Tape, vars: &[Var]| {
        let att = tape.softmax_rows_masked(vars[0], Some(Arc::clone(&mask)));
        let v = tape.constant(&values);
        tape.sum_all(tape.matmul(att, v))
    };
    let tape = Tape::new();
    let s = tape.input(&scores);
    let loss = f(&tape, &[s]);
    tape.backward(loss);
    let g = tape.grad_of(s).unwrap();
    assert_eq!(g.get(0, 1), 0.0, "masked score gradient must be exactly 0");
    let err = grad_check(f, &[scores], 1e-5);
    assert!(err < 1e-6, "max rel err {err}");
}

#[test]
fn grad_check_square_sum_small_error() {
    let mut r = rng(11);
    let x = rand_tensor(&mut r, 3, 3);
    let err = grad_check(
        |tape, vars| tape.sum_all(tape.mul(vars[0], vars[0])),
        &[x],
        1e-5,
    );
    assert!(err < 1e-6, "max rel err {err}");
}

#[test]
fn gradient_accumulates_across_uses() {
    let tape = Tape::new();
    let x = tape.input(&Tensor::row(&[2.0, -1.0]));
    let loss = tape.sum_all(tape.add(x, x));
    tape.backward(loss);
    assert_eq!(tape.grad_of(x).unwrap().data(), &[2.0, 2.0]);
}

#[test]
#[should_panic(expected = "backward called twice")]
fn backward_twice_panics() {
    let tape = Tape::new();
    let x = tape.input(&Tensor::scalar(1.0));
    let loss = tape.sum_all(x);
    tape.backward(loss);
    tape.backward(loss);
}

#[test]
#[should_panic(expected = "2x3 and 2x2")]
fn shape_mismatch_names_both_shapes() {
    let tape = Tape::new();
    let a = tape.constant(&Tensor::zeros(2, 3));
    let b = tape.constant(&Tensor::zeros(2, 2));
    tape.matmul(a, b);
}

#[test]
#[should_panic(expected = "non-finite")]
fn non_finite_production_panics() {
    let tape = Tape::new();
    let x = tape.constant(&Tensor::scalar(0.0));
    tape.log(x); // ln(0) = -inf
}

#[test]
fn dropout_p_zero_is_identity() {
    let mut r = rng(3);
    let x = rand_tensor(&mut r, 4, 5);
    let tape = Tape::new();
    let xv = tape.input(&x);
    let y = tape.dropout(xv, 0.0, &mut r);
    assert_eq!(tape.value(y).data(), x.data());
}

#[test]
fn dropout_train_mode_preserves_expectation() {
    let mut r = rng(5);
    let p: Scalar = 0.6;
    let n = 10_000;
    let x = Tensor::new(1, n, vec![1.0; n]);
    let tape = Tape::new();
    let xv = tape.constant(&x);
    let y = tape.dropout(xv, p, &mut r);
    let mean: Scalar = tape.value(y).data().iter().sum::<Scalar>() / n as Scalar;
    assert!(
        (mean - 1.0).abs() < 0.02,
        "inverted dropout mean {mean} drifted beyond 2%"
    );
}

/// Per-primitive randomized finite-difference checks: 50 trials each on
/// random shapes, relative error under 1e-4.
#[test]
fn primitive_gradients_match_finite_differences() {
    let mut r = rng(1234);
    let trials = 50;
    let tol: Scalar = 1e-4;

    for t in 0..trials {
        let m = r.random_range(1..5);
        let k = r.random_range(1..5);
        let n = r.random_range(1..5);

        // matmul
        let a = rand_tensor(&mut r, m, k);
        let b = rand_tensor(&mut r, k, n);
        let err = grad_check(
            |tape, v| tape.sum_all(tape.matmul(v[0], v[1])),
            &[a, b],
            1e-5,
        );
        assert!(err < tol, "matmul trial {t}: {err}");

        // add / mul / scale / add_row
        let a = rand_tensor(&mut r, m, n);
        let b = rand_tensor(&mut r, m, n);
        let row = rand_tensor(&mut r, 1, n);
        let err = grad_check(
            |tape, v| {
                let s = tape.add(v[0], v[1]);
                let p = tape.mul(s, v[0]);
                let sc = tape.scale(p, 0.7);
                tape.sum_all(tape.add_row(sc, v[2]))
            },
            &[a, b, row],
            1e-5,
        );
        assert!(err < tol, "add/mul/scale/add_row trial {t}: {err}");

        // transpose + concat + slices
        let a = rand_tensor(&mut r, m, n);
        let b = rand_tensor(&mut r, m, k);
        let err = grad_check(
            |tape, v| {
                let cat = tape.concat_cols(&[v[0], v[1]]);
                let sl = tape.slice_cols(cat, 0, n);
                let sr = tape.slice_rows(sl, 0, 1);
                let tr = tape.transpose(sr);
                tape.sum_all(tape.mul(tr, tr))
            },
            &[a, b],
            1e-5,
        );
        assert!(err < tol, "reshape ops trial {t}: {err}");

        // masked softmax (row 0 keeps at least one entry)
        let x = rand_tensor(&mut r, m, n.max(2));
        let nn = x.cols();
        let mut mask = vec![0.0; m * nn];
        for (idx, slot) in mask.iter_mut().enumerate() {
            if idx % nn != 0 && r.random::<f64>() < 0.35 {
                *slot = NEG_INF;
            }
        }
        let mask = Arc::new(mask);
        let w = rand_tensor(&mut r, m, nn);
        let err = grad_check(
            |tape, v| {
                let sm = tape.softmax_rows_masked(v[0], Some(Arc::clone(&mask)));
                tape.sum_all(tape.mul(sm, v[1]))
            },
            &[x, w],
            1e-5,
        );
        assert!(err < tol, "softmax trial {t}: {err}");

        // layer norm (keep rows non-constant by construction of rand)
        let x = rand_tensor(&mut r, m, n.max(2));
        let gain = rand_tensor(&mut r, 1, x.cols());
        let bias = rand_tensor(&mut r, 1, x.cols());
        let w = rand_tensor(&mut r, m, x.cols());
        let err = grad_check(
            |tape, v| {
                let y = tape.layer_norm(v[0], v[1], v[2]);
                tape.sum_all(tape.mul(y, v[3]))
            },
            &[x, gain, bias, w],
            1e-5,
        );
        assert!(err < tol, "layer_norm trial {t}: {err}");

        // relu / prelu / softplus / log(softplus) / exp
        // keep entries away from the piecewise kink at 0, where central
        // differences straddle two slopes
        let x = Tensor::from_fn(m, n, |_, _| {
            let mag = 0.1 + 1.4 * r.random::<Scalar>();
            if r.random::<bool>() {
                mag
            } else {
                -mag
            }
        });
        let slope = Tensor::scalar(0.25 + 0.5 * r.random::<Scalar>());
        let err = grad_check(
            |tape, v| {
                let rl = tape.relu(v[0]);
                let pr = tape.prelu(v[0], v[1]);
                let sp = tape.softplus(tape.add(rl, pr));
                let lg = tape.log(sp);
                let ex = tape.exp(lg);
                tape.mean_all(ex)
            },
            &[x, slope],
            1e-5,
        );
        assert!(err < tol, "activation trial {t}: {err}");

        // fused multi-head attention vs finite differences, random mask
        // guaranteeing one open key per query row
        let heads = [1usize, 2][r.random_range(0..2)];
        let width = heads * r.random_range(1..4);
        let mq = r.random_range(1..5);
        let mk = r.random_range(1..5);
        let q = rand_tensor(&mut r, mq, width);
        let kk = rand_tensor(&mut r, mk, width);
        let vv = rand_tensor(&mut r, mk, width);
        let mut mask = vec![0.0; mq * mk];
        for i in 0..mq {
            for j in 0..mk {
                if r.random::<f64>() < 0.35 {
                    mask[i * mk + j] = NEG_INF;
                }
            }
            mask[i * mk + r.random_range(0..mk)] = 0.0;
        }
        let mask = Arc::new(mask);
        let probe = rand_tensor(&mut r, mq, width);
        let err = grad_check(
            |tape, v| {
                let att = tape.multi_head_attention(
                    v[0],
                    v[1],
                    v[2],
                    heads,
                    0.7,
                    Some(Arc::clone(&mask)),
                );
                tape.sum_all(tape.mul(att, v[3]))
            },
            &[q, kk, vv, probe],
            1e-5,
        );
        assert!(err < tol, "fused attention trial {t}: {err}");

        // gather + logsumexp
        let table = rand_tensor(&mut r, 5, n);
        let idx: Vec<u32> = (0..m).map(|_| r.random_range(0..5) as u32).collect();
        let idx2 = idx.clone();
        let err = grad_check(
            |tape, v| {
                let g = tape.gather_rows(v[0], &idx2);
                tape.sum_all(tape.logsumexp_row(g))
            },
            &[table],
            1e-5,
        );
        assert!(err < tol, "gather/logsumexp trial {t}: {err}");
        let _ = idx;
    }
}

#[test]
fn gather_accumulates_duplicate_rows() {
    let tape = Tape::new();
    let table = tape.input(&Tensor::new(2, 2, vec![1.0, 2.0, 3.0, 4.0]));
    let g = tape.gather_rows(table, &[0, 0, 1]);
    let loss = tape.sum_all(g);
    tape.backward(loss);
    let grad = tape.grad_of(table).unwrap();
    assert_eq!(grad.data(), &[2.0, 2.0, 1.0, 1.0]);
}

#[test]
fn logsumexp_matches_direct_evaluation() {
    let tape = Tape::new();
    let x = tape.constant(&Tensor::row(&[1.0, 0.0, 0.0, 0.0, 0.0, 0.0]));
    let y = tape.logsumexp_row(x);
    let direct = (1.0f64.exp() + 5.0).ln() as Scalar;
    assert!((tape.value_scalar(y) - direct).abs() < 1e-12);
}
