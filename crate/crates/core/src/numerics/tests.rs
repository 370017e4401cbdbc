use std::sync::Arc;

use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::gradcheck;
use super::*;
use crate::model::AttentionMask;

fn randn(rng: &mut ChaCha8Rng, n: usize) -> Vec<f64> {
    (0..n).map(|_| rng.random_range(-1.0..1.0)).collect()
}

/// Builds `Σ w ⊙ op(inputs)` so that every output adjoint is exercised.
fn weighted_scalar(tape: &mut Tape<f64>, out: Var, weights: &[f64]) -> Var {
    let shape = tape.shape(out).to_vec();
    let w = tape.constant(shape, weights.to_vec()).unwrap();
    let p = tape.mul(out, w).unwrap();
    tape.sum(p)
}

/// Checks gradients of every input of a multi-input op against central
/// differences at `tol`.
fn check_op(shapes: &[Vec<usize>], seed: u64, tol: f64, op: impl Fn(&mut Tape<f64>, &[Var]) -> Var) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let inputs: Vec<Vec<f64>> = shapes.iter().map(|s| randn(&mut rng, s.iter().product())).collect();
    let out_len = {
        let mut tape = Tape::new();
        let vars: Vec<Var> = shapes
            .iter()
            .zip(&inputs)
            .map(|(s, x)| tape.constant(s.clone(), x.clone()).unwrap())
            .collect();
        let out = op(&mut tape, &vars);
        tape.value(out).len()
    };
    let weights = randn(&mut rng, out_len);
    let eval = |xs: &[Vec<f64>], grad: bool| -> (f64, Vec<Vec<f64>>) {
        let mut tape = Tape::new();
        let vars: Vec<Var> = shapes
            .iter()
            .zip(xs)
            .map(|(s, x)| {
                let t = Tensor::new(s.clone(), x.clone()).unwrap();
                tape.leaf(&if grad { t.with_grad() } else { t })
            })
            .collect();
        let out = op(&mut tape, &vars);
        let loss = weighted_scalar(&mut tape, out, &weights);
        let value = tape.scalar(loss);
        if !grad {
            return (value, Vec::new());
        }
        let g = tape.backward(loss).unwrap();
        (value, vars.iter().zip(xs).map(|(&v, x)| g.get(v).map(|s| s.to_vec()).unwrap_or(vec![0.0; x.len()])).collect())
    };
    let (_, analytic) = eval(&inputs, true);
    for k in 0..inputs.len() {
        let res = gradcheck::check(&inputs[k], &analytic[k], 1e-5, 1e-8, 0..inputs[k].len(), |x| {
            let mut xs = inputs.clone();
            xs[k] = x.to_vec();
            eval(&xs, false).0
        });
        assert!(res.passes(tol), "input {k}: {res:?}");
    }
}

#[test]
fn matmul_identity_and_small_cases() {
    let mut tape = Tape::<f64>::new();
    let a = tape.constant(vec![2, 2], vec![1.0, 0.0, 0.0, 1.0]).unwrap();
    let b = tape.constant(vec![2, 2], vec![3.0, 4.0, 5.0, 6.0]).unwrap();
    let c = tape.matmul(a, b).unwrap();
    assert_eq!(tape.value(c), &[3.0, 4.0, 5.0, 6.0]);

    let a = tape.constant(vec![1, 2], vec![1.0, 2.0]).unwrap();
    let b = tape.constant(vec![2, 1], vec![3.0, 4.0]).unwrap();
    let c = tape.matmul(a, b).unwrap();
    assert_eq!(tape.value(c), &[11.0]);
}

#[test]
fn matmul_shape_mismatch_is_dimension_error() {
    let mut tape = Tape::<f32>::new();
    let a = tape.constant(vec![2, 3], vec![0.0; 6]).unwrap();
    let b = tape.constant(vec![2, 3], vec![0.0; 6]).unwrap();
    assert!(matches!(tape.matmul(a, b), Err(NumericsError::Dimension { .. })));
}

#[test]
fn matmul_sum_gradient_matches_finite_difference() {
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    let a = randn(&mut rng, 20);
    let b = randn(&mut rng, 15);
    let f = |av: &[f64], grad: bool| {
        let mut tape = Tape::new();
        let ta = Tensor::new(vec![4, 5], av.to_vec()).unwrap();
        let va = tape.leaf(&if grad { ta.with_grad() } else { ta });
        let vb = tape.constant(vec![5, 3], b.clone()).unwrap();
        let c = tape.matmul(va, vb).unwrap();
        let s = tape.sum(c);
        let value = tape.scalar(s);
        let g = if grad { tape.backward(s).unwrap().get(va).unwrap().to_vec() } else { Vec::new() };
        (value, g)
    };
    let (_, analytic) = f(&a, true);
    let res = gradcheck::check(&a, &analytic, 1e-5, 1e-8, 0..20, |x| f(x, false).0);
    assert!(res.passes(1e-4), "{res:?}");
}

#[test]
fn matmul_gradients_both_operands() {
    check_op(&[vec![4, 5], vec![5, 3]], 1, 1e-4, |t, v| t.matmul(v[0], v[1]).unwrap());
    check_op(&[vec![4, 5], vec![3, 5]], 2, 1e-4, |t, v| t.matmul_nt(v[0], v[1]).unwrap());
}

#[test]
fn elementwise_gradients() {
    check_op(&[vec![3, 4], vec![3, 4]], 3, 1e-4, |t, v| t.add(v[0], v[1]).unwrap());
    check_op(&[vec![3, 4], vec![3, 4]], 4, 1e-4, |t, v| t.sub(v[0], v[1]).unwrap());
    check_op(&[vec![3, 4], vec![3, 4]], 5, 1e-4, |t, v| t.mul(v[0], v[1]).unwrap());
    check_op(&[vec![3, 4], vec![4]], 6, 1e-4, |t, v| t.add_row(v[0], v[1]).unwrap());
    check_op(&[vec![3, 4]], 7, 1e-4, |t, v| t.scale(v[0], -2.5));
    check_op(&[vec![3, 4]], 8, 1e-4, |t, v| t.gelu(v[0]));
}

#[test]
fn structural_gradients() {
    check_op(&[vec![5, 3]], 9, 1e-4, |t, v| t.gather_rows(v[0], &[4, 0, 4, 2]).unwrap());
    check_op(&[vec![2, 3], vec![4, 3]], 10, 1e-4, |t, v| t.concat_rows(&[v[0], v[1], v[0]]).unwrap());
    check_op(&[vec![3, 2], vec![3, 4]], 11, 1e-4, |t, v| t.concat_cols(&[v[1], v[0]]).unwrap());
    check_op(&[vec![3, 6]], 12, 1e-4, |t, v| t.slice_cols(v[0], 2, 3).unwrap());
    check_op(&[vec![2, 2], vec![2, 2]], 13, 1e-4, |t, v| t.combine(&[(v[0], 0.5), (v[1], -3.0)]).unwrap());
    check_op(&[vec![3, 3]], 14, 1e-4, |t, v| t.mean(v[0]));
}

#[test]
fn softmax_examples() {
    let mut tape = Tape::<f64>::new();
    let x = tape.constant(vec![1, 3], vec![0.0; 3]).unwrap();
    let y = tape.softmax_rows(x, None).unwrap();
    for &p in tape.value(y) {
        assert!((p - 1.0 / 3.0).abs() < 1e-15);
    }

    let mask = Arc::new(AttentionMask::from_allow(1, 2, vec![true, false]).unwrap());
    let x = tape.constant(vec![1, 2], vec![10.0, 10.0]).unwrap();
    let y = tape.softmax_rows(x, Some(&mask)).unwrap();
    assert_eq!(tape.value(y), &[1.0, 0.0]);

    // mpmath, 40 digits
    let expect = [0.0900305731703804579980221, 0.2447284710547976524729596, 0.6652409557748218895290183];
    let x = tape.constant(vec![1, 3], vec![1.0, 2.0, 3.0]).unwrap();
    let y = tape.softmax_rows(x, Some(&Arc::new(AttentionMask::from_fn(1, 3, |_, _| true)))).unwrap();
    for (p, e) in tape.value(y).iter().zip(expect) {
        assert!((p - e).abs() < 1e-9);
    }
}

#[test]
fn softmax_rows_sum_to_one_and_masked_are_zero() {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let mask = Arc::new(AttentionMask::from_fn(6, 6, |i, j| j <= i || (i + j) % 3 == 0));
    let mut tape = Tape::<f32>::new();
    let data: Vec<f32> = (0..36).map(|_| rng.random_range(-5.0..5.0)).collect();
    let x = tape.constant(vec![6, 6], data).unwrap();
    let y = tape.softmax_rows(x, Some(&mask)).unwrap();
    for i in 0..6 {
        let row = &tape.value(y)[i * 6..(i + 1) * 6];
        assert!((row.iter().sum::<f32>() - 1.0).abs() < 1e-6);
        for j in 0..6 {
            if !mask.allow(i, j) {
                assert_eq!(row[j], 0.0);
            }
        }
    }
}

#[test]
fn softmax_fully_masked_row_is_contract_violation() {
    let mut tape = Tape::<f64>::new();
    let mask = Arc::new(AttentionMask::from_allow(2, 2, vec![true, false, false, false]).unwrap());
    let x = tape.constant(vec![2, 2], vec![0.0; 4]).unwrap();
    assert!(matches!(tape.softmax_rows(x, Some(&mask)), Err(NumericsError::Contract(_))));
}

#[test]
fn softmax_gradient_with_mask() {
    let mask = Arc::new(AttentionMask::from_fn(4, 5, |i, j| j <= i + 1));
    check_op(&[vec![4, 5]], 21, 1e-4, move |t, v| t.softmax_rows(v[0], Some(&mask)).unwrap());
    check_op(&[vec![3, 3]], 22, 1e-4, |t, v| t.softmax_rows(v[0], None).unwrap());
}

#[test]
fn layer_norm_examples() {
    let mut tape = Tape::<f64>::new();
    let g = tape.constant(vec![4], vec![1.0; 4]).unwrap();
    let b = tape.constant(vec![4], vec![0.0; 4]).unwrap();
    let x = tape.constant(vec![1, 4], vec![2.5; 4]).unwrap();
    let y = tape.layer_norm(x, g, b).unwrap();
    assert!(tape.value(y).iter().all(|&v| v == 0.0));

    // var = 1 → 1/sqrt(1 + 1e-5), mpmath
    let g = tape.constant(vec![2], vec![1.0; 2]).unwrap();
    let b = tape.constant(vec![2], vec![0.0; 2]).unwrap();
    let x = tape.constant(vec![1, 2], vec![1.0, -1.0]).unwrap();
    let y = tape.layer_norm(x, g, b).unwrap();
    let e = 0.9999950000374996875027344;
    assert!((tape.value(y)[0] - e).abs() < 1e-12);
    assert!((tape.value(y)[1] + e).abs() < 1e-12);

    let bad = tape.constant(vec![3], vec![1.0; 3]).unwrap();
    assert!(tape.layer_norm(x, bad, b).is_err());
}

#[test]
fn layer_norm_gradient() {
    check_op(&[vec![3, 6], vec![6], vec![6]], 31, 1e-4, |t, v| t.layer_norm(v[0], v[1], v[2]).unwrap());
}

#[test]
fn cross_entropy_examples() {
    let mut tape = Tape::<f64>::new();
    let l = tape.constant(vec![1, 2], vec![0.0, 0.0]).unwrap();
    let ce = tape.cross_entropy(l, &[0], &[]).unwrap();
    assert!((tape.scalar(ce) - std::f64::consts::LN_2).abs() < 1e-15);

    let l = tape.constant(vec![1, 3], vec![0.0, 1000.0, 0.0]).unwrap();
    let ce = tape.cross_entropy(l, &[1], &[]).unwrap();
    assert!(tape.scalar(ce).abs() < 1e-12);

    let logits = vec![
        0.31, -1.27, 2.05, 0.44, -0.66, 1.73, 0.08, -0.92, -2.41, 0.57, -0.15, 0.96, 0.33, 1.88, -1.04,
    ];
    let l = tape.constant(vec![3, 5], logits).unwrap();
    let ce = tape.cross_entropy(l, &[2, 0, 3], &[]).unwrap();
    assert!((tape.scalar(ce) - 0.4804661024540881432591815).abs() < 1e-9);
    let ce = tape.cross_entropy(l, &[2, 0, 3], &[1]).unwrap();
    assert!((tape.scalar(ce) - 0.4881690150398945112280936).abs() < 1e-9);

    assert!(matches!(tape.cross_entropy(l, &[2, 0, 3], &[0, 1, 2]), Err(NumericsError::Contract(_))));
    assert!(tape.cross_entropy(l, &[2, 0, 5], &[]).is_err());
}

#[test]
fn cross_entropy_gradient() {
    check_op(&[vec![4, 6]], 41, 1e-4, |t, v| t.cross_entropy(v[0], &[0, 5, 2, 2], &[1]).unwrap());
}

#[test]
fn masked_mse_gradient() {
    let target: Vec<f64> = (0..12).map(|i| (i as f64).sin()).collect();
    check_op(&[vec![4, 3]], 51, 1e-4, move |t, v| t.masked_mse(v[0], &target, &[true, false, true, true]).unwrap());
}

#[test]
fn backward_trivial_examples() {
    let mut tape = Tape::<f64>::new();
    let x = tape.leaf(&Tensor::new(vec![2, 3], vec![0.5; 6]).unwrap().with_grad());
    let s = tape.sum(x);
    let g = tape.backward(s).unwrap();
    assert_eq!(g.get(x).unwrap(), &[1.0; 6]);

    let mut tape = Tape::<f64>::new();
    let x = tape.leaf(&Tensor::new(vec![3], vec![1.0, 2.0, 3.0]).unwrap().with_grad());
    let sq = tape.mul(x, x).unwrap();
    let s = tape.sum(sq);
    let g = tape.backward(s).unwrap();
    assert_eq!(g.get(x).unwrap(), &[2.0, 4.0, 6.0]);
}

#[test]
fn backward_requires_scalar() {
    let mut tape = Tape::<f64>::new();
    let x = tape.leaf(&Tensor::new(vec![3], vec![1.0, 2.0, 3.0]).unwrap().with_grad());
    assert!(matches!(tape.backward(x), Err(NumericsError::Contract(_))));
}

#[test]
fn repeated_backward_accumulates_into_leaf_tensor() {
    let mut param = Tensor::new(vec![3], vec![1.0, 2.0, 3.0]).unwrap().with_grad();
    let mut tape = Tape::<f64>::new();
    let x = tape.leaf(&param);
    let sq = tape.mul(x, x).unwrap();
    let s = tape.sum(sq);
    for _ in 0..2 {
        let g = tape.backward(s).unwrap();
        param.accumulate_grad(g.get(x).unwrap()).unwrap();
    }
    assert_eq!(param.grad().unwrap(), &[4.0, 8.0, 12.0]);
}

#[test]
fn constants_receive_no_gradient() {
    let mut tape = Tape::<f64>::new();
    let c = tape.constant(vec![2], vec![1.0, 2.0]).unwrap();
    let x = tape.leaf(&Tensor::new(vec![2], vec![3.0, 4.0]).unwrap().with_grad());
    let p = tape.mul(c, x).unwrap();
    let s = tape.sum(p);
    let g = tape.backward(s).unwrap();
    assert!(g.get(c).is_none());
    assert_eq!(g.get(x).unwrap(), &[1.0, 2.0]);
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(32))]

    #[test]
    fn backward_is_linear_in_the_loss(a in -3.0f64..3.0, b in -3.0f64..3.0, seed in 0u64..1000) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let xs = randn(&mut rng, 6);
        let ws = randn(&mut rng, 9);
        let run = |ca: f64, cb: f64| {
            let mut tape = Tape::new();
            let x = tape.leaf(&Tensor::new(vec![2, 3], xs.clone()).unwrap().with_grad());
            let w = tape.constant(vec![3, 3], ws.clone()).unwrap();
            let h = tape.matmul(x, w).unwrap();
            let h = tape.gelu(h);
            let l1 = tape.cross_entropy(h, &[0, 2], &[]).unwrap();
            let sq = tape.mul(h, h).unwrap();
            let l2 = tape.mean(sq);
            let total = tape.combine(&[(l1, ca), (l2, cb)]).unwrap();
            tape.backward(total).unwrap().get(x).unwrap().to_vec()
        };
        let both = run(a, b);
        let g1 = run(1.0, 0.0);
        let g2 = run(0.0, 1.0);
        for i in 0..6 {
            let lin = a * g1[i] + b * g2[i];
            prop_assert!((both[i] - lin).abs() <= 1e-12 * (1.0 + lin.abs()));
        }
    }

    #[test]
    fn forward_is_deterministic(seed in 0u64..1000) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let xs: Vec<f32> = (0..12).map(|_| rng.random_range(-2.0..2.0)).collect();
        let run = || {
            let mut tape = Tape::<f32>::new();
            let x = tape.constant(vec![3, 4], xs.clone()).unwrap();
            let y = tape.matmul_nt(x, x).unwrap();
            let y = tape.softmax_rows(y, None).unwrap();
            tape.value(y).to_vec()
        };
        prop_assert_eq!(run(), run());
    }
}
