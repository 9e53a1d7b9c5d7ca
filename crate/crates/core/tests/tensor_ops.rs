//! Tape operations checked against closed forms and central finite
//! differences computed from forward passes alone.

use color_core::{Tape, Tensor, Var};
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn random(shape: &[usize], rng: &mut ChaCha8Rng) -> Tensor {
    let n = shape.iter().product();
    Tensor::new(shape, (0..n).map(|_| rng.gen_range(-1.0..1.0)).collect()).unwrap()
}

/// Analytic gradient of `build` w.r.t. every input, next to its central
/// difference estimate. `build` must reduce to a scalar.
fn check(inputs: &[Tensor], eps: f64, tol: f64, build: impl Fn(&mut Tape, &[Var]) -> Var) {
    let mut tape = Tape::new();
    let vars: Vec<Var> = inputs.iter().map(|t| tape.param(t, true)).collect();
    let loss = build(&mut tape, &vars);
    let grads = tape.backward(loss).unwrap();

    let eval = |perturbed: &[Tensor]| {
        let mut tape = Tape::new();
        let vars: Vec<Var> = perturbed.iter().map(|t| tape.param(t, false)).collect();
        let loss = build(&mut tape, &vars);
        tape.value(loss)[0]
    };

    for (i, input) in inputs.iter().enumerate() {
        let analytic = grads.get(vars[i]).expect("input reached by loss");
        for j in 0..input.len() {
            let mut plus = inputs.to_vec();
            plus[i].data_mut()[j] += eps;
            let mut minus = inputs.to_vec();
            minus[i].data_mut()[j] -= eps;
            let numeric = (eval(&plus) - eval(&minus)) / (2.0 * eps);
            let err = (analytic[j] - numeric).abs() / analytic[j].abs().max(numeric.abs()).max(1e-3);
            assert!(
                err <= tol,
                "input {i} coord {j}: analytic {} numeric {numeric} rel err {err}",
                analytic[j]
            );
        }
    }
}

#[test]
fn matmul_identity_and_hand_product() {
    let mut tape = Tape::new();
    let id = tape.constant(&[2, 2], vec![1.0, 0.0, 0.0, 1.0]).unwrap();
    let m = tape.constant(&[2, 2], vec![0.5, -1.0, 2.0, 3.0]).unwrap();
    let out = tape.matmul(id, m).unwrap();
    assert_eq!(tape.value(out), &[0.5, -1.0, 2.0, 3.0]);

    let a = tape.constant(&[2, 2], vec![1.0, 2.0, 3.0, 4.0]).unwrap();
    let b = tape.constant(&[2, 1], vec![0.0, 1.0]).unwrap();
    let out = tape.matmul(a, b).unwrap();
    assert_eq!(tape.shape(out), &[2, 1]);
    assert_eq!(tape.value(out), &[2.0, 4.0]);
}

#[test]
fn matmul_shape_error_names_both_shapes() {
    let mut tape = Tape::new();
    let a = tape.constant(&[2, 3], vec![0.0; 6]).unwrap();
    let b = tape.constant(&[2, 3], vec![0.0; 6]).unwrap();
    let msg = tape.matmul(a, b).unwrap_err().to_string();
    assert!(msg.contains("[2, 3]"), "{msg}");
}

#[test]
fn matmul_gradient_matches_finite_differences() {
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    let a = random(&[3, 3], &mut rng);
    let b = random(&[3, 3], &mut rng);
    check(&[a, b], 1e-5, 1e-4, |t, v| {
        let p = t.matmul(v[0], v[1]).unwrap();
        t.sum(p)
    });
}

#[test]
fn softmax_closed_forms() {
    let mut tape = Tape::new();
    let x = tape.constant(&[3], vec![0.0; 3]).unwrap();
    let y = tape.softmax(x, 0).unwrap();
    for v in tape.value(y) {
        assert!((v - 1.0 / 3.0).abs() < 1e-12);
    }
    let x = tape.constant(&[3], vec![1f64.ln(), 2f64.ln(), 3f64.ln()]).unwrap();
    let y = tape.softmax(x, 0).unwrap();
    for (v, want) in tape.value(y).iter().zip([1.0 / 6.0, 2.0 / 6.0, 3.0 / 6.0]) {
        assert!((v - want).abs() < 1e-12);
    }
    let x = tape.constant(&[2], vec![1000.0, 0.0]).unwrap();
    let y = tape.softmax(x, 0).unwrap();
    assert!((tape.value(y)[0] - 1.0).abs() < 1e-12);
    assert!(tape.value(y)[1] < 1e-300);
}

#[test]
fn softmax_rejects_non_finite_input() {
    let mut tape = Tape::new();
    let x = tape.constant(&[2], vec![f64::NAN, 0.0]).unwrap();
    assert!(tape.softmax(x, 0).is_err());
    let x = tape.constant(&[2], vec![f64::INFINITY, 0.0]).unwrap();
    assert!(tape.softmax(x, 0).is_err());
    let x = tape.constant(&[2], vec![0.0, 0.0]).unwrap();
    assert!(tape.softmax(x, 2).is_err());
}

#[test]
fn softmax_over_middle_axis_gradient() {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let x = random(&[2, 3, 4], &mut rng);
    let w = random(&[2, 3, 4], &mut rng);
    check(&[x, w], 1e-5, 1e-4, |t, v| {
        let s = t.softmax(v[0], 1).unwrap();
        let p = t.mul(s, v[1]).unwrap();
        t.sum(p)
    });
}

#[test]
fn gelu_points_and_gradient() {
    let mut tape = Tape::new();
    let x = tape.constant(&[3], vec![0.0, 20.0, -20.0]).unwrap();
    let y = tape.gelu(x);
    let v = tape.value(y);
    assert_eq!(v[0], 0.0);
    assert!((v[1] - 20.0).abs() < 1e-9);
    assert!(v[2].abs() < 1e-9);

    let x = Tensor::new(&[4], vec![-2.0, -0.5, 0.5, 2.0]).unwrap();
    check(&[x], 1e-5, 1e-4, |t, v| {
        let y = t.gelu(v[0]);
        t.sum(y)
    });
}

#[test]
fn backward_simple_identities() {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let x = random(&[2, 3, 2], &mut rng).with_requires_grad(true);
    let mut tape = Tape::new();
    let v = tape.leaf(&x);
    let s = tape.sum(v);
    let g = tape.backward(s).unwrap();
    assert!(g.get(v).unwrap().iter().all(|&v| v == 1.0));

    let mut tape = Tape::new();
    let v = tape.leaf(&x);
    let sq = tape.mul(v, v).unwrap();
    let s = tape.sum(sq);
    let half = tape.scale(s, 0.5);
    let g = tape.backward(half).unwrap();
    assert_eq!(g.get(v).unwrap(), x.data());
}

#[test]
fn backward_contract_errors() {
    let mut tape = Tape::new();
    let x = tape.param(&Tensor::ones(&[3]), true);
    let y = tape.gelu(x);
    assert!(tape.backward(y).is_err());
    assert!(Tape::new().backward(color_core::Var::from_index(0)).is_err());
}

#[test]
fn unreachable_leaves_get_no_gradient() {
    let mut tape = Tape::new();
    let used = tape.param(&Tensor::ones(&[2]), true);
    let unused = tape.param(&Tensor::ones(&[2]), true);
    let frozen = tape.param(&Tensor::ones(&[2]), false);
    let p = tape.mul(used, frozen).unwrap();
    let s = tape.sum(p);
    let g = tape.backward(s).unwrap();
    assert!(g.get(used).is_some());
    assert!(g.get(unused).is_none());
    assert!(g.get(frozen).is_none());
}

#[test]
fn layer_norm_gradient() {
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    let x = random(&[3, 5], &mut rng);
    let gamma = random(&[5], &mut rng);
    let beta = random(&[5], &mut rng);
    let w = random(&[3, 5], &mut rng);
    check(&[x, gamma, beta, w], 1e-5, 1e-4, |t, v| {
        let y = t.layer_norm(v[0], v[1], v[2]).unwrap();
        let p = t.mul(y, v[3]).unwrap();
        t.sum(p)
    });
}

#[test]
fn cross_entropy_uniform_logits_is_log_classes() {
    for classes in [2usize, 5, 10] {
        let mut tape = Tape::new();
        let logits = tape.constant(&[3, classes], vec![0.7; 3 * classes]).unwrap();
        let loss = tape.cross_entropy(logits, &[0, classes - 1, 1], None).unwrap();
        assert!((tape.value(loss)[0] - (classes as f64).ln()).abs() < 1e-6);
    }
}

#[test]
fn cross_entropy_gradient_and_masking() {
    let mut rng = ChaCha8Rng::seed_from_u64(13);
    let logits = random(&[4, 5], &mut rng);
    check(&[logits.clone()], 1e-5, 1e-4, |t, v| t.cross_entropy(v[0], &[0, 4, 2, 2], None).unwrap());

    let mask = [false, true, true, false, true];
    check(&[logits.clone()], 1e-5, 1e-4, |t, v| {
        t.cross_entropy(v[0], &[1, 4, 2, 2], Some(&mask)).unwrap()
    });
    let mut tape = Tape::new();
    let v = tape.param(&logits, true);
    let loss = tape.cross_entropy(v, &[1, 4, 2, 2], Some(&mask)).unwrap();
    let g = tape.backward(loss).unwrap();
    let g = g.get(v).unwrap();
    for r in 0..4 {
        assert_eq!(g[r * 5], 0.0);
        assert_eq!(g[r * 5 + 3], 0.0);
    }

    let mut tape = Tape::new();
    let v = tape.param(&logits, true);
    assert!(tape.cross_entropy(v, &[0, 4, 2, 2], Some(&mask)).is_err());
}

#[test]
fn structural_ops_gradients() {
    let mut rng = ChaCha8Rng::seed_from_u64(17);
    let tokens = random(&[2, 3, 4], &mut rng);
    let cls = random(&[1, 4], &mut rng);
    let pos = random(&[4, 4], &mut rng);
    let w = random(&[2, 4, 4], &mut rng);
    check(&[tokens, cls, pos, w], 1e-5, 1e-4, |t, v| {
        let x = t.prepend_token(v[0], v[1]).unwrap();
        let x = t.add_broadcast(x, v[2]).unwrap();
        let x = t.reshape(x, &[2, 4, 2, 2]).unwrap();
        let x = t.permute(x, &[0, 2, 1, 3]).unwrap();
        let x = t.reshape(x, &[2, 4, 4]).unwrap();
        let x = t.mul(x, v[3]).unwrap();
        let c = t.select_token(x, 1).unwrap();
        let c = t.transpose(c).unwrap();
        let c = t.gelu(c);
        t.mean(c)
    });
}

#[test]
fn batched_matmul_gradients() {
    let mut rng = ChaCha8Rng::seed_from_u64(19);
    let a = random(&[2, 3, 4], &mut rng);
    let b = random(&[2, 4, 5], &mut rng);
    let bt = random(&[2, 5, 4], &mut rng);
    check(&[a.clone(), b], 1e-5, 1e-4, |t, v| {
        let p = t.bmm(v[0], v[1], false).unwrap();
        let p = t.gelu(p);
        t.sum(p)
    });
    check(&[a, bt], 1e-5, 1e-4, |t, v| {
        let p = t.bmm(v[0], v[1], true).unwrap();
        let p = t.gelu(p);
        t.sum(p)
    });
}

#[test]
fn repeated_computation_is_bitwise_identical() {
    let run = || {
        let mut rng = ChaCha8Rng::seed_from_u64(23);
        let a = random(&[4, 6], &mut rng).with_requires_grad(true);
        let b = random(&[6, 3], &mut rng);
        let mut tape = Tape::new();
        let va = tape.leaf(&a);
        let vb = tape.leaf(&b);
        let p = tape.matmul(va, vb).unwrap();
        let s = tape.softmax(p, 1).unwrap();
        let l = tape.cross_entropy(s, &[0, 1, 2, 0], None).unwrap();
        let loss = tape.value(l)[0];
        let g = tape.backward(l).unwrap();
        (loss.to_bits(), g.get(va).unwrap().iter().map(|v| v.to_bits()).collect::<Vec<_>>())
    };
    assert_eq!(run(), run());
}

proptest! {
    #[test]
    fn softmax_rows_sum_to_one_and_ignore_shifts(
        row in prop::collection::vec(-30.0f64..30.0, 1..12),
        shift in -100.0f64..100.0,
    ) {
        let n = row.len();
        let mut tape = Tape::new();
        let x = tape.constant(&[1, n], row.clone()).unwrap();
        let y = tape.softmax(x, 1).unwrap();
        let shifted = tape.constant(&[1, n], row.iter().map(|v| v + shift).collect()).unwrap();
        let ys = tape.softmax(shifted, 1).unwrap();
        let total: f64 = tape.value(y).iter().sum();
        prop_assert!((total - 1.0).abs() < 1e-6);
        prop_assert!(tape.value(y).iter().all(|&p| p >= 0.0));
        for (a, b) in tape.value(y).iter().zip(tape.value(ys)) {
            prop_assert!((a - b).abs() < 1e-6);
        }
    }
}
