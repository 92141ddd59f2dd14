//! Tape adjoints against central finite differences (step 1e-5, f64).

use proptest::prelude::*;
use raddiff_tensor::{Tape, Tensor, TensorError, Var};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

const STEP: f64 = 1e-5;

/// Builds `loss = sum(w ⊙ f(inputs))` with fixed random weights `w` so that
/// every output element contributes a distinct sensitivity.
fn weighted_loss(tape: &mut Tape, out: Var, seed: u64) -> Var {
    let shape = tape.shape(out).to_vec();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let w = Tensor::from_fn(&shape, |_| rng.gen_range(-1.0..1.0));
    let w = tape.constant(w);
    let p = tape.mul(out, w).unwrap();
    tape.sum(p).unwrap()
}

fn rel_err(a: &Tensor, b: &Tensor) -> f64 {
    let diff = a.sub(b).unwrap().norm();
    diff / a.norm().max(b.norm()).max(1e-12)
}

/// Checks every input gradient of `build` against central differences.
fn check(inputs: Vec<Tensor>, build: impl Fn(&mut Tape, &[Var]) -> Var, tol: f64) {
    let eval = |vals: &[Tensor]| -> f64 {
        let mut tape = Tape::new();
        let vars: Vec<Var> = vals.iter().map(|t| tape.constant(t.clone())).collect();
        let out = build(&mut tape, &vars);
        let loss = weighted_loss(&mut tape, out, 7);
        tape.value(loss).item().unwrap()
    };
    let mut tape = Tape::new();
    let vars: Vec<Var> = inputs.iter().map(|t| tape.param(t.clone())).collect();
    let out = build(&mut tape, &vars);
    let loss = weighted_loss(&mut tape, out, 7);
    let grads = tape.backward(loss).unwrap();
    for (k, v) in vars.iter().enumerate() {
        let analytic = grads
            .get(*v)
            .cloned()
            .unwrap_or_else(|| Tensor::zeros(inputs[k].shape()));
        let mut numeric = Tensor::zeros(inputs[k].shape());
        for i in 0..inputs[k].len() {
            let mut plus = inputs.clone();
            plus[k].data_mut()[i] += STEP;
            let mut minus = inputs.clone();
            minus[k].data_mut()[i] -= STEP;
            numeric.data_mut()[i] = (eval(&plus) - eval(&minus)) / (2.0 * STEP);
        }
        let e = rel_err(&analytic, &numeric);
        assert!(e < tol, "input {k}: relative error {e:e}");
    }
}

fn random(shape: &[usize], seed: u64, lo: f64, hi: f64) -> Tensor {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    Tensor::from_fn(shape, |_| rng.gen_range(lo..hi))
}

#[test]
fn add_example() {
    let mut tape = Tape::new();
    let a = tape.constant(Tensor::new(&[2], vec![1.0, 2.0]).unwrap());
    let b = tape.constant(Tensor::new(&[2], vec![3.0, 4.0]).unwrap());
    let c = tape.add(a, b).unwrap();
    assert_eq!(tape.value(c).data(), &[4.0, 6.0]);
}

#[test]
fn softplus_at_zero() {
    let mut tape = Tape::new();
    let a = tape.constant(Tensor::scalar(0.0));
    let s = tape.softplus(a).unwrap();
    assert!((tape.value(s).item().unwrap() - std::f64::consts::LN_2).abs() < 1e-15);
}

#[test]
fn sigmoid_slope_at_zero() {
    let mut tape = Tape::new();
    let x = tape.param(Tensor::scalar(0.0));
    let y = tape.sigmoid(x).unwrap();
    let g = tape.backward(y).unwrap();
    let analytic = g.get(x).unwrap().item().unwrap();
    assert_eq!(analytic, 0.25);
    let fd = (raddiff_tensor::sigmoid(STEP) - raddiff_tensor::sigmoid(-STEP)) / (2.0 * STEP);
    assert!((analytic - fd).abs() < 1e-8);
}

#[test]
fn sum_of_squares_gradient() {
    let mut tape = Tape::new();
    let x = tape.param(Tensor::new(&[3], vec![1.0, 2.0, 3.0]).unwrap());
    let sq = tape.square(x).unwrap();
    let loss = tape.sum(sq).unwrap();
    let g = tape.backward(loss).unwrap();
    assert_eq!(g.get(x).unwrap().data(), &[2.0, 4.0, 6.0]);
}

#[test]
fn untracked_inputs_have_no_gradient() {
    let mut tape = Tape::new();
    let x = tape.param(Tensor::new(&[2], vec![1.0, 2.0]).unwrap());
    let c = tape.constant(Tensor::new(&[2], vec![5.0, 6.0]).unwrap());
    let p = tape.mul(x, c).unwrap();
    let loss = tape.sum(p).unwrap();
    let g = tape.backward(loss).unwrap();
    assert!(g.get(c).is_none());
    assert_eq!(g.get(x).unwrap().data(), &[5.0, 6.0]);
    assert_eq!(g.len(), 1);
}

#[test]
fn backward_errors() {
    let mut tape = Tape::new();
    let x = tape.param(Tensor::new(&[2], vec![1.0, 2.0]).unwrap());
    assert!(matches!(tape.backward(x), Err(TensorError::NotScalar(_))));
    let other = {
        let mut t2 = Tape::new();
        t2.param(Tensor::scalar(1.0))
    };
    assert!(matches!(tape.backward(other), Err(TensorError::ForeignVar)));
}

#[test]
fn shape_mismatch_names_both_shapes() {
    let mut tape = Tape::new();
    let a = tape.constant(Tensor::zeros(&[2, 3]));
    let b = tape.constant(Tensor::zeros(&[3, 2]));
    let msg = tape.add(a, b).unwrap_err().to_string();
    assert!(msg.contains("[2, 3]") && msg.contains("[3, 2]"), "{msg}");
}

#[test]
fn reused_variable_accumulates() {
    // loss = sum(x * x) via mul of the same var
    let mut tape = Tape::new();
    let x = tape.param(Tensor::new(&[2], vec![3.0, -1.0]).unwrap());
    let p = tape.mul(x, x).unwrap();
    let loss = tape.sum(p).unwrap();
    let g = tape.backward(loss).unwrap();
    assert_eq!(g.get(x).unwrap().data(), &[6.0, -2.0]);
}

#[test]
fn independent_tapes_agree() {
    let run = || {
        let mut tape = Tape::new();
        let x = tape.param(random(&[2, 3, 3, 3], 3, -1.0, 1.0));
        let w = tape.param(random(&[2, 2, 3, 3, 3], 4, -0.5, 0.5));
        let y = tape.conv3d(x, w, None).unwrap();
        let y = tape.silu(y).unwrap();
        let l = tape.mean(y).unwrap();
        let g = tape.backward(l).unwrap();
        (g.get(x).unwrap().clone(), g.get(w).unwrap().clone())
    };
    assert_eq!(run(), run());
}

#[test]
fn conv3d_identity_kernel() {
    let x = random(&[3, 4, 5, 6], 11, -2.0, 2.0);
    let mut w = Tensor::zeros(&[3, 3, 3, 3, 3]);
    for c in 0..3 {
        let off = w.offset(&[c, c, 1, 1, 1]);
        w.data_mut()[off] = 1.0;
    }
    let mut tape = Tape::new();
    let xv = tape.constant(x.clone());
    let wv = tape.constant(w);
    let y = tape.conv3d(xv, wv, None).unwrap();
    assert_eq!(tape.value(y), &x);
}

#[test]
fn grad_elementwise() {
    let a = random(&[2, 3], 1, -2.0, 2.0);
    let b = random(&[2, 3], 2, 0.5, 2.0);
    check(vec![a.clone(), b.clone()], |t, v| t.add(v[0], v[1]).unwrap(), 1e-8);
    check(vec![a.clone(), b.clone()], |t, v| t.sub(v[0], v[1]).unwrap(), 1e-8);
    check(vec![a.clone(), b.clone()], |t, v| t.mul(v[0], v[1]).unwrap(), 1e-8);
    check(vec![a.clone(), b.clone()], |t, v| t.div(v[0], v[1]).unwrap(), 1e-7);
    check(vec![a.clone()], |t, v| t.scale(v[0], -1.7).unwrap(), 1e-8);
    check(vec![a.clone()], |t, v| t.add_scalar(v[0], 0.3).unwrap(), 1e-8);
    check(vec![b.clone()], |t, v| t.log(v[0]).unwrap(), 1e-7);
}

#[test]
fn grad_reductions_and_layout() {
    let a = random(&[2, 3, 2, 2], 5, -1.0, 1.0);
    let b = random(&[1, 3, 2, 2], 6, -1.0, 1.0);
    let bias = random(&[2], 7, -1.0, 1.0);
    check(vec![a.clone()], |t, v| t.sum(v[0]).unwrap(), 1e-8);
    check(vec![a.clone()], |t, v| t.mean(v[0]).unwrap(), 1e-8);
    check(vec![a.clone()], |t, v| t.reshape(v[0], &[6, 4]).unwrap(), 1e-8);
    check(vec![a.clone(), b], |t, v| t.concat(v[0], v[1]).unwrap(), 1e-8);
    check(
        vec![a.clone(), bias],
        |t, v| t.add_channel_bias(v[0], v[1]).unwrap(),
        1e-8,
    );
    check(vec![a], |t, v| t.softmax(v[0]).unwrap(), 1e-6);
}

#[test]
fn grad_matmul_all_transposes() {
    for (ta, tb) in [(false, false), (true, false), (false, true), (true, true)] {
        let a_shape = if ta { [2, 4, 3] } else { [2, 3, 4] };
        let b_shape = if tb { [2, 5, 4] } else { [2, 4, 5] };
        let a = random(&a_shape, 21, -1.0, 1.0);
        let b = random(&b_shape, 22, -1.0, 1.0);
        check(vec![a, b], move |t, v| t.matmul_t(v[0], v[1], ta, tb).unwrap(), 1e-7);
    }
    let a = random(&[3, 4], 23, -1.0, 1.0);
    let b = random(&[4, 2], 24, -1.0, 1.0);
    check(vec![a, b], |t, v| t.matmul(v[0], v[1]).unwrap(), 1e-7);
}

#[test]
fn grad_conv_pool_upsample() {
    let x = random(&[2, 4, 4, 4], 31, -1.0, 1.0);
    let w3 = random(&[3, 2, 3, 3, 3], 32, -0.5, 0.5);
    let w1 = random(&[3, 2, 1, 1, 1], 33, -0.5, 0.5);
    let b = random(&[3], 34, -0.5, 0.5);
    check(
        vec![x.clone(), w3, b.clone()],
        |t, v| t.conv3d(v[0], v[1], Some(v[2])).unwrap(),
        1e-6,
    );
    check(
        vec![x.clone(), w1, b],
        |t, v| t.conv3d(v[0], v[1], Some(v[2])).unwrap(),
        1e-6,
    );
    check(vec![x.clone()], |t, v| t.avg_pool2(v[0]).unwrap(), 1e-8);
    check(vec![x], |t, v| t.upsample2(v[0]).unwrap(), 1e-8);
}

#[test]
fn grad_group_norm() {
    let x = random(&[4, 2, 2, 2], 41, -2.0, 2.0);
    let g = random(&[4], 42, 0.5, 1.5);
    let b = random(&[4], 43, -0.5, 0.5);
    check(vec![x, g, b], |t, v| t.group_norm(v[0], v[1], v[2], 2).unwrap(), 1e-5);
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(24))]

    #[test]
    fn grad_unary_random(seed in 0u64..10_000, kind in 0usize..6) {
        let x = random(&[5], seed, -3.0, 3.0);
        // keep away from the relu kink
        let x = x.map(|v| if v.abs() < 1e-3 { 0.5 } else { v });
        check(vec![x], move |t, v| match kind {
            0 => t.exp(v[0]).unwrap(),
            1 => t.softplus(v[0]).unwrap(),
            2 => t.sigmoid(v[0]).unwrap(),
            3 => t.relu(v[0]).unwrap(),
            4 => t.silu(v[0]).unwrap(),
            _ => t.square(v[0]).unwrap(),
        }, 1e-4);
    }

    #[test]
    fn grad_conv_random(seed in 0u64..10_000) {
        let x = random(&[1, 2, 3, 2], seed, -1.0, 1.0);
        let w = random(&[2, 1, 3, 3, 3], seed + 1, -1.0, 1.0);
        check(vec![x, w], |t, v| t.conv3d(v[0], v[1], None).unwrap(), 1e-4);
    }
}
