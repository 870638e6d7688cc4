use ndarray::{array, Array2};
use proptest::prelude::*;
use reflray::autodiff::{check_grad, gradient3, spatial_grad, Dual, Jet, Tape, Var};
use reflray::Error;

fn central_difference(f: impl Fn(&[f64]) -> f64, x: &[f64], eps: f64) -> Vec<f64> {
    (0..x.len())
        .map(|i| {
            let mut p = x.to_vec();
            let mut m = x.to_vec();
            p[i] += eps;
            m[i] -= eps;
            (f(&p) - f(&m)) / (2.0 * eps)
        })
        .collect()
}

#[test]
fn square_has_derivative_six_at_three() {
    let mut tape = Tape::new();
    let p = tape.param(array![[3.0]]);
    let loss = tape.square(p);
    let g = tape.grad(loss, &[p]).unwrap();
    assert_eq!(g[0][[0, 0]], 6.0);
}

#[test]
fn unreachable_parameters_get_exact_zero() {
    let mut tape = Tape::new();
    let p = tape.param(array![[1.0, 2.0]]);
    let q = tape.param(array![[4.0]]);
    let loss = tape.scalar(7.0);
    let g = tape.grad(loss, &[p, q]).unwrap();
    assert_eq!(g[0], Array2::<f64>::zeros((1, 2)));
    assert_eq!(g[1], Array2::<f64>::zeros((1, 1)));
}

#[test]
fn softplus_sum_matches_finite_differences() {
    // Oracle: central differences of an independent f64 softplus.
    let f = |x: &[f64]| x.iter().map(|v| (1.0 + v.exp()).ln()).sum::<f64>();
    let oracle = central_difference(f, &[0.0, 1.0], 1e-6);
    assert!((oracle[0] - 0.5).abs() < 1e-9);
    assert!((oracle[1] - 0.731_058_578_6).abs() < 1e-8);

    let mut tape = Tape::new();
    let p = tape.param(array![[0.0, 1.0]]);
    let sp = tape.softplus(p);
    let loss = tape.sum(sp);
    let g = tape.grad(loss, &[p]).unwrap();
    assert!((g[0][[0, 0]] - oracle[0]).abs() < 1e-8);
    assert!((g[0][[0, 1]] - oracle[1]).abs() < 1e-8);
}

#[test]
fn non_scalar_loss_is_a_contract_violation() {
    let mut tape = Tape::new();
    let p = tape.param(array![[1.0, 2.0]]);
    let y = tape.exp(p);
    assert!(matches!(tape.grad(y, &[p]), Err(Error::Contract(_))));
}

#[test]
fn spatial_grad_of_quadratic() {
    let mut tape = Tape::new();
    let x = tape.constant(array![[1.0, 2.0, 3.0]]);
    let (_, g) = spatial_grad(&mut tape, x, |tape, x| {
        let sq = x.mul(tape, x);
        sq.sum_cols(tape)
    });
    assert_eq!(tape.value(g), &array![[2.0, 4.0, 6.0]]);
}

#[test]
fn spatial_grad_of_constant_is_zero() {
    let mut tape = Tape::new();
    let x = tape.constant(array![[0.3, -2.0, 5.0], [1.0, 1.0, 1.0]]);
    let (_, g) = spatial_grad(&mut tape, x, |tape, _| {
        let c = tape.constant(array![[2.5], [2.5]]);
        Jet::constant(tape, c)
    });
    assert!(tape.value(g).iter().all(|&v| v == 0.0));
}

#[test]
fn spatial_grad_of_sine_vanishes_at_crest() {
    let mut tape = Tape::new();
    let x = tape.constant(array![[std::f64::consts::FRAC_PI_2, 0.0, 0.0]]);
    let (_, g) = spatial_grad(&mut tape, x, |tape, x| {
        let x0 = x.slice_cols(tape, 0, 1);
        x0.sin(tape)
    });
    for &v in tape.value(g) {
        assert!(v.abs() < 1e-12);
    }
    let dual = gradient3(|x| x[0].sin(), [std::f64::consts::FRAC_PI_2, 0.0, 0.0]);
    assert!(dual.iter().all(|v| v.abs() < 1e-12));
}

#[test]
fn check_grad_on_square_is_tight() {
    let report = check_grad(|tape, p| Ok(tape.square(p[0])), &[array![[1.0]]], 1e-5).unwrap();
    assert!(report.max_rel_error < 1e-8, "{report:?}");
    assert_eq!(report.checked, 1);
}

#[test]
fn check_grad_reports_non_finite_component() {
    let report = check_grad(
        |tape, p| {
            let l = tape.ln(p[0]);
            Ok(tape.sum(l))
        },
        &[array![[1.0, 1e-7]]],
        1e-5,
    )
    .unwrap();
    assert_eq!(report.non_finite, Some(1));
    assert!(!report.passed(1.0));
}

/// Small field `sigma(x) = softplus(v . tanh-free relu-free features)` whose
/// spatial gradient is smooth in the parameters.
fn smooth_density(tape: &mut Tape, w: Var, v: Var, x: Jet) -> Jet {
    let h = x.matmul(tape, w);
    let h = h.sin(tape);
    let h = h.softplus(tape);
    let s = h.matmul(tape, v);
    s.softplus(tape)
}

#[test]
fn gradient_of_spatial_gradient_norm_matches_finite_differences() {
    let w = array![[0.3, -0.7, 1.1, 0.2], [0.5, 0.4, -0.6, 0.9], [-1.2, 0.8, 0.1, -0.3]];
    let v = array![[0.7], [-0.4], [1.3], [0.6]];
    let f = |tape: &mut Tape, p: &[Var]| -> reflray::Result<Var> {
        let x = tape.constant(array![[0.2, -0.4, 0.9], [1.1, 0.3, -0.5]]);
        let (_, g) = spatial_grad(tape, x, |tape, x| smooth_density(tape, p[0], p[1], x));
        let sq = tape.square(g);
        Ok(tape.sum(sq))
    };
    let report = check_grad(f, &[w, v], 1e-6).unwrap();
    assert_eq!(report.skipped_kinks, 0);
    assert!(report.max_rel_error < 1e-4, "{report:?}");
}

#[test]
fn tape_gradient_agrees_with_dual_gradient() {
    let f_dual = |x: [Dual; 3]| (x[0] * x[1] + x[2].sin()).softplus().exp();
    let x0 = [0.4, -1.3, 0.8];
    let expected = gradient3(f_dual, x0);

    let mut tape = Tape::new();
    let x = tape.param(array![[x0[0], x0[1], x0[2]]]);
    let a = tape.slice_cols(x, 0, 1);
    let b = tape.slice_cols(x, 1, 2);
    let c = tape.slice_cols(x, 2, 3);
    let ab = tape.mul(a, b);
    let sc = tape.sin(c);
    let s = tape.add(ab, sc);
    let s = tape.softplus(s);
    let y = tape.exp(s);
    let g = tape.grad(y, &[x]).unwrap();
    for k in 0..3 {
        assert!((g[0][[0, k]] - expected[k]).abs() < 1e-14);
    }
}

#[test]
fn replay_is_bit_identical_and_gradients_deterministic() {
    let build = || {
        let mut tape = Tape::new();
        let w = tape.param(array![[0.1, 0.2], [0.3, -0.4], [0.5, 0.6]]);
        let x = tape.constant(array![[1.0, 2.0, 3.0], [-1.0, 0.5, 0.25]]);
        let h = tape.matmul(x, w);
        let h = tape.relu(h);
        let n = tape.normalize_rows(h, 1e-8);
        let e = tape.exp(n);
        let m = tape.max(e, h);
        let t = tape.transpose(m);
        let r = tape.reshape(t, 1, 4);
        let gth = tape.gather_rows(r, &[0, 0]);
        let loss = tape.sum(gth);
        (tape, w, loss)
    };
    let (tape, w, loss) = build();
    let replayed = tape.replay();
    assert_eq!(replayed.len(), tape.len());
    for (i, (v, recorded)) in replayed.iter().zip(tape.values()).enumerate() {
        assert_eq!(v, recorded, "node {i}");
    }
    let g1 = tape.grad(loss, &[w]).unwrap();
    let (tape2, w2, loss2) = build();
    let g2 = tape2.grad(loss2, &[w2]).unwrap();
    assert_eq!(g1, g2);
}

#[test]
fn structural_ops_backpropagate() {
    let w0 = array![[0.3, -1.2, 0.4], [0.9, 0.1, -0.5]];
    let f = |tape: &mut Tape, p: &[Var]| -> reflray::Result<Var> {
        let a = tape.slice_cols(p[0], 1, 3);
        let b = tape.concat_cols(&[p[0], a]);
        let c = tape.transpose(b);
        let d = tape.reshape(c, 2, 5);
        let e = tape.gather_rows(d, &[1, 0, 1]);
        let n = tape.normalize_rows(e, 1e-8);
        let k = tape.constant(array![[0.5, -0.25, 1.0, 2.0, 0.1]]);
        let m = tape.mul(n, k);
        let s = tape.sum_rows(m);
        let a = tape.abs(s);
        let sq = tape.square(s);
        let mx = tape.max(a, sq);
        let l = tape.ln_1p(mx);
        Ok(tape.sum(l))
    };
    let report = check_grad(f, &[w0], 1e-6).unwrap();
    assert!(report.max_rel_error < 1e-6, "{report:?}");
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn gradient_is_linear(a in -3.0f64..3.0, b in -3.0f64..3.0,
                          x in prop::collection::vec(-2.0f64..2.0, 3)) {
        let point = Array2::from_shape_vec((1, 3), x).unwrap();
        let f = |tape: &mut Tape, p: Var| {
            let s = tape.sin(p);
            tape.sum(s)
        };
        let g = |tape: &mut Tape, p: Var| {
            let e = tape.softplus(p);
            let sq = tape.square(e);
            tape.sum(sq)
        };
        let grad_of = |build: &dyn Fn(&mut Tape, Var) -> Var| {
            let mut tape = Tape::new();
            let p = tape.param(point.clone());
            let out = build(&mut tape, p);
            tape.grad(out, &[p]).unwrap().remove(0)
        };
        let combined = grad_of(&|tape, p| {
            let fa = f(tape, p);
            let fa = tape.scale(fa, a);
            let gb = g(tape, p);
            let gb = tape.scale(gb, b);
            tape.add(fa, gb)
        });
        let separate = grad_of(&|tape, p| f(tape, p)) * a + grad_of(&|tape, p| g(tape, p)) * b;
        for (x, y) in combined.iter().zip(separate.iter()) {
            prop_assert!((x - y).abs() < 1e-12);
        }
    }
}
