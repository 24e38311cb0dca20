use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::gradcheck::{numerical_gradient, relative_error, FD_STEP};
use super::*;
use crate::error::{Error, Result};

fn random(rows: usize, cols: usize, rng: &mut ChaCha8Rng) -> Matrix {
    Matrix::from_fn(rows, cols, |_, _| rng.random_range(-1.0..1.0))
}

fn positive(rows: usize, cols: usize, rng: &mut ChaCha8Rng) -> Matrix {
    Matrix::from_fn(rows, cols, |_, _| rng.random_range(0.2..2.0))
}

/// Reverse-mode gradients of `build` (reduced by a fixed weighted sum so the
/// upstream gradient is not all ones) and their relative errors against
/// central differences.
fn check<F>(inputs: &[Matrix], build: F) -> Vec<f64>
where
    F: Fn(&mut Tape, &[Var]) -> Result<Var>,
{
    let scalar = |tape: &mut Tape, vars: &[Var]| -> Result<Var> {
        let out = build(tape, vars)?;
        let (r, c) = tape.shape(out);
        let w = tape.constant(Matrix::from_fn(r, c, |i, j| {
            1.0 + 0.1 * i as f64 - 0.07 * j as f64
        }));
        let prod = tape.mul(out, w)?;
        tape.sum_all(prod)
    };

    let mut tape = Tape::new();
    let vars: Vec<Var> = inputs.iter().map(|m| tape.param(m.clone())).collect();
    let loss = scalar(&mut tape, &vars).unwrap();
    tape.backward(loss).unwrap();

    let numeric = numerical_gradient(inputs, FD_STEP, |ms| {
        let mut t = Tape::new();
        let vs: Vec<Var> = ms.iter().map(|m| t.constant(m.clone())).collect();
        let l = scalar(&mut t, &vs)?;
        Ok(t.value(l).get(0, 0))
    })
    .unwrap();

    vars.iter()
        .zip(&numeric)
        .map(|(v, n)| relative_error(tape.grad(*v).unwrap(), n))
        .collect()
}

fn max_err(errs: &[f64]) -> f64 {
    errs.iter().cloned().fold(0.0, f64::max)
}

#[test]
fn identity_matmul() {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let x = random(3, 4, &mut rng);
    let mut tape = Tape::new();
    let i = tape.constant(Matrix::identity(3));
    let xv = tape.constant(x.clone());
    let y = tape.matmul(i, xv).unwrap();
    assert_eq!(tape.value(y), &x);
}

#[test]
fn matmul_sum_gradient_is_row_sums_of_b() {
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let a = random(2, 3, &mut rng);
    let b = random(3, 4, &mut rng);
    let mut tape = Tape::new();
    let av = tape.param(a);
    let bv = tape.constant(b.clone());
    let y = tape.matmul(av, bv).unwrap();
    let s = tape.sum_all(y).unwrap();
    tape.backward(s).unwrap();
    let g = tape.grad(av).unwrap();
    for i in 0..2 {
        for k in 0..3 {
            let expect: f64 = b.row(k).iter().sum();
            assert_eq!(g.get(i, k), expect);
        }
    }
}

#[test]
fn matmul_matches_finite_differences() {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let errs = check(&[random(4, 3, &mut rng), random(3, 5, &mut rng)], |t, v| {
        t.matmul(v[0], v[1])
    });
    assert!(max_err(&errs) < 1e-6, "{errs:?}");
}

#[test]
fn matmul_shape_error_names_both_shapes() {
    let mut tape = Tape::new();
    let a = tape.constant(Matrix::zeros(2, 3));
    let b = tape.constant(Matrix::zeros(4, 5));
    match tape.matmul(a, b) {
        Err(Error::Shape { left, right, .. }) => {
            assert_eq!(left, (2, 3));
            assert_eq!(right, (4, 5));
        }
        other => panic!("unexpected {other:?}"),
    }
}

#[test]
fn relu_values_and_zero_subgradient() {
    let mut tape = Tape::new();
    let x = tape.param(Matrix::from_rows(&[[-1.0, 0.0, 2.0]]).unwrap());
    let y = tape.relu(x);
    assert_eq!(tape.value(y).as_slice(), &[0.0, 0.0, 2.0]);
    let s = tape.sum_all(y).unwrap();
    tape.backward(s).unwrap();
    assert_eq!(tape.grad(x).unwrap().as_slice(), &[0.0, 0.0, 1.0]);
}

#[test]
fn log_derivative_at_two() {
    let mut tape = Tape::new();
    let x = tape.param(Matrix::filled(1, 1, 2.0));
    let y = tape.log(x).unwrap();
    tape.backward(y).unwrap();
    assert_eq!(tape.grad(x).unwrap().get(0, 0), 0.5);
}

#[test]
fn log_and_sqrt_reject_non_positive() {
    let mut tape = Tape::new();
    let x = tape.constant(Matrix::from_rows(&[[1.0, 0.0]]).unwrap());
    assert!(matches!(tape.log(x), Err(Error::Domain { .. })));
    assert!(matches!(tape.sqrt(x), Err(Error::Domain { .. })));
    let neg = tape.constant(Matrix::filled(1, 1, -3.0));
    assert!(matches!(tape.sqrt(neg), Err(Error::Domain { .. })));
}

#[test]
fn exp_of_square_matches_finite_differences() {
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let errs = check(&[random(3, 3, &mut rng)], |t, v| {
        let sq = t.mul(v[0], v[0])?;
        t.exp(sq)
    });
    assert!(max_err(&errs) < 1e-6, "{errs:?}");
}

#[test]
fn row_l2_norm_of_three_four() {
    let mut tape = Tape::new();
    let x = tape.constant(Matrix::from_rows(&[[3.0, 4.0]]).unwrap());
    let n = tape.row_l2_norm(x).unwrap();
    assert!((tape.value(n).get(0, 0) - 5.0).abs() < 1e-12);
}

#[test]
fn row_l2_norm_guards_zero_rows() {
    let mut tape = Tape::new();
    let x = tape.param(Matrix::zeros(2, 3));
    let n = tape.row_l2_norm(x).unwrap();
    assert_eq!(tape.value(n).get(0, 0), NORM_EPSILON.sqrt());
    let s = tape.sum_all(n).unwrap();
    tape.backward(s).unwrap();
    assert!(tape.grad(x).unwrap().is_finite());
}

#[test]
fn sum_all_gradient_is_ones() {
    let mut tape = Tape::new();
    let x = tape.param(Matrix::zeros(3, 2));
    let s = tape.sum_all(x).unwrap();
    tape.backward(s).unwrap();
    assert_eq!(tape.grad(x).unwrap(), &Matrix::ones(3, 2));
}

#[test]
fn row_l2_norm_matches_finite_differences() {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let errs = check(&[random(5, 4, &mut rng)], |t, v| t.row_l2_norm(v[0]));
    assert!(max_err(&errs) < 1e-6, "{errs:?}");
}

#[test]
fn reductions_reject_empty() {
    let mut tape = Tape::new();
    let e = tape.constant(Matrix::zeros(0, 3));
    assert!(matches!(tape.sum_all(e), Err(Error::EmptyInput { .. })));
    assert!(matches!(tape.mean_rows(e), Err(Error::EmptyInput { .. })));
    assert!(matches!(tape.row_l2_norm(e), Err(Error::EmptyInput { .. })));
}

#[test]
fn concat_shapes_identity_and_split() {
    let mut rng = ChaCha8Rng::seed_from_u64(6);
    let a = random(4, 2, &mut rng);
    let b = random(4, 3, &mut rng);
    let mut tape = Tape::new();
    let av = tape.param(a.clone());
    let bv = tape.param(b);
    let c = tape.concat_cols(&[av, bv]).unwrap();
    assert_eq!(tape.shape(c), (4, 5));
    let single = tape.concat_cols(&[av]).unwrap();
    assert_eq!(tape.value(single), &a);

    let w = tape.constant(Matrix::from_fn(4, 5, |i, j| (i * 5 + j) as f64));
    let p = tape.mul(c, w).unwrap();
    let s = tape.sum_all(p).unwrap();
    tape.backward(s).unwrap();
    let ga = tape.grad(av).unwrap();
    let gb = tape.grad(bv).unwrap();
    for i in 0..4 {
        for j in 0..2 {
            assert_eq!(ga.get(i, j), (i * 5 + j) as f64);
        }
        for j in 0..3 {
            assert_eq!(gb.get(i, j), (i * 5 + 2 + j) as f64);
        }
    }
}

#[test]
fn concat_rejects_row_mismatch() {
    let mut tape = Tape::new();
    let a = tape.constant(Matrix::zeros(3, 2));
    let b = tape.constant(Matrix::zeros(4, 2));
    assert!(matches!(tape.concat_cols(&[a, b]), Err(Error::Shape { .. })));
}

#[test]
fn softmax_symmetric_and_stable() {
    let mut tape = Tape::new();
    let x = tape.constant(Matrix::from_rows(&[[0.0, 0.0], [1000.0, 1000.0]]).unwrap());
    let y = tape.softmax_rows(x).unwrap();
    assert_eq!(tape.value(y).as_slice(), &[0.5, 0.5, 0.5, 0.5]);
}

#[test]
fn softmax_matches_finite_differences() {
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    let errs = check(&[random(3, 4, &mut rng)], |t, v| t.softmax_rows(v[0]));
    assert!(max_err(&errs) < 1e-5, "{errs:?}");
}

#[test]
fn three_op_pipeline_chain_rule() {
    let mut rng = ChaCha8Rng::seed_from_u64(8);
    let errs = check(
        &[random(4, 3, &mut rng), random(3, 2, &mut rng)],
        |t, v| {
            let h = t.matmul(v[0], v[1])?;
            let r = t.relu(h);
            t.softmax_rows(r)
        },
    );
    assert!(max_err(&errs) < 1e-6, "{errs:?}");
}

#[test]
fn backward_twice_doubles_gradient() {
    let mut rng = ChaCha8Rng::seed_from_u64(9);
    let mut tape = Tape::new();
    let a = tape.param(random(3, 3, &mut rng));
    let b = tape.param(random(3, 2, &mut rng));
    let h = tape.matmul(a, b).unwrap();
    let e = tape.exp(h).unwrap();
    let s = tape.sum_all(e).unwrap();
    tape.backward(s).unwrap();
    let once = tape.grad(a).unwrap().clone();
    tape.backward(s).unwrap();
    let twice = tape.grad(a).unwrap();
    assert_eq!(twice, &once.scale(2.0));
}

#[test]
fn cleared_tape_gives_zero_gradient() {
    let mut tape = Tape::new();
    let a = tape.param(Matrix::filled(2, 2, 1.5));
    let y = tape.mul(a, a).unwrap();
    let s = tape.sum_all(y).unwrap();
    tape.backward(s).unwrap();
    assert!(tape.grad(a).unwrap().max_abs() > 0.0);
    tape.clear();
    assert_eq!(tape.grad(a).unwrap().max_abs(), 0.0);
    tape.backward(s).unwrap();
    assert_eq!(tape.grad(a).unwrap().max_abs(), 0.0);
}

#[test]
fn backward_requires_scalar_root() {
    let mut tape = Tape::new();
    let a = tape.param(Matrix::zeros(2, 2));
    assert!(matches!(tape.backward(a), Err(Error::Shape { .. })));
}

#[test]
fn identical_inputs_give_bit_identical_outputs() {
    let run = || {
        let mut rng = ChaCha8Rng::seed_from_u64(10);
        let mut tape = Tape::new();
        let a = tape.param(random(5, 4, &mut rng));
        let b = tape.param(random(4, 3, &mut rng));
        let h = tape.matmul(a, b).unwrap();
        let p = tape.softmax_rows(h).unwrap();
        let s = tape.row_l2_norm(p).unwrap();
        let l = tape.sum_all(s).unwrap();
        tape.backward(l).unwrap();
        (tape.value(p).clone(), tape.grad(a).unwrap().clone())
    };
    assert_eq!(run(), run());
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(10))]

    #[test]
    fn every_differentiable_op_matches_finite_differences(seed in any::<u64>()) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let x = random(4, 3, &mut rng);
        let y = random(4, 3, &mut rng);
        let p = positive(4, 3, &mut rng);
        let col = positive(4, 1, &mut rng);
        let row = random(1, 3, &mut rng);
        let sq = random(4, 4, &mut rng);
        let tol = 1e-4;

        let cases: Vec<(&str, Vec<f64>)> = vec![
            ("matmul", check(&[x.clone(), y.transpose()], |t, v| t.matmul(v[0], v[1]))),
            ("add", check(&[x.clone(), y.clone()], |t, v| t.add(v[0], v[1]))),
            ("sub", check(&[x.clone(), y.clone()], |t, v| t.sub(v[0], v[1]))),
            ("mul", check(&[x.clone(), y.clone()], |t, v| t.mul(v[0], v[1]))),
            ("scale", check(&[x.clone()], |t, v| Ok(t.scale(v[0], -2.5)))),
            ("add_scalar", check(&[x.clone()], |t, v| Ok(t.add_scalar(v[0], 0.3)))),
            ("relu", check(&[x.clone()], |t, v| Ok(t.relu(v[0])))),
            ("exp", check(&[x.clone()], |t, v| t.exp(v[0]))),
            ("log", check(&[p.clone()], |t, v| t.log(v[0]))),
            ("sqrt", check(&[p.clone()], |t, v| t.sqrt(v[0]))),
            ("rsqrt", check(&[p.clone()], |t, v| Ok(t.rsqrt_or_zero(v[0])))),
            ("clamp", check(&[x.clone()], |t, v| Ok(t.clamp(v[0], -2.0, 2.0)))),
            ("mean_rows", check(&[x.clone()], |t, v| t.mean_rows(v[0]))),
            ("row_sum", check(&[x.clone()], |t, v| t.row_sum(v[0]))),
            ("row_l2_norm", check(&[x.clone()], |t, v| t.row_l2_norm(v[0]))),
            ("softmax", check(&[x.clone()], |t, v| t.softmax_rows(v[0]))),
            ("transpose", check(&[x.clone()], |t, v| Ok(t.transpose(v[0])))),
            ("concat", check(&[x.clone(), col.clone()], |t, v| t.concat_cols(&[v[0], v[1]]))),
            ("add_row", check(&[x.clone(), row.clone()], |t, v| t.add_row(v[0], v[1]))),
            ("mul_col", check(&[x.clone(), col.clone()], |t, v| t.mul_col(v[0], v[1]))),
            ("mul_row", check(&[x.clone(), row.clone()], |t, v| t.mul_row(v[0], v[1]))),
            ("div_col", check(&[x.clone(), col.clone()], |t, v| t.div_col(v[0], v[1]))),
            ("set_diagonal", check(&[sq.clone()], |t, v| t.set_diagonal(v[0], 1.0))),
            ("gather", check(&[x.clone()], |t, v| t.gather(v[0], &[(0, 1), (3, 2), (0, 1)]))),
        ];
        for (name, errs) in cases {
            prop_assert!(max_err(&errs) < tol, "{name}: {errs:?}");
        }
    }
}
