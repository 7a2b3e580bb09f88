use kepler_autograd::{
    finite_diff_check, optimizer_step, AdamConfig, Error, GradCheckOptions, Norm, ParameterSet,
    Tape, Tensor, Var,
};
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn random_tensor(rng: &mut ChaCha8Rng, shape: &[usize]) -> Tensor {
    let n = shape.iter().product();
    Tensor::new(shape.to_vec(), (0..n).map(|_| rng.random_range(-1.0..1.0)).collect()).unwrap()
}

fn strict() -> GradCheckOptions {
    GradCheckOptions {
        per_param: 64,
        tolerance: 1e-6,
        ..GradCheckOptions::default()
    }
}

/// Runs a finite-difference check of `f(x, y)` reduced by a fixed random
/// projection, so every output coordinate contributes.
fn check_binary<F>(seed: u64, xs: &[usize], ys: &[usize], f: F) -> f64
where
    F: for<'a> Fn(Var<'a>, Var<'a>) -> Result<Var<'a>, Error>,
{
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut params = ParameterSet::new();
    let x = params.insert("x", random_tensor(&mut rng, xs)).unwrap();
    let y = params.insert("y", random_tensor(&mut rng, ys)).unwrap();
    let probe_seed = rng.random::<u64>();
    let report = finite_diff_check::<Error, _>(
        &mut params,
        |tape| {
            let out = f(tape.param(x), tape.param(y))?;
            let shape = out.shape();
            let mut prng = ChaCha8Rng::seed_from_u64(probe_seed);
            let w = tape.constant(random_tensor(&mut prng, &shape));
            Ok(out.mul(&w)?.sum())
        },
        &strict(),
    )
    .unwrap();
    report.max_rel_err
}

fn check_unary<F>(seed: u64, xs: &[usize], f: F) -> f64
where
    F: for<'a> Fn(Var<'a>) -> Result<Var<'a>, Error>,
{
    check_binary(seed, xs, &[1], move |x, _| f(x))
}

#[test]
fn every_primitive_matches_central_differences() {
    let cases: Vec<(&str, f64)> = vec![
        ("add", check_binary(1, &[3, 4], &[3, 4], |a, b| a.add(&b))),
        ("sub", check_binary(2, &[3, 4], &[3, 4], |a, b| a.sub(&b))),
        ("mul", check_binary(3, &[3, 4], &[3, 4], |a, b| a.mul(&b))),
        ("matmul", check_binary(4, &[3, 4], &[4, 2], |a, b| a.matmul(&b))),
        ("add_row", check_binary(5, &[3, 4], &[4], |a, b| a.add_row(&b))),
        ("mul_row", check_binary(6, &[3, 4], &[4], |a, b| a.mul_row(&b))),
        ("gather", check_unary(7, &[5, 3], |a| a.gather(&[4, 0, 4, 2]))),
        ("l1", check_unary(8, &[3, 5], |a| Ok(a.row_norm(Norm::L1)))),
        ("l2", check_unary(9, &[3, 5], |a| Ok(a.row_norm(Norm::L2)))),
        ("sigmoid", check_unary(10, &[2, 3], |a| Ok(a.affine(3.0, 0.5).sigmoid()))),
        ("log_sigmoid", check_unary(11, &[2, 3], |a| Ok(a.affine(4.0, -1.0).log_sigmoid()))),
        ("gelu", check_unary(12, &[2, 3], |a| Ok(a.affine(2.0, 0.0).gelu()))),
        ("sin_cos", check_unary(13, &[2, 3], |a| a.sin().mul(&a.cos()))),
        ("softmax", check_unary(14, &[3, 4], |a| a.softmax(None))),
        (
            "masked_softmax",
            check_unary(15, &[3, 4], |a| a.softmax(Some(&[true, false, true, true]))),
        ),
        ("cross_entropy", check_unary(16, &[3, 5], |a| a.cross_entropy(&[0, 4, 2]))),
        ("layer_norm", check_unary(17, &[3, 6], |a| Ok(a.layer_norm()))),
        ("transpose", check_unary(18, &[3, 2], |a| a.transpose())),
        ("slice_cols", check_unary(19, &[3, 5], |a| a.slice_cols(1, 4))),
        ("slice_rows", check_unary(20, &[4, 2], |a| a.slice_rows(1, 3))),
        (
            "concat",
            check_binary(21, &[2, 3], &[2, 2], |a, b| {
                let c = Var::concat_cols(&[a, b])?;
                Var::concat_rows(&[c, c])
            }),
        ),
        ("reshape", check_unary(22, &[2, 6], |a| a.reshape(&[3, 4]))),
        ("sum_rows", check_unary(23, &[3, 4], |a| Ok(a.sum_rows()))),
        ("mean", check_unary(24, &[3, 4], |a| a.mean())),
    ];
    for (name, err) in cases {
        println!("{name:>14}: max rel err {err:.3e}");
        assert!(err < 1e-6, "{name}: {err}");
    }
}

#[test]
fn two_layer_network_matches_finite_differences() {
    let mut rng = ChaCha8Rng::seed_from_u64(42);
    let mut params = ParameterSet::new();
    let w1 = params.insert("w1", random_tensor(&mut rng, &[5, 8])).unwrap();
    let b1 = params.insert("b1", random_tensor(&mut rng, &[8])).unwrap();
    let w2 = params.insert("w2", random_tensor(&mut rng, &[8, 3])).unwrap();
    let b2 = params.insert("b2", random_tensor(&mut rng, &[3])).unwrap();
    let x = random_tensor(&mut rng, &[6, 5]);
    let targets = [0usize, 2, 1, 1, 0, 2];
    let report = finite_diff_check::<Error, _>(
        &mut params,
        |tape| {
            let h = tape
                .constant(x.clone())
                .matmul(&tape.param(w1))?
                .add_row(&tape.param(b1))?
                .gelu()
                .layer_norm();
            let logits = h.matmul(&tape.param(w2))?.add_row(&tape.param(b2))?;
            logits.cross_entropy(&targets)
        },
        &GradCheckOptions {
            per_param: 100,
            ..GradCheckOptions::default()
        },
    )
    .unwrap();
    assert!(report.max_rel_err < 1e-4, "{report:?}");
    assert_eq!(report.checked, 40 + 8 + 24 + 3);
}

#[test]
fn identical_runs_give_bit_identical_parameters() {
    let run = || {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let mut params = ParameterSet::new();
        let w = params.insert("w", random_tensor(&mut rng, &[4, 2])).unwrap();
        let x = random_tensor(&mut rng, &[3, 4]);
        for _ in 0..20 {
            let grads = {
                let tape = Tape::training(&params);
                let y = tape.constant(x.clone()).matmul(&tape.param(w)).unwrap();
                let loss = y.dropout(0.3, &mut rng).cross_entropy(&[0, 1, 1]).unwrap();
                tape.backward(loss).unwrap()
            };
            params.accumulate(&grads);
            optimizer_step(&mut params, &AdamConfig::default()).unwrap();
        }
        params
    };
    assert!(run().values_equal(&run()));
}

proptest! {
    #[test]
    fn softmax_rows_sum_to_one(
        rows in 1usize..5,
        vals in proptest::collection::vec(-30.0f64..30.0, 1..40),
    ) {
        let cols = (vals.len() / rows).max(1);
        let data: Vec<f64> = vals.iter().cycle().take(rows * cols).copied().collect();
        let params = ParameterSet::new();
        let tape = Tape::new(&params);
        let y = tape.constant(Tensor::matrix(rows, cols, data).unwrap()).softmax(None).unwrap().value();
        for r in 0..rows {
            let s: f64 = y.row(r).iter().sum();
            prop_assert!((s - 1.0).abs() < 1e-12);
        }
    }

    #[test]
    fn cross_entropy_is_nonnegative(
        vals in proptest::collection::vec(-50.0f64..50.0, 6),
        t0 in 0usize..3,
        t1 in 0usize..3,
    ) {
        let params = ParameterSet::new();
        let tape = Tape::new(&params);
        let logits = tape.constant(Tensor::matrix(2, 3, vals).unwrap());
        prop_assert!(logits.cross_entropy(&[t0, t1]).unwrap().item().unwrap() >= 0.0);
    }
}

#[test]
fn one_hot_logits_drive_cross_entropy_to_zero() {
    let params = ParameterSet::new();
    let tape = Tape::new(&params);
    let logits = tape.constant(Tensor::matrix(2, 3, vec![80.0, 0.0, 0.0, 0.0, 0.0, 80.0]).unwrap());
    assert!(logits.cross_entropy(&[0, 2]).unwrap().item().unwrap() < 1e-30);
}
