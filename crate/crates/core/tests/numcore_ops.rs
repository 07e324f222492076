use intformer::numcore::{
    grad_check, layer_norm, matmul, softmax, Activation, Mode, ParamSet, Tape, Tensor,
    DEFAULT_STEP, LAYER_NORM_EPS,
};
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn random(rng: &mut ChaCha8Rng, shape: &[usize]) -> Tensor {
    let n = shape.iter().product();
    Tensor::new(shape.to_vec(), (0..n).map(|_| rng.random_range(-1.5..1.5)).collect()).unwrap()
}

fn triple_loop(a: &Tensor, b: &Tensor) -> Vec<f64> {
    let (m, k, n) = (a.rows(), a.cols(), b.cols());
    let mut out = vec![0.0; m * n];
    for i in 0..m {
        for j in 0..n {
            for p in 0..k {
                out[i * n + j] += a.at(i, p) * b.at(p, j);
            }
        }
    }
    out
}

#[test]
fn matmul_matches_triple_loop() {
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    let a = random(&mut rng, &[3, 4]);
    let b = random(&mut rng, &[4, 2]);
    let c = matmul(&a, &b).unwrap();
    for (x, y) in c.data().iter().zip(triple_loop(&a, &b)) {
        assert!((x - y).abs() < 1e-14);
    }
}

#[test]
fn layer_norm_moments_match_direct_formula() {
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    let x = random(&mut rng, &[5]);
    let y = layer_norm(&x, &Tensor::ones(&[5]), &Tensor::zeros(&[5]), LAYER_NORM_EPS).unwrap();
    let mean = x.data().iter().sum::<f64>() / 5.0;
    let var = x.data().iter().map(|v| (v - mean).powi(2)).sum::<f64>() / 5.0;
    for (yi, xi) in y.data().iter().zip(x.data()) {
        assert!((yi - (xi - mean) / var.sqrt()).abs() < 1e-12);
    }
    let ym = y.data().iter().sum::<f64>() / 5.0;
    let yv = y.data().iter().map(|v| (v - ym).powi(2)).sum::<f64>() / 5.0;
    assert!(ym.abs() < 1e-9);
    assert!((yv - 1.0).abs() < 1e-6);
}

#[test]
fn square_function_grad_check() {
    let mut p = ParamSet::new();
    p.insert("w", Tensor::scalar(3.0));
    let err = grad_check(
        |t, b| {
            let w = b.get("w")?;
            t.mul(w, w)
        },
        &p,
        DEFAULT_STEP,
    )
    .unwrap();
    assert!(err < 1e-8, "{err}");
}

#[test]
fn logistic_regression_grad_check() {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let x = random(&mut rng, &[6, 4]);
    let y: Vec<f64> = (0..6).map(|i| (i % 2) as f64).collect();
    let mut p = ParamSet::new();
    p.insert("w", random(&mut rng, &[4, 1]));
    p.insert("b", random(&mut rng, &[1]));
    let err = grad_check(
        |t, b| {
            let xv = t.leaf(x.clone());
            let z = t.linear(xv, b.get("w")?, b.get("b")?)?;
            let p = t.sigmoid(z);
            t.bce(p, &y)
        },
        &p,
        DEFAULT_STEP,
    )
    .unwrap();
    assert!(err < 1e-6, "{err}");
}

#[test]
fn non_finite_function_is_evaluation_error() {
    let mut p = ParamSet::new();
    p.insert("w", Tensor::scalar(f64::NAN));
    let r = grad_check(|t, b| Ok(t.scale(b.get("w")?, 2.0)), &p, DEFAULT_STEP);
    assert!(matches!(r, Err(intformer::Error::Evaluation(_))));
}

/// Reduces any tensor to a scalar through a fixed random projection so the
/// checked gradient is non-trivial in every element.
fn project(t: &mut Tape, x: intformer::numcore::Var, seed: u64) -> intformer::Result<intformer::numcore::Var> {
    let shape = t.value(x).shape().to_vec();
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0xabcdef);
    let w = t.leaf(random(&mut rng, &shape));
    let prod = t.mul(x, w)?;
    Ok(t.mean_all(prod))
}

type OpCase = fn(&mut Tape, &intformer::numcore::Bound, u64) -> intformer::Result<intformer::numcore::Var>;

fn op_cases() -> Vec<(&'static str, OpCase)> {
    vec![
        ("matmul", |t, b, _| t.matmul(b.get("a")?, b.get("w")?)),
        ("add", |t, b, _| t.add(b.get("a")?, b.get("c")?)),
        ("add_row", |t, b, _| t.add_row(b.get("a")?, b.get("row")?)),
        ("mul", |t, b, _| t.mul(b.get("a")?, b.get("c")?)),
        ("scale", |t, b, _| Ok(t.scale(b.get("a")?, -1.7))),
        ("relu", |t, b, _| Ok(t.activation(b.get("a")?, Activation::Relu))),
        ("sigmoid", |t, b, _| Ok(t.activation(b.get("a")?, Activation::Sigmoid))),
        ("tanh", |t, b, _| Ok(t.activation(b.get("a")?, Activation::Tanh))),
        ("sin", |t, b, _| Ok(t.sin(b.get("a")?))),
        ("softmax", |t, b, _| Ok(t.softmax_rows(b.get("a")?))),
        ("layer_norm", |t, b, _| {
            t.layer_norm(b.get("a")?, b.get("row")?, b.get("row2")?, LAYER_NORM_EPS)
        }),
        ("dropout", |t, b, s| t.dropout(b.get("a")?, 0.3, Mode::Train, s)),
        ("concat", |t, b, _| t.concat_cols(&[b.get("a")?, b.get("c")?])),
        ("slice", |t, b, _| t.slice_cols(b.get("a")?, 1, 2)),
        ("group_matmul_nt", |t, b, _| t.group_matmul_nt(b.get("a")?, b.get("c")?, 2)),
        ("group_matmul", |t, b, _| {
            let s = t.group_matmul_nt(b.get("a")?, b.get("c")?, 2)?;
            t.group_matmul(s, b.get("c")?, 2)
        }),
        ("group_mean", |t, b, _| t.group_mean(b.get("a")?, 2)),
        ("group_max", |t, b, _| t.group_max(b.get("a")?, 2)),
        ("group_step", |t, b, _| t.group_step(b.get("a")?, 2, 1)),
        ("unfold", |t, b, _| t.unfold(b.get("a")?, 2, 2)),
        ("tile_rows", |t, b, _| t.tile_rows(b.get("a")?, 3)),
        ("bce", |t, b, _| {
            let p = t.sigmoid(b.get("a")?);
            let y: Vec<f64> = (0..t.value(p).len()).map(|i| (i % 2) as f64).collect();
            t.bce(p, &y)
        }),
    ]
}

#[test]
fn every_op_passes_grad_check_over_100_seeds() {
    for (name, case) in op_cases() {
        let mut worst = 0.0f64;
        for seed in 0..100u64 {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let mut p = ParamSet::new();
            p.insert("a", random(&mut rng, &[4, 3]));
            p.insert("c", random(&mut rng, &[4, 3]));
            p.insert("w", random(&mut rng, &[3, 2]));
            p.insert("row", random(&mut rng, &[3]));
            p.insert("row2", random(&mut rng, &[3]));
            let err = grad_check(
                |t, b| {
                    let out = case(t, b, seed)?;
                    if t.value(out).len() == 1 {
                        Ok(out)
                    } else {
                        project(t, out, seed)
                    }
                },
                &p,
                DEFAULT_STEP,
            )
            .unwrap();
            worst = worst.max(err);
        }
        assert!(worst < 1e-4, "{name}: max rel err {worst}");
    }
}

proptest! {
    #[test]
    fn softmax_rows_sum_to_one_and_are_shift_invariant(
        vals in prop::collection::vec(-50.0f64..50.0, 1..12),
        shift in -500.0f64..500.0,
    ) {
        let x = Tensor::vector(vals.clone());
        let s = softmax(&x, 0).unwrap();
        let sum: f64 = s.data().iter().sum();
        prop_assert!((sum - 1.0).abs() < 1e-12);
        prop_assert!(s.data().iter().all(|&v| v > 0.0 && v <= 1.0));
        let shifted = softmax(&Tensor::vector(vals.iter().map(|v| v + shift).collect()), 0).unwrap();
        for (a, b) in s.data().iter().zip(shifted.data()) {
            prop_assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn layer_norm_standardizes_non_degenerate_rows(
        vals in prop::collection::vec(-100.0f64..100.0, 2..16),
    ) {
        let n = vals.len() as f64;
        let mean = vals.iter().sum::<f64>() / n;
        let var = vals.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n;
        prop_assume!(var > 1e-3);
        let d = vals.len();
        let y = layer_norm(&Tensor::vector(vals), &Tensor::ones(&[d]), &Tensor::zeros(&[d]), LAYER_NORM_EPS).unwrap();
        let ym = y.data().iter().sum::<f64>() / n;
        let yv = y.data().iter().map(|v| (v - ym).powi(2)).sum::<f64>() / n;
        prop_assert!(ym.abs() < 1e-9);
        prop_assert!((yv - 1.0).abs() < 1e-6);
    }

    #[test]
    fn ops_are_pure(seed in any::<u64>()) {
        let run = || {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let mut t = Tape::new();
            let a = t.leaf(random(&mut rng, &[4, 3]));
            let w = t.leaf(random(&mut rng, &[3, 3]));
            let h = t.matmul(a, w).unwrap();
            let h = t.dropout(h, 0.4, Mode::Train, seed).unwrap();
            let h = t.softmax_rows(h);
            t.value(h).clone()
        };
        let (x, y) = (run(), run());
        prop_assert_eq!(x.data().iter().map(|v| v.to_bits()).collect::<Vec<_>>(),
                        y.data().iter().map(|v| v.to_bits()).collect::<Vec<_>>());
    }
}
