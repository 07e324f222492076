use chrono::NaiveDate;
use intformer::datamodel::{Direction, IntersectionId, LabeledWindow, WindowOrigin};
use intformer::models::{InTformerConfig, LstmConfig, ModelConfig, Network};
use intformer::numcore::{ParamSet, Tensor};
use intformer::trainer::{
    bce_grad, bce_loss, train, AdamConfig, AdamState, Normalizer, TrainConfig, TrainedModel,
};
use intformer::Error;
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn origin(i: usize) -> WindowOrigin {
    WindowOrigin {
        intersection: IntersectionId(1),
        approach: Direction::N,
        end: NaiveDate::from_ymd_opt(2021, 7, 1)
            .unwrap()
            .and_hms_opt(0, 0, 0)
            .unwrap()
            + chrono::Duration::minutes(15 * i as i64),
        synthetic: false,
    }
}

/// Two classes separated along feature 0, with offsets and scales that
/// only make sense after normalization.
fn separable(n: usize, steps: usize, width: usize, seed: u64) -> Vec<LabeledWindow> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..n)
        .map(|i| {
            let label = (i % 2) as u8;
            let shift = if label == 1 { 2.0 } else { -2.0 };
            let data = (0..steps * width)
                .map(|k| {
                    let base = rng.random_range(-1.0..1.0);
                    if k % width == 0 {
                        50.0 + 10.0 * (base * 0.5 + shift)
                    } else {
                        100.0 * base
                    }
                })
                .collect();
            LabeledWindow {
                features: Tensor::matrix(steps, width, data).unwrap(),
                label,
                origin: origin(i),
            }
        })
        .collect()
}

fn tiny_intformer(steps: usize, width: usize) -> ModelConfig {
    ModelConfig::Intformer(InTformerConfig {
        time_dims: 2,
        d_model: 8,
        heads: 2,
        encoders: 1,
        d_ff: 16,
        dropout: 0.0,
        ..InTformerConfig::new(steps, width)
    })
}

fn cfg(lr: f64, batch: usize, epochs: usize, seed: u64) -> TrainConfig {
    TrainConfig {
        learning_rate: lr,
        batch_size: batch,
        epochs,
        optimizer: Default::default(),
        seed,
        patience: None,
    }
}

#[test]
fn bce_known_values() {
    assert!((bce_loss(&[0.5], &[1.0]) - std::f64::consts::LN_2).abs() < 1e-12);
    assert!(bce_loss(&[1.0 - 1e-12], &[1.0]) < 1e-11);
    assert!(bce_loss(&[0.0], &[1.0]).is_finite());
    let mean = bce_loss(&[0.2, 0.9], &[0.0, 1.0]);
    assert!((mean - (-(0.8f64.ln()) - 0.9f64.ln()) / 2.0).abs() < 1e-12);
}

#[test]
fn bce_gradient_matches_central_difference() {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    for _ in 0..200 {
        let p: f64 = rng.random_range(0.01..0.99);
        let y = rng.random_range(0..2) as f64;
        let h = 1e-6;
        let numeric = (bce_loss(&[p + h], &[y]) - bce_loss(&[p - h], &[y])) / (2.0 * h);
        let analytic = bce_grad(p, y);
        assert!((numeric - analytic).abs() / analytic.abs().max(1.0) < 1e-6);
        assert!((analytic - (p - y) / (p * (1.0 - p))).abs() < 1e-9);
    }
}

fn scalar_params(w: f64) -> ParamSet {
    let mut p = ParamSet::new();
    p.insert("w", Tensor::vector(vec![w]));
    p
}

#[test]
fn adam_zero_gradient_leaves_parameters() {
    let mut p = scalar_params(1.25);
    let g = scalar_params(0.0);
    let mut st = AdamState::new(&p);
    for _ in 0..5 {
        st.step(&mut p, &g, &AdamConfig::new(0.1)).unwrap();
    }
    assert_eq!(p.get("w").unwrap().data(), &[1.25]);
}

#[test]
fn adam_converges_on_scalar_quadratic() {
    let mut p = scalar_params(0.0);
    let mut st = AdamState::new(&p);
    for _ in 0..50 {
        let w = p.get("w").unwrap().data()[0];
        st.step(&mut p, &scalar_params(2.0 * (w - 3.0)), &AdamConfig::new(0.1)).unwrap();
    }
    let w = p.get("w").unwrap().data()[0];
    assert!((w - 3.0).abs() < 0.5, "w = {w}");
}

proptest! {
    #[test]
    fn adam_step_decreases_convex_quadratics(
        a in proptest::collection::vec(0.1f64..5.0, 3),
        c in proptest::collection::vec(-3.0f64..3.0, 3),
        w0 in proptest::collection::vec(-3.0f64..3.0, 3),
    ) {
        prop_assume!(w0.iter().zip(&c).all(|(w, c)| (w - c).abs() > 1e-2));
        let f = |w: &[f64]| (0..3).map(|i| a[i] * (w[i] - c[i]).powi(2)).sum::<f64>();
        let mut p = ParamSet::new();
        p.insert("w", Tensor::vector(w0.clone()));
        let mut g = ParamSet::new();
        g.insert("w", Tensor::vector((0..3).map(|i| 2.0 * a[i] * (w0[i] - c[i])).collect()));
        let mut st = AdamState::new(&p);
        st.step(&mut p, &g, &AdamConfig::new(1e-4)).unwrap();
        prop_assert!(f(p.get("w").unwrap().data()) < f(&w0));
    }

    #[test]
    fn normalizer_round_trips(
        rows in proptest::collection::vec(proptest::collection::vec(-1e4f64..1e4, 3), 2..12),
    ) {
        let windows: Vec<Tensor> = rows
            .chunks(2)
            .filter(|c| c.len() == 2)
            .map(|c| Tensor::from_rows(c).unwrap())
            .collect();
        prop_assume!(!windows.is_empty());
        let refs: Vec<&Tensor> = windows.iter().collect();
        let norm = Normalizer::fit(&refs).unwrap();
        for w in &windows {
            let back = norm.invert(&norm.apply(w).unwrap()).unwrap();
            for (a, b) in back.data().iter().zip(w.data()) {
                prop_assert!((a - b).abs() <= 1e-9 * b.abs().max(1.0));
            }
        }
    }
}

#[test]
fn normalizer_standardizes_and_floors_constant_features() {
    let ws = [
        Tensor::from_rows(&[vec![1.0, 7.0], vec![3.0, 7.0]]).unwrap(),
        Tensor::from_rows(&[vec![5.0, 7.0], vec![7.0, 7.0]]).unwrap(),
    ];
    let n = Normalizer::fit(&[&ws[0], &ws[1]]).unwrap();
    assert_eq!(n.mean, vec![4.0, 7.0]);
    assert!((n.std[0] - 5f64.sqrt()).abs() < 1e-12);
    assert_eq!(n.std[1], 1e-8);
    let z = n.apply(&ws[0]).unwrap();
    assert_eq!(z.at(0, 1), 0.0);
    assert!(matches!(n.apply(&Tensor::zeros(&[2, 3])), Err(Error::Dimension(_))));
}

#[test]
fn tiny_intformer_overfits_separable_windows() {
    let data = separable(32, 2, 3, 7);
    let net = Network::new(tiny_intformer(2, 3), 3).unwrap();
    let model = train(net, &data, &cfg(0.01, 8, 200, 5)).unwrap();
    let ws: Vec<&Tensor> = data.iter().map(|w| &w.features).collect();
    let p = model.predict(&ws).unwrap();
    let correct = p
        .iter()
        .zip(&data)
        .filter(|(p, w)| (**p >= 0.5) == (w.label == 1))
        .count();
    assert_eq!(correct, 32);
}

#[test]
fn full_batch_loss_is_non_increasing() {
    let data = separable(32, 2, 3, 8);
    let net = Network::new(tiny_intformer(2, 3), 4).unwrap();
    let model = train(net, &data, &cfg(1e-3, 32, 60, 1)).unwrap();
    for pair in model.history.windows(2) {
        assert!(
            pair[1].mean_train_loss <= pair[0].mean_train_loss + 1e-6,
            "{pair:?}"
        );
    }
    assert!(model.history.last().unwrap().mean_train_loss < model.history[0].mean_train_loss);
}

#[test]
fn training_is_bit_reproducible() {
    let data = separable(40, 3, 4, 9);
    let run = |seed| {
        let net = Network::new(
            ModelConfig::Intformer(InTformerConfig {
                dropout: 0.2,
                ..match tiny_intformer(3, 4) {
                    ModelConfig::Intformer(c) => c,
                    _ => unreachable!(),
                }
            }),
            1,
        )
        .unwrap();
        train(net, &data, &cfg(0.005, 16, 4, seed)).unwrap()
    };
    let a = run(11);
    let b = run(11);
    assert_eq!(a.checkpoint_json().unwrap(), b.checkpoint_json().unwrap());
    assert_eq!(a.loss_csv(), b.loss_csv());
    let c = run(12);
    assert_ne!(a.checkpoint_json().unwrap(), c.checkpoint_json().unwrap());
}

#[test]
fn checkpoint_restores_predictions() {
    let data = separable(24, 2, 3, 10);
    let net = Network::new(
        ModelConfig::Lstm(LstmConfig {
            timesteps: 2,
            features: 3,
            hidden: 4,
        }),
        2,
    )
    .unwrap();
    let model = train(net, &data, &cfg(0.01, 8, 3, 0)).unwrap();
    let back = TrainedModel::from_checkpoint_json(&model.checkpoint_json().unwrap()).unwrap();
    let ws: Vec<&Tensor> = data.iter().map(|w| &w.features).collect();
    assert_eq!(model.predict(&ws).unwrap(), back.predict(&ws).unwrap());
    assert_eq!(model.network, back.network);
    assert!(model.loss_csv().starts_with("epoch,mean_train_loss\n0,"));
    assert_eq!(model.loss_csv().lines().count(), 4);
}

#[test]
fn non_finite_inputs_surface_as_divergence() {
    let mut data = separable(16, 2, 3, 11);
    data[5].features.data_mut()[0] = f64::INFINITY;
    let net = Network::new(tiny_intformer(2, 3), 0).unwrap();
    match train(net, &data, &cfg(0.01, 4, 2, 0)) {
        Err(Error::Divergence { epoch, .. }) => assert_eq!(epoch, 0),
        other => panic!("{other:?}"),
    }
}

#[test]
fn invalid_train_configs_are_rejected() {
    let data = separable(4, 2, 3, 0);
    let net = Network::new(tiny_intformer(2, 3), 0).unwrap();
    assert!(matches!(train(net.clone(), &data, &cfg(0.0, 4, 1, 0)), Err(Error::Config(_))));
    assert!(matches!(train(net.clone(), &data, &cfg(0.1, 0, 1, 0)), Err(Error::Config(_))));
    assert!(train(net, &[], &cfg(0.1, 4, 1, 0)).is_err());
}

#[test]
fn patience_stops_early() {
    let data = separable(16, 2, 3, 12);
    let net = Network::new(tiny_intformer(2, 3), 0).unwrap();
    let mut c = cfg(1e-12, 16, 50, 0);
    c.patience = Some(2);
    let model = train(net, &data, &c).unwrap();
    assert!(model.history.len() < 50);
}
