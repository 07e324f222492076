use std::collections::HashMap;

use intformer::eval::{
    all_players, attribution_csv, confusion, explain, false_alarm_rate, rank_players, sensitivity,
    shapley_exact, shapley_sampled, summary_export, ConfusionMatrix, Player, ShapleyMethod,
    DEFAULT_THRESHOLD,
};
use intformer::numcore::Tensor;
use intformer::{Error, Result};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

#[test]
fn confusion_matches_brute_force_tallies() {
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    for _ in 0..1000 {
        let n = rng.random_range(1..60);
        let p: Vec<f64> = (0..n).map(|_| rng.random()).collect();
        let y: Vec<u8> = (0..n).map(|_| rng.random_range(0..2)).collect();
        let cm = confusion(&p, &y, DEFAULT_THRESHOLD).unwrap();
        let count = |pred: bool, label: u8| {
            (0..n)
                .filter(|&i| (p[i] >= 0.5) == pred && y[i] == label)
                .count()
        };
        assert_eq!(cm.tp, count(true, 1));
        assert_eq!(cm.fp, count(true, 0));
        assert_eq!(cm.fn_, count(false, 1));
        assert_eq!(cm.tn, count(false, 0));
        assert_eq!(cm.total(), n);
        let pos = y.iter().filter(|&&v| v == 1).count();
        match sensitivity(&cm) {
            Ok(s) => assert_eq!(s, count(true, 1) as f64 / pos as f64),
            Err(Error::UndefinedMetric { .. }) => assert_eq!(pos, 0),
            Err(e) => panic!("{e}"),
        }
        match false_alarm_rate(&cm) {
            Ok(f) => assert_eq!(f, count(true, 0) as f64 / (n - pos) as f64),
            Err(Error::UndefinedMetric { .. }) => assert_eq!(pos, n),
            Err(e) => panic!("{e}"),
        }
    }
}

#[test]
fn metric_examples() {
    let cm = ConfusionMatrix { tp: 73, fp: 0, fn_: 27, tn: 10 };
    assert_eq!(cm.sensitivity().unwrap(), 0.73);
    assert_eq!(cm.false_alarm_rate().unwrap(), 0.0);
    let none = ConfusionMatrix { tp: 0, fp: 1, fn_: 5, tn: 0 };
    assert_eq!(none.sensitivity().unwrap(), 0.0);
    let all_pos = confusion(&[0.9, 0.9], &[1, 0], 0.5).unwrap();
    assert_eq!((all_pos.tp, all_pos.fp), (1, 1));
    let perfect = confusion(&[0.7, 0.1, 0.99], &[1, 0, 1], 0.5).unwrap();
    assert_eq!((perfect.fp, perfect.fn_), (0, 0));
    assert!(matches!(confusion(&[0.1], &[1, 0], 0.5), Err(Error::Dimension(_))));
    let empty = ConfusionMatrix::default();
    assert!(matches!(empty.sensitivity(), Err(Error::UndefinedMetric { .. })));
    assert!(matches!(empty.false_alarm_rate(), Err(Error::UndefinedMetric { .. })));
}

/// A nonlinear scorer of 2 × 5 windows with pairwise interactions.
struct RandomModel {
    w: Vec<f64>,
    pairs: Vec<(usize, usize, f64)>,
}

impl RandomModel {
    fn new(rng: &mut ChaCha8Rng, cells: usize) -> Self {
        Self {
            w: (0..cells).map(|_| rng.random_range(-1.0..1.0)).collect(),
            pairs: (0..6)
                .map(|_| (rng.random_range(0..cells), rng.random_range(0..cells), rng.random_range(-1.0..1.0)))
                .collect(),
        }
    }

    fn value(&self, x: &Tensor) -> f64 {
        let d = x.data();
        let lin: f64 = self.w.iter().zip(d).map(|(w, v)| w * v).sum();
        let inter: f64 = self.pairs.iter().map(|&(i, j, c)| c * d[i] * d[j]).sum();
        1.0 / (1.0 + (-(lin + inter)).exp())
    }

    fn batch(&self) -> impl Fn(&[Tensor]) -> Result<Vec<f64>> + Sync + '_ {
        move |ws: &[Tensor]| Ok(ws.iter().map(|x| self.value(x)).collect())
    }
}

fn window(rng: &mut ChaCha8Rng, t: usize, f: usize) -> Tensor {
    Tensor::matrix(t, f, (0..t * f).map(|_| rng.random_range(-2.0..2.0)).collect()).unwrap()
}

/// Average marginal contribution over every ordering of the players.
fn permutation_oracle(model: &RandomModel, x: &Tensor, base: &Tensor, players: &[Player]) -> Vec<f64> {
    let n = players.len();
    let mut cache: HashMap<u32, f64> = HashMap::new();
    let mut value = |mask: u32| {
        *cache.entry(mask).or_insert_with(|| {
            // non-players keep their values from x
            let mut z = x.clone();
            for (i, p) in players.iter().enumerate() {
                if mask & (1 << i) == 0 {
                    let c = p.timestep * x.cols() + p.feature;
                    z.data_mut()[c] = base.data()[c];
                }
            }
            model.value(&z)
        })
    };
    let mut phi = vec![0.0; n];
    let mut perm: Vec<usize> = (0..n).collect();
    let mut count = 0u64;
    // Heap's algorithm
    let mut c = vec![0usize; n];
    let mut visit = |perm: &[usize], phi: &mut [f64]| {
        let mut mask = 0u32;
        for &i in perm {
            let before = value(mask);
            mask |= 1 << i;
            phi[i] += value(mask) - before;
        }
    };
    visit(&perm, &mut phi);
    count += 1;
    let mut i = 0;
    while i < n {
        if c[i] < i {
            if i % 2 == 0 {
                perm.swap(0, i);
            } else {
                perm.swap(c[i], i);
            }
            visit(&perm, &mut phi);
            count += 1;
            c[i] += 1;
            i = 0;
        } else {
            c[i] = 0;
            i += 1;
        }
    }
    assert_eq!(count, (1..=n as u64).product::<u64>());
    phi.iter().map(|v| v / count as f64).collect()
}

#[test]
fn exact_matches_all_permutations_oracle() {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    for _ in 0..3 {
        let model = RandomModel::new(&mut rng, 10);
        let x = window(&mut rng, 2, 5);
        let base = window(&mut rng, 2, 5);
        let players: Vec<Player> = all_players(2, 5).into_iter().take(8).collect();
        let f = model.batch();
        let phi = shapley_exact(&f, &x, &base, &players).unwrap();
        let oracle = permutation_oracle(&model, &x, &base, &players);
        for (a, b) in phi.iter().zip(&oracle) {
            assert!((a - b).abs() < 1e-9, "{a} vs {b}");
        }
    }
}

#[test]
fn exact_efficiency_symmetry_and_null_player() {
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    for _ in 0..10 {
        let model = RandomModel::new(&mut rng, 10);
        let x = window(&mut rng, 2, 5);
        let base = window(&mut rng, 2, 5);
        let players = all_players(2, 5);
        let phi = shapley_exact(&model.batch(), &x, &base, &players).unwrap();
        let gap = model.value(&x) - model.value(&base);
        assert!((phi.iter().sum::<f64>() - gap).abs() < 1e-9);
    }
    // f reads cells 0 and 1 symmetrically and never reads cell 2
    let f = |ws: &[Tensor]| -> Result<Vec<f64>> {
        Ok(ws.iter().map(|x| (x.data()[0] * x.data()[1]).tanh() + x.data()[0] + x.data()[1]).collect())
    };
    let x = Tensor::matrix(1, 3, vec![0.7, 0.7, 5.0]).unwrap();
    let base = Tensor::zeros(&[1, 3]);
    let phi = shapley_exact(&f, &x, &base, &all_players(1, 3)).unwrap();
    assert!((phi[0] - phi[1]).abs() < 1e-15);
    assert_eq!(phi[2], 0.0);
}

#[test]
fn additive_model_recovers_inputs() {
    let f = |ws: &[Tensor]| -> Result<Vec<f64>> { Ok(ws.iter().map(|x| x.data()[0] + x.data()[1]).collect()) };
    let x = Tensor::matrix(1, 2, vec![3.0, 5.0]).unwrap();
    let base = Tensor::zeros(&[1, 2]);
    let players = all_players(1, 2);
    assert_eq!(shapley_exact(&f, &x, &base, &players).unwrap(), vec![3.0, 5.0]);
    let s = shapley_sampled(&f, &x, &base, &players, 1, 9).unwrap();
    assert_eq!(s.values, vec![3.0, 5.0]);
    assert_eq!(s.efficiency_residual, 0.0);
}

#[test]
fn exact_refuses_large_player_sets() {
    let f = |ws: &[Tensor]| -> Result<Vec<f64>> { Ok(vec![0.0; ws.len()]) };
    let x = Tensor::zeros(&[2, 7]);
    match shapley_exact(&f, &x, &x, &all_players(2, 7)) {
        Err(Error::TooManyPlayers { players: 14, limit: 12 }) => {}
        other => panic!("{other:?}"),
    }
    let dup = [Player { timestep: 0, feature: 1 }; 2];
    assert!(shapley_exact(&f, &x, &x, &dup).is_err());
}

#[test]
fn sampled_estimates_lie_within_three_standard_errors() {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let mut worst = 0.0f64;
    for m in 0..10 {
        let model = RandomModel::new(&mut rng, 10);
        let x = window(&mut rng, 2, 5);
        let base = window(&mut rng, 2, 5);
        let players = all_players(2, 5);
        let f = model.batch();
        let exact = shapley_exact(&f, &x, &base, &players).unwrap();
        let s = shapley_sampled(&f, &x, &base, &players, 400, m).unwrap();
        assert!(s.efficiency_residual.abs() < 1e-9);
        for i in 0..players.len() {
            let err = (s.values[i] - exact[i]).abs();
            if s.stderr[i] == 0.0 {
                assert!(err < 1e-12);
            } else {
                worst = worst.max(err / s.stderr[i]);
            }
        }
    }
    assert!(worst <= 3.0, "largest deviation {worst} standard errors");
}

#[test]
fn sampled_is_reproducible_and_converges() {
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let model = RandomModel::new(&mut rng, 10);
    let x = window(&mut rng, 2, 5);
    let base = window(&mut rng, 2, 5);
    let players = all_players(2, 5);
    let f = model.batch();
    let a = shapley_sampled(&f, &x, &base, &players, 1, 5).unwrap();
    let b = shapley_sampled(&f, &x, &base, &players, 1, 5).unwrap();
    assert_eq!(a.values, b.values);
    assert!(a.stderr.iter().all(|s| s.is_nan()));
    let mean_se = |n| {
        let s = shapley_sampled(&f, &x, &base, &players, n, 6).unwrap();
        s.stderr.iter().sum::<f64>() / s.stderr.len() as f64
    };
    let ratio = mean_se(100) / mean_se(1600);
    // expected ratio is √16 = 4
    assert!((2.5..6.0).contains(&ratio), "ratio {ratio}");
}

fn names(n: usize) -> Vec<String> {
    (0..n).map(|i| format!("f{i}")).collect()
}

#[test]
fn summary_has_top_k_rows_per_timestep() {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let w: Vec<f64> = (0..142).map(|_| rng.random_range(-1.0..1.0)).collect();
    let f = move |ws: &[Tensor]| -> Result<Vec<f64>> {
        Ok(ws.iter().map(|x| x.data().iter().zip(&w).map(|(a, b)| a * b).sum()).collect())
    };
    let x = window(&mut rng, 2, 71);
    let base = Tensor::zeros(&[2, 71]);
    let report = explain(&f, &[(7, &x)], &base, &names(71), ShapleyMethod::Sampled { permutations: 2 }, 0).unwrap();
    let csv = summary_export(&report, 10, true).unwrap();
    let rows: Vec<&str> = csv.lines().skip(1).collect();
    assert_eq!(rows.len(), 20);
    assert_eq!(rows.iter().filter(|r| r.starts_with("0,")).count(), 10);
    assert_eq!(rows.iter().filter(|r| r.starts_with("1,")).count(), 10);
    assert!(csv.starts_with("timestep,feature,window_id,shap_value,feature_value\n"));
    assert!(rows.iter().all(|r| r.split(',').nth(2) == Some("7")));
    assert_eq!(attribution_csv(&report).lines().count(), 1 + 142);
}

#[test]
fn ranking_matches_independent_sort() {
    let mut rng = ChaCha8Rng::seed_from_u64(6);
    let model = RandomModel::new(&mut rng, 10);
    let xs: Vec<Tensor> = (0..4).map(|_| window(&mut rng, 2, 5)).collect();
    let base = Tensor::zeros(&[2, 5]);
    let batch: Vec<(usize, &Tensor)> = xs.iter().enumerate().collect();
    let report = explain(&model.batch(), &batch, &base, &names(5), ShapleyMethod::Exact, 0).unwrap();
    assert!(report.efficiency_residuals.iter().all(|r| r.abs() < 1e-9));
    let ranked = rank_players(&report, 3, false).unwrap();
    let mut table: Vec<(f64, usize)> = (0..10)
        .map(|p| (report.values.iter().map(|v| v[p].abs()).sum::<f64>() / 4.0, p))
        .collect();
    table.sort_by(|a, b| b.0.total_cmp(&a.0));
    for (r, (imp, p)) in ranked.iter().zip(&table) {
        assert!((r.mean_abs_shap - imp).abs() < 1e-15);
        assert_eq!(r.feature, format!("f{}", p % 5));
        assert_eq!(r.timestep, p / 5);
    }
}

#[test]
fn single_feature_model_ranks_that_feature_first() {
    let f = |ws: &[Tensor]| -> Result<Vec<f64>> { Ok(ws.iter().map(|x| 2.0 * x.at(1, 3)).collect()) };
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    let x = window(&mut rng, 2, 5);
    let report = explain(&f, &[(0, &x)], &Tensor::zeros(&[2, 5]), &names(5), ShapleyMethod::Exact, 0).unwrap();
    let top = rank_players(&report, 1, false).unwrap();
    assert_eq!((top[0].timestep, top[0].feature.as_str()), (1, "f3"));
}
