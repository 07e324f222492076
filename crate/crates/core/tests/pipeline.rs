use std::collections::BTreeSet;

use chrono::{Duration, NaiveDate, NaiveDateTime};
use intformer::datamodel::{
    flatten_features, within_column, CrashEvent, Direction, IntersectionGeometry, IntersectionId,
    IntersectionSnapshot, LabeledWindow, WindowOrigin, Zone,
};
use intformer::numcore::Tensor;
use intformer::pipeline::{
    correlation_matrix, covering_intervals, exclude_post_crash, extra_trees_importance,
    format_approach, format_within_intersection, index_crashes, pearson_r, select_features,
    smote_resample, split_train_test, stack_windows, ExtraTreesConfig, FeatureTable, RowKey,
};
use intformer::synthgen::{FeatureCalibration, GeneratorOptions, SnapshotStream};
use intformer::Error;
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn at(h: u32, m: u32) -> NaiveDateTime {
    NaiveDate::from_ymd_opt(2021, 7, 1).unwrap().and_hms_opt(h, m, 0).unwrap()
}

fn day_of(geo: &[IntersectionGeometry], days: usize) -> Vec<IntersectionSnapshot> {
    let opts = GeneratorOptions {
        days,
        ..GeneratorOptions::default()
    };
    SnapshotStream::new(geo, &FeatureCalibration::reported(), &opts, 3).unwrap().collect()
}

/// One-column table with a single stream of contiguous 15-minute rows.
fn stream_table(n: usize, start: NaiveDateTime) -> FeatureTable {
    let keys = (0..n)
        .map(|i| RowKey {
            intersection: IntersectionId(1),
            approach: Direction::N,
            timestamp: start + Duration::minutes(15 * i as i64),
        })
        .collect();
    FeatureTable::new(
        Zone::Approach,
        vec!["x".into()],
        keys,
        (0..n).map(|i| i as f64).collect(),
    )
    .unwrap()
}

#[test]
fn four_leg_timestep_gives_four_rows_of_114() {
    let geo = IntersectionGeometry::four_leg(IntersectionId(1), "x");
    let snaps: Vec<_> = day_of(std::slice::from_ref(&geo), 1).into_iter().take(4).collect();
    let t = format_within_intersection(&snaps, &geo).unwrap();
    assert_eq!(t.len(), 4);
    assert_eq!(t.width(), 114);
    let refs: BTreeSet<_> = t.keys.iter().map(|k| k.approach).collect();
    assert_eq!(refs.len(), 4);
}

#[test]
fn north_reference_puts_west_in_slot_b() {
    let geo = IntersectionGeometry::four_leg(IntersectionId(1), "x");
    let snaps: Vec<_> = day_of(std::slice::from_ref(&geo), 1).into_iter().take(4).collect();
    let t = format_within_intersection(&snaps, &geo).unwrap();
    let row = (0..t.len()).find(|&i| t.keys[i].approach == Direction::N).unwrap();
    let expect = [Direction::N, Direction::W, Direction::S, Direction::E];
    for (slot, d) in expect.iter().enumerate() {
        let snap = snaps.iter().find(|s| s.approach == *d).unwrap();
        let flat = flatten_features(snap);
        for mm in 0..27 {
            assert_eq!(t.row(row)[within_column(mm, slot)], flat[mm], "slot {slot} mm {mm}");
        }
    }
    assert_eq!(&t.row(row)[108..], &flatten_features(&snaps[0])[27..]);
}

#[test]
fn three_leg_rows_have_zero_d_block() {
    let geo = IntersectionGeometry::three_leg(IntersectionId(2), "y");
    let snaps = day_of(std::slice::from_ref(&geo), 1);
    let t = format_within_intersection(&snaps, &geo).unwrap();
    assert_eq!(t.len(), 3 * 96);
    for i in 0..t.len() {
        for mm in 0..27 {
            assert_eq!(t.row(i)[within_column(mm, 3)], 0.0);
        }
        assert!(t.row(i)[within_column(0, 2)] > 0.0);
    }
}

#[test]
fn missing_leg_is_gap_error() {
    let geo = IntersectionGeometry::four_leg(IntersectionId(1), "x");
    let mut snaps = day_of(std::slice::from_ref(&geo), 1);
    let removed = snaps.remove(9);
    match format_within_intersection(&snaps, &geo) {
        Err(Error::Gap {
            approach,
            timestamp,
            ..
        }) => {
            assert_eq!(approach, removed.approach.code());
            assert_eq!(timestamp, removed.timestamp.to_string());
        }
        other => panic!("expected gap error, got {other:?}"),
    }
}

#[test]
fn approach_rows_are_positional_projection() {
    let geo = IntersectionGeometry::four_leg(IntersectionId(1), "x");
    let snaps = day_of(&[geo], 1);
    let one = format_approach(&snaps[..1]);
    assert_eq!((one.len(), one.width()), (1, 33));
    assert_eq!(one.row(0), flatten_features(&snaps[0]).as_slice());
    let all = format_approach(&snaps);
    assert_eq!(all.len(), snaps.len());
    for (i, k) in all.keys.iter().enumerate() {
        let s = snaps
            .iter()
            .find(|s| s.approach == k.approach && s.timestamp == k.timestamp)
            .unwrap();
        assert_eq!(all.row(i), flatten_features(s).as_slice());
    }
}

#[test]
fn crash_at_1050_labels_1045_and_1030() {
    let t = stream_table(96, at(0, 0));
    let crash = CrashEvent::new(IntersectionId(1), Some(Direction::N), Zone::Approach, at(10, 50)).unwrap();
    let idx = index_crashes(&t, &[crash], Zone::Approach);
    let labeled: Vec<_> = (0..t.len()).filter(|&i| idx.labels[i] == 1).map(|i| t.keys[i].timestamp).collect();
    assert_eq!(labeled, [at(10, 30), at(10, 45)]);
    let crash = CrashEvent::new(IntersectionId(1), Some(Direction::N), Zone::Approach, at(11, 0)).unwrap();
    let idx = index_crashes(&t, &[crash], Zone::Approach);
    let labeled: Vec<_> = (0..t.len()).filter(|&i| idx.labels[i] == 1).map(|i| t.keys[i].timestamp).collect();
    assert_eq!(labeled, [at(10, 30), at(10, 45)]);
    assert_eq!(index_crashes(&t, &[], Zone::Approach).positives(), 0);
}

#[test]
fn zone_routing_and_ignored_crashes() {
    let geo = IntersectionGeometry::four_leg(IntersectionId(1), "x");
    let snaps = day_of(std::slice::from_ref(&geo), 1);
    let within = format_within_intersection(&snaps, &geo).unwrap();
    let approach = format_approach(&snaps);
    let c_w = CrashEvent::new(IntersectionId(1), None, Zone::WithinIntersection, at(10, 50)).unwrap();
    let c_a = CrashEvent::new(IntersectionId(1), Some(Direction::E), Zone::Approach, at(12, 7)).unwrap();
    let far = CrashEvent::new(IntersectionId(1), None, Zone::WithinIntersection, at(10, 50) + Duration::days(9)).unwrap();
    let crashes = [c_w, c_a, far];
    let wi = index_crashes(&within, &crashes, Zone::WithinIntersection);
    assert_eq!(wi.positives(), 8);
    assert_eq!(wi.ignored, 1);
    let ai = index_crashes(&approach, &crashes, Zone::Approach);
    assert_eq!(ai.positives(), 2);
    assert_eq!(ai.ignored, 0);
    for i in 0..approach.len() {
        if ai.labels[i] == 1 {
            assert_eq!(approach.keys[i].approach, Direction::E);
        }
    }
}

#[test]
fn labels_cross_check_against_brute_force() {
    let mut rng = ChaCha8Rng::seed_from_u64(12);
    for _ in 0..50 {
        let t = stream_table(200, at(0, 0));
        let crashes: Vec<_> = (0..rng.random_range(1..6))
            .map(|_| {
                let minute = rng.random_range(0..(200 * 15 + 40));
                CrashEvent::new(IntersectionId(1), Some(Direction::N), Zone::Approach, at(0, 0) + Duration::minutes(minute)).unwrap()
            })
            .collect();
        let idx = index_crashes(&t, &crashes, Zone::Approach);
        for (i, k) in t.keys.iter().enumerate() {
            let s = k.timestamp;
            let expected = crashes
                .iter()
                .any(|c| c.timestamp > s && c.timestamp <= s + Duration::minutes(30));
            assert_eq!(idx.labels[i] == 1, expected, "{s}");
        }
        for c in &crashes {
            for s in covering_intervals(c.timestamp) {
                if let Some(i) = t.keys.iter().position(|k| k.timestamp == s) {
                    assert_eq!(idx.labels[i], 1);
                }
            }
        }
    }
}

#[test]
fn isolated_crash_excludes_eight_rows() {
    let t = stream_table(96, at(0, 0));
    let crash = CrashEvent::new(IntersectionId(1), Some(Direction::N), Zone::Approach, at(10, 50)).unwrap();
    let idx = index_crashes(&t, &[crash], Zone::Approach);
    let (kept, labels) = exclude_post_crash(&t, &idx.labels).unwrap();
    assert_eq!(t.len() - kept.len(), 8);
    assert_eq!(labels.iter().filter(|&&l| l == 1).count(), 2);
    let gone: Vec<_> = t.keys.iter().filter(|k| !kept.keys.contains(k)).map(|k| k.timestamp).collect();
    let expected: Vec<_> = (1..=8).map(|i| at(10, 45) + Duration::minutes(15 * i)).collect();
    assert_eq!(gone, expected);
}

#[test]
fn crash_near_stream_end_excludes_fewer() {
    let t = stream_table(96, at(0, 0));
    let crash = CrashEvent::new(IntersectionId(1), Some(Direction::N), Zone::Approach, at(23, 20)).unwrap();
    let idx = index_crashes(&t, &[crash], Zone::Approach);
    let (kept, _) = exclude_post_crash(&t, &idx.labels).unwrap();
    assert_eq!(t.len() - kept.len(), 2);
}

#[test]
fn overlapping_exclusions_match_set_union() {
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    for _ in 0..30 {
        let t = stream_table(150, at(0, 0));
        let labels: Vec<u8> = (0..t.len()).map(|_| u8::from(rng.random_bool(0.04))).collect();
        let mut removed = BTreeSet::new();
        for (i, k) in t.keys.iter().enumerate() {
            if labels[i] == 1 {
                for (j, k2) in t.keys.iter().enumerate() {
                    let after = k2.timestamp > k.timestamp && k2.timestamp <= k.timestamp + Duration::hours(2);
                    if after && labels[j] == 0 {
                        removed.insert(j);
                    }
                }
            }
        }
        let (kept, kept_labels) = exclude_post_crash(&t, &labels).unwrap();
        assert_eq!(kept.len(), t.len() - removed.len());
        let expect_keys: Vec<_> = (0..t.len()).filter(|i| !removed.contains(i)).map(|i| t.keys[i]).collect();
        assert_eq!(kept.keys, expect_keys);
        assert_eq!(kept_labels.iter().filter(|&&l| l == 1).count(), labels.iter().filter(|&&l| l == 1).count());
    }
}

#[test]
fn pearson_matches_direct_formula() {
    let mut rng = ChaCha8Rng::seed_from_u64(8);
    for _ in 0..20 {
        let n = rng.random_range(2..50);
        let x: Vec<f64> = (0..n).map(|_| rng.random_range(-3.0..3.0)).collect();
        let y: Vec<f64> = (0..n).map(|_| rng.random_range(-3.0..3.0)).collect();
        let mean = |v: &[f64]| v.iter().sum::<f64>() / v.len() as f64;
        let (mx, my) = (mean(&x), mean(&y));
        let cov = x.iter().zip(&y).map(|(a, b)| (a - mx) * (b - my)).sum::<f64>() / n as f64;
        let sx = (x.iter().map(|a| (a - mx).powi(2)).sum::<f64>() / n as f64).sqrt();
        let sy = (y.iter().map(|b| (b - my).powi(2)).sum::<f64>() / n as f64).sqrt();
        assert!((pearson_r(&x, &y).unwrap() - cov / (sx * sy)).abs() < 1e-12);
    }
}

fn planted(seed: u64, n: usize, width: usize, signal: usize) -> (Vec<f64>, Vec<u8>) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let values: Vec<f64> = (0..n * width).map(|_| rng.random_range(0.0..1.0)).collect();
    let mut col: Vec<f64> = (0..n).map(|i| values[i * width + signal]).collect();
    col.sort_by(f64::total_cmp);
    let median = col[n / 2];
    let labels = (0..n).map(|i| u8::from(values[i * width + signal] > median)).collect();
    (values, labels)
}

#[test]
fn planted_signal_ranks_first() {
    for seed in 0..5 {
        let (values, labels) = planted(seed, 400, 12, 7);
        let cfg = ExtraTreesConfig {
            n_trees: 50,
            seed,
            ..ExtraTreesConfig::default()
        };
        let imp = extra_trees_importance(&values, 12, &labels, &cfg).unwrap();
        let best = (0..12).max_by(|&a, &b| imp[a].total_cmp(&imp[b])).unwrap();
        assert_eq!(best, 7, "{imp:?}");
        assert!((imp.iter().sum::<f64>() - 1.0).abs() < 1e-9);
        assert_eq!(imp, extra_trees_importance(&values, 12, &labels, &cfg).unwrap());
    }
}

#[test]
fn pure_noise_importance_is_flat() {
    let mut rng = ChaCha8Rng::seed_from_u64(21);
    let (n, width) = (500, 100);
    let values: Vec<f64> = (0..n * width).map(|_| rng.random_range(0.0..1.0)).collect();
    let labels: Vec<u8> = (0..n).map(|_| u8::from(rng.random_bool(0.5))).collect();
    let cfg = ExtraTreesConfig {
        n_trees: 100,
        seed: 2,
        ..ExtraTreesConfig::default()
    };
    let imp = extra_trees_importance(&values, width, &labels, &cfg).unwrap();
    let mean = 1.0 / width as f64;
    let max = imp.iter().cloned().fold(0.0, f64::max);
    assert!(max < 5.0 * mean, "max {max}");
    assert!((imp.iter().sum::<f64>() - 1.0).abs() < 1e-9);
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]
    #[test]
    fn selection_respects_threshold_and_is_maximal(seed in any::<u64>(), width in 2usize..10) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let n = 40;
        // Mix shared latent factors so some columns correlate strongly.
        let latent: Vec<[f64; 2]> = (0..n).map(|_| [rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0)]).collect();
        let mix: Vec<[f64; 3]> = (0..width).map(|_| [rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0), rng.random_range(0.05..1.0)]).collect();
        let mut values = Vec::with_capacity(n * width);
        for row in &latent {
            for m in &mix {
                values.push(m[0] * row[0] + m[1] * row[1] + m[2] * rng.random_range(-1.0..1.0));
            }
        }
        let names: Vec<String> = (0..width).map(|j| format!("f{j}")).collect();
        let imp: Vec<f64> = (0..width).map(|_| rng.random_range(0.0..1.0)).collect();
        let corr = correlation_matrix(&values, width).unwrap();
        let sel = select_features(&names, &imp, &corr, 0.5).unwrap();
        let kept: Vec<usize> = (0..width).filter(|&j| sel.features[j].kept).collect();
        let col = |j: usize| (0..n).map(|i| values[i * width + j]).collect::<Vec<_>>();
        for (a, &i) in kept.iter().enumerate() {
            for &j in &kept[a + 1..] {
                prop_assert!(pearson_r(&col(i), &col(j)).unwrap().abs() <= 0.5 + 1e-12);
            }
        }
        for j in (0..width).filter(|j| !kept.contains(j)) {
            let blocker = kept.iter().any(|&k| {
                let ranked_higher = imp[k] > imp[j] || (imp[k] == imp[j] && k < j);
                ranked_higher && corr[j * width + k].abs() > 0.5
            });
            prop_assert!(blocker, "feature {} dropped without a higher-ranked correlate", j);
        }
    }
}

#[test]
fn window_counts_labels_and_unstacking() {
    let t = stream_table(5, at(0, 0));
    let w = stack_windows(&t, &[0, 0, 1, 0, 0], 2).unwrap();
    assert_eq!(w.len(), 4);
    let t4 = stream_table(4, at(0, 0));
    let labels: Vec<u8> = stack_windows(&t4, &[0, 0, 1, 0], 2).unwrap().iter().map(|w| w.label).collect();
    assert_eq!(labels, [0, 1, 0]);
    for (k, win) in w.iter().enumerate() {
        for r in 0..2 {
            assert_eq!(win.features.row(r), t.row(k + r));
        }
        assert_eq!(win.origin.end, t.keys[k + 1].timestamp);
    }
    assert!(stack_windows(&stream_table(1, at(0, 0)), &[0], 2).unwrap().is_empty());
}

#[test]
fn windows_never_cross_gaps() {
    let full = stream_table(10, at(0, 0));
    let keep: Vec<bool> = (0..10).map(|i| i != 4).collect();
    let t = full.filter_rows(&keep).unwrap();
    let w = stack_windows(&t, &[0; 9], 3).unwrap();
    // Brute force: windows of 3 rows whose timestamps are consecutive.
    let mut expected = 0;
    for s in 0..t.len() - 2 {
        let ok = (s..s + 2).all(|i| t.keys[i + 1].timestamp - t.keys[i].timestamp == Duration::minutes(15));
        expected += usize::from(ok);
    }
    assert_eq!(w.len(), expected);
    assert_eq!(w.len(), 2 + 3);
}

fn toy_windows(n: usize, positives: usize, seed: u64) -> Vec<LabeledWindow> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..n)
        .map(|i| LabeledWindow {
            features: Tensor::new(vec![2, 3], (0..6).map(|_| rng.random_range(-1.0..1.0)).collect()).unwrap(),
            label: u8::from(i < positives),
            origin: WindowOrigin {
                intersection: IntersectionId(1),
                approach: Direction::N,
                end: at(0, 0) + Duration::minutes(15 * i as i64),
                synthetic: false,
            },
        })
        .collect()
}

#[test]
fn split_sizes_determinism_and_strata() {
    let w = toy_windows(100, 12, 1);
    let (train, test) = split_train_test(&w, 0.25, 9).unwrap();
    assert_eq!((train.len(), test.len()), (75, 25));
    let again = split_train_test(&w, 0.25, 9).unwrap();
    assert_eq!(again.0, train);
    assert_eq!(again.1, test);
    let tp = test.iter().filter(|w| w.label == 1).count() as f64;
    assert!((tp - 0.12 * 25.0).abs() <= 1.0);
    let trp = train.iter().filter(|w| w.label == 1).count() as f64;
    assert!((trp - 0.12 * 75.0).abs() <= 1.0);
}

#[test]
fn smote_balances_on_segments() {
    let w = toy_windows(100, 10, 2);
    let out = smote_resample(&w, 5, 3).unwrap();
    let pos = out.iter().filter(|w| w.label == 1).count();
    assert_eq!((pos, out.len() - pos), (90, 90));
    assert_eq!(&out[..100], w.as_slice());
    let minority: Vec<_> = w.iter().filter(|w| w.label == 1).collect();
    for s in out[100..].iter() {
        assert!(s.origin.synthetic && s.label == 1);
        let found = minority.iter().any(|a| {
            minority.iter().any(|b| {
                let (x, y, z) = (a.features.data(), b.features.data(), s.features.data());
                let denom: f64 = x.iter().zip(y).map(|(p, q)| (q - p) * (q - p)).sum();
                if denom == 0.0 {
                    return x.iter().zip(z).all(|(p, r)| (p - r).abs() < 1e-9);
                }
                let u = x.iter().zip(y).zip(z).map(|((p, q), r)| (q - p) * (r - p)).sum::<f64>() / denom;
                (-1e-9..=1.0 + 1e-9).contains(&u)
                    && x.iter().zip(y).zip(z).all(|((p, q), r)| (p + u * (q - p) - r).abs() < 1e-9)
            })
        });
        assert!(found);
    }
}

#[test]
fn smote_degenerate_cases() {
    let mut w = toy_windows(6, 2, 5);
    let copy = w[0].features.clone();
    w[1].features = copy.clone();
    let out = smote_resample(&w, 1, 0).unwrap();
    for s in &out[6..] {
        assert_eq!(s.features, copy);
    }
    let none = toy_windows(5, 0, 5);
    assert!(matches!(smote_resample(&none, 5, 0), Err(Error::Resampling(_))));
    let single = toy_windows(5, 1, 5);
    let out = smote_resample(&single, 5, 0).unwrap();
    assert!(out[5..].iter().all(|s| s.features == single[0].features));
}
