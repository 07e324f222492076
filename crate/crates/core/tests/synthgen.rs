use intformer::datamodel::{
    approach_feature_names, flatten_features, study_roster, IntersectionGeometry, IntersectionId,
    Zone,
};
use intformer::synthgen::{
    generate_snapshots, inject_crashes, CrashInjectionPlan, FeatureCalibration, GeneratorOptions,
    SnapshotStream,
};

fn roster() -> Vec<IntersectionGeometry> {
    study_roster().into_iter().map(|r| r.geometry).collect()
}

#[test]
fn full_roster_year_matches_marginals() {
    let cal = FeatureCalibration::reported();
    let names = approach_feature_names();
    let mut sums = vec![0.0f64; names.len()];
    let mut n = 0usize;
    let mut out_of_bounds = Vec::new();
    for snap in generate_snapshots(&roster(), &cal, 2021).unwrap() {
        let row = flatten_features(&snap);
        for (j, v) in row.iter().enumerate() {
            let s = cal.get(&names[j]).unwrap();
            if *v < s.min || *v > s.max {
                out_of_bounds.push((names[j].clone(), *v));
            }
            sums[j] += v;
        }
        for m in [snap.traffic.left, snap.traffic.through, snap.traffic.right] {
            m.validate().unwrap();
        }
        n += 1;
    }
    assert_eq!(n, 1_051_200);
    assert!(out_of_bounds.is_empty(), "{:?}", &out_of_bounds[..out_of_bounds.len().min(5)]);
    for (j, name) in names.iter().enumerate() {
        let s = cal.get(name).unwrap();
        let mean = sums[j] / n as f64;
        assert!(
            (mean - s.mean).abs() <= 0.1 * s.std,
            "{name}: sample mean {mean} vs {} (std {})",
            s.mean,
            s.std
        );
    }
    let asa_l = sums[0] / n as f64;
    assert!((asa_l - 30.13).abs() <= 0.5);
}

#[test]
fn same_seed_is_bit_identical() {
    let opts = GeneratorOptions {
        days: 2,
        ..GeneratorOptions::default()
    };
    let run = |seed| -> Vec<u64> {
        SnapshotStream::new(&roster()[..2], &FeatureCalibration::reported(), &opts, seed)
            .unwrap()
            .flat_map(|s| flatten_features(&s).map(f64::to_bits))
            .collect()
    };
    assert_eq!(run(5), run(5));
    assert_ne!(run(5), run(6));
}

#[test]
fn reported_plan_splits_zones_and_is_deterministic() {
    let cal = FeatureCalibration::reported();
    let opts = GeneratorOptions {
        days: 30,
        ..GeneratorOptions::default()
    };
    let geo = vec![
        IntersectionGeometry::four_leg(IntersectionId(1), "a"),
        IntersectionGeometry::three_leg(IntersectionId(2), "b"),
    ];
    let base: Vec<_> = SnapshotStream::new(&geo, &cal, &opts, 1).unwrap().collect();
    let plan = CrashInjectionPlan::new(462, 1.0, &cal).unwrap();
    let mut a = base.clone();
    let mut b = base.clone();
    let ea = inject_crashes(&mut a, &plan, 77).unwrap();
    let eb = inject_crashes(&mut b, &plan, 77).unwrap();
    assert_eq!(ea, eb);
    assert_eq!(a, b);
    assert_eq!(ea.len(), 462);
    let within = ea.iter().filter(|e| e.zone == Zone::WithinIntersection).count();
    assert_eq!(within, 338);
    let first = base[0].timestamp;
    let end = first + chrono::Duration::days(30);
    for e in &ea {
        assert!(e.timestamp > first && e.timestamp <= end);
        assert_eq!(e.timestamp.and_utc().timestamp() % 60, 0);
    }
    for s in &a {
        for m in [s.traffic.left, s.traffic.through, s.traffic.right] {
            m.validate().unwrap();
        }
    }
}

#[test]
fn one_crash_plan() {
    let cal = FeatureCalibration::reported();
    let opts = GeneratorOptions {
        days: 1,
        ..GeneratorOptions::default()
    };
    let geo = [IntersectionGeometry::four_leg(IntersectionId(1), "a")];
    let mut snaps: Vec<_> = SnapshotStream::new(&geo, &cal, &opts, 1).unwrap().collect();
    let plan = CrashInjectionPlan::new(1, 1.0, &cal).unwrap();
    assert_eq!(inject_crashes(&mut snaps, &plan, 2).unwrap().len(), 1);
}
