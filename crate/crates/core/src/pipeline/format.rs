use std::collections::BTreeMap;

use chrono::NaiveDateTime;

use crate::datamodel::{
    approach_feature_names, flatten_features, within_column, within_feature_names, Direction,
    IntersectionGeometry, IntersectionSnapshot, Zone, TRAFFIC_FEATURES, WEATHER_FEATURES,
    WITHIN_ROW_WIDTH,
};
use crate::error::{Error, Result};
use crate::pipeline::{FeatureTable, RowKey};

/// Relabeling of physical legs to slots A–D for one reference approach.
///
/// B is the leg on the driver's left when arriving on A; C and D follow
/// in the same rotation. On three-legged intersections the present legs are
/// packed into A, B, C and D stays empty.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct NomenclatureMap {
    slots: [Option<Direction>; 4],
}

impl NomenclatureMap {
    pub fn new(geometry: &IntersectionGeometry, reference: Direction) -> Result<Self> {
        if !geometry.has(reference) {
            return Err(Error::Config(format!(
                "{} has no {reference} approach",
                geometry.id
            )));
        }
        let mut slots = [None; 4];
        let mut d = reference;
        let mut next = 0;
        for _ in 0..4 {
            if geometry.has(d) {
                slots[next] = Some(d);
                next += 1;
            }
            d = d.left_neighbor();
        }
        Ok(Self { slots })
    }

    /// Physical leg in slot 0 = A … 3 = D.
    pub fn slot(&self, slot: usize) -> Option<Direction> {
        self.slots[slot]
    }

    pub fn slot_of(&self, d: Direction) -> Option<usize> {
        self.slots.iter().position(|s| *s == Some(d))
    }
}

/// One 114-wide row per (reference approach, timestamp) of `geometry`.
/// Snapshots of other intersections are ignored.
pub fn format_within_intersection(
    snapshots: &[IntersectionSnapshot],
    geometry: &IntersectionGeometry,
) -> Result<FeatureTable> {
    let mut by_time: BTreeMap<NaiveDateTime, [Option<&IntersectionSnapshot>; 4]> = BTreeMap::new();
    for s in snapshots.iter().filter(|s| s.intersection == geometry.id) {
        let leg = Direction::ALL.iter().position(|d| *d == s.approach).expect("known direction");
        by_time.entry(s.timestamp).or_default()[leg] = Some(s);
    }
    for (ts, legs) in &by_time {
        for &d in &geometry.approaches {
            let leg = Direction::ALL.iter().position(|x| *x == d).expect("known direction");
            if legs[leg].is_none() {
                return Err(Error::Gap {
                    intersection: geometry.id.to_string(),
                    approach: d.code(),
                    timestamp: ts.to_string(),
                });
            }
        }
    }
    let mut references = geometry.approaches.clone();
    references.sort();
    let mut keys = Vec::with_capacity(references.len() * by_time.len());
    let mut values = Vec::with_capacity(keys.capacity() * WITHIN_ROW_WIDTH);
    for reference in references {
        let map = NomenclatureMap::new(geometry, reference)?;
        for (ts, legs) in &by_time {
            let mut row = [0.0; WITHIN_ROW_WIDTH];
            let mut weather = None;
            for slot in 0..4 {
                let Some(d) = map.slot(slot) else { continue };
                let leg = Direction::ALL.iter().position(|x| *x == d).expect("known direction");
                let snap = legs[leg].expect("gap check passed");
                let flat = flatten_features(snap);
                for (mm, v) in flat[..TRAFFIC_FEATURES].iter().enumerate() {
                    row[within_column(mm, slot)] = *v;
                }
                if slot == 0 {
                    weather = Some(flat);
                }
            }
            let flat = weather.expect("reference leg present");
            row[4 * TRAFFIC_FEATURES..].copy_from_slice(&flat[TRAFFIC_FEATURES..TRAFFIC_FEATURES + WEATHER_FEATURES]);
            keys.push(RowKey {
                intersection: geometry.id,
                approach: reference,
                timestamp: *ts,
            });
            values.extend_from_slice(&row);
        }
    }
    FeatureTable::new(Zone::WithinIntersection, within_feature_names(), keys, values)
}

/// Concatenates within-intersection tables of several intersections.
pub fn format_within_all(
    snapshots: &[IntersectionSnapshot],
    geometries: &[IntersectionGeometry],
) -> Result<FeatureTable> {
    let mut sorted = geometries.to_vec();
    sorted.sort_by_key(|g| g.id);
    let mut keys = Vec::new();
    let mut values = Vec::new();
    for g in &sorted {
        let t = format_within_intersection(snapshots, g)?;
        keys.extend(t.keys);
        values.extend(t.values);
    }
    FeatureTable::new(Zone::WithinIntersection, within_feature_names(), keys, values)
}

/// One 33-wide row per snapshot, sorted by stream then time.
pub fn format_approach(snapshots: &[IntersectionSnapshot]) -> FeatureTable {
    let mut order: Vec<usize> = (0..snapshots.len()).collect();
    order.sort_by_key(|&i| {
        let s = &snapshots[i];
        (s.intersection, s.approach, s.timestamp)
    });
    let mut keys = Vec::with_capacity(order.len());
    let mut values = Vec::with_capacity(order.len() * 33);
    for i in order {
        let s = &snapshots[i];
        keys.push(RowKey {
            intersection: s.intersection,
            approach: s.approach,
            timestamp: s.timestamp,
        });
        values.extend_from_slice(&flatten_features(s));
    }
    FeatureTable::new(Zone::Approach, approach_feature_names(), keys, values)
        .expect("flattened rows have the declared width")
}
