use std::collections::{BTreeMap, HashSet};

use chrono::{Duration, NaiveDateTime};
use rand::seq::index;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::datamodel::{
    CrashEvent, Direction, IntersectionId, IntersectionSnapshot, Metric, Movement, Zone,
    INTERVAL_MINUTES,
};
use crate::error::{Error, Result};
use crate::synthgen::FeatureCalibration;

/// Additive shift applied to one feature in the half hour before a crash.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct FeatureShift {
    pub metric: Metric,
    pub movement: Movement,
    pub delta: f64,
    pub lo: f64,
    pub hi: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CrashInjectionPlan {
    pub total: usize,
    /// Within-intersection : approach crash ratio.
    pub zone_ratio: (u32, u32),
    pub shifts: Vec<FeatureShift>,
}

impl CrashInjectionPlan {
    pub const DEFAULT_RATIO: (u32, u32) = (338, 124);

    /// Raises ASA/ASM and lowers POG by `magnitude` calibration stds.
    pub fn new(total: usize, magnitude: f64, calibration: &FeatureCalibration) -> Result<Self> {
        let mut shifts = Vec::new();
        for mv in Movement::ALL {
            let stats = |m: Metric| calibration.get(&format!("{}_{}", m.code(), mv.code()));
            let (asa, asm, pog) = (stats(Metric::Asa)?, stats(Metric::Asm)?, stats(Metric::Pog)?);
            shifts.push(FeatureShift {
                metric: Metric::Asa,
                movement: mv,
                delta: magnitude * asa.std,
                lo: asa.min,
                hi: asa.max.min(asm.max),
            });
            shifts.push(FeatureShift {
                metric: Metric::Asm,
                movement: mv,
                delta: magnitude * asm.std,
                lo: asm.min,
                hi: asm.max,
            });
            shifts.push(FeatureShift {
                metric: Metric::Pog,
                movement: mv,
                delta: -magnitude * pog.std,
                lo: pog.min,
                hi: pog.max,
            });
        }
        Ok(Self {
            total,
            zone_ratio: Self::DEFAULT_RATIO,
            shifts,
        })
    }

    pub fn within_count(&self) -> usize {
        let (a, b) = self.zone_ratio;
        let share = f64::from(a) / f64::from(a + b).max(1.0);
        (self.total as f64 * share).round() as usize
    }
}

fn perturb(s: &mut IntersectionSnapshot, shifts: &[FeatureShift]) {
    for sh in shifts {
        let m = s.traffic.movement_mut(sh.movement);
        let v = match sh.metric {
            Metric::Asa => &mut m.asa,
            Metric::Asm => &mut m.asm,
            Metric::Tta => &mut m.tta,
            Metric::Ttm => &mut m.ttm,
            Metric::Cda => &mut m.cda,
            Metric::Cdm => &mut m.cdm,
            Metric::Sfp => &mut m.sfp,
            Metric::Pog => &mut m.pog,
            Metric::Sfc => {
                m.sfc = (f64::from(m.sfc) + sh.delta).round().clamp(sh.lo, sh.hi) as u32;
                continue;
            }
        };
        *v = (*v + sh.delta).clamp(sh.lo, sh.hi);
    }
    for mv in Movement::ALL {
        let m = s.traffic.movement_mut(mv);
        m.asm = m.asm.max(m.asa);
        m.ttm = m.ttm.max(m.tta);
        m.cdm = m.cdm.max(m.cda);
    }
}

/// Places `plan.total` crashes on distinct (intersection, interval) slots and
/// perturbs the two intervals preceding each one. Events come back sorted by
/// time, then intersection.
pub fn inject_crashes(
    snapshots: &mut [IntersectionSnapshot],
    plan: &CrashInjectionPlan,
    seed: u64,
) -> Result<Vec<CrashEvent>> {
    if plan.total == 0 {
        return Err(Error::Config("a crash plan needs at least one crash".into()));
    }
    let step = Duration::minutes(INTERVAL_MINUTES);
    let mut by_slot: BTreeMap<(IntersectionId, NaiveDateTime), Vec<usize>> = BTreeMap::new();
    for (i, s) in snapshots.iter().enumerate() {
        by_slot.entry((s.intersection, s.timestamp)).or_default().push(i);
    }
    // A slot can host a crash when its preceding interval exists too.
    let slots: Vec<(IntersectionId, NaiveDateTime)> = by_slot
        .keys()
        .filter(|(id, ts)| by_slot.contains_key(&(*id, *ts - step)))
        .copied()
        .collect();
    if plan.total > slots.len() {
        return Err(Error::Capacity {
            requested: plan.total,
            available: slots.len(),
        });
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let picks = index::sample(&mut rng, slots.len(), plan.total);
    let n_within = plan.within_count().min(plan.total);
    let mut events = Vec::with_capacity(plan.total);
    let mut touched: HashSet<usize> = HashSet::new();
    for (k, pick) in picks.into_iter().enumerate() {
        let (id, s1) = slots[pick];
        let minute = rng.random_range(1..=INTERVAL_MINUTES);
        let when = s1 + Duration::minutes(minute);
        let event = if k < n_within {
            CrashEvent::new(id, None, Zone::WithinIntersection, when)?
        } else {
            let legs: Vec<Direction> = by_slot[&(id, s1)].iter().map(|&i| snapshots[i].approach).collect();
            let leg = legs[rng.random_range(0..legs.len())];
            CrashEvent::new(id, Some(leg), Zone::Approach, when)?
        };
        for ts in [s1, s1 - step] {
            for &i in &by_slot[&(id, ts)] {
                let hit = event.approach.is_none_or(|a| a == snapshots[i].approach);
                if hit && touched.insert(i) {
                    perturb(&mut snapshots[i], &plan.shifts);
                }
            }
        }
        events.push(event);
    }
    events.sort_by_key(|e| (e.timestamp, e.intersection, e.approach));
    Ok(events)
}
