use std::collections::HashMap;

use chrono::{Duration, NaiveDateTime, Timelike};

use crate::datamodel::{CrashEvent, Direction, IntersectionId, Zone, INTERVAL_MINUTES};
use crate::error::{dim_err, Result};
use crate::pipeline::FeatureTable;

pub const EXCLUSION_HOURS: i64 = 2;

/// Labels produced by crash indexing.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct CrashIndex {
    pub labels: Vec<u8>,
    /// Crashes of the requested zone whose covering intervals are absent.
    pub ignored: usize,
}

impl CrashIndex {
    pub fn positives(&self) -> usize {
        self.labels.iter().filter(|&&l| l == 1).count()
    }
}

/// Start of the interval containing the minute just before `t`.
pub fn preceding_interval(t: NaiveDateTime) -> NaiveDateTime {
    let before = t - Duration::minutes(1);
    let floor_min = i64::from(before.minute()) % INTERVAL_MINUTES;
    before
        .with_second(0)
        .and_then(|x| x.with_nanosecond(0))
        .expect("zeroing seconds is valid")
        - Duration::minutes(floor_min)
}

/// The two interval starts labeled by a crash at `t`: 0–15 and 15–30
/// minutes before it.
pub fn covering_intervals(t: NaiveDateTime) -> [NaiveDateTime; 2] {
    let s1 = preceding_interval(t);
    [s1, s1 - Duration::minutes(INTERVAL_MINUTES)]
}

/// Marks rows preceding crashes of `zone`. Within-intersection crashes label
/// every reference-approach row of the intersection; approach crashes label
/// only their own approach.
pub fn index_crashes(table: &FeatureTable, crashes: &[CrashEvent], zone: Zone) -> CrashIndex {
    let mut rows: HashMap<(IntersectionId, NaiveDateTime), Vec<(Direction, usize)>> = HashMap::new();
    for (i, k) in table.keys.iter().enumerate() {
        rows.entry((k.intersection, k.timestamp)).or_default().push((k.approach, i));
    }
    let mut labels = vec![0u8; table.len()];
    let mut ignored = 0;
    for c in crashes.iter().filter(|c| c.zone == zone) {
        let mut hit = false;
        for ts in covering_intervals(c.timestamp) {
            for &(approach, i) in rows.get(&(c.intersection, ts)).into_iter().flatten() {
                if c.approach.is_none_or(|a| a == approach) {
                    labels[i] = 1;
                    hit = true;
                }
            }
        }
        if !hit {
            ignored += 1;
        }
    }
    if ignored > 0 {
        log::warn!("{ignored} {zone} crashes fall outside the covered rows and were ignored");
    }
    CrashIndex { labels, ignored }
}

/// Drops unlabeled rows within two hours after any labeled row of the same
/// stream. Returns the filtered table and labels.
pub fn exclude_post_crash(table: &FeatureTable, labels: &[u8]) -> Result<(FeatureTable, Vec<u8>)> {
    if labels.len() != table.len() {
        return dim_err(format!("{} labels for {} rows", labels.len(), table.len()));
    }
    let horizon = Duration::hours(EXCLUSION_HOURS);
    let mut keep = vec![true; table.len()];
    for range in table.streams() {
        let mut until: Option<NaiveDateTime> = None;
        for i in range {
            let ts = table.keys[i].timestamp;
            if labels[i] == 1 {
                until = Some(until.map_or(ts + horizon, |u| u.max(ts + horizon)));
            } else if until.is_some_and(|u| ts <= u) {
                keep[i] = false;
            }
        }
    }
    let kept_labels = labels.iter().zip(&keep).filter(|(_, k)| **k).map(|(l, _)| *l).collect();
    Ok((table.filter_rows(&keep)?, kept_labels))
}

#[cfg(test)]
mod tests {
    use super::*;
    use chrono::NaiveDate;

    fn at(h: u32, m: u32) -> NaiveDateTime {
        NaiveDate::from_ymd_opt(2021, 7, 1).unwrap().and_hms_opt(h, m, 0).unwrap()
    }

    #[test]
    fn figure_example_and_boundary() {
        assert_eq!(covering_intervals(at(10, 50)), [at(10, 45), at(10, 30)]);
        assert_eq!(covering_intervals(at(11, 0)), [at(10, 45), at(10, 30)]);
        assert_eq!(covering_intervals(at(11, 1)), [at(11, 0), at(10, 45)]);
        assert_eq!(covering_intervals(at(0, 5)), [at(0, 0), at(0, 0) - Duration::minutes(15)]);
    }

    #[test]
    fn brute_force_interval_enumeration() {
        // A timestep s is labeled iff the crash happens in (s, s+30].
        for minute in 0..(24 * 60) {
            let t = at(0, 0) + Duration::minutes(minute);
            let got = covering_intervals(t);
            let expected: Vec<_> = (-8..=96)
                .map(|k| at(0, 0) + Duration::minutes(15 * k))
                .filter(|s| *s < t && t <= *s + Duration::minutes(30))
                .collect();
            let mut got = got.to_vec();
            got.sort();
            assert_eq!(got, expected, "{t}");
        }
    }
}
