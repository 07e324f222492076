//! Domain types shared by the generator, the pipeline and the models.
//!
//! Feature order is frozen: metric group in the order
//! ASA, ASM, TTA, TTM, CDA, CDM, SFC, SFP, POG, then movement L/T/R, then
//! (for within-intersection rows) approach slot A–D, followed by the six
//! weather columns.

use std::fmt;

use chrono::{NaiveDateTime, Timelike};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numcore::Tensor;

pub const INTERVAL_MINUTES: i64 = 15;
pub const TRAFFIC_FEATURES: usize = 27;
pub const WEATHER_FEATURES: usize = 6;
pub const APPROACH_ROW_WIDTH: usize = TRAFFIC_FEATURES + WEATHER_FEATURES;
pub const WITHIN_ROW_WIDTH: usize = 4 * TRAFFIC_FEATURES + WEATHER_FEATURES;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "UPPERCASE")]
pub enum Metric {
    Asa,
    Asm,
    Tta,
    Ttm,
    Cda,
    Cdm,
    Sfc,
    Sfp,
    Pog,
}

impl Metric {
    pub const ALL: [Metric; 9] = [
        Metric::Asa,
        Metric::Asm,
        Metric::Tta,
        Metric::Ttm,
        Metric::Cda,
        Metric::Cdm,
        Metric::Sfc,
        Metric::Sfp,
        Metric::Pog,
    ];

    pub fn code(self) -> &'static str {
        match self {
            Metric::Asa => "ASA",
            Metric::Asm => "ASM",
            Metric::Tta => "TTA",
            Metric::Ttm => "TTM",
            Metric::Cda => "CDA",
            Metric::Cdm => "CDM",
            Metric::Sfc => "SFC",
            Metric::Sfp => "SFP",
            Metric::Pog => "POG",
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum Movement {
    Left,
    Through,
    Right,
}

impl Movement {
    pub const ALL: [Movement; 3] = [Movement::Left, Movement::Through, Movement::Right];

    pub fn code(self) -> char {
        match self {
            Movement::Left => 'L',
            Movement::Through => 'T',
            Movement::Right => 'R',
        }
    }
}

pub const WEATHER_NAMES: [&str; WEATHER_FEATURES] = [
    "Temperature",
    "Relative_Humidity",
    "Wind_Speed",
    "Precipitation",
    "Visibility",
    "Conditions",
];

/// Compass direction a physical approach comes from.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum Direction {
    N,
    E,
    S,
    W,
}

impl Direction {
    pub const ALL: [Direction; 4] = [Direction::N, Direction::E, Direction::S, Direction::W];

    pub fn code(self) -> char {
        match self {
            Direction::N => 'N',
            Direction::E => 'E',
            Direction::S => 'S',
            Direction::W => 'W',
        }
    }

    pub fn from_code(c: char) -> Result<Self> {
        match c {
            'N' => Ok(Direction::N),
            'E' => Ok(Direction::E),
            'S' => Ok(Direction::S),
            'W' => Ok(Direction::W),
            other => Err(Error::Config(format!("unknown approach `{other}`"))),
        }
    }

    /// The approach on the left of a driver arriving from `self`
    /// (N → W → S → E → N).
    pub fn left_neighbor(self) -> Self {
        match self {
            Direction::N => Direction::W,
            Direction::W => Direction::S,
            Direction::S => Direction::E,
            Direction::E => Direction::N,
        }
    }
}

impl fmt::Display for Direction {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}", self.code())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(transparent)]
pub struct IntersectionId(pub u16);

impl fmt::Display for IntersectionId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "I{:02}", self.0)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Zone {
    WithinIntersection,
    Approach,
}

impl fmt::Display for Zone {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Zone::WithinIntersection => "within_intersection",
            Zone::Approach => "approach",
        })
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct MovementStats {
    /// Average / maximum approach speed, mph.
    pub asa: f64,
    pub asm: f64,
    /// Average / maximum travel time, s.
    pub tta: f64,
    pub ttm: f64,
    /// Average / maximum control delay, s.
    pub cda: f64,
    pub cdm: f64,
    /// Split-failure count.
    pub sfc: u32,
    /// Split-failure percentage.
    pub sfp: f64,
    /// Percent arrivals on green.
    pub pog: f64,
}

impl MovementStats {
    pub fn get(&self, metric: Metric) -> f64 {
        match metric {
            Metric::Asa => self.asa,
            Metric::Asm => self.asm,
            Metric::Tta => self.tta,
            Metric::Ttm => self.ttm,
            Metric::Cda => self.cda,
            Metric::Cdm => self.cdm,
            Metric::Sfc => f64::from(self.sfc),
            Metric::Sfp => self.sfp,
            Metric::Pog => self.pog,
        }
    }

    fn set(&mut self, metric: Metric, v: f64) -> Result<()> {
        match metric {
            Metric::Asa => self.asa = v,
            Metric::Asm => self.asm = v,
            Metric::Tta => self.tta = v,
            Metric::Ttm => self.ttm = v,
            Metric::Cda => self.cda = v,
            Metric::Cdm => self.cdm = v,
            Metric::Sfc => {
                if v < 0.0 || v.fract() != 0.0 || v > f64::from(u32::MAX) {
                    return Err(Error::Config(format!("SFC must be a count, got {v}")));
                }
                self.sfc = v as u32
            }
            Metric::Sfp => self.sfp = v,
            Metric::Pog => self.pog = v,
        }
        Ok(())
    }

    pub fn validate(&self) -> Result<()> {
        let ok = self.asm >= self.asa
            && self.asa >= 0.0
            && self.ttm >= self.tta
            && self.tta >= 0.0
            && self.cdm >= self.cda
            && self.cda >= 0.0
            && (0.0..=100.0).contains(&self.sfp)
            && (0.0..=100.0).contains(&self.pog);
        if ok {
            Ok(())
        } else {
            Err(Error::Config(format!("inconsistent movement stats {self:?}")))
        }
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct ApproachFeatureVector {
    pub left: MovementStats,
    pub through: MovementStats,
    pub right: MovementStats,
}

impl ApproachFeatureVector {
    pub fn movement(&self, m: Movement) -> &MovementStats {
        match m {
            Movement::Left => &self.left,
            Movement::Through => &self.through,
            Movement::Right => &self.right,
        }
    }

    pub fn movement_mut(&mut self, m: Movement) -> &mut MovementStats {
        match m {
            Movement::Left => &mut self.left,
            Movement::Through => &mut self.through,
            Movement::Right => &mut self.right,
        }
    }

    pub fn to_array(&self) -> [f64; TRAFFIC_FEATURES] {
        let mut out = [0.0; TRAFFIC_FEATURES];
        let mut i = 0;
        for metric in Metric::ALL {
            for mv in Movement::ALL {
                out[i] = self.movement(mv).get(metric);
                i += 1;
            }
        }
        out
    }

    pub fn from_slice(values: &[f64]) -> Result<Self> {
        if values.len() != TRAFFIC_FEATURES {
            return Err(Error::Dimension(format!(
                "{} traffic values, expected {TRAFFIC_FEATURES}",
                values.len()
            )));
        }
        let mut v = Self::default();
        let mut i = 0;
        for metric in Metric::ALL {
            for mv in Movement::ALL {
                v.movement_mut(mv).set(metric, values[i])?;
                i += 1;
            }
        }
        Ok(v)
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct WeatherRecord {
    /// °F
    pub temperature: f64,
    /// %
    pub relative_humidity: f64,
    /// mph
    pub wind_speed: f64,
    /// inches
    pub precipitation: f64,
    /// miles
    pub visibility: f64,
    pub abnormal: bool,
}

impl WeatherRecord {
    pub fn to_array(&self) -> [f64; WEATHER_FEATURES] {
        [
            self.temperature,
            self.relative_humidity,
            self.wind_speed,
            self.precipitation,
            self.visibility,
            if self.abnormal { 1.0 } else { 0.0 },
        ]
    }

    pub fn from_slice(v: &[f64]) -> Result<Self> {
        if v.len() != WEATHER_FEATURES {
            return Err(Error::Dimension(format!(
                "{} weather values, expected {WEATHER_FEATURES}",
                v.len()
            )));
        }
        let abnormal = match v[5] {
            x if x == 0.0 => false,
            x if x == 1.0 => true,
            other => return Err(Error::Config(format!("conditions must be 0 or 1, got {other}"))),
        };
        Ok(Self {
            temperature: v[0],
            relative_humidity: v[1],
            wind_speed: v[2],
            precipitation: v[3],
            visibility: v[4],
            abnormal,
        })
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct IntersectionSnapshot {
    pub intersection: IntersectionId,
    pub timestamp: NaiveDateTime,
    pub approach: Direction,
    pub traffic: ApproachFeatureVector,
    pub weather: WeatherRecord,
}

impl IntersectionSnapshot {
    pub fn zeroed(intersection: IntersectionId, timestamp: NaiveDateTime, approach: Direction) -> Self {
        Self {
            intersection,
            timestamp,
            approach,
            traffic: ApproachFeatureVector::default(),
            weather: WeatherRecord::default(),
        }
    }
}

pub fn is_interval_aligned(ts: &NaiveDateTime) -> bool {
    ts.minute().is_multiple_of(INTERVAL_MINUTES as u32) && ts.second() == 0 && ts.nanosecond() == 0
}

/// 27 traffic scalars followed by 6 weather scalars.
pub fn flatten_features(s: &IntersectionSnapshot) -> [f64; APPROACH_ROW_WIDTH] {
    let mut out = [0.0; APPROACH_ROW_WIDTH];
    out[..TRAFFIC_FEATURES].copy_from_slice(&s.traffic.to_array());
    out[TRAFFIC_FEATURES..].copy_from_slice(&s.weather.to_array());
    out
}

pub fn unflatten_features(
    intersection: IntersectionId,
    timestamp: NaiveDateTime,
    approach: Direction,
    values: &[f64],
) -> Result<IntersectionSnapshot> {
    if values.len() != APPROACH_ROW_WIDTH {
        return Err(Error::Dimension(format!(
            "{} values, expected {APPROACH_ROW_WIDTH}",
            values.len()
        )));
    }
    Ok(IntersectionSnapshot {
        intersection,
        timestamp,
        approach,
        traffic: ApproachFeatureVector::from_slice(&values[..TRAFFIC_FEATURES])?,
        weather: WeatherRecord::from_slice(&values[TRAFFIC_FEATURES..])?,
    })
}

/// Column names of an approach-zone row (and of `flatten_features`).
pub fn approach_feature_names() -> Vec<String> {
    let mut names = Vec::with_capacity(APPROACH_ROW_WIDTH);
    for metric in Metric::ALL {
        for mv in Movement::ALL {
            names.push(format!("{}_{}", metric.code(), mv.code()));
        }
    }
    names.extend(WEATHER_NAMES.iter().map(|s| s.to_string()));
    names
}

/// Column names of a within-intersection row.
pub fn within_feature_names() -> Vec<String> {
    let mut names = Vec::with_capacity(WITHIN_ROW_WIDTH);
    for metric in Metric::ALL {
        for mv in Movement::ALL {
            for slot in ['A', 'B', 'C', 'D'] {
                names.push(format!("{}_{}_{slot}", metric.code(), mv.code()));
            }
        }
    }
    names.extend(WEATHER_NAMES.iter().map(|s| s.to_string()));
    names
}

/// Column of a within-intersection row for a traffic feature in slot `slot` (0 = A).
pub fn within_column(metric_movement: usize, slot: usize) -> usize {
    metric_movement * 4 + slot
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CrashEvent {
    pub intersection: IntersectionId,
    pub approach: Option<Direction>,
    pub zone: Zone,
    pub timestamp: NaiveDateTime,
}

impl CrashEvent {
    pub fn new(
        intersection: IntersectionId,
        approach: Option<Direction>,
        zone: Zone,
        timestamp: NaiveDateTime,
    ) -> Result<Self> {
        match (zone, approach) {
            (Zone::WithinIntersection, Some(_)) => Err(Error::Config(
                "within-intersection crashes carry no approach".into(),
            )),
            (Zone::Approach, None) => Err(Error::Config("approach crashes need an approach".into())),
            _ => Ok(Self {
                intersection,
                approach,
                zone,
                timestamp,
            }),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct IntersectionGeometry {
    pub id: IntersectionId,
    pub name: String,
    pub approaches: Vec<Direction>,
}

impl IntersectionGeometry {
    pub fn new(id: IntersectionId, name: impl Into<String>, approaches: Vec<Direction>) -> Result<Self> {
        let mut uniq = approaches.clone();
        uniq.sort();
        uniq.dedup();
        if !(3..=4).contains(&approaches.len()) || uniq.len() != approaches.len() {
            return Err(Error::Config(format!(
                "an intersection needs 3 or 4 distinct legs, got {approaches:?}"
            )));
        }
        Ok(Self {
            id,
            name: name.into(),
            approaches,
        })
    }

    pub fn four_leg(id: IntersectionId, name: impl Into<String>) -> Self {
        Self::new(id, name, Direction::ALL.to_vec()).expect("four distinct legs")
    }

    /// Three legs; the western leg is absent.
    pub fn three_leg(id: IntersectionId, name: impl Into<String>) -> Self {
        Self::new(id, name, vec![Direction::N, Direction::E, Direction::S]).expect("three distinct legs")
    }

    pub fn leg_count(&self) -> usize {
        self.approaches.len()
    }

    pub fn has(&self, d: Direction) -> bool {
        self.approaches.contains(&d)
    }
}

/// One studied intersection with its observed yearly crash count.
#[derive(Clone, Debug)]
pub struct RosterEntry {
    pub geometry: IntersectionGeometry,
    pub crash_count: u32,
}

/// The eight studied intersections: six four-legged, two three-legged.
pub fn study_roster() -> Vec<RosterEntry> {
    const ROSTER: [(&str, u32, bool); 8] = [
        ("East Hillsborough Avenue", 75, false),
        ("West Brandon Boulevard & Brandon Town Center Drive", 66, false),
        ("East Dr. Martin Luther King Jr Boulevard & North Marguerite Street", 60, false),
        ("Polk City Road & US 27", 57, true),
        ("East Hillsborough Avenue & North Nebraska Avenue", 54, false),
        ("Glen Este Boulevard & US 27", 51, true),
        ("East Dr. Martin Luther King Jr Boulevard & US 301", 50, false),
        ("West Columbus Drive & North Dale Mabry Highway", 49, false),
    ];
    ROSTER
        .iter()
        .enumerate()
        .map(|(i, &(name, crashes, three_leg))| {
            let id = IntersectionId(i as u16 + 1);
            let geometry = if three_leg {
                IntersectionGeometry::three_leg(id, name)
            } else {
                IntersectionGeometry::four_leg(id, name)
            };
            RosterEntry {
                geometry,
                crash_count: crashes,
            }
        })
        .collect()
}

/// Provenance of a stacked window.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct WindowOrigin {
    pub intersection: IntersectionId,
    /// Reference approach (slot A) of the stream.
    pub approach: Direction,
    pub end: NaiveDateTime,
    /// True for SMOTE-generated samples.
    pub synthetic: bool,
}

/// A `timesteps × features` observation with a binary crash label.
#[derive(Clone, Debug, PartialEq)]
pub struct LabeledWindow {
    pub features: Tensor,
    pub label: u8,
    pub origin: WindowOrigin,
}

impl LabeledWindow {
    pub fn timesteps(&self) -> usize {
        self.features.rows()
    }

    pub fn width(&self) -> usize {
        self.features.cols()
    }
}
