//! Seeded synthetic connected-vehicle aggregates and crash events.

mod calibration;
mod crashes;
mod sampling;

use chrono::{Duration, NaiveDate, NaiveDateTime, Timelike};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

pub use calibration::{FeatureCalibration, Family, FeatureStats};
pub use crashes::{inject_crashes, CrashInjectionPlan, FeatureShift};
pub use sampling::{
    pog_from_counts, BetaShare, CountPercent, TruncatedNormal, ZeroInflatedExponential,
    ZeroInflatedPoisson,
};

use crate::datamodel::{
    IntersectionGeometry, IntersectionId, IntersectionSnapshot, Metric, Movement, MovementStats,
    WeatherRecord, INTERVAL_MINUTES,
};
use crate::error::{Error, Result};

pub const INTERVALS_PER_DAY: usize = 96;
pub const DAYS_PER_YEAR: usize = 365;

#[derive(Clone, Debug, PartialEq)]
pub struct GeneratorOptions {
    pub start: NaiveDateTime,
    pub days: usize,
    /// Amplitude of the daily cycle on average speeds, times, delays and
    /// temperature, as a fraction of the feature std.
    pub diurnal_amplitude: f64,
}

impl Default for GeneratorOptions {
    fn default() -> Self {
        Self {
            start: NaiveDate::from_ymd_opt(2021, 7, 1)
                .expect("valid date")
                .and_hms_opt(0, 0, 0)
                .expect("valid time"),
            days: DAYS_PER_YEAR,
            diurnal_amplitude: 0.3,
        }
    }
}

/// A full year of snapshots starting 2021-07-01.
pub fn generate_snapshots(
    geometries: &[IntersectionGeometry],
    calibration: &FeatureCalibration,
    seed: u64,
) -> Result<SnapshotStream> {
    SnapshotStream::new(geometries, calibration, &GeneratorOptions::default(), seed)
}

/// Average-type feature plus its maximum-type companion.
#[derive(Clone, Copy, Debug)]
struct PairSampler {
    avg: TruncatedNormal,
    /// +1 when the daily cycle raises the feature, −1 when it lowers it.
    cycle_sign: f64,
    excess: Option<Normal<f64>>,
    max_lo: f64,
    max_hi: f64,
}

impl PairSampler {
    fn fit(avg: &FeatureStats, max: &FeatureStats, cycle_sign: f64) -> Result<Self> {
        // Keep the average below the companion's ceiling so max ≥ avg survives clipping.
        let hi = avg.max.min(max.max);
        let tn = TruncatedNormal::fit(avg.mean, avg.std, avg.min, hi)?;
        let gap = (max.mean - avg.mean).max(0.0);
        let sigma = gap / (2.0 / std::f64::consts::PI).sqrt();
        let excess = if sigma > 0.0 {
            Some(Normal::new(0.0, sigma).map_err(|e| Error::Config(e.to_string()))?)
        } else {
            None
        };
        Ok(Self {
            avg: tn,
            cycle_sign,
            excess,
            max_lo: max.min,
            max_hi: max.max,
        })
    }

    fn sample<R: Rng + ?Sized>(&self, cycle: f64, rng: &mut R) -> (f64, f64) {
        let a = self.avg.sample(self.cycle_sign * cycle * self.avg.scale, rng);
        let extra = self.excess.map_or(0.0, |n| n.sample(rng).abs());
        let m = (a + extra).clamp(self.max_lo, self.max_hi).max(a);
        (a, m)
    }
}

#[derive(Clone, Copy, Debug)]
struct MovementSampler {
    speed: PairSampler,
    time: PairSampler,
    delay: PairSampler,
    sfc: ZeroInflatedPoisson,
    sfp: BetaShare,
    pog: CountPercent,
}

impl MovementSampler {
    fn fit(cal: &FeatureCalibration, mv: Movement) -> Result<Self> {
        let stats = |m: Metric| cal.get(&format!("{}_{}", m.code(), mv.code()));
        let sfp = stats(Metric::Sfp)?;
        Ok(Self {
            speed: PairSampler::fit(stats(Metric::Asa)?, stats(Metric::Asm)?, -1.0)?,
            time: PairSampler::fit(stats(Metric::Tta)?, stats(Metric::Ttm)?, 1.0)?,
            delay: PairSampler::fit(stats(Metric::Cda)?, stats(Metric::Cdm)?, 1.0)?,
            sfc: ZeroInflatedPoisson::fit(stats(Metric::Sfc)?)?,
            sfp: BetaShare::fit(sfp.mean / 100.0, sfp.std / 100.0)?,
            pog: CountPercent::fit(stats(Metric::Pog)?)?,
        })
    }

    fn sample<R: Rng + ?Sized>(&self, cycle: f64, rng: &mut R) -> MovementStats {
        let (asa, asm) = self.speed.sample(cycle, rng);
        let (tta, ttm) = self.time.sample(cycle, rng);
        let (cda, cdm) = self.delay.sample(cycle, rng);
        MovementStats {
            asa,
            asm,
            tta,
            ttm,
            cda,
            cdm,
            sfc: self.sfc.sample(rng),
            sfp: self.sfp.sample(rng) * 100.0,
            pog: self.pog.sample(rng),
        }
    }
}

#[derive(Clone, Copy, Debug)]
struct WeatherSampler {
    temperature: TruncatedNormal,
    humidity: TruncatedNormal,
    wind: TruncatedNormal,
    precipitation: ZeroInflatedExponential,
    visibility: TruncatedNormal,
    abnormal_prob: f64,
}

impl WeatherSampler {
    fn fit(cal: &FeatureCalibration) -> Result<Self> {
        let tn = |name: &str| -> Result<TruncatedNormal> {
            let s = cal.get(name)?;
            TruncatedNormal::fit(s.mean, s.std, s.min, s.max)
        };
        let abnormal_prob = cal.get("Conditions")?.mean.clamp(0.0, 1.0);
        Ok(Self {
            temperature: tn("Temperature")?,
            humidity: tn("Relative_Humidity")?,
            wind: tn("Wind_Speed")?,
            precipitation: ZeroInflatedExponential::fit(cal.get("Precipitation")?, abnormal_prob)?,
            visibility: tn("Visibility")?,
            abnormal_prob,
        })
    }

    fn sample<R: Rng + ?Sized>(&self, cycle: f64, rng: &mut R) -> WeatherRecord {
        let temperature = self.temperature.sample(cycle * self.temperature.scale, rng);
        let relative_humidity = self.humidity.sample(0.0, rng);
        let wind_speed = self.wind.sample(0.0, rng);
        let visibility = self.visibility.sample(0.0, rng);
        let abnormal = rng.random::<f64>() < self.abnormal_prob;
        let precipitation = self.precipitation.sample(abnormal, rng);
        WeatherRecord {
            temperature,
            relative_humidity,
            wind_speed,
            precipitation,
            visibility,
            abnormal,
        }
    }
}

/// Lazily generated snapshots, ordered by intersection, then timestamp,
/// then approach. Each intersection draws from its own seeded stream.
pub struct SnapshotStream {
    geometries: Vec<IntersectionGeometry>,
    movements: [MovementSampler; 3],
    weather: WeatherSampler,
    options: GeneratorOptions,
    seed: u64,
    geo: usize,
    step: usize,
    leg: usize,
    rng: ChaCha8Rng,
    current_weather: WeatherRecord,
}

impl SnapshotStream {
    pub fn new(
        geometries: &[IntersectionGeometry],
        calibration: &FeatureCalibration,
        options: &GeneratorOptions,
        seed: u64,
    ) -> Result<Self> {
        if geometries.is_empty() {
            return Err(Error::Config("no intersection geometries to generate".into()));
        }
        if options.days == 0 {
            return Err(Error::Config("generation needs at least one day".into()));
        }
        calibration.validate()?;
        let movements = [
            MovementSampler::fit(calibration, Movement::Left)?,
            MovementSampler::fit(calibration, Movement::Through)?,
            MovementSampler::fit(calibration, Movement::Right)?,
        ];
        let mut stream = Self {
            geometries: geometries.to_vec(),
            movements,
            weather: WeatherSampler::fit(calibration)?,
            options: options.clone(),
            seed,
            geo: 0,
            step: 0,
            leg: 0,
            rng: ChaCha8Rng::seed_from_u64(seed),
            current_weather: WeatherRecord::default(),
        };
        stream.start_intersection();
        Ok(stream)
    }

    pub fn total(&self) -> usize {
        let legs: usize = self.geometries.iter().map(|g| g.leg_count()).sum();
        legs * self.steps()
    }

    fn steps(&self) -> usize {
        self.options.days * INTERVALS_PER_DAY
    }

    fn start_intersection(&mut self) {
        if let Some(g) = self.geometries.get(self.geo) {
            self.rng = intersection_rng(self.seed, g.id);
        }
    }

    fn diurnal(&self, ts: &NaiveDateTime) -> f64 {
        let minute = f64::from(ts.hour() * 60 + ts.minute());
        // Peaks at 17:00, bottoms out at 05:00.
        let phase = 2.0 * std::f64::consts::PI * (minute - 11.0 * 60.0) / 1440.0;
        self.options.diurnal_amplitude * phase.sin()
    }
}

fn intersection_rng(seed: u64, id: IntersectionId) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(u64::from(id.0));
    rng
}

impl Iterator for SnapshotStream {
    type Item = IntersectionSnapshot;

    fn next(&mut self) -> Option<IntersectionSnapshot> {
        let g = self.geometries.get(self.geo)?;
        let (id, approach, legs) = (g.id, g.approaches[self.leg], g.leg_count());
        let timestamp = self.options.start + Duration::minutes(INTERVAL_MINUTES * self.step as i64);
        let cycle = self.diurnal(&timestamp);
        if self.leg == 0 {
            self.current_weather = self.weather.sample(cycle, &mut self.rng);
        }
        let mut traffic = crate::datamodel::ApproachFeatureVector::default();
        for (i, mv) in Movement::ALL.into_iter().enumerate() {
            *traffic.movement_mut(mv) = self.movements[i].sample(cycle, &mut self.rng);
        }
        let snap = IntersectionSnapshot {
            intersection: id,
            timestamp,
            approach,
            traffic,
            weather: self.current_weather,
        };
        self.leg += 1;
        if self.leg == legs {
            self.leg = 0;
            self.step += 1;
            if self.step == self.steps() {
                self.step = 0;
                self.geo += 1;
                self.start_intersection();
            }
        }
        Some(snap)
    }
}
