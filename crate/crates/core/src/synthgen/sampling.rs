//! Marginal samplers fitted to reported mean/std/min/max.

use rand::Rng;
use rand_distr::{Beta, Distribution, Exp, Poisson, StandardNormal};
use statrs::distribution::{ContinuousCDF, Normal};
use statrs::function::erf::erfc;

use crate::error::{Error, Result};
use crate::synthgen::FeatureStats;

fn std_cdf(z: f64) -> f64 {
    0.5 * erfc(-z / std::f64::consts::SQRT_2)
}

fn std_pdf(z: f64) -> f64 {
    (-0.5 * z * z).exp() / (2.0 * std::f64::consts::PI).sqrt()
}

fn std_quantile(p: f64) -> f64 {
    Normal::new(0.0, 1.0).expect("unit normal").inverse_cdf(p)
}

/// Normal(loc, scale) truncated to [lo, hi].
#[derive(Clone, Copy, Debug)]
pub struct TruncatedNormal {
    pub loc: f64,
    pub scale: f64,
    pub lo: f64,
    pub hi: f64,
}

impl TruncatedNormal {
    /// Mean of the truncated distribution with its location shifted by `shift`.
    pub fn mean_at(&self, shift: f64) -> f64 {
        let mu = self.loc + shift;
        let (mut a, mut b) = ((self.lo - mu) / self.scale, (self.hi - mu) / self.scale);
        // Work in the lower tail where the CDF keeps relative precision.
        let flipped = a > 0.0;
        if flipped {
            (a, b) = (-b, -a);
        }
        let mass = std_cdf(b) - std_cdf(a);
        let offset = self.scale * (std_pdf(a) - std_pdf(b)) / mass;
        if flipped {
            mu - offset
        } else {
            mu + offset
        }
    }

    pub fn mean(&self) -> f64 {
        self.mean_at(0.0)
    }

    /// Solves for the location whose truncated mean equals `target`, keeping
    /// `scale`. Targets hugging a bound are pulled 2% of a scale inward.
    pub fn fit(target: f64, scale: f64, lo: f64, hi: f64) -> Result<Self> {
        if !(lo < hi) || !(scale > 0.0) {
            return Err(Error::Config(format!(
                "cannot fit truncated normal on [{lo}, {hi}] with scale {scale}"
            )));
        }
        let margin = (0.02 * scale).min(0.25 * (hi - lo));
        let target = target.clamp(lo + margin, hi - margin);
        let mut left = lo - 10.0 * scale;
        let mut right = hi + 10.0 * scale;
        let at = |loc: f64| {
            TruncatedNormal {
                loc,
                scale,
                lo,
                hi,
            }
            .mean()
        };
        for _ in 0..200 {
            let mid = 0.5 * (left + right);
            if at(mid) < target {
                left = mid;
            } else {
                right = mid;
            }
        }
        Ok(Self {
            loc: 0.5 * (left + right),
            scale,
            lo,
            hi,
        })
    }

    pub fn sample<R: Rng + ?Sized>(&self, shift: f64, rng: &mut R) -> f64 {
        let mu = self.loc + shift;
        let (a, b) = ((self.lo - mu) / self.scale, (self.hi - mu) / self.scale);
        let z = if a < -0.5 && b > 0.5 {
            // At least ~38% of the mass is inside: plain rejection.
            loop {
                let z: f64 = rng.sample(StandardNormal);
                if z >= a && z <= b {
                    break z;
                }
            }
        } else {
            let flipped = a > 0.0;
            let (a2, b2) = if flipped { (-b, -a) } else { (a, b) };
            let (pa, pb) = (std_cdf(a2), std_cdf(b2));
            let u: f64 = rng.random();
            let z = std_quantile(pa + u * (pb - pa)).clamp(a2, b2);
            if flipped {
                -z
            } else {
                z
            }
        };
        (mu + self.scale * z).clamp(self.lo, self.hi)
    }
}

/// Zero-inflated Poisson matched on mean and variance.
#[derive(Clone, Copy, Debug)]
pub struct ZeroInflatedPoisson {
    pub zero_prob: f64,
    pub rate: f64,
    pub max: f64,
}

impl ZeroInflatedPoisson {
    pub fn fit(stats: &FeatureStats) -> Result<Self> {
        let (m, v) = (stats.mean, stats.std * stats.std);
        if m <= 0.0 {
            return Ok(Self {
                zero_prob: 1.0,
                rate: 1.0,
                max: stats.max,
            });
        }
        // mean = (1−π)λ, var = mean·(1 + πλ)
        let (zero_prob, rate) = if v > m {
            let pl = v / m - 1.0;
            let rate = m + pl;
            (pl / rate, rate)
        } else {
            (0.0, m)
        };
        Ok(Self {
            zero_prob,
            rate,
            max: stats.max,
        })
    }

    pub fn sample<R: Rng + ?Sized>(&self, rng: &mut R) -> u32 {
        if rng.random::<f64>() < self.zero_prob {
            return 0;
        }
        let k: f64 = Poisson::new(self.rate).expect("positive rate").sample(rng);
        k.min(self.max) as u32
    }
}

/// Beta on [0, 1] matched on mean and variance, clamped to a valid shape.
#[derive(Clone, Copy, Debug)]
pub struct BetaShare {
    dist: Option<Beta<f64>>,
    mean: f64,
}

impl BetaShare {
    pub fn fit(mean: f64, std: f64) -> Result<Self> {
        let m = mean.clamp(0.0, 1.0);
        if m <= 0.0 || m >= 1.0 || std <= 0.0 {
            return Ok(Self { dist: None, mean: m });
        }
        // The variance of a beta must stay below m(1−m).
        let v = (std * std).min(0.999 * m * (1.0 - m));
        let total = m * (1.0 - m) / v - 1.0;
        let dist = Beta::new(m * total, (1.0 - m) * total)
            .map_err(|e| Error::Config(format!("beta fit failed: {e}")))?;
        Ok(Self {
            dist: Some(dist),
            mean: m,
        })
    }

    pub fn sample<R: Rng + ?Sized>(&self, rng: &mut R) -> f64 {
        match &self.dist {
            Some(d) => {
                let x = d.sample(rng);
                if x.is_finite() {
                    x.clamp(0.0, 1.0)
                } else {
                    self.mean
                }
            }
            None => self.mean,
        }
    }
}

/// Percentage of vehicles that passed the crossing without stopping.
pub fn pog_from_counts(total: u32, stopped: u32) -> Result<f64> {
    if total == 0 {
        return Err(Error::UndefinedPog);
    }
    if stopped > total {
        return Err(Error::Config(format!(
            "{stopped} stopped vehicles exceed the total of {total}"
        )));
    }
    Ok(f64::from(total - stopped) / f64::from(total) * 100.0)
}

/// POG built from simulated counts: the green share is beta distributed,
/// the observed vehicle count Poisson (re-drawn when zero).
#[derive(Clone, Copy, Debug)]
pub struct CountPercent {
    share: BetaShare,
    mean_count: f64,
}

impl CountPercent {
    pub const MEAN_VEHICLES: f64 = 12.0;

    pub fn fit(stats: &FeatureStats) -> Result<Self> {
        Ok(Self {
            share: BetaShare::fit(stats.mean / 100.0, stats.std / 100.0)?,
            mean_count: Self::MEAN_VEHICLES,
        })
    }

    pub fn sample<R: Rng + ?Sized>(&self, rng: &mut R) -> f64 {
        let green = self.share.sample(rng);
        let counts = Poisson::new(self.mean_count).expect("positive rate");
        loop {
            let total = counts.sample(rng) as u32;
            let stopped = (0..total).filter(|_| rng.random::<f64>() >= green).count() as u32;
            match pog_from_counts(total, stopped) {
                Ok(p) => return p,
                Err(Error::UndefinedPog) => continue,
                Err(_) => unreachable!("stopped never exceeds total"),
            }
        }
    }
}

/// Exponential amount, present only with probability `wet_prob`.
#[derive(Clone, Copy, Debug)]
pub struct ZeroInflatedExponential {
    pub mean_when_wet: f64,
    pub max: f64,
}

impl ZeroInflatedExponential {
    pub fn fit(stats: &FeatureStats, wet_prob: f64) -> Result<Self> {
        let target = stats.mean.max(stats.min + 0.05 * stats.std);
        if wet_prob <= 0.0 {
            return Err(Error::Config("precipitation needs a positive abnormal-weather rate".into()));
        }
        Ok(Self {
            mean_when_wet: (target - stats.min) / wet_prob,
            max: stats.max,
        })
    }

    pub fn sample<R: Rng + ?Sized>(&self, wet: bool, rng: &mut R) -> f64 {
        if !wet || self.mean_when_wet <= 0.0 {
            return 0.0;
        }
        let e: f64 = Exp::new(1.0 / self.mean_when_wet).expect("positive rate").sample(rng);
        e.min(self.max)
    }
}
