use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::datamodel::approach_feature_names;
use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Family {
    /// Normal truncated to [min, max], location solved so the truncated mean hits `mean`.
    TruncatedNormal,
    /// Companion average plus a half-normal excess (maximum-type features).
    HalfNormalExcess,
    ZeroInflatedPoisson,
    /// Beta-distributed share scaled to 0–100.
    BetaPercent,
    /// Percent of a Poisson vehicle count passing without stopping, share drawn from a beta.
    CountPercent,
    Bernoulli,
    /// Zero unless weather is abnormal, otherwise exponential.
    ZeroInflatedExponential,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct FeatureStats {
    pub mean: f64,
    pub std: f64,
    pub min: f64,
    pub max: f64,
    pub family: Family,
}

impl FeatureStats {
    fn new(mean: f64, std: f64, min: f64, max: f64, family: Family) -> Self {
        Self {
            mean,
            std,
            min,
            max,
            family,
        }
    }
}

/// Marginal statistics for the 33 approach-level features, keyed by column name.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(transparent)]
pub struct FeatureCalibration(BTreeMap<String, FeatureStats>);

impl FeatureCalibration {
    /// Reported marginals of the connected-vehicle and weather features.
    pub fn reported() -> Self {
        use Family::*;
        #[rustfmt::skip]
        let rows: [(&str, f64, f64, f64, f64, Family); 33] = [
            ("ASA_L", 30.13, 5.43, 11.0, 77.0, TruncatedNormal),
            ("ASA_T", 34.87, 7.2, 9.0, 103.0, TruncatedNormal),
            ("ASA_R", 31.89, 5.29, 6.0, 102.0, TruncatedNormal),
            ("ASM_L", 31.39, 5.68, 11.0, 78.0, HalfNormalExcess),
            ("ASM_T", 42.26, 11.85, 9.0, 147.0, HalfNormalExcess),
            ("ASM_R", 33.34, 5.51, 6.0, 100.0, HalfNormalExcess),
            ("TTA_L", 71.53, 45.85, 8.0, 532.0, TruncatedNormal),
            ("TTA_T", 45.32, 34.32, 5.0, 500.0, TruncatedNormal),
            ("TTA_R", 32.71, 21.8, 7.0, 413.0, TruncatedNormal),
            ("TTM_L", 82.16, 55.24, 8.0, 556.0, HalfNormalExcess),
            ("TTM_T", 68.59, 43.11, 5.0, 570.0, HalfNormalExcess),
            ("TTM_R", 37.52, 27.9, 7.0, 489.0, HalfNormalExcess),
            ("CDA_L", 57.94, 45.0, 1.0, 378.0, TruncatedNormal),
            ("CDA_T", 34.58, 32.39, 0.0, 491.0, TruncatedNormal),
            ("CDA_R", 17.37, 21.83, 0.0, 395.0, TruncatedNormal),
            ("CDM_L", 68.4, 54.3, 1.0, 543.0, HalfNormalExcess),
            ("CDM_T", 57.83, 43.04, 1.0, 559.0, HalfNormalExcess),
            ("CDM_R", 22.27, 28.01, 1.0, 473.0, HalfNormalExcess),
            ("SFC_L", 0.09, 0.37, 0.0, 8.0, ZeroInflatedPoisson),
            ("SFC_T", 0.02, 0.19, 0.0, 9.0, ZeroInflatedPoisson),
            ("SFC_R", 0.04, 0.23, 0.0, 7.0, ZeroInflatedPoisson),
            ("SFP_L", 3.0, 12.0, 0.0, 100.0, BetaPercent),
            ("SFP_T", 1.0, 5.0, 0.0, 100.0, BetaPercent),
            ("SFP_R", 1.0, 6.0, 0.0, 100.0, BetaPercent),
            ("POG_L", 22.0, 32.0, 0.0, 100.0, CountPercent),
            ("POG_T", 54.0, 36.0, 0.0, 100.0, CountPercent),
            ("POG_R", 69.0, 34.0, 0.0, 100.0, CountPercent),
            ("Temperature", 74.82, 11.19, 41.5, 95.0, TruncatedNormal),
            ("Relative_Humidity", 68.51, 17.56, 20.6, 100.0, TruncatedNormal),
            ("Wind_Speed", 5.89, 3.73, 0.0, 19.9, TruncatedNormal),
            ("Precipitation", 0.0, 0.04, 0.0, 0.72, ZeroInflatedExponential),
            ("Visibility", 9.56, 1.11, 0.6, 9.9, TruncatedNormal),
            ("Conditions", 0.18, 0.38, 0.0, 1.0, Bernoulli),
        ];
        Self(
            rows.iter()
                .map(|&(name, mean, std, min, max, fam)| {
                    (name.to_string(), FeatureStats::new(mean, std, min, max, fam))
                })
                .collect(),
        )
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let cal: Self = serde_json::from_str(text)?;
        cal.validate()?;
        Ok(cal)
    }

    pub fn get(&self, name: &str) -> Result<&FeatureStats> {
        self.0
            .get(name)
            .ok_or_else(|| Error::Config(format!("calibration lacks feature `{name}`")))
    }

    pub fn iter(&self) -> impl Iterator<Item = (&String, &FeatureStats)> {
        self.0.iter()
    }

    pub fn validate(&self) -> Result<()> {
        for name in approach_feature_names() {
            let s = self.get(&name)?;
            let ordered = s.min <= s.mean && s.mean <= s.max && s.min < s.max;
            if !ordered || !(s.std >= 0.0) || !s.mean.is_finite() {
                return Err(Error::Config(format!("invalid calibration for `{name}`: {s:?}")));
            }
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn reported_table_is_valid_and_complete() {
        let cal = FeatureCalibration::reported();
        cal.validate().unwrap();
        assert_eq!(cal.iter().count(), 33);
        assert_eq!(cal.get("ASA_L").unwrap().mean, 30.13);
    }

    #[test]
    fn json_round_trip_and_validation() {
        let cal = FeatureCalibration::reported();
        let text = serde_json::to_string(&cal).unwrap();
        assert_eq!(FeatureCalibration::from_json(&text).unwrap(), cal);
        let broken = text.replacen("\"mean\":30.13", "\"mean\":300.0", 1);
        assert!(FeatureCalibration::from_json(&broken).is_err());
    }
}
