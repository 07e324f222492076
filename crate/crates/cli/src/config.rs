use chrono::NaiveDateTime;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use intformer::datamodel::{study_roster, IntersectionGeometry, Zone};
use intformer::models::{CnnConfig, HybridConfig, InTformerConfig, LstmConfig, ModelConfig};
use intformer::pipeline::{ExtraTreesConfig, PipelineConfig, SplitStrategy};
use intformer::synthgen::GeneratorOptions;
use intformer::trainer::{Preset, TrainConfig};

use crate::error::{CliError, CliResult};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Family {
    Intformer,
    Lstm,
    Cnn1d,
    SequentialHybrid,
    ParallelHybrid,
}

impl Family {
    pub const ALL: [Family; 5] = [
        Family::Intformer,
        Family::Lstm,
        Family::Cnn1d,
        Family::SequentialHybrid,
        Family::ParallelHybrid,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Family::Intformer => "intformer",
            Family::Lstm => "lstm",
            Family::Cnn1d => "cnn1d",
            Family::SequentialHybrid => "sequential_hybrid",
            Family::ParallelHybrid => "parallel_hybrid",
        }
    }
}

/// Every seed a run consumes. Nothing draws from ambient entropy.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Seeds {
    pub generate: u64,
    pub crashes: u64,
    pub selection: u64,
    pub split: u64,
    pub smote: u64,
    pub init: u64,
    pub train: u64,
    pub explain: u64,
}

impl Default for Seeds {
    fn default() -> Self {
        Self {
            generate: 1,
            crashes: 2,
            selection: 3,
            split: 4,
            smote: 5,
            init: 6,
            train: 7,
            explain: 8,
        }
    }
}

impl Seeds {
    /// Applies a `name=value` override.
    pub fn set(&mut self, assignment: &str) -> CliResult<()> {
        let (key, value) = assignment
            .split_once('=')
            .ok_or_else(|| CliError::Usage(format!("seed override `{assignment}` is not KEY=VALUE")))?;
        let value: u64 = value
            .trim()
            .parse()
            .map_err(|_| CliError::Usage(format!("seed `{value}` is not an unsigned integer")))?;
        let slot = match key.trim() {
            "generate" => &mut self.generate,
            "crashes" => &mut self.crashes,
            "selection" => &mut self.selection,
            "split" => &mut self.split,
            "smote" => &mut self.smote,
            "init" => &mut self.init,
            "train" => &mut self.train,
            "explain" => &mut self.explain,
            other => return Err(CliError::Usage(format!("unknown seed `{other}`"))),
        };
        *slot = value;
        Ok(())
    }
}

/// One experiment. Unknown keys are rejected so typos cannot silently
/// fall back to defaults.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub zone: Zone,
    pub timesteps: usize,
    pub model: Family,

    /// Leading entries of the study roster to simulate.
    pub intersections: usize,
    pub start: NaiveDateTime,
    pub days: usize,
    pub diurnal_amplitude: f64,
    pub crashes: usize,
    /// Pre-crash shift of speeds and arrivals on green, in feature stds.
    pub crash_magnitude: f64,

    pub test_fraction: f64,
    pub split: SplitStrategy,
    pub correlation_threshold: f64,
    pub selection_trees: usize,
    /// Rows per extra-trees tree; `None` uses every row.
    pub selection_samples: Option<usize>,
    pub smote_k: usize,

    /// Take heads, encoders, learning rate, batch size and epochs from
    /// the tuned inTformer preset for this zone and window length.
    pub use_preset: bool,
    pub d_model: usize,
    pub heads: usize,
    pub encoders: usize,
    pub d_ff: usize,
    pub time_dims: usize,
    pub dropout: f64,
    pub lstm_hidden: usize,
    pub cnn_filters: usize,
    pub cnn_kernel: usize,

    pub learning_rate: f64,
    pub batch_size: usize,
    pub epochs: usize,
    pub patience: Option<usize>,
    pub threshold: f64,

    pub explain_windows: usize,
    /// `0` requests exact enumeration (small windows only).
    pub shap_permutations: usize,
    pub top_k: usize,

    pub seeds: Seeds,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            zone: Zone::WithinIntersection,
            timesteps: 2,
            model: Family::Intformer,
            intersections: 2,
            start: GeneratorOptions::default().start,
            days: 90,
            diurnal_amplitude: 0.3,
            crashes: 300,
            crash_magnitude: 1.0,
            test_fraction: 0.25,
            split: SplitStrategy::Stratified,
            correlation_threshold: 0.5,
            selection_trees: 50,
            selection_samples: Some(20_000),
            smote_k: 5,
            use_preset: false,
            d_model: 32,
            heads: 2,
            encoders: 1,
            d_ff: 64,
            time_dims: 8,
            dropout: 0.1,
            lstm_hidden: 32,
            cnn_filters: 32,
            cnn_kernel: 2,
            learning_rate: 1e-3,
            batch_size: 128,
            epochs: 6,
            patience: None,
            threshold: 0.5,
            explain_windows: 8,
            shap_permutations: 32,
            top_k: 10,
            seeds: Seeds::default(),
        }
    }
}

impl RunConfig {
    pub fn from_json(text: &str) -> CliResult<Self> {
        let cfg: Self = serde_json::from_str(text)?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> CliResult<()> {
        let bad = |m: String| Err(CliError::Config(m));
        let roster = study_roster().len();
        if self.intersections == 0 || self.intersections > roster {
            return bad(format!("intersections must be in 1..={roster}"));
        }
        if self.days == 0 {
            return bad("days must be positive".into());
        }
        if !(2..=4).contains(&self.timesteps) {
            return bad(format!("timesteps {} must be 2, 3 or 4", self.timesteps));
        }
        if !(self.test_fraction > 0.0 && self.test_fraction < 1.0) {
            return bad(format!("test_fraction {} must lie in (0, 1)", self.test_fraction));
        }
        if !(0.0..=1.0).contains(&self.threshold) {
            return bad(format!("threshold {} must lie in [0, 1]", self.threshold));
        }
        Ok(())
    }

    /// Canonical JSON; its SHA-256 names the run in every artifact.
    pub fn canonical_json(&self) -> String {
        serde_json::to_string(self).expect("config serializes")
    }

    pub fn hash(&self) -> String {
        hex::encode(Sha256::digest(self.canonical_json().as_bytes()))
    }

    /// Short label such as `within/II`.
    pub fn run_name(&self) -> String {
        let zone = match self.zone {
            Zone::WithinIntersection => "within",
            Zone::Approach => "approach",
        };
        let stacking = match self.timesteps {
            2 => "II",
            3 => "III",
            4 => "IV",
            _ => "?",
        };
        format!("{zone}/{stacking}")
    }

    pub fn geometries(&self) -> Vec<IntersectionGeometry> {
        study_roster()
            .into_iter()
            .take(self.intersections)
            .map(|r| r.geometry)
            .collect()
    }

    pub fn generator_options(&self) -> GeneratorOptions {
        GeneratorOptions {
            start: self.start,
            days: self.days,
            diurnal_amplitude: self.diurnal_amplitude,
        }
    }

    pub fn pipeline(&self) -> PipelineConfig {
        PipelineConfig {
            zone: self.zone,
            timesteps: self.timesteps,
            test_fraction: self.test_fraction,
            split: self.split,
            correlation_threshold: self.correlation_threshold,
            extra_trees: ExtraTreesConfig {
                n_trees: self.selection_trees,
                max_samples: self.selection_samples,
                seed: self.seeds.selection,
                ..ExtraTreesConfig::default()
            },
            smote_k: self.smote_k,
            split_seed: self.seeds.split,
            smote_seed: self.seeds.smote,
        }
    }

    fn preset(&self) -> CliResult<Option<Preset>> {
        if self.use_preset {
            Ok(Some(Preset::new(self.zone, self.timesteps)?))
        } else {
            Ok(None)
        }
    }

    pub fn train_config(&self) -> CliResult<TrainConfig> {
        let mut cfg = TrainConfig {
            learning_rate: self.learning_rate,
            batch_size: self.batch_size,
            epochs: self.epochs,
            optimizer: Default::default(),
            seed: self.seeds.train,
            patience: self.patience,
        };
        if let Some(p) = self.preset()? {
            cfg = TrainConfig {
                seed: self.seeds.train,
                patience: self.patience,
                ..p.train
            };
        }
        Ok(cfg)
    }

    pub fn model_config(&self, family: Family, features: usize) -> CliResult<ModelConfig> {
        let t = self.timesteps;
        let kernel = self.cnn_kernel.min(t);
        let hybrid = HybridConfig {
            timesteps: t,
            features,
            hidden: self.lstm_hidden,
            filters: self.cnn_filters,
            kernel,
        };
        Ok(match family {
            Family::Intformer => {
                let base = InTformerConfig {
                    time_dims: self.time_dims,
                    d_model: self.d_model,
                    heads: self.heads,
                    encoders: self.encoders,
                    d_ff: self.d_ff,
                    dropout: self.dropout,
                    ..InTformerConfig::new(t, features)
                };
                ModelConfig::Intformer(match self.preset()? {
                    Some(p) => InTformerConfig {
                        time_dims: self.time_dims,
                        dropout: self.dropout,
                        ..p.intformer(t, features)
                    },
                    None => base,
                })
            }
            Family::Lstm => ModelConfig::Lstm(LstmConfig {
                timesteps: t,
                features,
                hidden: self.lstm_hidden,
            }),
            Family::Cnn1d => ModelConfig::Cnn1d(CnnConfig {
                timesteps: t,
                features,
                filters: self.cnn_filters,
                kernel,
            }),
            Family::SequentialHybrid => ModelConfig::SequentialHybrid(hybrid),
            Family::ParallelHybrid => ModelConfig::ParallelHybrid(hybrid),
        })
    }
}
