//! Feature normalization, Adam, and the mini-batch training loop shared by
//! every model family.

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::datamodel::{LabeledWindow, Zone};
use crate::error::{Error, Result};
use crate::models::{stack_batch, ForwardCtx, InTformerConfig, ModelConfig, Network};
use crate::numcore::{Mode, ParamSet, Tape, Tensor};

pub use crate::numcore::{bce_grad, bce_mean as bce_loss, PROB_CLAMP};

pub const STD_FLOOR: f64 = 1e-8;
/// Windows per gradient shard; shards are reduced in index order.
pub const SHARD_WINDOWS: usize = 64;
pub const PATIENCE_MIN_DELTA: f64 = 1e-9;

/// Per-feature z-score statistics over every timestep row of the training windows.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Normalizer {
    pub mean: Vec<f64>,
    pub std: Vec<f64>,
}

impl Normalizer {
    pub fn fit(windows: &[&Tensor]) -> Result<Self> {
        let Some(first) = windows.first() else {
            return Err(Error::Dimension("cannot fit a normalizer on no windows".into()));
        };
        let width = first.cols();
        let mut sum = vec![0.0; width];
        let mut n = 0usize;
        for w in windows {
            if w.cols() != width {
                return Err(Error::Dimension(format!("window width {} vs {width}", w.cols())));
            }
            for r in 0..w.rows() {
                for (s, v) in sum.iter_mut().zip(w.row(r)) {
                    *s += v;
                }
                n += 1;
            }
        }
        let mean: Vec<f64> = sum.iter().map(|s| s / n as f64).collect();
        let mut sq = vec![0.0; width];
        for w in windows {
            for r in 0..w.rows() {
                for ((s, v), m) in sq.iter_mut().zip(w.row(r)).zip(&mean) {
                    *s += (v - m).powi(2);
                }
            }
        }
        let std = sq
            .iter()
            .map(|s| (s / n as f64).sqrt().max(STD_FLOOR))
            .collect();
        Ok(Self { mean, std })
    }

    pub fn fit_labeled(windows: &[LabeledWindow]) -> Result<Self> {
        Self::fit(&windows.iter().map(|w| &w.features).collect::<Vec<_>>())
    }

    pub fn width(&self) -> usize {
        self.mean.len()
    }

    fn check(&self, x: &Tensor) -> Result<()> {
        if x.cols() != self.width() {
            return Err(Error::Dimension(format!(
                "normalizer has {} features, window has {}",
                self.width(),
                x.cols()
            )));
        }
        Ok(())
    }

    pub fn apply(&self, x: &Tensor) -> Result<Tensor> {
        self.check(x)?;
        let w = self.width();
        let mut out = x.clone();
        for (i, v) in out.data_mut().iter_mut().enumerate() {
            let c = i % w;
            *v = (*v - self.mean[c]) / self.std[c];
        }
        Ok(out)
    }

    pub fn invert(&self, z: &Tensor) -> Result<Tensor> {
        self.check(z)?;
        let w = self.width();
        let mut out = z.clone();
        for (i, v) in out.data_mut().iter_mut().enumerate() {
            let c = i % w;
            *v = *v * self.std[c] + self.mean[c];
        }
        Ok(out)
    }

    /// A `T × F` window filled with the feature means.
    pub fn mean_window(&self, timesteps: usize) -> Tensor {
        Tensor::matrix(timesteps, self.width(), self.mean.repeat(timesteps)).expect("consistent extents")
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl AdamConfig {
    pub fn new(lr: f64) -> Self {
        Self {
            lr,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

/// First and second moment estimates plus the step counter.
#[derive(Clone, Debug, PartialEq)]
pub struct AdamState {
    pub t: u64,
    m: ParamSet,
    v: ParamSet,
}

impl AdamState {
    pub fn new(params: &ParamSet) -> Self {
        let zeros: ParamSet = {
            let mut z = ParamSet::new();
            for (k, v) in params.iter() {
                z.insert(k.clone(), Tensor::zeros(v.shape()));
            }
            z
        };
        Self {
            t: 0,
            m: zeros.clone(),
            v: zeros,
        }
    }

    /// One bias-corrected Adam update of `params` in place.
    pub fn step(&mut self, params: &mut ParamSet, grads: &ParamSet, cfg: &AdamConfig) -> Result<()> {
        if grads.len() != params.len() {
            return Err(Error::Dimension(format!(
                "{} gradients for {} parameters",
                grads.len(),
                params.len()
            )));
        }
        for (name, g) in grads.iter() {
            let p = params.get(name)?;
            let m = self.m.get(name)?;
            if p.shape() != g.shape() || m.shape() != g.shape() {
                return Err(Error::Dimension(format!(
                    "gradient `{name}` {:?} vs parameter {:?}",
                    g.shape(),
                    p.shape()
                )));
            }
        }
        self.t += 1;
        let c1 = 1.0 - cfg.beta1.powi(self.t as i32);
        let c2 = 1.0 - cfg.beta2.powi(self.t as i32);
        for (name, g) in grads.iter() {
            let m = self.m.get_mut(name)?.data_mut();
            let v = self.v.get_mut(name)?.data_mut();
            let p = params.get_mut(name)?.data_mut();
            for i in 0..g.len() {
                let gi = g.data()[i];
                m[i] = cfg.beta1 * m[i] + (1.0 - cfg.beta1) * gi;
                v[i] = cfg.beta2 * v[i] + (1.0 - cfg.beta2) * gi * gi;
                let mh = m[i] / c1;
                let vh = v[i] / c2;
                p[i] -= cfg.lr * mh / (vh.sqrt() + cfg.eps);
            }
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Optimizer {
    #[default]
    Adam,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub learning_rate: f64,
    pub batch_size: usize,
    pub epochs: usize,
    #[serde(default)]
    pub optimizer: Optimizer,
    pub seed: u64,
    /// Stop once the epoch loss has not improved by more than
    /// [`PATIENCE_MIN_DELTA`] for this many epochs.
    #[serde(default)]
    pub patience: Option<usize>,
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return Err(Error::Config(format!("learning rate {} must be positive", self.learning_rate)));
        }
        if self.batch_size == 0 {
            return Err(Error::Config("batch size must be at least 1".into()));
        }
        if self.epochs == 0 {
            return Err(Error::Config("epochs must be at least 1".into()));
        }
        Ok(())
    }
}

/// Tuned inTformer settings for one zone and window length.
#[derive(Clone, Debug, PartialEq)]
pub struct Preset {
    pub train: TrainConfig,
    pub heads: usize,
    pub encoders: usize,
}

/// Width used with the preset head count, which must divide it.
pub const PRESET_D_MODEL: usize = 80;
pub const PRESET_D_FF: usize = 160;

impl Preset {
    pub fn new(zone: Zone, timesteps: usize) -> Result<Self> {
        let (lr, batch, epochs, encoders) = match (zone, timesteps) {
            (Zone::WithinIntersection, 2) => (1e-5, 500, 50, 3),
            (Zone::WithinIntersection, 3) => (1e-4, 1000, 50, 3),
            (Zone::WithinIntersection, 4) => (1e-4, 1000, 100, 3),
            (Zone::Approach, 2) => (1e-5, 1000, 50, 3),
            (Zone::Approach, 3) => (1e-5, 1000, 100, 3),
            (Zone::Approach, 4) => (1e-4, 1000, 100, 4),
            _ => {
                return Err(Error::Config(format!(
                    "no tuned preset for {timesteps} timesteps"
                )))
            }
        };
        Ok(Self {
            train: TrainConfig {
                learning_rate: lr,
                batch_size: batch,
                epochs,
                optimizer: Optimizer::Adam,
                seed: 0,
                patience: None,
            },
            heads: 5,
            encoders,
        })
    }

    pub fn intformer(&self, timesteps: usize, features: usize) -> InTformerConfig {
        InTformerConfig {
            heads: self.heads,
            encoders: self.encoders,
            d_model: PRESET_D_MODEL,
            d_ff: PRESET_D_FF,
            ..InTformerConfig::new(timesteps, features)
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochLoss {
    pub epoch: usize,
    pub mean_train_loss: f64,
}

/// What a checkpoint file holds: the network and the normalizer it expects.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Checkpoint {
    pub config: ModelConfig,
    pub params: ParamSet,
    pub normalizer: Normalizer,
}

#[derive(Clone, Debug, PartialEq)]
pub struct TrainedModel {
    pub network: Network,
    pub normalizer: Normalizer,
    pub history: Vec<EpochLoss>,
}

impl TrainedModel {
    /// Crash probabilities for raw (unnormalized) windows.
    pub fn predict(&self, windows: &[&Tensor]) -> Result<Vec<f64>> {
        let normed = windows
            .iter()
            .map(|w| self.normalizer.apply(w))
            .collect::<Result<Vec<_>>>()?;
        self.network.predict(&normed.iter().collect::<Vec<_>>())
    }

    pub fn checkpoint(&self) -> Checkpoint {
        Checkpoint {
            config: self.network.config.clone(),
            params: self.network.params.clone(),
            normalizer: self.normalizer.clone(),
        }
    }

    pub fn checkpoint_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(&self.checkpoint())?)
    }

    pub fn from_checkpoint_json(text: &str) -> Result<Self> {
        let ck: Checkpoint = serde_json::from_str(text)?;
        let network = Network {
            config: ck.config,
            params: ck.params,
        };
        let network = Network::from_json(&network.to_json()?)?;
        if ck.normalizer.width() != network.config.features() {
            return Err(Error::Dimension(format!(
                "normalizer covers {} features, model expects {}",
                ck.normalizer.width(),
                network.config.features()
            )));
        }
        Ok(Self {
            network,
            normalizer: ck.normalizer,
            history: Vec::new(),
        })
    }

    /// `epoch,mean_train_loss` rows with a header.
    pub fn loss_csv(&self) -> String {
        let mut s = String::from("epoch,mean_train_loss\n");
        for e in &self.history {
            s.push_str(&format!("{},{}\n", e.epoch, e.mean_train_loss));
        }
        s
    }
}

fn mix(seed: u64, a: u64, b: u64) -> u64 {
    let mut z = seed ^ a.wrapping_mul(0x9e37_79b9_7f4a_7c15) ^ b.wrapping_mul(0xc2b2_ae3d_27d4_eb4f);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

/// Loss and gradients of one mini-batch, weighted by its share of `total`.
fn shard_gradients(
    network: &Network,
    windows: &[&Tensor],
    targets: &[f64],
    total: usize,
    seed: u64,
) -> Result<(f64, ParamSet)> {
    let batch = stack_batch(windows)?;
    let mut tape = Tape::new();
    let bound = network.params.bind(&mut tape);
    let x = tape.constant(batch);
    let mut ctx = ForwardCtx::new(Mode::Train, seed);
    let p = network.forward(&mut tape, &bound, x, &mut ctx)?;
    let loss = tape.bce(p, targets)?;
    let weight = windows.len() as f64 / total as f64;
    let scaled = tape.scale(loss, weight);
    let grads = bound.gradients(&tape, &tape.backward(scaled)?);
    Ok((tape.value(loss).data()[0], grads))
}

fn batch_gradients(
    network: &Network,
    windows: &[&Tensor],
    targets: &[f64],
    seed: u64,
) -> Result<(f64, ParamSet)> {
    let shards: Vec<Result<(f64, ParamSet)>> = windows
        .par_chunks(SHARD_WINDOWS)
        .zip(targets.par_chunks(SHARD_WINDOWS))
        .enumerate()
        .map(|(i, (w, y))| shard_gradients(network, w, y, windows.len(), mix(seed, i as u64, 0)))
        .collect();
    let mut loss = 0.0;
    let mut total: Option<ParamSet> = None;
    for (shard, w) in shards.into_iter().zip(windows.chunks(SHARD_WINDOWS)) {
        let (l, g) = shard?;
        loss += l * w.len() as f64;
        match total.as_mut() {
            None => total = Some(g),
            Some(acc) => {
                for (name, t) in acc.iter_mut() {
                    for (a, b) in t.data_mut().iter_mut().zip(g.get(name)?.data()) {
                        *a += b;
                    }
                }
            }
        }
    }
    Ok((loss / windows.len() as f64, total.expect("non-empty batch")))
}

/// Trains `network` in place on raw windows. The normalizer is fitted on
/// `train` and returned with the model.
pub fn train(network: Network, train: &[LabeledWindow], cfg: &TrainConfig) -> Result<TrainedModel> {
    cfg.validate()?;
    if train.is_empty() {
        return Err(Error::Dimension("empty training set".into()));
    }
    let normalizer = Normalizer::fit_labeled(train)?;
    let inputs = train
        .iter()
        .map(|w| normalizer.apply(&w.features))
        .collect::<Result<Vec<_>>>()?;
    let targets: Vec<f64> = train.iter().map(|w| w.label as f64).collect();
    let mut network = network;
    let mut adam = AdamState::new(&network.params);
    let adam_cfg = AdamConfig::new(cfg.learning_rate);
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut order: Vec<usize> = (0..train.len()).collect();
    let mut history = Vec::with_capacity(cfg.epochs);
    let mut best = f64::INFINITY;
    let mut stale = 0usize;

    for epoch in 0..cfg.epochs {
        order.shuffle(&mut rng);
        let mut epoch_loss = 0.0;
        for (b, idx) in order.chunks(cfg.batch_size).enumerate() {
            let ws: Vec<&Tensor> = idx.iter().map(|&i| &inputs[i]).collect();
            let ys: Vec<f64> = idx.iter().map(|&i| targets[i]).collect();
            let seed = mix(cfg.seed, epoch as u64 + 1, b as u64 + 1);
            let (loss, grads) = match batch_gradients(&network, &ws, &ys, seed) {
                Ok(r) => r,
                Err(Error::Numeric { layer }) => {
                    log::warn!("non-finite activations in {layer} at epoch {epoch}, batch {b}");
                    return Err(Error::Divergence {
                        epoch,
                        batch: b,
                        loss: f64::NAN,
                    });
                }
                Err(e) => return Err(e),
            };
            let grads_finite = grads.iter().all(|(_, g)| g.is_finite());
            if !loss.is_finite() || !grads_finite {
                return Err(Error::Divergence { epoch, batch: b, loss });
            }
            adam.step(&mut network.params, &grads, &adam_cfg)?;
            epoch_loss += loss * idx.len() as f64;
        }
        let mean = epoch_loss / train.len() as f64;
        log::debug!("epoch {epoch}: loss {mean:.6}");
        history.push(EpochLoss {
            epoch,
            mean_train_loss: mean,
        });
        if let Some(patience) = cfg.patience {
            if mean < best - PATIENCE_MIN_DELTA {
                best = mean;
                stale = 0;
            } else {
                stale += 1;
                if stale >= patience {
                    log::info!("stopping after epoch {epoch}: no improvement in {patience} epochs");
                    break;
                }
            }
        }
    }
    Ok(TrainedModel {
        network,
        normalizer,
        history,
    })
}
