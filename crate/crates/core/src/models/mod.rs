//! The inTformer network and the four comparison architectures.
//!
//! Every model consumes a mini-batch of `B` windows stacked into a
//! `B·T × F` matrix and returns a `B × 1` matrix of crash probabilities.

mod baselines;
mod intformer;

pub use baselines::{CnnConfig, HybridConfig, LstmConfig, Topology};
pub use intformer::{
    embed_sequence, encoder_block, multi_head_attention, position_wise_ffn, time2vec,
    AttentionOutput, InTformerConfig, Time2VecParams,
};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numcore::{Bound, Mode, ParamSet, Tape, Tensor, Var};

pub const PREDICT_CHUNK: usize = 256;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "family", rename_all = "snake_case")]
pub enum ModelConfig {
    Intformer(InTformerConfig),
    Lstm(LstmConfig),
    Cnn1d(CnnConfig),
    SequentialHybrid(HybridConfig),
    ParallelHybrid(HybridConfig),
}

impl ModelConfig {
    pub fn family(&self) -> &'static str {
        match self {
            ModelConfig::Intformer(_) => "intformer",
            ModelConfig::Lstm(_) => "lstm",
            ModelConfig::Cnn1d(_) => "cnn1d",
            ModelConfig::SequentialHybrid(_) => "sequential_hybrid",
            ModelConfig::ParallelHybrid(_) => "parallel_hybrid",
        }
    }

    pub fn timesteps(&self) -> usize {
        match self {
            ModelConfig::Intformer(c) => c.timesteps,
            ModelConfig::Lstm(c) => c.timesteps,
            ModelConfig::Cnn1d(c) => c.timesteps,
            ModelConfig::SequentialHybrid(c) | ModelConfig::ParallelHybrid(c) => c.timesteps,
        }
    }

    pub fn features(&self) -> usize {
        match self {
            ModelConfig::Intformer(c) => c.features,
            ModelConfig::Lstm(c) => c.features,
            ModelConfig::Cnn1d(c) => c.features,
            ModelConfig::SequentialHybrid(c) | ModelConfig::ParallelHybrid(c) => c.features,
        }
    }

    pub fn validate(&self) -> Result<()> {
        match self {
            ModelConfig::Intformer(c) => c.validate(),
            ModelConfig::Lstm(c) => c.validate(),
            ModelConfig::Cnn1d(c) => c.validate(),
            ModelConfig::SequentialHybrid(c) | ModelConfig::ParallelHybrid(c) => c.validate(),
        }
    }

    fn init(&self, rng: &mut ChaCha8Rng) -> ParamSet {
        match self {
            ModelConfig::Intformer(c) => c.init(rng),
            ModelConfig::Lstm(c) => {
                let mut p = ParamSet::new();
                baselines::init_lstm(&mut p, rng, "lstm", c.features, c.hidden);
                baselines::init_head(&mut p, rng, c.hidden);
                p
            }
            ModelConfig::Cnn1d(c) => {
                let mut p = ParamSet::new();
                baselines::init_conv(&mut p, rng, c.features, c.filters, c.kernel);
                baselines::init_head(&mut p, rng, c.filters);
                p
            }
            ModelConfig::SequentialHybrid(c) => {
                let mut p = ParamSet::new();
                baselines::init_conv(&mut p, rng, c.features, c.filters, c.kernel);
                baselines::init_lstm(&mut p, rng, "lstm", c.filters, c.hidden);
                baselines::init_head(&mut p, rng, c.hidden);
                p
            }
            ModelConfig::ParallelHybrid(c) => {
                let mut p = ParamSet::new();
                baselines::init_conv(&mut p, rng, c.features, c.filters, c.kernel);
                baselines::init_lstm(&mut p, rng, "lstm", c.features, c.hidden);
                baselines::init_head(&mut p, rng, c.hidden + c.filters);
                p
            }
        }
    }
}

/// Glorot-uniform `fan_in × fan_out` matrix.
pub(crate) fn glorot(rng: &mut ChaCha8Rng, fan_in: usize, fan_out: usize) -> Tensor {
    let limit = (6.0 / (fan_in + fan_out) as f64).sqrt();
    let data = (0..fan_in * fan_out).map(|_| rng.random_range(-limit..limit)).collect();
    Tensor::matrix(fan_in, fan_out, data).expect("positive extents")
}

pub(crate) fn check_finite(t: &Tape, v: Var, layer: &str) -> Result<()> {
    if t.value(v).is_finite() {
        Ok(())
    } else {
        Err(Error::Numeric {
            layer: layer.to_string(),
        })
    }
}

/// Mode and dropout-seed source for one forward pass.
#[derive(Clone, Debug)]
pub struct ForwardCtx {
    pub mode: Mode,
    seed: u64,
    calls: u64,
}

impl ForwardCtx {
    pub fn new(mode: Mode, seed: u64) -> Self {
        Self {
            mode,
            seed,
            calls: 0,
        }
    }

    pub fn eval() -> Self {
        Self::new(Mode::Eval, 0)
    }

    /// A fresh seed for the next dropout site.
    pub fn next_seed(&mut self) -> u64 {
        self.calls += 1;
        // splitmix64 finalizer
        let mut z = self.seed.wrapping_add(self.calls.wrapping_mul(0x9e37_79b9_7f4a_7c15));
        z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
        z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
        z ^ (z >> 31)
    }
}

/// A model family with its parameters. Serializes to the checkpoint format.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Network {
    pub config: ModelConfig,
    pub params: ParamSet,
}

impl Network {
    pub fn new(config: ModelConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let params = config.init(&mut rng);
        Ok(Self { config, params })
    }

    /// Probabilities (`B × 1`) for the `B·T × F` batch `x` already on the tape.
    pub fn forward(&self, t: &mut Tape, b: &Bound, x: Var, ctx: &mut ForwardCtx) -> Result<Var> {
        let (rows, cols) = (t.value(x).rows(), t.value(x).cols());
        let (steps, features) = (self.config.timesteps(), self.config.features());
        if cols != features || rows % steps != 0 || rows == 0 {
            return Err(Error::Dimension(format!(
                "batch of {rows}×{cols} does not fit windows of {steps}×{features}"
            )));
        }
        match &self.config {
            ModelConfig::Intformer(c) => intformer::forward(t, b, c, x, ctx),
            ModelConfig::Lstm(c) => baselines::lstm_forward(t, b, c, x),
            ModelConfig::Cnn1d(c) => baselines::cnn_forward(t, b, c, x),
            ModelConfig::SequentialHybrid(c) => baselines::hybrid_forward(t, b, c, x, Topology::Sequential),
            ModelConfig::ParallelHybrid(c) => baselines::hybrid_forward(t, b, c, x, Topology::Parallel),
        }
    }

    /// Eval-mode probabilities for a batch matrix.
    pub fn predict_batch(&self, batch: &Tensor) -> Result<Vec<f64>> {
        let mut t = Tape::new();
        let b = self.params.bind(&mut t);
        let x = t.constant(batch.clone());
        let p = self.forward(&mut t, &b, x, &mut ForwardCtx::eval())?;
        Ok(t.value(p).data().to_vec())
    }

    /// Eval-mode probabilities for `T × F` windows, evaluated in parallel chunks.
    pub fn predict(&self, windows: &[&Tensor]) -> Result<Vec<f64>> {
        let chunks: Vec<Result<Vec<f64>>> = windows
            .par_chunks(PREDICT_CHUNK)
            .map(|chunk| self.predict_batch(&stack_batch(chunk)?))
            .collect();
        let mut out = Vec::with_capacity(windows.len());
        for c in chunks {
            out.extend(c?);
        }
        Ok(out)
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string(self)?)
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let net: Self = serde_json::from_str(text)?;
        net.config.validate()?;
        let expected = net.config.init(&mut ChaCha8Rng::seed_from_u64(0));
        for (name, tensor) in expected.iter() {
            let got = net.params.get(name)?;
            if got.shape() != tensor.shape() {
                return Err(Error::Dimension(format!(
                    "checkpoint tensor `{name}` has shape {:?}, expected {:?}",
                    got.shape(),
                    tensor.shape()
                )));
            }
        }
        if expected.len() != net.params.len() {
            return Err(Error::Config("checkpoint has unexpected parameters".into()));
        }
        Ok(net)
    }
}

/// Stacks `T × F` windows into one `B·T × F` matrix.
pub fn stack_batch(windows: &[&Tensor]) -> Result<Tensor> {
    let Some(first) = windows.first() else {
        return Err(Error::Dimension("empty batch".into()));
    };
    let (steps, width) = (first.rows(), first.cols());
    let mut data = Vec::with_capacity(windows.len() * steps * width);
    for w in windows {
        if w.rows() != steps || w.cols() != width {
            return Err(Error::Dimension(format!(
                "window {:?} in a batch of {steps}×{width}",
                w.shape()
            )));
        }
        data.extend_from_slice(w.data());
    }
    Tensor::matrix(windows.len() * steps, width, data)
}
