//! Comparison architectures: peephole LSTM, 1-D CNN and the two LSTM-CNN hybrids.

use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::models::{check_finite, glorot};
use crate::numcore::{Bound, ParamSet, Tape, Tensor, Var};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LstmConfig {
    pub timesteps: usize,
    pub features: usize,
    pub hidden: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CnnConfig {
    pub timesteps: usize,
    pub features: usize,
    pub filters: usize,
    pub kernel: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct HybridConfig {
    pub timesteps: usize,
    pub features: usize,
    pub hidden: usize,
    pub filters: usize,
    pub kernel: usize,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Topology {
    /// CNN feature maps are the LSTM's input sequence.
    Sequential,
    /// LSTM final state and pooled CNN features feed one head.
    Parallel,
}

fn positive(what: &str, values: &[usize]) -> Result<()> {
    if values.contains(&0) {
        return Err(Error::Config(format!("{what} dimensions must be positive")));
    }
    Ok(())
}

fn kernel_fits(kernel: usize, timesteps: usize) -> Result<()> {
    if kernel > timesteps {
        return Err(Error::Config(format!(
            "kernel {kernel} is longer than the {timesteps}-step window"
        )));
    }
    Ok(())
}

impl LstmConfig {
    pub fn validate(&self) -> Result<()> {
        positive("LSTM", &[self.timesteps, self.features, self.hidden])
    }
}

impl CnnConfig {
    pub fn validate(&self) -> Result<()> {
        positive("CNN", &[self.timesteps, self.features, self.filters, self.kernel])?;
        kernel_fits(self.kernel, self.timesteps)
    }
}

impl HybridConfig {
    pub fn validate(&self) -> Result<()> {
        positive("hybrid", &[self.timesteps, self.features, self.hidden, self.filters, self.kernel])?;
        kernel_fits(self.kernel, self.timesteps)
    }
}

pub(crate) fn init_lstm(p: &mut ParamSet, rng: &mut ChaCha8Rng, prefix: &str, input: usize, hidden: usize) {
    for gate in ["i", "f", "o"] {
        p.insert(format!("{prefix}.w_{gate}x"), glorot(rng, input, hidden));
        p.insert(format!("{prefix}.w_{gate}h"), glorot(rng, hidden, hidden));
        p.insert(format!("{prefix}.w_{gate}c"), glorot(rng, hidden, hidden));
        p.insert(format!("{prefix}.b_{gate}"), Tensor::zeros(&[hidden]));
    }
    p.insert(format!("{prefix}.w_cx"), glorot(rng, input, hidden));
    p.insert(format!("{prefix}.w_ch"), glorot(rng, hidden, hidden));
    p.insert(format!("{prefix}.b_c"), Tensor::zeros(&[hidden]));
}

pub(crate) fn init_conv(p: &mut ParamSet, rng: &mut ChaCha8Rng, features: usize, filters: usize, kernel: usize) {
    p.insert("conv.w", glorot(rng, kernel * features, filters));
    p.insert("conv.b", Tensor::zeros(&[filters]));
}

pub(crate) fn init_head(p: &mut ParamSet, rng: &mut ChaCha8Rng, width: usize) {
    p.insert("head.w", glorot(rng, width, 1));
    p.insert("head.b", Tensor::zeros(&[1]));
}

/// `x·W_x + h·W_h + c·W_c + b` for one gate.
fn gate(t: &mut Tape, b: &Bound, prefix: &str, g: &str, x: Var, h: Var, c: Option<Var>) -> Result<Var> {
    let mut z = t.matmul(x, b.get(&format!("{prefix}.w_{g}x"))?)?;
    let zh = t.matmul(h, b.get(&format!("{prefix}.w_{g}h"))?)?;
    z = t.add(z, zh)?;
    if let Some(c) = c {
        let zc = t.matmul(c, b.get(&format!("{prefix}.w_{g}c"))?)?;
        z = t.add(z, zc)?;
    }
    t.add_row(z, b.get(&format!("{prefix}.b_{g}"))?)
}

/// Runs the peephole LSTM over blocks of `steps` rows and returns the
/// hidden state after the last step (`G × hidden`). Gates see c_{t−1}.
pub(crate) fn lstm_var(t: &mut Tape, b: &Bound, prefix: &str, x: Var, steps: usize) -> Result<Var> {
    let rows = t.value(x).rows();
    if steps == 0 || !rows.is_multiple_of(steps) {
        return Err(Error::Dimension(format!("{rows} rows are not whole windows of {steps}")));
    }
    let hidden = t.value(b.get(&format!("{prefix}.b_i"))?).len();
    let batch = rows / steps;
    let mut h = t.constant(Tensor::zeros(&[batch, hidden]));
    let mut c = t.constant(Tensor::zeros(&[batch, hidden]));
    for s in 0..steps {
        let xs = t.group_step(x, steps, s)?;
        let i = gate(t, b, prefix, "i", xs, h, Some(c))?;
        let i = t.sigmoid(i);
        let f = gate(t, b, prefix, "f", xs, h, Some(c))?;
        let f = t.sigmoid(f);
        let o = gate(t, b, prefix, "o", xs, h, Some(c))?;
        let o = t.sigmoid(o);
        let cand = gate(t, b, prefix, "c", xs, h, None)?;
        let cand = t.tanh(cand);
        let keep = t.mul(f, c)?;
        let write = t.mul(i, cand)?;
        c = t.add(keep, write)?;
        let squashed = t.tanh(c);
        h = t.mul(o, squashed)?;
    }
    Ok(h)
}

/// Convolution over time with ReLU: `G·(T−K+1) × filters`.
pub(crate) fn conv_var(t: &mut Tape, b: &Bound, x: Var, steps: usize, kernel: usize) -> Result<Var> {
    let cols = t.unfold(x, steps, kernel)?;
    let z = t.linear(cols, b.get("conv.w")?, b.get("conv.b")?)?;
    check_finite(t, z, "conv")?;
    Ok(t.relu(z))
}

fn head(t: &mut Tape, b: &Bound, features: Var) -> Result<Var> {
    let logit = t.linear(features, b.get("head.w")?, b.get("head.b")?)?;
    check_finite(t, logit, "head")?;
    Ok(t.sigmoid(logit))
}

pub(crate) fn lstm_forward(t: &mut Tape, b: &Bound, cfg: &LstmConfig, x: Var) -> Result<Var> {
    let h = lstm_var(t, b, "lstm", x, cfg.timesteps)?;
    check_finite(t, h, "lstm")?;
    head(t, b, h)
}

pub(crate) fn cnn_forward(t: &mut Tape, b: &Bound, cfg: &CnnConfig, x: Var) -> Result<Var> {
    let maps = conv_var(t, b, x, cfg.timesteps, cfg.kernel)?;
    let pooled = t.group_max(maps, cfg.timesteps - cfg.kernel + 1)?;
    head(t, b, pooled)
}

pub(crate) fn hybrid_forward(t: &mut Tape, b: &Bound, cfg: &HybridConfig, x: Var, topology: Topology) -> Result<Var> {
    let maps = conv_var(t, b, x, cfg.timesteps, cfg.kernel)?;
    let positions = cfg.timesteps - cfg.kernel + 1;
    match topology {
        Topology::Sequential => {
            let h = lstm_var(t, b, "lstm", maps, positions)?;
            check_finite(t, h, "lstm")?;
            head(t, b, h)
        }
        Topology::Parallel => {
            let h = lstm_var(t, b, "lstm", x, cfg.timesteps)?;
            check_finite(t, h, "lstm")?;
            let pooled = t.group_max(maps, positions)?;
            let joined = t.concat_cols(&[h, pooled])?;
            head(t, b, joined)
        }
    }
}
