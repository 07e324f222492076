//! Time-embedded encoder-only transformer for window classification.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::models::{check_finite, glorot, ForwardCtx};
use crate::numcore::{Bound, Mode, ParamSet, Tape, Tensor, Var, LAYER_NORM_EPS};
use rand_chacha::ChaCha8Rng;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct InTformerConfig {
    pub timesteps: usize,
    pub features: usize,
    /// Periodic Time2Vec components; the embedding has `time_dims + 1` entries.
    pub time_dims: usize,
    pub d_model: usize,
    pub heads: usize,
    pub encoders: usize,
    pub d_ff: usize,
    pub dropout: f64,
}

impl InTformerConfig {
    pub fn new(timesteps: usize, features: usize) -> Self {
        Self {
            timesteps,
            features,
            time_dims: 8,
            d_model: 64,
            heads: 4,
            encoders: 3,
            d_ff: 128,
            dropout: 0.1,
        }
    }

    pub fn d_k(&self) -> usize {
        self.d_model / self.heads.max(1)
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |msg: String| Err(Error::Config(msg));
        if self.timesteps == 0 || self.features == 0 || self.d_model == 0 || self.d_ff == 0 {
            return bad(format!("inTformer dimensions must be positive: {self:?}"));
        }
        if self.heads == 0 || !self.d_model.is_multiple_of(self.heads) {
            return bad(format!("{} heads do not divide d_model {}", self.heads, self.d_model));
        }
        if self.encoders == 0 {
            return bad("inTformer needs at least one encoder".into());
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return bad(format!("dropout {} outside [0, 1)", self.dropout));
        }
        Ok(())
    }

    pub(crate) fn init(&self, rng: &mut ChaCha8Rng) -> ParamSet {
        use rand::Rng;
        let mut p = ParamSet::new();
        let k1 = self.time_dims + 1;
        let uniform = |rng: &mut ChaCha8Rng, n: usize| {
            Tensor::vector((0..n).map(|_| rng.random_range(-1.0..1.0)).collect())
        };
        p.insert("t2v.omega", uniform(rng, k1));
        p.insert("t2v.phi", uniform(rng, k1));
        p.insert("embed.w", glorot(rng, self.features + k1, self.d_model));
        p.insert("embed.b", Tensor::zeros(&[self.d_model]));
        let dk = self.d_k();
        for e in 0..self.encoders {
            for h in 0..self.heads {
                for m in ["wq", "wk", "wv"] {
                    p.insert(format!("enc{e}.attn.h{h}.{m}"), glorot(rng, self.d_model, dk));
                }
            }
            p.insert(format!("enc{e}.attn.wo"), glorot(rng, self.heads * dk, self.d_model));
            p.insert(format!("enc{e}.attn.bo"), Tensor::zeros(&[self.d_model]));
            p.insert(format!("enc{e}.ffn.w1"), glorot(rng, self.d_model, self.d_ff));
            p.insert(format!("enc{e}.ffn.b1"), Tensor::zeros(&[self.d_ff]));
            p.insert(format!("enc{e}.ffn.w2"), glorot(rng, self.d_ff, self.d_model));
            p.insert(format!("enc{e}.ffn.b2"), Tensor::zeros(&[self.d_model]));
            for ln in ["ln1", "ln2"] {
                p.insert(format!("enc{e}.{ln}.gain"), Tensor::ones(&[self.d_model]));
                p.insert(format!("enc{e}.{ln}.bias"), Tensor::zeros(&[self.d_model]));
            }
        }
        p.insert("head.w", glorot(rng, self.d_model, 1));
        p.insert("head.b", Tensor::zeros(&[1]));
        p
    }
}

/// Time2Vec frequencies and phases; index 0 is the linear term.
#[derive(Clone, Debug, PartialEq)]
pub struct Time2VecParams {
    pub omega: Tensor,
    pub phi: Tensor,
}

impl Time2VecParams {
    pub fn from_params(p: &ParamSet) -> Result<Self> {
        Ok(Self {
            omega: p.get("t2v.omega")?.clone(),
            phi: p.get("t2v.phi")?.clone(),
        })
    }
}

/// `[ω₀τ + φ₀, sin(ω₁τ + φ₁), …, sin(ω_kτ + φ_k)]`.
pub fn time2vec(tau: f64, p: &Time2VecParams) -> Result<Tensor> {
    if p.omega.len() != p.phi.len() {
        return Err(Error::Dimension(format!(
            "omega {:?} vs phi {:?}",
            p.omega.shape(),
            p.phi.shape()
        )));
    }
    let out = p
        .omega
        .data()
        .iter()
        .zip(p.phi.data())
        .enumerate()
        .map(|(i, (w, f))| {
            let z = w * tau + f;
            if i == 0 {
                z
            } else {
                z.sin()
            }
        })
        .collect();
    Ok(Tensor::vector(out))
}

/// Time2Vec rows for τ = 0 … steps−1 on the tape: `steps × (k+1)`.
fn time2vec_var(t: &mut Tape, b: &Bound, steps: usize) -> Result<Var> {
    let tau = t.constant(Tensor::matrix(steps, 1, (0..steps).map(|s| s as f64).collect())?);
    let omega = b.get("t2v.omega")?;
    let phi = b.get("t2v.phi")?;
    let lin = t.matmul(tau, omega)?;
    let z = t.add_row(lin, phi)?;
    let k1 = t.value(z).cols();
    if k1 == 1 {
        return Ok(z);
    }
    let linear = t.slice_cols(z, 0, 1)?;
    let periodic = t.slice_cols(z, 1, k1 - 1)?;
    let periodic = t.sin(periodic);
    t.concat_cols(&[linear, periodic])
}

/// Concatenates each timestep with its Time2Vec row and projects to `d_model`.
pub(crate) fn embed_var(t: &mut Tape, b: &Bound, x: Var, steps: usize) -> Result<Var> {
    let rows = t.value(x).rows();
    if steps == 0 || !rows.is_multiple_of(steps) {
        return Err(Error::Dimension(format!("{rows} rows are not whole windows of {steps}")));
    }
    let tv = time2vec_var(t, b, steps)?;
    let tv = t.tile_rows(tv, rows / steps)?;
    let joined = t.concat_cols(&[x, tv])?;
    t.linear(joined, b.get("embed.w")?, b.get("embed.b")?)
}

/// Multi-head self-attention over blocks of `steps` rows. Returns the
/// projected output and each head's attention weights (`G·T × T`).
pub(crate) fn attention_var(
    t: &mut Tape,
    b: &Bound,
    prefix: &str,
    x: Var,
    steps: usize,
    heads: usize,
) -> Result<(Var, Vec<Var>)> {
    let mut outs = Vec::with_capacity(heads);
    let mut weights = Vec::with_capacity(heads);
    for h in 0..heads {
        let q = t.matmul(x, b.get(&format!("{prefix}.h{h}.wq"))?)?;
        let k = t.matmul(x, b.get(&format!("{prefix}.h{h}.wk"))?)?;
        let v = t.matmul(x, b.get(&format!("{prefix}.h{h}.wv"))?)?;
        let dk = t.value(q).cols();
        let scores = t.group_matmul_nt(q, k, steps)?;
        let scaled = t.scale(scores, 1.0 / (dk as f64).sqrt());
        let a = t.softmax_rows(scaled);
        weights.push(a);
        outs.push(t.group_matmul(a, v, steps)?);
    }
    let cat = t.concat_cols(&outs)?;
    let out = t.linear(cat, b.get(&format!("{prefix}.wo"))?, b.get(&format!("{prefix}.bo"))?)?;
    Ok((out, weights))
}

pub(crate) fn ffn_var(t: &mut Tape, b: &Bound, prefix: &str, x: Var) -> Result<Var> {
    let h = t.linear(x, b.get(&format!("{prefix}.w1"))?, b.get(&format!("{prefix}.b1"))?)?;
    let h = t.relu(h);
    t.linear(h, b.get(&format!("{prefix}.w2"))?, b.get(&format!("{prefix}.b2"))?)
}

/// Post-norm encoder: `Y = LN(X + Drop(MHA(X)))`, `Z = LN(Y + Drop(FFN(Y)))`.
pub(crate) fn encoder_var(
    t: &mut Tape,
    b: &Bound,
    cfg: &InTformerConfig,
    e: usize,
    x: Var,
    ctx: &mut ForwardCtx,
) -> Result<Var> {
    let (attn, _) = attention_var(t, b, &format!("enc{e}.attn"), x, cfg.timesteps, cfg.heads)?;
    let attn = t.dropout(attn, cfg.dropout, ctx.mode, ctx.next_seed())?;
    let y = t.add(x, attn)?;
    let y = t.layer_norm(y, b.get(&format!("enc{e}.ln1.gain"))?, b.get(&format!("enc{e}.ln1.bias"))?, LAYER_NORM_EPS)?;
    let f = ffn_var(t, b, &format!("enc{e}.ffn"), y)?;
    let f = t.dropout(f, cfg.dropout, ctx.mode, ctx.next_seed())?;
    let z = t.add(y, f)?;
    t.layer_norm(z, b.get(&format!("enc{e}.ln2.gain"))?, b.get(&format!("enc{e}.ln2.bias"))?, LAYER_NORM_EPS)
}

pub(crate) fn forward(
    t: &mut Tape,
    b: &Bound,
    cfg: &InTformerConfig,
    x: Var,
    ctx: &mut ForwardCtx,
) -> Result<Var> {
    let mut h = embed_var(t, b, x, cfg.timesteps)?;
    check_finite(t, h, "embedding")?;
    for e in 0..cfg.encoders {
        h = encoder_var(t, b, cfg, e, h, ctx)?;
        check_finite(t, h, &format!("encoder {e}"))?;
    }
    let pooled = t.group_mean(h, cfg.timesteps)?;
    let logit = t.linear(pooled, b.get("head.w")?, b.get("head.b")?)?;
    check_finite(t, logit, "head")?;
    Ok(t.sigmoid(logit))
}

/// Output of [`multi_head_attention`].
#[derive(Clone, Debug)]
pub struct AttentionOutput {
    pub output: Tensor,
    /// One `T × T` row-stochastic matrix per head.
    pub weights: Vec<Tensor>,
}

/// Attention sub-layer of encoder `encoder` applied to one `T × d_model` input.
pub fn multi_head_attention(
    x: &Tensor,
    params: &ParamSet,
    encoder: usize,
    heads: usize,
) -> Result<AttentionOutput> {
    let mut t = Tape::new();
    let b = params.bind(&mut t);
    let xv = t.constant(x.clone());
    let (out, w) = attention_var(&mut t, &b, &format!("enc{encoder}.attn"), xv, x.rows(), heads)?;
    Ok(AttentionOutput {
        output: t.value(out).clone(),
        weights: w.into_iter().map(|v| t.value(v).clone()).collect(),
    })
}

/// Feed-forward sub-layer of encoder `encoder`, applied row by row.
pub fn position_wise_ffn(x: &Tensor, params: &ParamSet, encoder: usize) -> Result<Tensor> {
    let mut t = Tape::new();
    let b = params.bind(&mut t);
    let xv = t.constant(x.clone());
    let out = ffn_var(&mut t, &b, &format!("enc{encoder}.ffn"), xv)?;
    Ok(t.value(out).clone())
}

/// One full encoder block on a `T × d_model` input.
pub fn encoder_block(
    x: &Tensor,
    params: &ParamSet,
    cfg: &InTformerConfig,
    encoder: usize,
    mode: Mode,
    seed: u64,
) -> Result<Tensor> {
    let mut t = Tape::new();
    let b = params.bind(&mut t);
    let xv = t.constant(x.clone());
    let mut ctx = ForwardCtx::new(mode, seed);
    let out = encoder_var(&mut t, &b, cfg, encoder, xv, &mut ctx)?;
    Ok(t.value(out).clone())
}

/// Time-embedded projection of one `T × F` window to `T × d_model`.
pub fn embed_sequence(x: &Tensor, params: &ParamSet) -> Result<Tensor> {
    let mut t = Tape::new();
    let b = params.bind(&mut t);
    let xv = t.constant(x.clone());
    let out = embed_var(&mut t, &b, xv, x.rows())?;
    Ok(t.value(out).clone())
}
