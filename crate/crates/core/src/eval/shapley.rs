use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numcore::Tensor;

/// Largest player count accepted by [`shapley_exact`].
pub const EXACT_PLAYER_LIMIT: usize = 12;

/// One (timestep, feature) cell of a window.
#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub struct Player {
    pub timestep: usize,
    pub feature: usize,
}

/// Every cell of a `T × F` window, timestep-major.
pub fn all_players(timesteps: usize, features: usize) -> Vec<Player> {
    (0..timesteps)
        .flat_map(|timestep| (0..features).map(move |feature| Player { timestep, feature }))
        .collect()
}

/// Anything that scores a batch of windows.
pub trait WindowModel: Sync {
    fn score(&self, windows: &[Tensor]) -> Result<Vec<f64>>;
}

impl<F> WindowModel for F
where
    F: Fn(&[Tensor]) -> Result<Vec<f64>> + Sync,
{
    fn score(&self, windows: &[Tensor]) -> Result<Vec<f64>> {
        self(windows)
    }
}

fn check_inputs(x: &Tensor, baseline: &Tensor, players: &[Player]) -> Result<()> {
    if x.shape() != baseline.shape() {
        return Err(Error::Dimension(format!(
            "window {:?} vs baseline {:?}",
            x.shape(),
            baseline.shape()
        )));
    }
    let (rows, cols) = (x.rows(), x.cols());
    for (i, p) in players.iter().enumerate() {
        if p.timestep >= rows || p.feature >= cols {
            return Err(Error::Dimension(format!("player {p:?} outside a {rows}×{cols} window")));
        }
        if players[..i].contains(p) {
            return Err(Error::Dimension(format!("player {p:?} listed twice")));
        }
    }
    Ok(())
}

fn cell(x: &Tensor, p: Player) -> usize {
    p.timestep * x.cols() + p.feature
}

/// `x` with the players outside `mask` set to their baseline values.
fn masked(x: &Tensor, baseline: &Tensor, players: &[Player], present: impl Fn(usize) -> bool) -> Tensor {
    let mut out = x.clone();
    for (i, &p) in players.iter().enumerate() {
        if !present(i) {
            let c = cell(x, p);
            out.data_mut()[c] = baseline.data()[c];
        }
    }
    out
}

fn score_chunked(model: &dyn WindowModel, inputs: Vec<Tensor>) -> Result<Vec<f64>> {
    const CHUNK: usize = 512;
    let mut out = Vec::with_capacity(inputs.len());
    for chunk in inputs.chunks(CHUNK) {
        let s = model.score(chunk)?;
        if s.len() != chunk.len() {
            return Err(Error::Evaluation(format!("model returned {} scores for {} windows", s.len(), chunk.len())));
        }
        out.extend(s);
    }
    Ok(out)
}

/// Exact Shapley values by enumerating every coalition of `players`.
pub fn shapley_exact(
    model: &dyn WindowModel,
    x: &Tensor,
    baseline: &Tensor,
    players: &[Player],
) -> Result<Vec<f64>> {
    let n = players.len();
    if n > EXACT_PLAYER_LIMIT {
        return Err(Error::TooManyPlayers {
            players: n,
            limit: EXACT_PLAYER_LIMIT,
        });
    }
    check_inputs(x, baseline, players)?;
    let coalitions = 1usize << n;
    let inputs = (0..coalitions)
        .map(|mask| masked(x, baseline, players, |i| mask & (1 << i) != 0))
        .collect();
    let v = score_chunked(model, inputs)?;

    // weight[s] = s!(n−s−1)!/n!
    let mut weight = vec![0.0; n.max(1)];
    for (s, w) in weight.iter_mut().enumerate().take(n) {
        *w = (1..=s).map(|k| k as f64).product::<f64>()
            * (1..n - s).map(|k| k as f64).product::<f64>()
            / (1..=n).map(|k| k as f64).product::<f64>();
    }
    let mut phi = vec![0.0; n];
    for (i, p) in phi.iter_mut().enumerate() {
        let bit = 1 << i;
        for mask in 0..coalitions {
            if mask & bit == 0 {
                let s = mask.count_ones() as usize;
                *p += weight[s] * (v[mask | bit] - v[mask]);
            }
        }
    }
    Ok(phi)
}

/// Permutation-sampling Shapley estimate.
#[derive(Clone, Debug, PartialEq)]
pub struct SampledShapley {
    pub values: Vec<f64>,
    /// Standard error of each value; NaN when only one permutation was drawn.
    pub stderr: Vec<f64>,
    /// `Σφ − (f(x) − f(baseline))`.
    pub efficiency_residual: f64,
    pub permutations: usize,
}

/// Monte-Carlo Shapley values: mean marginal contribution over random
/// orderings of `players`, each ordering walked from the baseline to `x`.
pub fn shapley_sampled(
    model: &dyn WindowModel,
    x: &Tensor,
    baseline: &Tensor,
    players: &[Player],
    n_permutations: usize,
    seed: u64,
) -> Result<SampledShapley> {
    if n_permutations == 0 {
        return Err(Error::Config("at least one permutation is required".into()));
    }
    check_inputs(x, baseline, players)?;
    let n = players.len();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let orders: Vec<Vec<usize>> = (0..n_permutations)
        .map(|_| {
            let mut o: Vec<usize> = (0..n).collect();
            o.shuffle(&mut rng);
            o
        })
        .collect();
    let contributions: Vec<Result<Vec<f64>>> = orders
        .par_iter()
        .map(|order| {
            let mut path = Vec::with_capacity(n + 1);
            let mut cur = baseline.clone();
            path.push(cur.clone());
            for &i in order {
                let c = cell(x, players[i]);
                cur.data_mut()[c] = x.data()[c];
                path.push(cur.clone());
            }
            let v = score_chunked(model, path)?;
            let mut marg = vec![0.0; n];
            for (k, &i) in order.iter().enumerate() {
                marg[i] = v[k + 1] - v[k];
            }
            Ok(marg)
        })
        .collect();
    let mut sum = vec![0.0; n];
    let mut sq = vec![0.0; n];
    for c in contributions {
        for (i, m) in c?.into_iter().enumerate() {
            sum[i] += m;
            sq[i] += m * m;
        }
    }
    let k = n_permutations as f64;
    let values: Vec<f64> = sum.iter().map(|s| s / k).collect();
    let stderr = values
        .iter()
        .zip(&sq)
        .map(|(m, q)| {
            if n_permutations == 1 {
                f64::NAN
            } else {
                ((q - k * m * m).max(0.0) / (k - 1.0) / k).sqrt()
            }
        })
        .collect();
    let ends = score_chunked(model, vec![x.clone(), masked(x, baseline, players, |_| false)])?;
    let efficiency_residual = values.iter().sum::<f64>() - (ends[0] - ends[1]);
    Ok(SampledShapley {
        values,
        stderr,
        efficiency_residual,
        permutations: n_permutations,
    })
}
