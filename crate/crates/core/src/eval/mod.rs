//! Confusion-matrix metrics and Shapley attribution of window predictions.

mod metrics;
mod shapley;

pub use metrics::{
    confusion, false_alarm_rate, majority_predictions, sensitivity, ConfusionMatrix, MetricsReport,
    DEFAULT_THRESHOLD,
};
pub use shapley::{
    all_players, shapley_exact, shapley_sampled, Player, SampledShapley, WindowModel,
    EXACT_PLAYER_LIMIT,
};

use std::fmt::Write as _;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numcore::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "method", rename_all = "snake_case")]
pub enum ShapleyMethod {
    Exact,
    Sampled { permutations: usize },
}

/// Shapley values for a set of explained windows, every cell a player.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AttributionReport {
    pub timesteps: usize,
    pub feature_names: Vec<String>,
    pub players: Vec<Player>,
    pub window_ids: Vec<usize>,
    /// `values[w][p]`: contribution of player `p` in window `w`.
    pub values: Vec<Vec<f64>>,
    /// Raw value of each player's cell in each window.
    pub feature_values: Vec<Vec<f64>>,
    /// `Σφ − (f(x) − f(baseline))` per window.
    pub efficiency_residuals: Vec<f64>,
}

impl AttributionReport {
    /// Mean |φ| per player across explained windows.
    pub fn global_importance(&self) -> Vec<f64> {
        let n = self.values.len().max(1) as f64;
        (0..self.players.len())
            .map(|p| self.values.iter().map(|v| v[p].abs()).sum::<f64>() / n)
            .collect()
    }

    pub fn player_name(&self, p: Player) -> &str {
        &self.feature_names[p.feature]
    }
}

/// Explains `windows` against `baseline`. Window `i` of the batch is seeded
/// with `seed + i` when sampling.
pub fn explain(
    model: &dyn WindowModel,
    windows: &[(usize, &Tensor)],
    baseline: &Tensor,
    feature_names: &[String],
    method: ShapleyMethod,
    seed: u64,
) -> Result<AttributionReport> {
    if windows.is_empty() {
        return Err(Error::Evaluation("no windows to explain".into()));
    }
    let (timesteps, width) = (baseline.rows(), baseline.cols());
    if feature_names.len() != width {
        return Err(Error::Dimension(format!(
            "{} feature names for {width} columns",
            feature_names.len()
        )));
    }
    let players = all_players(timesteps, width);
    let per_window: Vec<Result<(Vec<f64>, f64)>> = windows
        .par_iter()
        .enumerate()
        .map(|(i, (_, x))| match method {
            ShapleyMethod::Exact => {
                let phi = shapley_exact(model, x, baseline, &players)?;
                let ends = model.score(&[(*x).clone(), baseline.clone()])?;
                let residual = phi.iter().sum::<f64>() - (ends[0] - ends[1]);
                Ok((phi, residual))
            }
            ShapleyMethod::Sampled { permutations } => {
                let s = shapley_sampled(model, x, baseline, &players, permutations, seed.wrapping_add(i as u64))?;
                Ok((s.values, s.efficiency_residual))
            }
        })
        .collect();
    let mut values = Vec::with_capacity(windows.len());
    let mut efficiency_residuals = Vec::with_capacity(windows.len());
    for r in per_window {
        let (v, e) = r?;
        values.push(v);
        efficiency_residuals.push(e);
    }
    let feature_values = windows
        .iter()
        .map(|(_, x)| players.iter().map(|p| x.at(p.timestep, p.feature)).collect())
        .collect();
    Ok(AttributionReport {
        timesteps,
        feature_names: feature_names.to_vec(),
        players,
        window_ids: windows.iter().map(|(id, _)| *id).collect(),
        values,
        feature_values,
        efficiency_residuals,
    })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RankedPlayer {
    pub timestep: usize,
    pub feature: String,
    pub rank: usize,
    pub mean_abs_shap: f64,
    player: usize,
}

/// Top-`k` players by mean |φ|, per timestep or over the whole window.
/// Ties keep player order.
pub fn rank_players(report: &AttributionReport, top_k: usize, split_by_timestep: bool) -> Result<Vec<RankedPlayer>> {
    if report.values.is_empty() {
        return Err(Error::Evaluation("empty attribution report".into()));
    }
    let importance = report.global_importance();
    let groups: Vec<Vec<usize>> = if split_by_timestep {
        (0..report.timesteps)
            .map(|t| (0..report.players.len()).filter(|&p| report.players[p].timestep == t).collect())
            .collect()
    } else {
        vec![(0..report.players.len()).collect()]
    };
    let mut out = Vec::new();
    for mut group in groups {
        group.sort_by(|&a, &b| importance[b].total_cmp(&importance[a]));
        for (rank, &p) in group.iter().take(top_k).enumerate() {
            out.push(RankedPlayer {
                timestep: report.players[p].timestep,
                feature: report.player_name(report.players[p]).to_string(),
                rank: rank + 1,
                mean_abs_shap: importance[p],
                player: p,
            });
        }
    }
    Ok(out)
}

const CSV_HEADER: &str = "timestep,feature,window_id,shap_value,feature_value\n";

fn push_rows(out: &mut String, report: &AttributionReport, p: usize) {
    let player = report.players[p];
    for (w, id) in report.window_ids.iter().enumerate() {
        let _ = writeln!(
            out,
            "{},{},{},{},{}",
            player.timestep,
            report.player_name(player),
            id,
            report.values[w][p],
            report.feature_values[w][p]
        );
    }
}

/// Every (player, window) pair as CSV.
pub fn attribution_csv(report: &AttributionReport) -> String {
    let mut out = String::from(CSV_HEADER);
    for p in 0..report.players.len() {
        push_rows(&mut out, report, p);
    }
    out
}

/// Rows for the top-`k` players of each timestep (or overall), in rank
/// order, one row per explained window.
pub fn summary_export(report: &AttributionReport, top_k: usize, split_by_timestep: bool) -> Result<String> {
    let ranked = rank_players(report, top_k, split_by_timestep)?;
    let mut out = String::from(CSV_HEADER);
    for r in &ranked {
        push_rows(&mut out, report, r.player);
    }
    Ok(out)
}
