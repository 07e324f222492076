use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{dim_err, Error, Result};

pub const CORRELATION_THRESHOLD: f64 = 0.5;

/// Product-moment correlation; 0 when either series is constant.
pub fn pearson_r(x: &[f64], y: &[f64]) -> Result<f64> {
    if x.len() != y.len() || x.len() < 2 {
        return dim_err(format!("series of lengths {} and {}", x.len(), y.len()));
    }
    let n = x.len() as f64;
    let mx = x.iter().sum::<f64>() / n;
    let my = y.iter().sum::<f64>() / n;
    let (mut sxy, mut sxx, mut syy) = (0.0, 0.0, 0.0);
    for (a, b) in x.iter().zip(y) {
        let (dx, dy) = (a - mx, b - my);
        sxy += dx * dy;
        sxx += dx * dx;
        syy += dy * dy;
    }
    if sxx == 0.0 || syy == 0.0 {
        return Ok(0.0);
    }
    Ok((sxy / (sxx.sqrt() * syy.sqrt())).clamp(-1.0, 1.0))
}

/// Pairwise Pearson matrix (row-major `width × width`) of a row-major table.
pub fn correlation_matrix(values: &[f64], width: usize) -> Result<Vec<f64>> {
    if width == 0 || !values.len().is_multiple_of(width) || values.len() / width < 2 {
        return dim_err(format!("{} values cannot form ≥2 rows of width {width}", values.len()));
    }
    let n = values.len() / width;
    let columns: Vec<Vec<f64>> = (0..width)
        .into_par_iter()
        .map(|j| {
            let col: Vec<f64> = (0..n).map(|i| values[i * width + j]).collect();
            let mean = col.iter().sum::<f64>() / n as f64;
            let centered: Vec<f64> = col.iter().map(|v| v - mean).collect();
            let norm = centered.iter().map(|v| v * v).sum::<f64>().sqrt();
            if norm == 0.0 {
                vec![0.0; n]
            } else {
                centered.iter().map(|v| v / norm).collect()
            }
        })
        .collect();
    let rows: Vec<Vec<f64>> = (0..width)
        .into_par_iter()
        .map(|i| {
            (0..width)
                .map(|j| {
                    let dot: f64 = columns[i].iter().zip(&columns[j]).map(|(a, b)| a * b).sum();
                    dot.clamp(-1.0, 1.0)
                })
                .collect()
        })
        .collect();
    Ok(rows.concat())
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ExtraTreesConfig {
    pub n_trees: usize,
    /// Features drawn per split; `None` means floor(sqrt(width)).
    pub max_features: Option<usize>,
    pub max_depth: Option<usize>,
    pub min_samples_split: usize,
    /// Rows drawn (without replacement) per tree; `None` uses all rows.
    pub max_samples: Option<usize>,
    pub seed: u64,
}

impl Default for ExtraTreesConfig {
    fn default() -> Self {
        Self {
            n_trees: 100,
            max_features: None,
            max_depth: None,
            min_samples_split: 2,
            max_samples: None,
            seed: 0,
        }
    }
}

fn gini(pos: usize, n: usize) -> f64 {
    if n == 0 {
        return 0.0;
    }
    let p = pos as f64 / n as f64;
    2.0 * p * (1.0 - p)
}

/// Grows one extremely randomized tree and returns its unnormalized
/// impurity decrease per feature.
fn grow_tree(
    values: &[f64],
    width: usize,
    labels: &[u8],
    cfg: &ExtraTreesConfig,
    max_features: usize,
    rng: &mut ChaCha8Rng,
) -> Vec<f64> {
    let n = labels.len();
    let mut importance = vec![0.0; width];
    let root: Vec<usize> = match cfg.max_samples {
        Some(m) if m < n => rand::seq::index::sample(rng, n, m).into_vec(),
        _ => (0..n).collect(),
    };
    let total = root.len() as f64;
    let mut stack = vec![(root, 0usize)];
    let mut order: Vec<usize> = (0..width).collect();
    while let Some((idx, depth)) = stack.pop() {
        let count = idx.len();
        let pos = idx.iter().filter(|&&i| labels[i] == 1).count();
        let at_limit = cfg.max_depth.is_some_and(|d| depth >= d);
        if pos == 0 || pos == count || count < cfg.min_samples_split.max(2) || at_limit {
            continue;
        }
        let parent = gini(pos, count);
        let mut best: Option<(f64, usize, f64)> = None;
        let mut tried = 0;
        // Draw features without replacement until enough non-constant ones are found.
        for k in 0..width {
            if tried >= max_features {
                break;
            }
            let pick = rng.random_range(k..width);
            order.swap(k, pick);
            let f = order[k];
            let (mut lo, mut hi) = (f64::INFINITY, f64::NEG_INFINITY);
            for &i in &idx {
                let v = values[i * width + f];
                lo = lo.min(v);
                hi = hi.max(v);
            }
            if !(hi > lo) {
                continue;
            }
            tried += 1;
            let threshold = rng.random_range(lo..hi);
            let (mut nl, mut pl) = (0usize, 0usize);
            for &i in &idx {
                if values[i * width + f] <= threshold {
                    nl += 1;
                    pl += usize::from(labels[i] == 1);
                }
            }
            let (nr, pr) = (count - nl, pos - pl);
            let child = (nl as f64 * gini(pl, nl) + nr as f64 * gini(pr, nr)) / count as f64;
            let gain = parent - child;
            if best.is_none_or(|(g, _, _)| gain > g) {
                best = Some((gain, f, threshold));
            }
        }
        let Some((gain, f, threshold)) = best else { continue };
        importance[f] += count as f64 / total * gain;
        let (left, right): (Vec<usize>, Vec<usize>) =
            idx.into_iter().partition(|&i| values[i * width + f] <= threshold);
        stack.push((right, depth + 1));
        stack.push((left, depth + 1));
    }
    importance
}

/// Gini importance from a forest of extremely randomized trees, normalized
/// to sum to 1. Trees are grown in parallel from per-tree seeds, so the
/// result does not depend on the thread count.
pub fn extra_trees_importance(
    values: &[f64],
    width: usize,
    labels: &[u8],
    cfg: &ExtraTreesConfig,
) -> Result<Vec<f64>> {
    if width == 0 || values.len() != labels.len() * width {
        return dim_err(format!("{} values for {} labels of width {width}", values.len(), labels.len()));
    }
    let pos = labels.iter().filter(|&&l| l == 1).count();
    if pos == 0 || pos == labels.len() {
        return Err(Error::DegenerateLabels);
    }
    if cfg.n_trees == 0 {
        return Err(Error::Config("extra-trees needs at least one tree".into()));
    }
    let max_features = cfg
        .max_features
        .unwrap_or_else(|| (width as f64).sqrt().floor() as usize)
        .clamp(1, width);
    let per_tree: Vec<Vec<f64>> = (0..cfg.n_trees)
        .into_par_iter()
        .map(|t| {
            let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
            rng.set_stream(t as u64);
            let imp = grow_tree(values, width, labels, cfg, max_features, &mut rng);
            let s: f64 = imp.iter().sum();
            if s > 0.0 {
                imp.iter().map(|v| v / s).collect()
            } else {
                imp
            }
        })
        .collect();
    let mut total = vec![0.0; width];
    for imp in &per_tree {
        for (t, v) in total.iter_mut().zip(imp) {
            *t += v;
        }
    }
    let s: f64 = total.iter().sum();
    if s > 0.0 {
        total.iter_mut().for_each(|v| *v /= s);
    } else {
        total.fill(1.0 / width as f64);
    }
    Ok(total)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FeatureScore {
    pub name: String,
    pub importance: f64,
    pub kept: bool,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SelectionResult {
    pub threshold: f64,
    /// Every candidate feature in canonical column order.
    pub features: Vec<FeatureScore>,
    /// Kept feature names in canonical column order.
    pub kept: Vec<String>,
    /// Row-major correlation matrix over all candidates.
    pub correlation: Vec<Vec<f64>>,
}

/// Greedy importance-ordered selection: a feature is kept when its absolute
/// correlation with every already kept feature is at most `threshold`.
pub fn select_features(
    names: &[String],
    importances: &[f64],
    correlation: &[f64],
    threshold: f64,
) -> Result<SelectionResult> {
    let n = names.len();
    if importances.len() != n || correlation.len() != n * n {
        return dim_err(format!(
            "{n} names, {} importances, correlation of {} entries",
            importances.len(),
            correlation.len()
        ));
    }
    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&a, &b| importances[b].total_cmp(&importances[a]).then(a.cmp(&b)));
    let mut kept_idx: Vec<usize> = Vec::new();
    for i in order {
        if kept_idx.iter().all(|&k| correlation[i * n + k].abs() <= threshold) {
            kept_idx.push(i);
        }
    }
    let mut kept_flags = vec![false; n];
    for &k in &kept_idx {
        kept_flags[k] = true;
    }
    Ok(SelectionResult {
        threshold,
        features: (0..n)
            .map(|i| FeatureScore {
                name: names[i].clone(),
                importance: importances[i],
                kept: kept_flags[i],
            })
            .collect(),
        kept: (0..n).filter(|&i| kept_flags[i]).map(|i| names[i].clone()).collect(),
        correlation: correlation.chunks(n).map(<[f64]>::to_vec).collect(),
    })
}
