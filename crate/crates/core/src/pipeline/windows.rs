use chrono::Duration;
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::datamodel::{LabeledWindow, WindowOrigin, INTERVAL_MINUTES};
use crate::error::{dim_err, Error, Result};
use crate::numcore::Tensor;
use crate::pipeline::FeatureTable;

pub const DEFAULT_SMOTE_K: usize = 5;

/// Sliding windows of `timesteps` consecutive intervals inside each stream.
/// Windows crossing a time gap are skipped; the label is the final row's.
pub fn stack_windows(table: &FeatureTable, labels: &[u8], timesteps: usize) -> Result<Vec<LabeledWindow>> {
    if labels.len() != table.len() {
        return dim_err(format!("{} labels for {} rows", labels.len(), table.len()));
    }
    if timesteps == 0 {
        return Err(Error::Config("windows need at least one timestep".into()));
    }
    let step = Duration::minutes(INTERVAL_MINUTES);
    let width = table.width();
    let mut out = Vec::new();
    for range in table.streams() {
        // Length of the contiguous run ending at each row.
        let mut run = 0usize;
        for i in range.clone() {
            let contiguous = i > range.start && table.keys[i].timestamp - table.keys[i - 1].timestamp == step;
            run = if contiguous { run + 1 } else { 1 };
            if run < timesteps {
                continue;
            }
            let first = i + 1 - timesteps;
            let data = table.values[first * width..(i + 1) * width].to_vec();
            let key = table.keys[i];
            out.push(LabeledWindow {
                features: Tensor::new(vec![timesteps, width], data)?,
                label: labels[i],
                origin: WindowOrigin {
                    intersection: key.intersection,
                    approach: key.approach,
                    end: key.timestamp,
                    synthetic: false,
                },
            });
        }
    }
    Ok(out)
}

fn count_positive(windows: &[LabeledWindow]) -> usize {
    windows.iter().filter(|w| w.label == 1).count()
}

/// Seeded stratified split. The test side gets round(f·n) windows, of which
/// round(f·positives) are positive. Both sides keep the input order.
pub fn split_train_test(
    windows: &[LabeledWindow],
    test_fraction: f64,
    seed: u64,
) -> Result<(Vec<LabeledWindow>, Vec<LabeledWindow>)> {
    if windows.len() < 4 {
        return Err(Error::Config(format!("cannot split {} windows", windows.len())));
    }
    if !(0.0..1.0).contains(&test_fraction) {
        return Err(Error::Config(format!("test fraction {test_fraction} outside [0, 1)")));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let (mut pos, mut neg): (Vec<usize>, Vec<usize>) = (0..windows.len()).partition(|&i| windows[i].label == 1);
    pos.shuffle(&mut rng);
    neg.shuffle(&mut rng);
    let n_test = (test_fraction * windows.len() as f64).round() as usize;
    let pos_test = ((test_fraction * pos.len() as f64).round() as usize).min(n_test);
    let neg_test = (n_test - pos_test).min(neg.len());
    let mut is_test = vec![false; windows.len()];
    for &i in pos[..pos_test].iter().chain(&neg[..neg_test]) {
        is_test[i] = true;
    }
    let (test, train): (Vec<_>, Vec<_>) = windows
        .iter()
        .zip(&is_test)
        .partition(|(_, t)| **t);
    Ok((
        train.into_iter().map(|(w, _)| w.clone()).collect(),
        test.into_iter().map(|(w, _)| w.clone()).collect(),
    ))
}

/// Chronological split: the latest `test_fraction` of windows (by end time)
/// form the test set.
pub fn split_temporal(windows: &[LabeledWindow], test_fraction: f64) -> Result<(Vec<LabeledWindow>, Vec<LabeledWindow>)> {
    if windows.len() < 4 {
        return Err(Error::Config(format!("cannot split {} windows", windows.len())));
    }
    let mut order: Vec<usize> = (0..windows.len()).collect();
    order.sort_by_key(|&i| (windows[i].origin.end, i));
    let n_test = (test_fraction * windows.len() as f64).round() as usize;
    let cut = windows.len() - n_test;
    let mut is_test = vec![false; windows.len()];
    for &i in &order[cut..] {
        is_test[i] = true;
    }
    let train = (0..windows.len()).filter(|&i| !is_test[i]).map(|i| windows[i].clone()).collect();
    let test = (0..windows.len()).filter(|&i| is_test[i]).map(|i| windows[i].clone()).collect();
    Ok((train, test))
}

fn sq_dist(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum()
}

/// SMOTE to a 1:1 class ratio. The originals come first, unchanged, followed
/// by synthetic minority windows interpolated toward one of each parent's
/// `k` nearest minority neighbours (Euclidean on flattened windows).
pub fn smote_resample(train: &[LabeledWindow], k: usize, seed: u64) -> Result<Vec<LabeledWindow>> {
    let pos = count_positive(train);
    let neg = train.len() - pos;
    let minority_label = u8::from(pos <= neg);
    let minority: Vec<&LabeledWindow> = train.iter().filter(|w| w.label == minority_label).collect();
    let need = pos.max(neg) - pos.min(neg);
    if minority.is_empty() {
        return Err(Error::Resampling("no minority-class windows to oversample".into()));
    }
    let mut out = train.to_vec();
    if need == 0 {
        return Ok(out);
    }
    let shape = minority[0].features.shape().to_vec();
    if minority.iter().any(|w| w.features.shape() != shape.as_slice()) {
        return Err(Error::Resampling("minority windows differ in shape".into()));
    }
    let m = minority.len();
    let k = k.min(m.saturating_sub(1)).max(1);
    let neighbours: Vec<Vec<usize>> = (0..m)
        .map(|i| {
            if m == 1 {
                return vec![0];
            }
            let xi = minority[i].features.data();
            let mut d: Vec<(f64, usize)> = (0..m)
                .filter(|&j| j != i)
                .map(|j| (sq_dist(xi, minority[j].features.data()), j))
                .collect();
            d.sort_by(|a, b| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1)));
            d.into_iter().take(k).map(|(_, j)| j).collect()
        })
        .collect();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    for s in 0..need {
        let parent = s % m;
        let nn = neighbours[parent][rng.random_range(0..neighbours[parent].len())];
        let u: f64 = rng.random();
        let x = minority[parent].features.data();
        let y = minority[nn].features.data();
        let data = x.iter().zip(y).map(|(a, b)| a + u * (b - a)).collect();
        out.push(LabeledWindow {
            features: Tensor::new(shape.clone(), data)?,
            label: minority_label,
            origin: WindowOrigin {
                synthetic: true,
                ..minority[parent].origin
            },
        });
    }
    Ok(out)
}
