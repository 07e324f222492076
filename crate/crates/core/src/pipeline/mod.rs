//! From raw snapshots to balanced training windows: zone formatting, crash
//! indexing, post-crash exclusion, feature selection, window stacking,
//! splitting and SMOTE.

mod format;
mod labels;
mod select;
mod table;
mod windows;

pub use format::{format_approach, format_within_all, format_within_intersection, NomenclatureMap};
pub use labels::{
    covering_intervals, exclude_post_crash, index_crashes, preceding_interval, CrashIndex,
    EXCLUSION_HOURS,
};
pub use select::{
    correlation_matrix, extra_trees_importance, pearson_r, select_features, ExtraTreesConfig,
    FeatureScore, SelectionResult, CORRELATION_THRESHOLD,
};
pub use table::{FeatureTable, RowKey};
pub use windows::{
    smote_resample, split_temporal, split_train_test, stack_windows, DEFAULT_SMOTE_K,
};

use serde::{Deserialize, Serialize};

use crate::datamodel::{CrashEvent, IntersectionGeometry, IntersectionSnapshot, LabeledWindow, Zone};
use crate::error::Result;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SplitStrategy {
    Stratified,
    Temporal,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PipelineConfig {
    pub zone: Zone,
    pub timesteps: usize,
    pub test_fraction: f64,
    pub split: SplitStrategy,
    pub correlation_threshold: f64,
    pub extra_trees: ExtraTreesConfig,
    pub smote_k: usize,
    pub split_seed: u64,
    pub smote_seed: u64,
}

impl Default for PipelineConfig {
    fn default() -> Self {
        Self {
            zone: Zone::WithinIntersection,
            timesteps: 2,
            test_fraction: 0.25,
            split: SplitStrategy::Stratified,
            correlation_threshold: CORRELATION_THRESHOLD,
            extra_trees: ExtraTreesConfig::default(),
            smote_k: DEFAULT_SMOTE_K,
            split_seed: 0,
            smote_seed: 0,
        }
    }
}

/// Row and window counts reported by a pipeline run.
#[derive(Clone, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct PipelineStats {
    pub rows: usize,
    pub positive_rows: usize,
    pub ignored_crashes: usize,
    pub excluded_rows: usize,
    pub windows: usize,
    pub positive_windows: usize,
    pub train_windows: usize,
    pub train_positive: usize,
    pub test_windows: usize,
    pub test_positive: usize,
    pub synthetic_windows: usize,
}

#[derive(Clone, Debug)]
pub struct PreparedData {
    pub columns: Vec<String>,
    pub selection: SelectionResult,
    /// SMOTE-balanced training windows.
    pub train: Vec<LabeledWindow>,
    pub test: Vec<LabeledWindow>,
    pub stats: PipelineStats,
}

/// Formats snapshots for one zone.
pub fn format_zone(
    snapshots: &[IntersectionSnapshot],
    geometries: &[IntersectionGeometry],
    zone: Zone,
) -> Result<FeatureTable> {
    match zone {
        Zone::WithinIntersection => format_within_all(snapshots, geometries),
        Zone::Approach => Ok(format_approach(snapshots)),
    }
}

/// Runs every stage in order. Selection is fitted on the whole labeled
/// 2-D table, before windows are built and split. Without any positive
/// rows the run still completes: importances are zero and the training
/// split is left unbalanced.
pub fn run_pipeline(
    snapshots: &[IntersectionSnapshot],
    geometries: &[IntersectionGeometry],
    crashes: &[CrashEvent],
    cfg: &PipelineConfig,
) -> Result<PreparedData> {
    let table = format_zone(snapshots, geometries, cfg.zone)?;
    let index = index_crashes(&table, crashes, cfg.zone);
    let rows = table.len();
    let positive_rows = index.positives();
    let (table, labels) = exclude_post_crash(&table, &index.labels)?;
    let excluded_rows = rows - table.len();
    log::info!("{} zone: {rows} rows, {positive_rows} positive, {excluded_rows} excluded", cfg.zone);

    let importance = if positive_rows == 0 {
        log::warn!("no crash-labeled rows: ranking features by correlation order only and skipping SMOTE");
        vec![0.0; table.width()]
    } else {
        extra_trees_importance(&table.values, table.width(), &labels, &cfg.extra_trees)?
    };
    let corr = correlation_matrix(&table.values, table.width())?;
    let selection = select_features(&table.columns, &importance, &corr, cfg.correlation_threshold)?;
    log::info!("kept {} of {} features", selection.kept.len(), table.width());
    let table = table.select_columns(&selection.kept)?;

    let windows = stack_windows(&table, &labels, cfg.timesteps)?;
    let positive_windows = windows.iter().filter(|w| w.label == 1).count();
    let (train, test) = match cfg.split {
        SplitStrategy::Stratified => split_train_test(&windows, cfg.test_fraction, cfg.split_seed)?,
        SplitStrategy::Temporal => split_temporal(&windows, cfg.test_fraction)?,
    };
    let train_positive = train.iter().filter(|w| w.label == 1).count();
    let balanced = if train_positive == 0 {
        train.clone()
    } else {
        smote_resample(&train, cfg.smote_k, cfg.smote_seed)?
    };
    let stats = PipelineStats {
        rows,
        positive_rows,
        ignored_crashes: index.ignored,
        excluded_rows,
        windows: windows.len(),
        positive_windows,
        train_windows: train.len(),
        train_positive,
        test_windows: test.len(),
        test_positive: test.iter().filter(|w| w.label == 1).count(),
        synthetic_windows: balanced.len() - train.len(),
    };
    Ok(PreparedData {
        columns: table.columns,
        selection,
        train: balanced,
        test,
        stats,
    })
}
