//! The six subcommands. Each reads its inputs from the output directory,
//! writes its artifacts there and returns a short summary.

use std::path::Path;

use serde::{Deserialize, Serialize};

use intformer::datamodel::{CrashEvent, LabeledWindow};
use intformer::eval::{
    attribution_csv, confusion, explain, majority_predictions, summary_export, ConfusionMatrix,
    MetricsReport, ShapleyMethod,
};
use intformer::models::Network;
use intformer::numcore::Tensor;
use intformer::pipeline::{run_pipeline, PipelineStats, SelectionResult};
use intformer::synthgen::{inject_crashes, CrashInjectionPlan, FeatureCalibration, SnapshotStream};
use intformer::trainer::{train as fit, Checkpoint, TrainedModel};

use crate::artifacts::{
    crashes_csv, parse_crashes, parse_snapshots, parse_windows, read_required, sha256_hex,
    snapshots_csv, windows_bin, write_file, Layout, Stamp, WindowFile,
};
use crate::config::{Family, RunConfig, Seeds};
use crate::error::{CliError, CliResult};

/// A configured run bound to an output directory.
#[derive(Clone, Debug)]
pub struct Run {
    pub config: RunConfig,
    pub layout: Layout,
    pub stamp: Stamp,
}

impl Run {
    pub fn new(config: RunConfig, out: impl AsRef<Path>) -> CliResult<Self> {
        config.validate()?;
        let stamp = Stamp {
            config_hash: config.hash(),
            seeds: config.seeds.clone(),
        };
        Ok(Self {
            config,
            layout: Layout::new(out.as_ref()),
            stamp,
        })
    }

    fn write_json<T: Serialize>(&self, path: &Path, doc: &T) -> CliResult<()> {
        let mut text = serde_json::to_string_pretty(doc)?;
        text.push('\n');
        write_file(path, text.as_bytes())
    }

    fn check_stamp(&self, what: &str, config_hash: &str) {
        if config_hash != self.stamp.config_hash {
            log::warn!("{what} was produced under config {config_hash}, current config is {}", self.stamp.config_hash);
        }
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct GenerateSummary {
    pub snapshots: usize,
    pub crashes: usize,
}

/// Synthetic snapshots for the configured intersections, with crashes planted.
pub fn generate(run: &Run) -> CliResult<GenerateSummary> {
    let cfg = &run.config;
    let calibration = FeatureCalibration::reported();
    let mut snapshots: Vec<_> = SnapshotStream::new(
        &cfg.geometries(),
        &calibration,
        &cfg.generator_options(),
        cfg.seeds.generate,
    )?
    .collect();
    let crashes = if cfg.crashes == 0 {
        log::warn!("no crashes requested; every window will be negative");
        Vec::new()
    } else {
        let plan = CrashInjectionPlan::new(cfg.crashes, cfg.crash_magnitude, &calibration)?;
        inject_crashes(&mut snapshots, &plan, cfg.seeds.crashes)?
    };
    write_file(&run.layout.snapshots(), &snapshots_csv(&run.stamp, &snapshots)?)?;
    write_file(&run.layout.crashes(), &crashes_csv(&run.stamp, &crashes)?)?;
    log::info!("generated {} snapshots, {} crashes", snapshots.len(), crashes.len());
    Ok(GenerateSummary {
        snapshots: snapshots.len(),
        crashes: crashes.len(),
    })
}

/// `selection.json`: the selected columns, counts and hashes of the window files.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SelectionDoc {
    pub config_hash: String,
    pub seeds: Seeds,
    pub run: String,
    pub columns: Vec<String>,
    pub selection: SelectionResult,
    pub stats: PipelineStats,
    pub train_sha256: String,
    pub test_sha256: String,
}

fn read_selection(run: &Run) -> CliResult<SelectionDoc> {
    let path = run.layout.selection();
    let doc: SelectionDoc = serde_json::from_slice(&read_required(&path, "prepare")?)?;
    run.check_stamp("selection.json", &doc.config_hash);
    Ok(doc)
}

/// Reads a window file after checking it against the hash `prepare` recorded.
fn read_windows(path: &Path, expected_sha: &str) -> CliResult<WindowFile> {
    let bytes = read_required(path, "prepare")?;
    let sha = sha256_hex(&bytes);
    if sha != expected_sha {
        return Err(CliError::Integrity(format!(
            "{} hash {sha} differs from {expected_sha} recorded by `prepare`",
            path.display()
        )));
    }
    parse_windows(path, &bytes)
}

/// Formatting, labeling, selection, stacking, splitting and SMOTE.
pub fn prepare(run: &Run) -> CliResult<PipelineStats> {
    let cfg = &run.config;
    let snap_path = run.layout.snapshots();
    let snapshots = parse_snapshots(&snap_path, &read_required(&snap_path, "generate")?)?;
    let crash_path = run.layout.crashes();
    let crashes: Vec<CrashEvent> = parse_crashes(&crash_path, &read_required(&crash_path, "generate")?)?;
    let data = run_pipeline(&snapshots, &cfg.geometries(), &crashes, &cfg.pipeline())?;
    if data.stats.positive_windows == 0 {
        log::warn!("prepared data has zero positive windows");
    }
    let width = data.columns.len();
    let train = windows_bin(&run.stamp, cfg.timesteps, width, &data.train)?;
    let test = windows_bin(&run.stamp, cfg.timesteps, width, &data.test)?;
    write_file(&run.layout.windows_train(), &train)?;
    write_file(&run.layout.windows_test(), &test)?;
    let doc = SelectionDoc {
        config_hash: run.stamp.config_hash.clone(),
        seeds: run.stamp.seeds.clone(),
        run: cfg.run_name(),
        columns: data.columns,
        selection: data.selection,
        stats: data.stats.clone(),
        train_sha256: sha256_hex(&train),
        test_sha256: sha256_hex(&test),
    };
    run.write_json(&run.layout.selection(), &doc)?;
    Ok(data.stats)
}

/// `checkpoint.json`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CheckpointDoc {
    pub config_hash: String,
    pub seeds: Seeds,
    pub family: Family,
    #[serde(flatten)]
    pub checkpoint: Checkpoint,
}

fn train_family(run: &Run, family: Family, train: &[LabeledWindow], width: usize) -> CliResult<TrainedModel> {
    let model = run.config.model_config(family, width)?;
    let network = Network::new(model, run.config.seeds.init)?;
    log::info!("training {} on {} windows", family.name(), train.len());
    Ok(fit(network, train, &run.config.train_config()?)?)
}

fn load_train(run: &Run) -> CliResult<(SelectionDoc, Vec<LabeledWindow>)> {
    let doc = read_selection(run)?;
    let file = read_windows(&run.layout.windows_train(), &doc.train_sha256)?;
    Ok((doc, file.windows))
}

/// Fits the configured model family; writes the checkpoint and loss history.
pub fn train(run: &Run) -> CliResult<TrainedModel> {
    let (doc, windows) = load_train(run)?;
    let model = train_family(run, run.config.model, &windows, doc.columns.len())?;
    let ck = CheckpointDoc {
        config_hash: run.stamp.config_hash.clone(),
        seeds: run.stamp.seeds.clone(),
        family: run.config.model,
        checkpoint: model.checkpoint(),
    };
    run.write_json(&run.layout.checkpoint(), &ck)?;
    write_file(&run.layout.losses(), &run.stamp.stamp_csv(&model.loss_csv()))?;
    Ok(model)
}

fn load_checkpoint(run: &Run) -> CliResult<(Family, TrainedModel)> {
    let path = run.layout.checkpoint();
    let text = String::from_utf8(read_required(&path, "train")?).map_err(|_| CliError::Format {
        path: path.clone(),
        reason: "not UTF-8".into(),
    })?;
    let doc: serde_json::Value = serde_json::from_str(&text)?;
    let hash = doc.get("config_hash").and_then(|h| h.as_str()).unwrap_or_default();
    run.check_stamp("checkpoint.json", hash);
    let family: Family = serde_json::from_value(doc.get("family").cloned().unwrap_or_default())?;
    Ok((family, TrainedModel::from_checkpoint_json(&text)?))
}

/// The test windows, refused when the file differs from what `prepare` recorded.
fn load_test(run: &Run, doc: &SelectionDoc) -> CliResult<Vec<LabeledWindow>> {
    Ok(read_windows(&run.layout.windows_test(), &doc.test_sha256)?.windows)
}

/// `metrics.json`: the metrics report plus the majority-class comparison.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricsDoc {
    pub config_hash: String,
    pub seeds: Seeds,
    pub run: String,
    #[serde(flatten)]
    pub report: MetricsReport,
    pub balanced_accuracy: Option<f64>,
    pub majority_balanced_accuracy: Option<f64>,
    pub beats_majority: Option<bool>,
}

fn score(run: &Run, family: Family, model: &TrainedModel, train: &[LabeledWindow], test: &[LabeledWindow]) -> CliResult<MetricsDoc> {
    let inputs: Vec<&Tensor> = test.iter().map(|w| &w.features).collect();
    let labels: Vec<u8> = test.iter().map(|w| w.label).collect();
    let probs = model.predict(&inputs)?;
    let threshold = run.config.threshold;
    let counts = confusion(&probs, &labels, threshold)?;
    let observed: Vec<u8> = train.iter().filter(|w| !w.origin.synthetic).map(|w| w.label).collect();
    let majority = confusion(&majority_predictions(&observed, labels.len()), &labels, threshold)?;
    Ok(metrics_doc(run, family, counts, majority))
}

fn metrics_doc(run: &Run, family: Family, counts: ConfusionMatrix, majority: ConfusionMatrix) -> MetricsDoc {
    let cfg = &run.config;
    let balanced = counts.balanced_accuracy().ok();
    let majority_balanced = majority.balanced_accuracy().ok();
    MetricsDoc {
        config_hash: run.stamp.config_hash.clone(),
        seeds: run.stamp.seeds.clone(),
        run: cfg.run_name(),
        report: MetricsReport::new(family.name(), &cfg.zone.to_string(), cfg.timesteps, cfg.threshold, counts),
        balanced_accuracy: balanced,
        majority_balanced_accuracy: majority_balanced,
        beats_majority: balanced.zip(majority_balanced).map(|(m, b)| m > b),
    }
}

/// Scores the trained checkpoint on the untouched test split.
pub fn evaluate(run: &Run) -> CliResult<MetricsDoc> {
    let (doc, train) = load_train(run)?;
    let test = load_test(run, &doc)?;
    let (family, model) = load_checkpoint(run)?;
    let metrics = score(run, family, &model, &train, &test)?;
    run.write_json(&run.layout.metrics(), &metrics)?;
    Ok(metrics)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ExplainSummary {
    pub windows: usize,
    pub players: usize,
    pub max_efficiency_residual: f64,
}

/// Shapley attributions for the first positive test windows against the
/// training-mean baseline.
pub fn explain_windows(run: &Run) -> CliResult<ExplainSummary> {
    let cfg = &run.config;
    let doc = read_selection(run)?;
    let test = load_test(run, &doc)?;
    let (_, model) = load_checkpoint(run)?;
    let chosen: Vec<(usize, &Tensor)> = test
        .iter()
        .enumerate()
        .filter(|(_, w)| w.label == 1)
        .take(cfg.explain_windows)
        .map(|(i, w)| (i, &w.features))
        .collect();
    if chosen.is_empty() {
        return Err(CliError::Usage("the test split has no positive windows to explain".into()));
    }
    let baseline = model.normalizer.mean_window(cfg.timesteps);
    let method = match cfg.shap_permutations {
        0 => ShapleyMethod::Exact,
        permutations => ShapleyMethod::Sampled { permutations },
    };
    let scorer = |xs: &[Tensor]| model.predict(&xs.iter().collect::<Vec<_>>());
    let report = explain(&scorer, &chosen, &baseline, &doc.columns, method, cfg.seeds.explain)?;
    write_file(&run.layout.attributions(), &run.stamp.stamp_csv(&attribution_csv(&report)))?;
    let summary = summary_export(&report, cfg.top_k, true)?;
    write_file(&run.layout.attribution_summary(), &run.stamp.stamp_csv(&summary))?;
    Ok(ExplainSummary {
        windows: report.window_ids.len(),
        players: report.players.len(),
        max_efficiency_residual: report.efficiency_residuals.iter().fold(0.0, |m, r| m.max(r.abs())),
    })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BenchmarkRow {
    #[serde(flatten)]
    pub metrics: MetricsDoc,
    pub epochs_run: usize,
    pub final_train_loss: f64,
    pub probabilities_valid: bool,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BenchmarkDoc {
    pub config_hash: String,
    pub seeds: Seeds,
    pub run: String,
    pub rows: Vec<BenchmarkRow>,
}

const BENCHMARK_HEADER: &str =
    "model,zone,stacking,sensitivity,false_alarm_rate,balanced_accuracy,tp,fp,fn,tn,epochs_run,final_train_loss\n";

fn opt(v: Option<f64>) -> String {
    v.map(|x| x.to_string()).unwrap_or_default()
}

/// Trains and scores every model family on the same prepared data.
pub fn benchmark(run: &Run) -> CliResult<BenchmarkDoc> {
    let (doc, train) = load_train(run)?;
    let test = load_test(run, &doc)?;
    let inputs: Vec<&Tensor> = test.iter().map(|w| &w.features).collect();
    let mut rows = Vec::with_capacity(Family::ALL.len());
    let mut csv = String::from(BENCHMARK_HEADER);
    for family in Family::ALL {
        let model = train_family(run, family, &train, doc.columns.len())?;
        let probs = model.predict(&inputs)?;
        let metrics = score(run, family, &model, &train, &test)?;
        let last = model.history.last();
        let row = BenchmarkRow {
            epochs_run: model.history.len(),
            final_train_loss: last.map_or(f64::NAN, |e| e.mean_train_loss),
            probabilities_valid: probs.iter().all(|p| p.is_finite() && (0.0..=1.0).contains(p)),
            metrics,
        };
        let (m, c) = (&row.metrics.report, &row.metrics.report.counts);
        csv.push_str(&format!(
            "{},{},{},{},{},{},{},{},{},{},{},{}\n",
            m.model,
            m.zone,
            m.stacking,
            opt(m.sensitivity),
            opt(m.false_alarm_rate),
            opt(row.metrics.balanced_accuracy),
            c.tp,
            c.fp,
            c.fn_,
            c.tn,
            row.epochs_run,
            row.final_train_loss
        ));
        rows.push(row);
    }
    let out = BenchmarkDoc {
        config_hash: run.stamp.config_hash.clone(),
        seeds: run.stamp.seeds.clone(),
        run: run.config.run_name(),
        rows,
    };
    run.write_json(&run.layout.benchmark_json(), &out)?;
    write_file(&run.layout.benchmark_csv(), &run.stamp.stamp_csv(&csv))?;
    Ok(out)
}
