//! Head-to-head experiment: shared preprocessing, both forecasters under one
//! config, test metrics and plot data.

use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::datapipe::{
    format_timestamp, impute_all, load_timeseries, make_windows, minmax_fit, split_index, Layout, ScalerParams, TimeSeriesFrame,
    WindowedDataset,
};
use crate::error::{Error, Result};
use crate::graph::{parse_graph_config, validate_graph, FeatureGraph};
use crate::synth::{generate_with_gaps, SynthConfig};
use crate::models::{predict_series, train, EpochRecord, ModelKind, ModelState, TrainConfig};

pub const REPORT_SCHEMA_VERSION: u32 = 1;
pub const SCATTER_FILE: &str = "scatter.csv";
pub const TIMESERIES_FILE: &str = "timeseries.csv";

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Metrics {
    pub mse: f64,
    pub rmse: f64,
    /// `None` when the observed series is constant.
    pub r2: Option<f64>,
    pub n: usize,
}

pub fn compute_metrics(y_true: &[f64], y_pred: &[f64]) -> Result<Metrics> {
    if y_true.len() != y_pred.len() {
        return Err(Error::dim("compute_metrics", y_true.len(), y_pred.len()));
    }
    if y_true.is_empty() {
        return Err(Error::Data("metrics need at least one observation".into()));
    }
    let n = y_true.len() as f64;
    let ss_res: f64 = y_true.iter().zip(y_pred).map(|(t, p)| (t - p) * (t - p)).sum();
    let mean = y_true.iter().sum::<f64>() / n;
    let ss_tot: f64 = y_true.iter().map(|t| (t - mean) * (t - mean)).sum();
    let mse = ss_res / n;
    let r2 = (ss_tot > 0.0).then(|| 1.0 - ss_res / ss_tot);
    Ok(Metrics {
        mse,
        rmse: mse.sqrt(),
        r2,
        n: y_true.len(),
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExperimentConfig {
    pub train: TrainConfig,
    /// Leading share of rows used for fitting; the rest is the test tail.
    pub train_fraction: f64,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        Self {
            train: TrainConfig::default(),
            train_fraction: 0.8,
        }
    }
}

impl ExperimentConfig {
    pub fn validate(&self) -> Result<()> {
        self.train.validate()?;
        if !(self.train_fraction > 0.0 && self.train_fraction < 1.0) {
            return Err(Error::Config(format!("train_fraction must lie in (0, 1), got {}", self.train_fraction)));
        }
        Ok(())
    }

    pub fn fingerprint(&self) -> Result<String> {
        Ok(sha256_hex(serde_json::to_string(self)?.as_bytes()))
    }
}

fn sha256_hex(bytes: &[u8]) -> String {
    hex::encode(Sha256::digest(bytes))
}

/// Fingerprint of a frame's CSV rendering.
pub fn frame_fingerprint(frame: &TimeSeriesFrame) -> Result<String> {
    let mut buf = Vec::new();
    frame.write_csv(&mut buf)?;
    Ok(sha256_hex(&buf))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SplitSummary {
    pub rows: usize,
    pub train_rows: usize,
    pub test_rows: usize,
    pub train_windows: usize,
    pub test_windows: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ImputationSummary {
    pub column: String,
    pub filled: usize,
    pub unfilled: usize,
    /// Filled cells whose neighbour days cross the train/test cut.
    pub straddling: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelResult {
    pub kind: ModelKind,
    pub parameter_count: usize,
    pub metrics: Metrics,
    pub history: Vec<EpochRecord>,
    /// Test predictions on the normalized scale.
    pub predicted: Vec<f64>,
    /// Test predictions in the target's original units.
    pub predicted_raw: Option<Vec<f64>>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExperimentReport {
    pub schema_version: u32,
    pub seed: u64,
    pub source: DataSource,
    pub config: ExperimentConfig,
    pub config_fingerprint: String,
    /// Graph in config-file form, enough to rebuild it.
    pub graph: String,
    pub graph_fingerprint: String,
    pub data_fingerprint: String,
    pub target: String,
    pub split: SplitSummary,
    pub imputation: Vec<ImputationSummary>,
    pub scaler: Option<ScalerParams>,
    /// Timestamps of the test targets.
    pub timestamps: Vec<String>,
    pub observed: Vec<f64>,
    pub observed_raw: Option<Vec<f64>>,
    pub models: Vec<ModelResult>,
}

impl ExperimentReport {
    pub fn model(&self, kind: ModelKind) -> Option<&ModelResult> {
        self.models.iter().find(|m| m.kind == kind)
    }

    pub fn to_json(&self) -> Result<String> {
        let mut s = serde_json::to_string_pretty(self)?;
        s.push('\n');
        Ok(s)
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let report: Self = serde_json::from_str(text)?;
        if report.schema_version != REPORT_SCHEMA_VERSION {
            return Err(Error::Report(format!(
                "report schema {} is not supported (expected {REPORT_SCHEMA_VERSION})",
                report.schema_version
            )));
        }
        Ok(report)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        fs::write(path, self.to_json()?)?;
        Ok(())
    }
}

/// Where an experiment's rows come from.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum DataSource {
    Synthetic { synth: SynthConfig },
    File { path: PathBuf },
}

impl DataSource {
    /// Regenerates or reads the frame; synthetic gaps follow the config.
    pub fn load(&self) -> Result<TimeSeriesFrame> {
        match self {
            DataSource::Synthetic { synth } => Ok(generate_with_gaps(synth)?.0),
            DataSource::File { path } => load_timeseries(path, None),
        }
    }
}

/// Scaled, split and windowed data shared by both models.
pub struct Prepared {
    pub scaler: ScalerParams,
    pub split: usize,
    pub imputation: Vec<ImputationSummary>,
    pub train_flat: WindowedDataset,
    pub test_flat: WindowedDataset,
    pub test_timestamps: Vec<String>,
}

/// Imputes, fits the scaler on the training rows, splits and windows.
pub fn prepare(frame: &TimeSeriesFrame, graph: &FeatureGraph, cfg: &ExperimentConfig) -> Result<Prepared> {
    cfg.validate()?;
    validate_graph(graph, frame.columns()).map_err(|e| e.in_stage("graph"))?;
    let split = split_index(frame.rows(), cfg.train_fraction).map_err(|e| e.in_stage("split"))?;

    let (filled, logs) = impute_all(frame).map_err(|e| e.in_stage("impute"))?;
    let imputation = logs
        .iter()
        .map(|l| ImputationSummary {
            column: l.column.clone(),
            filled: l.filled.len(),
            unfilled: l.unfilled.len(),
            straddling: l.straddling(split).len(),
        })
        .collect::<Vec<_>>();
    let unfilled: usize = imputation.iter().map(|s| s.unfilled).sum();
    if unfilled > 0 {
        return Err(Error::Data(format!("{unfilled} cells could not be imputed")).in_stage("impute"));
    }

    let names: Vec<&str> = graph.nodes().iter().map(String::as_str).collect();
    let scaler = minmax_fit(&filled, &names, 0..split).map_err(|e| e.in_stage("scale"))?;
    let scaled = scaler.transform(&filled).map_err(|e| e.in_stage("scale"))?;

    let seq_len = cfg.train.seq_len;
    let train_part = scaled.slice_rows(0..split).map_err(|e| e.in_stage("split"))?;
    let test_part = scaled.slice_rows(split..scaled.rows()).map_err(|e| e.in_stage("split"))?;
    let target = graph.target_name();
    let window = |f: &TimeSeriesFrame| make_windows(f, target, seq_len, Layout::Flat, Some(graph));
    let train_flat = window(&train_part).map_err(|e| e.in_stage("window"))?;
    let test_flat = window(&test_part).map_err(|e| e.in_stage("window"))?;
    if test_flat.is_empty() {
        return Err(Error::Data("test tail is shorter than one window".into()).in_stage("window"));
    }
    let test_timestamps = test_flat
        .source_indices()
        .iter()
        .map(|&i| format_timestamp(frame.timestamp(i)))
        .collect();
    Ok(Prepared {
        scaler,
        split,
        imputation,
        train_flat,
        test_flat,
        test_timestamps,
    })
}

fn train_and_score(
    mut state: ModelState,
    train_data: &WindowedDataset,
    test_data: &WindowedDataset,
    unscale: &dyn Fn(f64) -> f64,
) -> Result<ModelResult> {
    let kind = state.model.kind();
    let (train_stage, predict_stage) = match kind {
        ModelKind::Rnn => ("train rnn", "predict rnn"),
        ModelKind::Stgnn => ("train stgnn", "predict stgnn"),
    };
    train(&mut state, train_data).map_err(|e| e.in_stage(train_stage))?;
    let predicted = predict_series(&state.model, test_data).map_err(|e| e.in_stage(predict_stage))?;
    let metrics = compute_metrics(test_data.targets(), &predicted)?;
    log::info!(
        "{kind} test mse {:.6} rmse {:.6} r2 {}",
        metrics.mse,
        metrics.rmse,
        metrics.r2.map_or("undefined".into(), |r| format!("{r:.4}"))
    );
    Ok(ModelResult {
        kind,
        parameter_count: state.model.parameter_count(),
        metrics,
        history: state.history,
        predicted_raw: Some(predicted.iter().map(|&v| unscale(v)).collect()),
        predicted,
    })
}

/// Runs the full comparison on `frame`; both models train concurrently
/// under the same config.
pub fn run_experiment(
    frame: &TimeSeriesFrame,
    graph: &FeatureGraph,
    cfg: &ExperimentConfig,
    source: DataSource,
) -> Result<ExperimentReport> {
    let prep = prepare(frame, graph, cfg)?;
    let target = graph.target_name().to_string();
    let t_idx = prep.scaler.index_of(&target)?;
    let scaler = &prep.scaler;
    let unscale = move |v: f64| scaler.inverse_value(t_idx, v);

    let train_graph = prep.train_flat.with_layout(Layout::PerNode);
    let test_graph = prep.test_flat.with_layout(Layout::PerNode);
    let rnn_state = ModelState::new_rnn(graph.node_count(), cfg.train.clone())?;
    let stgnn_state = ModelState::new_stgnn(graph, cfg.train.clone())?;

    let (rnn, stgnn) = std::thread::scope(|s| {
        let rnn = s.spawn(|| train_and_score(rnn_state, &prep.train_flat, &prep.test_flat, &unscale));
        let stgnn = s.spawn(|| train_and_score(stgnn_state, &train_graph, &test_graph, &unscale));
        (
            rnn.join().unwrap_or_else(|_| Err(Error::Report("rnn worker panicked".into()))),
            stgnn.join().unwrap_or_else(|_| Err(Error::Report("stgnn worker panicked".into()))),
        )
    });
    let models = vec![rnn?, stgnn?];

    let observed = prep.test_flat.targets().to_vec();
    let observed_raw = Some(observed.iter().map(|&v| unscale(v)).collect());
    Ok(ExperimentReport {
        schema_version: REPORT_SCHEMA_VERSION,
        seed: cfg.train.seed,
        source,
        config: cfg.clone(),
        config_fingerprint: cfg.fingerprint()?,
        graph: graph.to_config_string(),
        graph_fingerprint: graph.fingerprint(),
        data_fingerprint: frame_fingerprint(frame)?,
        target,
        split: SplitSummary {
            rows: frame.rows(),
            train_rows: prep.split,
            test_rows: frame.rows() - prep.split,
            train_windows: prep.train_flat.len(),
            test_windows: prep.test_flat.len(),
        },
        imputation: prep.imputation,
        scaler: Some(prep.scaler.clone()),
        timestamps: prep.test_timestamps,
        observed,
        observed_raw,
        models,
    })
}

/// Reruns the experiment a report describes.
pub fn rerun_report(report: &ExperimentReport) -> Result<ExperimentReport> {
    let frame = report.source.load().map_err(|e| e.in_stage("load"))?;
    let fp = frame_fingerprint(&frame)?;
    if fp != report.data_fingerprint {
        return Err(Error::Report(format!(
            "data fingerprint {fp} differs from the report's {}",
            report.data_fingerprint
        )));
    }
    let graph = parse_graph_config(&report.graph)?;
    run_experiment(&frame, &graph, &report.config, report.source.clone())
}

/// Writes `scatter.csv` and `timeseries.csv` in the target's original units.
///
/// scatter.csv: `observed,<kind>_predicted` per model, one row per test
/// window. timeseries.csv: `timestamp,observed,<kind>` per model.
pub fn emit_plot_data(report: &ExperimentReport, dir: &Path) -> Result<(PathBuf, PathBuf)> {
    let scaler = report
        .scaler
        .as_ref()
        .ok_or_else(|| Error::Report("report carries no scaler; cannot emit original units".into()))?;
    let t_idx = scaler.index_of(&report.target)?;
    let unscale = |v: &f64| scaler.inverse_value(t_idx, *v);
    let n = report.observed.len();
    if report.timestamps.len() != n || report.models.iter().any(|m| m.predicted.len() != n) {
        return Err(Error::Report("trace lengths disagree".into()));
    }
    let observed: Vec<f64> = report.observed.iter().map(unscale).collect();
    let preds: Vec<Vec<f64>> = report.models.iter().map(|m| m.predicted.iter().map(unscale).collect()).collect();

    fs::create_dir_all(dir)?;
    let scatter_path = dir.join(SCATTER_FILE);
    let mut w = csv::Writer::from_path(&scatter_path)?;
    let mut header = vec!["observed".to_string()];
    header.extend(report.models.iter().map(|m| format!("{}_predicted", m.kind)));
    w.write_record(&header)?;
    for i in 0..n {
        let mut rec = vec![fmt_f(observed[i])];
        rec.extend(preds.iter().map(|p| fmt_f(p[i])));
        w.write_record(&rec)?;
    }
    w.flush()?;

    let ts_path = dir.join(TIMESERIES_FILE);
    let mut w = csv::Writer::from_path(&ts_path)?;
    let mut header = vec!["timestamp".to_string(), "observed".to_string()];
    header.extend(report.models.iter().map(|m| m.kind.to_string()));
    w.write_record(&header)?;
    for i in 0..n {
        let mut rec = vec![report.timestamps[i].clone(), fmt_f(observed[i])];
        rec.extend(preds.iter().map(|p| fmt_f(p[i])));
        w.write_record(&rec)?;
    }
    w.flush()?;
    Ok((scatter_path, ts_path))
}

fn fmt_f(v: f64) -> String {
    format!("{v:?}")
}
