//! `greenhouse` command-line front end.

use std::collections::BTreeMap;
use std::ffi::OsString;
use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand, ValueEnum};
use serde::{Deserialize, Serialize};

use greenhouse_core::datapipe::{
    adf_test_column, impute_all, load_timeseries, Layout, TimeSeriesFrame, DEFAULT_ADF_LAGS, DEFAULT_SIGNIFICANCE,
};
use greenhouse_core::experiment::{
    compute_metrics, emit_plot_data, prepare, rerun_report, run_experiment, DataSource, ExperimentConfig,
    ExperimentReport, Metrics,
};
use greenhouse_core::graph::{
    gh2_default_graph, gh4_default_graph, parse_graph_config, validate_graph, FeatureGraph, GH2_COLUMNS, GH4_COLUMNS,
};
use greenhouse_core::models::{predict_series, train, MaskScope, ModelKind, ModelState, TrainConfig};
use greenhouse_core::nn::AdamConfig;
use greenhouse_core::synth::{generate_with_gaps, Regime, SynthConfig};

/// Environment variable overriding the default output directory.
pub const OUT_DIR_ENV: &str = "GREENHOUSE_OUT_DIR";
const DEFAULT_OUT_DIR: &str = "greenhouse-out";
pub const REPORT_FILE: &str = "report.json";
pub const CHECKPOINT_SCHEMA_VERSION: u32 = 1;

#[derive(Debug, Parser)]
#[command(name = "greenhouse", version, about = "Greenhouse temperature forecasting toolkit")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Generate a synthetic campaign as CSV.
    Synth(SynthArgs),
    /// Fill gaps with the directional neighbour-day mean.
    Impute(ImputeArgs),
    /// Augmented Dickey-Fuller test on one column.
    Adf(AdfArgs),
    /// Train one model and write a checkpoint.
    Train(TrainArgs),
    /// Score a checkpoint on the test tail of a dataset.
    Eval(EvalArgs),
    /// Train both models under one config and write a report plus plot data.
    Compare(CompareArgs),
    /// Graph utilities.
    Graph {
        #[command(subcommand)]
        command: GraphCommand,
    },
}

#[derive(Debug, Subcommand)]
pub enum GraphCommand {
    /// Validate a graph config, optionally against a dataset's columns.
    Check(GraphCheckArgs),
}

#[derive(Debug, Clone, Copy, ValueEnum)]
pub enum RegimeArg {
    Chain,
    Feedback,
}

impl From<RegimeArg> for Regime {
    fn from(r: RegimeArg) -> Self {
        match r {
            RegimeArg::Chain => Regime::Chain,
            RegimeArg::Feedback => Regime::Feedback,
        }
    }
}

#[derive(Debug, Clone, Copy, ValueEnum)]
pub enum ModelArg {
    Rnn,
    Stgnn,
}

#[derive(Debug, Clone, Copy, ValueEnum)]
pub enum MaskArg {
    All,
    Last,
}

#[derive(Debug, Args)]
pub struct SynthArgs {
    #[arg(long, value_enum)]
    pub regime: RegimeArg,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    /// Campaign length in days (regime default when omitted).
    #[arg(long)]
    pub days: Option<usize>,
    /// Coupling override `SRC->DST=value`; repeatable.
    #[arg(long = "coupling", value_name = "EDGE=VALUE")]
    pub couplings: Vec<String>,
    #[arg(long, default_value_t = 1.0)]
    pub noise_std: f64,
    #[arg(long, default_value_t = 0.0)]
    pub gap_rate: f64,
    /// Year fraction at the first row (regime default when omitted).
    #[arg(long)]
    pub season_phase: Option<f64>,
    #[arg(long)]
    pub output: PathBuf,
    /// Where to write the true values of punched cells.
    #[arg(long)]
    pub truth: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct ImputeArgs {
    #[arg(long)]
    pub input: PathBuf,
    #[arg(long)]
    pub output: PathBuf,
    /// Imputation log as JSON.
    #[arg(long)]
    pub log: Option<PathBuf>,
    /// Accepted for uniformity; imputation is deterministic.
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
}

#[derive(Debug, Args)]
pub struct AdfArgs {
    #[arg(long)]
    pub input: PathBuf,
    #[arg(long)]
    pub column: String,
    #[arg(long, default_value_t = DEFAULT_ADF_LAGS)]
    pub lags: usize,
    #[arg(long, default_value_t = DEFAULT_SIGNIFICANCE)]
    pub significance: f64,
    /// Accepted for uniformity; the test is deterministic.
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
}

/// Hyper-parameters shared by `train` and `compare`.
#[derive(Debug, Clone, Args)]
pub struct TrainFlags {
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[arg(long, default_value_t = 96)]
    pub seq_len: usize,
    #[arg(long, default_value_t = 32)]
    pub epochs: usize,
    #[arg(long, default_value_t = 96)]
    pub batch_size: usize,
    #[arg(long, default_value_t = 0.10)]
    pub validation_fraction: f64,
    #[arg(long, default_value_t = 0.2)]
    pub dropout: f64,
    #[arg(long, default_value_t = 50)]
    pub rnn_units: usize,
    #[arg(long, default_value_t = 8)]
    pub gat_hidden: usize,
    #[arg(long, default_value_t = 4)]
    pub gat_heads: usize,
    #[arg(long, default_value_t = 32)]
    pub lstm_hidden: usize,
    #[arg(long, default_value_t = 0.2)]
    pub leaky_slope: f64,
    #[arg(long, value_enum, default_value = "all")]
    pub mask: MaskArg,
    /// Shuffle training batches each epoch (seeded).
    #[arg(long)]
    pub shuffle: bool,
    #[arg(long, default_value_t = 1e-3)]
    pub lr: f64,
    /// Leading share of rows used for fitting; the rest is the test tail.
    #[arg(long, default_value_t = 0.8)]
    pub train_fraction: f64,
}

impl TrainFlags {
    pub fn experiment_config(&self) -> ExperimentConfig {
        ExperimentConfig {
            train: TrainConfig {
                seq_len: self.seq_len,
                epochs: self.epochs,
                batch_size: self.batch_size,
                validation_fraction: self.validation_fraction,
                dropout: self.dropout,
                rnn_units: self.rnn_units,
                gat_hidden: self.gat_hidden,
                gat_heads: self.gat_heads,
                lstm_hidden: self.lstm_hidden,
                leaky_slope: self.leaky_slope,
                mask: match self.mask {
                    MaskArg::All => MaskScope::AllSteps,
                    MaskArg::Last => MaskScope::LastStep,
                },
                shuffle: self.shuffle,
                adam: AdamConfig {
                    lr: self.lr,
                    ..AdamConfig::default()
                },
                seed: self.seed,
            },
            train_fraction: self.train_fraction,
        }
    }
}

#[derive(Debug, Args)]
pub struct TrainArgs {
    #[arg(long)]
    pub input: PathBuf,
    #[arg(long, value_enum)]
    pub model: ModelArg,
    /// Graph config; defaults to the built-in graph matching the columns.
    #[arg(long)]
    pub graph: Option<PathBuf>,
    #[arg(long)]
    pub checkpoint: PathBuf,
    #[command(flatten)]
    pub flags: TrainFlags,
}

#[derive(Debug, Args)]
pub struct EvalArgs {
    #[arg(long)]
    pub input: PathBuf,
    #[arg(long)]
    pub checkpoint: PathBuf,
    /// Accepted for uniformity; evaluation is deterministic.
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
}

#[derive(Debug, Args)]
pub struct CompareArgs {
    /// Synthetic regime to generate (ignored with --input).
    #[arg(long, value_enum, conflicts_with_all = ["input", "from_report"])]
    pub regime: Option<RegimeArg>,
    /// CSV dataset instead of synthetic data.
    #[arg(long, conflicts_with = "from_report")]
    pub input: Option<PathBuf>,
    /// Graph config; defaults to the built-in graph matching the columns.
    #[arg(long, conflicts_with = "from_report")]
    pub graph: Option<PathBuf>,
    /// Rerun the experiment a previous report describes.
    #[arg(long)]
    pub from_report: Option<PathBuf>,
    /// Synthetic campaign length in days (regime default when omitted).
    #[arg(long)]
    pub days: Option<usize>,
    #[arg(long, default_value_t = 0.0)]
    pub gap_rate: f64,
    /// Output directory; falls back to $GREENHOUSE_OUT_DIR, then ./greenhouse-out.
    #[arg(long)]
    pub out_dir: Option<PathBuf>,
    #[command(flatten)]
    pub flags: TrainFlags,
}

#[derive(Debug, Args)]
pub struct GraphCheckArgs {
    /// Graph config; omit to check the built-in graph of --regime.
    #[arg(long, required_unless_present = "regime")]
    pub graph: Option<PathBuf>,
    #[arg(long, value_enum)]
    pub regime: Option<RegimeArg>,
    /// Dataset whose header the graph must match.
    #[arg(long)]
    pub input: Option<PathBuf>,
    /// Write a Graphviz rendering here.
    #[arg(long)]
    pub dot: Option<PathBuf>,
    /// Accepted for uniformity.
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
}

/// Trained model plus what is needed to score it again.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Checkpoint {
    pub schema_version: u32,
    pub train_fraction: f64,
    pub graph: String,
    pub state: ModelState,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct EvalOutput {
    pub kind: ModelKind,
    pub metrics: Metrics,
    pub test_windows: usize,
}

/// Parses `args` (including the program name) and runs the command,
/// printing human-facing output to `out`.
pub fn run<I, T>(args: I, out: &mut dyn Write) -> Result<()>
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = Cli::try_parse_from(args)?;
    execute(cli.command, out)
}

pub fn execute(command: Command, out: &mut dyn Write) -> Result<()> {
    match command {
        Command::Synth(a) => cmd_synth(a, out),
        Command::Impute(a) => cmd_impute(a, out),
        Command::Adf(a) => cmd_adf(a, out),
        Command::Train(a) => cmd_train(a, out),
        Command::Eval(a) => cmd_eval(a, out),
        Command::Compare(a) => cmd_compare(a, out),
        Command::Graph {
            command: GraphCommand::Check(a),
        } => cmd_graph_check(a, out),
    }
}

/// `--out-dir`, else the environment override, else the default.
pub fn resolve_out_dir(explicit: Option<&Path>) -> PathBuf {
    if let Some(p) = explicit {
        return p.to_path_buf();
    }
    match std::env::var_os(OUT_DIR_ENV) {
        Some(v) if !v.is_empty() => PathBuf::from(v),
        _ => PathBuf::from(DEFAULT_OUT_DIR),
    }
}

fn parse_couplings(items: &[String]) -> Result<BTreeMap<String, f64>> {
    let mut map = BTreeMap::new();
    for item in items {
        let (edge, value) = item
            .rsplit_once('=')
            .with_context(|| format!("coupling '{item}' is not of the form SRC->DST=VALUE"))?;
        let v: f64 = value.trim().parse().with_context(|| format!("coupling value in '{item}'"))?;
        let edge = edge.replace(' ', "");
        map.insert(edge, v);
    }
    Ok(map)
}

fn synth_config(regime: Regime, seed: u64, days: Option<usize>, gap_rate: f64) -> SynthConfig {
    let mut cfg = SynthConfig::for_regime(regime, seed);
    if let Some(d) = days {
        cfg.days = d;
    }
    cfg.gap_rate = gap_rate;
    cfg
}

fn cmd_synth(a: SynthArgs, out: &mut dyn Write) -> Result<()> {
    let mut cfg = synth_config(a.regime.into(), a.seed, a.days, a.gap_rate);
    cfg.noise_std = a.noise_std;
    if let Some(p) = a.season_phase {
        cfg.season_phase = p;
    }
    cfg.couplings.extend(parse_couplings(&a.couplings)?);
    let (frame, truth) = generate_with_gaps(&cfg)?;
    frame.save_csv(&a.output)?;
    if let Some(path) = &a.truth {
        truth.write_csv(fs::File::create(path).with_context(|| format!("creating {}", path.display()))?)?;
    }
    writeln!(
        out,
        "wrote {} rows x {} columns ({} gaps) to {}",
        frame.rows(),
        frame.columns().len(),
        truth.len(),
        a.output.display()
    )?;
    Ok(())
}

fn cmd_impute(a: ImputeArgs, out: &mut dyn Write) -> Result<()> {
    let frame = load_timeseries(&a.input, None)?;
    let (filled, logs) = impute_all(&frame)?;
    filled.save_csv(&a.output)?;
    if let Some(path) = &a.log {
        fs::write(path, serde_json::to_string_pretty(&logs)? + "\n")?;
    }
    for l in &logs {
        writeln!(out, "{}: filled {} unfilled {}", l.column, l.filled.len(), l.unfilled.len())?;
    }
    Ok(())
}

fn cmd_adf(a: AdfArgs, out: &mut dyn Write) -> Result<()> {
    let frame = load_timeseries(&a.input, None)?;
    let report = adf_test_column(&frame, &a.column, a.lags, a.significance)?;
    writeln!(out, "{}", serde_json::to_string_pretty(&report)?)?;
    Ok(())
}

/// Built-in graph whose nodes are exactly the frame's columns.
pub fn default_graph_for(frame: &TimeSeriesFrame) -> Result<FeatureGraph> {
    let cols: Vec<&str> = frame.columns().iter().map(String::as_str).collect();
    let same = |known: &[&str]| {
        let mut a = cols.clone();
        let mut b = known.to_vec();
        a.sort_unstable();
        b.sort_unstable();
        a == b
    };
    if same(&GH2_COLUMNS) {
        Ok(gh2_default_graph())
    } else if same(&GH4_COLUMNS) {
        Ok(gh4_default_graph())
    } else {
        bail!("no built-in graph matches columns {cols:?}; pass --graph")
    }
}

fn load_graph(path: Option<&Path>, frame: &TimeSeriesFrame) -> Result<FeatureGraph> {
    match path {
        Some(p) => {
            let text = fs::read_to_string(p).with_context(|| format!("reading {}", p.display()))?;
            Ok(parse_graph_config(&text)?)
        }
        None => default_graph_for(frame),
    }
}

fn cmd_train(a: TrainArgs, out: &mut dyn Write) -> Result<()> {
    let frame = load_timeseries(&a.input, None)?;
    let graph = load_graph(a.graph.as_deref(), &frame)?;
    let cfg = a.flags.experiment_config();
    let prep = prepare(&frame, &graph, &cfg)?;
    let (mut state, data) = match a.model {
        ModelArg::Rnn => (ModelState::new_rnn(graph.node_count(), cfg.train.clone())?, prep.train_flat),
        ModelArg::Stgnn => (
            ModelState::new_stgnn(&graph, cfg.train.clone())?,
            prep.train_flat.with_layout(Layout::PerNode),
        ),
    };
    train(&mut state, &data)?;
    let ck = Checkpoint {
        schema_version: CHECKPOINT_SCHEMA_VERSION,
        train_fraction: cfg.train_fraction,
        graph: graph.to_config_string(),
        state,
    };
    fs::write(&a.checkpoint, serde_json::to_string(&ck)? + "\n")
        .with_context(|| format!("writing {}", a.checkpoint.display()))?;
    let last = ck.state.history.last();
    writeln!(
        out,
        "{} trained for {} epochs ({} parameters), final train loss {}; checkpoint {}",
        ck.state.model.kind(),
        ck.state.epoch,
        ck.state.model.parameter_count(),
        last.map_or("-".into(), |r| format!("{:.6}", r.train_loss)),
        a.checkpoint.display()
    )?;
    Ok(())
}

pub fn load_checkpoint(path: &Path) -> Result<Checkpoint> {
    let text = fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
    let ck: Checkpoint = serde_json::from_str(&text).with_context(|| format!("parsing {}", path.display()))?;
    if ck.schema_version != CHECKPOINT_SCHEMA_VERSION {
        bail!("checkpoint schema {} is not supported", ck.schema_version);
    }
    // revalidates the embedded state
    ModelState::from_json(&ck.state.to_json()?)?;
    Ok(ck)
}

fn cmd_eval(a: EvalArgs, out: &mut dyn Write) -> Result<()> {
    let ck = load_checkpoint(&a.checkpoint)?;
    let frame = load_timeseries(&a.input, None)?;
    let graph = parse_graph_config(&ck.graph)?;
    validate_graph(&graph, frame.columns())?;
    let cfg = ExperimentConfig {
        train: ck.state.config.clone(),
        train_fraction: ck.train_fraction,
    };
    let prep = prepare(&frame, &graph, &cfg)?;
    let test = prep.test_flat.with_layout(ck.state.model.layout());
    let pred = predict_series(&ck.state.model, &test)?;
    let result = EvalOutput {
        kind: ck.state.model.kind(),
        metrics: compute_metrics(test.targets(), &pred)?,
        test_windows: test.len(),
    };
    writeln!(out, "{}", serde_json::to_string_pretty(&result)?)?;
    Ok(())
}

fn print_summary(report: &ExperimentReport, out: &mut dyn Write) -> Result<()> {
    writeln!(out, "{:<6} {:>10} {:>10} {:>10} {:>8}", "model", "MSE", "RMSE", "R2", "params")?;
    for m in &report.models {
        writeln!(
            out,
            "{:<6} {:>10.6} {:>10.6} {:>10} {:>8}",
            m.kind.to_string(),
            m.metrics.mse,
            m.metrics.rmse,
            m.metrics.r2.map_or("undefined".into(), |r| format!("{r:.3}")),
            m.parameter_count
        )?;
    }
    Ok(())
}

fn cmd_compare(a: CompareArgs, out: &mut dyn Write) -> Result<()> {
    let report = if let Some(path) = &a.from_report {
        let text = fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
        let old = ExperimentReport::from_json(&text)?;
        let new = rerun_report(&old)?;
        for (o, n) in old.models.iter().zip(&new.models) {
            if o.metrics != n.metrics {
                bail!("{} metrics differ from the stored report", n.kind);
            }
        }
        new
    } else {
        let cfg = a.flags.experiment_config();
        let (frame, source, graph) = match (&a.input, a.regime) {
            (Some(input), _) => {
                let frame = load_timeseries(input, None)?;
                let graph = load_graph(a.graph.as_deref(), &frame)?;
                (frame, DataSource::File { path: input.clone() }, graph)
            }
            (None, Some(regime)) => {
                let synth = synth_config(regime.into(), a.flags.seed, a.days, a.gap_rate);
                let frame = generate_with_gaps(&synth)?.0;
                let graph = match &a.graph {
                    Some(_) => load_graph(a.graph.as_deref(), &frame)?,
                    None => synth.regime.default_graph(),
                };
                (frame, DataSource::Synthetic { synth }, graph)
            }
            (None, None) => bail!("compare needs --regime, --input or --from-report"),
        };
        run_experiment(&frame, &graph, &cfg, source)?
    };
    let dir = resolve_out_dir(a.out_dir.as_deref());
    fs::create_dir_all(&dir).with_context(|| format!("creating {}", dir.display()))?;
    let report_path = dir.join(REPORT_FILE);
    report.save(&report_path)?;
    let (scatter, series) = emit_plot_data(&report, &dir)?;
    print_summary(&report, out)?;
    writeln!(
        out,
        "report {}\nplots {} {}",
        report_path.display(),
        scatter.display(),
        series.display()
    )?;
    Ok(())
}

fn cmd_graph_check(a: GraphCheckArgs, out: &mut dyn Write) -> Result<()> {
    let graph = match (&a.graph, a.regime) {
        (Some(p), _) => {
            let text = fs::read_to_string(p).with_context(|| format!("reading {}", p.display()))?;
            parse_graph_config(&text)?
        }
        (None, Some(r)) => Regime::from(r).default_graph(),
        (None, None) => bail!("graph check needs --graph or --regime"),
    };
    if let Some(input) = &a.input {
        let frame = load_timeseries(input, None)?;
        validate_graph(&graph, frame.columns())?;
    }
    if let Some(dot) = &a.dot {
        fs::write(dot, graph.to_dot()).with_context(|| format!("writing {}", dot.display()))?;
    }
    writeln!(
        out,
        "ok: {} nodes, {} edges, target {}{}\nfingerprint {}",
        graph.node_count(),
        graph.edges().len(),
        graph.target_name(),
        if graph.is_provisional() { " (provisional)" } else { "" },
        graph.fingerprint()
    )?;
    Ok(())
}
