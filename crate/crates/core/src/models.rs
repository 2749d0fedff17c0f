//! The two forecasters and their shared training loop.
//!
//! * Recurrent baseline: SimpleRNN(U, full sequence) -> dropout ->
//!   SimpleRNN(U) -> dropout -> Dense(1).
//! * Directed STGNN: per step, zero the target node, run one shared GAT
//!   layer, flatten node-major; LSTM over the stacked steps -> dropout on
//!   the final hidden state -> Dense(1).

use std::fmt;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::datapipe::{Layout, WindowedDataset};
use crate::error::{Error, Result};
use crate::graph::FeatureGraph;
use crate::layers::{
    gat_batch_backward, gat_batch_forward, lstm_seq_backward, lstm_seq_forward, rnn_seq_backward,
    rnn_seq_forward, DenseHead, GatParams, LstmParams, RnnCellParams, SeqGrad,
};
use crate::nn::{
    adam_step, derive_seed, dropout_mask, mse_loss, AdamConfig, AdamState, Tensor2, Tensor3,
    DEFAULT_LEAKY_SLOPE,
};

pub const CHECKPOINT_SCHEMA_VERSION: u32 = 1;

const TAG_INIT: u64 = 1;
const TAG_DROPOUT: u64 = 2;
const TAG_SHUFFLE: u64 = 3;

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MaskScope {
    /// Zero the target node at every step of the window.
    #[default]
    AllSteps,
    /// Zero it only at the final step.
    LastStep,
}

impl MaskScope {
    fn masks(self, t: usize, steps: usize) -> bool {
        match self {
            MaskScope::AllSteps => true,
            MaskScope::LastStep => t + 1 == steps,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ModelKind {
    Rnn,
    Stgnn,
}

impl fmt::Display for ModelKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            ModelKind::Rnn => "rnn",
            ModelKind::Stgnn => "stgnn",
        })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub seq_len: usize,
    pub epochs: usize,
    pub batch_size: usize,
    pub validation_fraction: f64,
    pub dropout: f64,
    pub rnn_units: usize,
    pub gat_hidden: usize,
    pub gat_heads: usize,
    pub lstm_hidden: usize,
    pub leaky_slope: f64,
    pub mask: MaskScope,
    pub shuffle: bool,
    pub adam: AdamConfig,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            seq_len: 96,
            epochs: 32,
            batch_size: 96,
            validation_fraction: 0.10,
            dropout: 0.2,
            rnn_units: 50,
            gat_hidden: 8,
            gat_heads: 4,
            lstm_hidden: 32,
            leaky_slope: DEFAULT_LEAKY_SLOPE,
            mask: MaskScope::AllSteps,
            shuffle: false,
            adam: AdamConfig::default(),
            seed: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let positive = [
            ("seq_len", self.seq_len),
            ("batch_size", self.batch_size),
            ("rnn_units", self.rnn_units),
            ("gat_hidden", self.gat_hidden),
            ("gat_heads", self.gat_heads),
            ("lstm_hidden", self.lstm_hidden),
        ];
        for (name, v) in positive {
            if v == 0 {
                return Err(Error::Config(format!("{name} must be at least 1")));
            }
        }
        if !(0.0..1.0).contains(&self.validation_fraction) {
            return Err(Error::Config(format!(
                "validation_fraction must lie in [0, 1), got {}",
                self.validation_fraction
            )));
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return Err(Error::Config(format!("dropout rate must lie in [0, 1), got {}", self.dropout)));
        }
        if !(self.adam.lr > 0.0) {
            return Err(Error::Config("learning rate must be positive".into()));
        }
        Ok(())
    }
}

/// How a forward pass treats dropout.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Pass {
    Eval,
    /// Dropout masks drawn from a generator seeded with this value.
    Train { seed: u64 },
}

fn draw_mask(rng: &mut Option<ChaCha8Rng>, len: usize, rate: f64) -> Option<Vec<f64>> {
    match rng {
        Some(r) if rate > 0.0 => Some(dropout_mask(len, rate, r)),
        _ => None,
    }
}

fn apply_mask(t: &mut Tensor2, mask: &Option<Vec<f64>>) {
    if let Some(m) = mask {
        for (v, k) in t.as_mut_slice().iter_mut().zip(m) {
            *v *= k;
        }
    }
}

fn pass_rng(pass: Pass) -> Option<ChaCha8Rng> {
    match pass {
        Pass::Eval => None,
        Pass::Train { seed } => Some(ChaCha8Rng::seed_from_u64(seed)),
    }
}

// ---------------------------------------------------------------------------
// Recurrent forecaster
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RnnForecaster {
    /// Returns the full hidden sequence.
    pub layer1: RnnCellParams,
    /// Carries the dense head.
    pub layer2: RnnCellParams,
    pub dropout: f64,
}

struct RnnTape {
    c1: crate::layers::RnnSeqCache,
    masks1: Vec<Option<Vec<f64>>>,
    c2: crate::layers::RnnSeqCache,
    mask2: Option<Vec<f64>>,
    last: Tensor2,
}

impl RnnForecaster {
    pub fn init(features: usize, cfg: &TrainConfig) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(cfg.seed, &[TAG_INIT, 0]));
        Self {
            layer1: RnnCellParams::init(features, cfg.rnn_units, false, &mut rng),
            layer2: RnnCellParams::init(cfg.rnn_units, cfg.rnn_units, true, &mut rng),
            dropout: cfg.dropout,
        }
    }

    pub fn features(&self) -> usize {
        self.layer1.features()
    }

    fn head(&self) -> &DenseHead {
        self.layer2.head.as_ref().expect("second layer carries the head")
    }

    fn gather(&self, data: &WindowedDataset, idx: &[usize]) -> Vec<Tensor2> {
        let (t_len, f) = (data.seq_len(), data.width());
        (0..t_len)
            .map(|t| {
                let mut x = Tensor2::zeros(idx.len(), f);
                for (b, &i) in idx.iter().enumerate() {
                    x.row_mut(b).copy_from_slice(&data.window(i)[t * f..(t + 1) * f]);
                }
                x
            })
            .collect()
    }

    fn forward_batch(&self, xs: Vec<Tensor2>, pass: Pass) -> Result<(Vec<f64>, RnnTape)> {
        let mut rng = pass_rng(pass);
        let c1 = rnn_seq_forward(&self.layer1, xs)?;
        let mut masks1 = Vec::with_capacity(c1.steps());
        let mut seq = Vec::with_capacity(c1.steps());
        for h in c1.outputs() {
            let m = draw_mask(&mut rng, h.len(), self.dropout);
            let mut h = h.clone();
            apply_mask(&mut h, &m);
            masks1.push(m);
            seq.push(h);
        }
        let c2 = rnn_seq_forward(&self.layer2, seq)?;
        let mut last = c2.last().clone();
        let mask2 = draw_mask(&mut rng, last.len(), self.dropout);
        apply_mask(&mut last, &mask2);
        let y = self.head().forward(&last)?;
        Ok((y, RnnTape { c1, masks1, c2, mask2, last }))
    }

    fn backward_batch(&self, tape: &RnnTape, d_y: &[f64], grads: &mut RnnForecaster) -> Result<()> {
        let head_grads = grads.layer2.head.as_mut().expect("gradient head");
        let mut d_last = self.head().backward(&tape.last, d_y, head_grads);
        apply_mask(&mut d_last, &tape.mask2);
        let mut d_seq = rnn_seq_backward(&self.layer2, &tape.c2, SeqGrad::LastStep(&d_last), &mut grads.layer2, true)?
            .expect("input gradients requested");
        for (d, m) in d_seq.iter_mut().zip(&tape.masks1) {
            apply_mask(d, m);
        }
        rnn_seq_backward(&self.layer1, &tape.c1, SeqGrad::EveryStep(&d_seq), &mut grads.layer1, false)?;
        Ok(())
    }

    fn zeros_like(&self) -> Self {
        Self {
            layer1: self.layer1.zeros_like(),
            layer2: self.layer2.zeros_like(),
            dropout: self.dropout,
        }
    }

    pub fn tensors(&self) -> Vec<&Tensor2> {
        let mut v = self.layer1.tensors();
        v.extend(self.layer2.tensors());
        v
    }

    pub fn tensors_mut(&mut self) -> Vec<&mut Tensor2> {
        let mut v = self.layer1.tensors_mut();
        v.extend(self.layer2.tensors_mut());
        v
    }
}

/// Prediction for one window `seq [T x F]`, in normalised units.
pub fn rnn_forward(seq: &Tensor2, model: &RnnForecaster, pass: Pass) -> Result<f64> {
    if seq.cols() != model.features() {
        return Err(Error::dim("rnn_forward", format!("{} features", model.features()), seq.cols()));
    }
    if seq.rows() == 0 {
        return Err(Error::dim("rnn_forward", "at least one step", 0));
    }
    let xs = (0..seq.rows()).map(|t| Tensor2::row_vector(seq.row(t))).collect();
    Ok(model.forward_batch(xs, pass)?.0[0])
}

// ---------------------------------------------------------------------------
// Graph forecaster
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StgnnForecaster {
    pub graph: FeatureGraph,
    pub gat: GatParams,
    pub lstm: LstmParams,
    pub head: DenseHead,
    pub dropout: f64,
    pub mask: MaskScope,
}

struct StgnnTape {
    gat: crate::layers::GatCache,
    lstm: crate::layers::LstmSeqCache,
    mask: Option<Vec<f64>>,
    last: Tensor2,
}

/// Copy of `x [N_n x F]` with the target node's row zeroed.
pub fn mask_target_node(x: &Tensor2, graph: &FeatureGraph, target: &str) -> Result<Tensor2> {
    let idx = graph
        .index_of(target)
        .ok_or_else(|| Error::Graph(format!("unknown node '{target}'")))?;
    if x.rows() != graph.node_count() {
        return Err(Error::Graph(format!(
            "feature matrix has {} rows for a graph of {} nodes",
            x.rows(),
            graph.node_count()
        )));
    }
    let mut out = x.clone();
    out.row_mut(idx).fill(0.0);
    Ok(out)
}

impl StgnnForecaster {
    /// One feature per node.
    pub fn init(graph: &FeatureGraph, cfg: &TrainConfig) -> Result<Self> {
        graph.check_incoming()?;
        let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(cfg.seed, &[TAG_INIT, 1]));
        let gat = GatParams::init(1, cfg.gat_hidden, cfg.gat_heads, cfg.leaky_slope, &mut rng);
        let lstm = LstmParams::init(graph.node_count() * gat.out_dim(), cfg.lstm_hidden, &mut rng);
        let head = DenseHead::init(cfg.lstm_hidden, &mut rng);
        Ok(Self {
            graph: graph.clone(),
            gat,
            lstm,
            head,
            dropout: cfg.dropout,
            mask: cfg.mask,
        })
    }

    fn nodes(&self) -> usize {
        self.graph.node_count()
    }

    /// Builds GAT inputs for `steps x batch` graphs, step-major, applying
    /// the target mask.
    fn gather(&self, data: &WindowedDataset, idx: &[usize]) -> Vec<f64> {
        let (steps, n, f) = (data.seq_len(), self.nodes(), self.gat.features());
        let width = n * f;
        let target = self.graph.target();
        let mut x = vec![0.0; steps * idx.len() * width];
        for t in 0..steps {
            let masked = self.mask.masks(t, steps);
            for (b, &i) in idx.iter().enumerate() {
                let dst = &mut x[(t * idx.len() + b) * width..(t * idx.len() + b + 1) * width];
                dst.copy_from_slice(&data.window(i)[t * width..(t + 1) * width]);
                if masked {
                    dst[target * f..(target + 1) * f].fill(0.0);
                }
            }
        }
        x
    }

    fn forward_batch(&self, x: &[f64], steps: usize, batch: usize, pass: Pass) -> Result<(Vec<f64>, StgnnTape)> {
        let mut rng = pass_rng(pass);
        let (out, gcache) = gat_batch_forward(x, steps * batch, &self.graph, &self.gat)?;
        let width = self.nodes() * self.gat.out_dim();
        let inputs = (0..steps)
            .map(|t| Tensor2::from_vec(batch, width, out[t * batch * width..(t + 1) * batch * width].to_vec()))
            .collect::<Result<Vec<_>>>()?;
        let lcache = lstm_seq_forward(&self.lstm, inputs)?;
        let mut last = lcache.last().clone();
        let mask = draw_mask(&mut rng, last.len(), self.dropout);
        apply_mask(&mut last, &mask);
        let y = self.head.forward(&last)?;
        Ok((
            y,
            StgnnTape {
                gat: gcache,
                lstm: lcache,
                mask,
                last,
            },
        ))
    }

    fn backward_batch(&self, tape: &StgnnTape, d_y: &[f64], grads: &mut StgnnForecaster) -> Result<()> {
        let mut d_last = self.head.backward(&tape.last, d_y, &mut grads.head);
        apply_mask(&mut d_last, &tape.mask);
        let d_in = lstm_seq_backward(&self.lstm, &tape.lstm, SeqGrad::LastStep(&d_last), &mut grads.lstm, true)?
            .expect("input gradients requested");
        let d_out: Vec<f64> = d_in.into_iter().flat_map(Tensor2::into_vec).collect();
        gat_batch_backward(&tape.gat, &self.gat, &d_out, &mut grads.gat, false)?;
        Ok(())
    }

    fn zeros_like(&self) -> Self {
        Self {
            graph: self.graph.clone(),
            gat: self.gat.zeros_like(),
            lstm: self.lstm.zeros_like(),
            head: DenseHead::zeros(self.head.inputs()),
            dropout: self.dropout,
            mask: self.mask,
        }
    }

    pub fn tensors(&self) -> Vec<&Tensor2> {
        let mut v = self.gat.tensors();
        v.extend(self.lstm.tensors());
        v.push(&self.head.w);
        v.push(&self.head.b);
        v
    }

    pub fn tensors_mut(&mut self) -> Vec<&mut Tensor2> {
        let mut v = self.gat.tensors_mut();
        v.extend(self.lstm.tensors_mut());
        v.push(&mut self.head.w);
        v.push(&mut self.head.b);
        v
    }
}

/// Prediction for one window `seq [T x N_n x F]`, in normalised units.
pub fn stgnn_forward(seq: &Tensor3, model: &StgnnForecaster, pass: Pass) -> Result<f64> {
    let [steps, n, f] = seq.dims();
    if n != model.nodes() {
        return Err(Error::Graph(format!("window has {n} nodes, graph has {}", model.nodes())));
    }
    if f != model.gat.features() {
        return Err(Error::dim("stgnn_forward", format!("{} features per node", model.gat.features()), f));
    }
    if steps == 0 {
        return Err(Error::dim("stgnn_forward", "at least one step", 0));
    }
    let mut x = seq.as_slice().to_vec();
    let target = model.graph.target();
    for t in 0..steps {
        if model.mask.masks(t, steps) {
            x[(t * n + target) * f..(t * n + target + 1) * f].fill(0.0);
        }
    }
    Ok(model.forward_batch(&x, steps, 1, pass)?.0[0])
}

// ---------------------------------------------------------------------------
// Either model
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Forecaster {
    Rnn(RnnForecaster),
    Stgnn(StgnnForecaster),
}

impl Forecaster {
    pub fn kind(&self) -> ModelKind {
        match self {
            Forecaster::Rnn(_) => ModelKind::Rnn,
            Forecaster::Stgnn(_) => ModelKind::Stgnn,
        }
    }

    pub fn layout(&self) -> Layout {
        match self {
            Forecaster::Rnn(_) => Layout::Flat,
            Forecaster::Stgnn(_) => Layout::PerNode,
        }
    }

    pub fn tensors(&self) -> Vec<&Tensor2> {
        match self {
            Forecaster::Rnn(m) => m.tensors(),
            Forecaster::Stgnn(m) => m.tensors(),
        }
    }

    pub fn tensors_mut(&mut self) -> Vec<&mut Tensor2> {
        match self {
            Forecaster::Rnn(m) => m.tensors_mut(),
            Forecaster::Stgnn(m) => m.tensors_mut(),
        }
    }

    pub fn parameter_count(&self) -> usize {
        self.tensors().iter().map(|t| t.len()).sum()
    }

    /// All parameters in tensor order.
    pub fn flat_params(&self) -> Vec<f64> {
        self.tensors().iter().flat_map(|t| t.as_slice().iter().copied()).collect()
    }

    pub fn set_flat_params(&mut self, flat: &[f64]) -> Result<()> {
        if flat.len() != self.parameter_count() {
            return Err(Error::dim("set_flat_params", self.parameter_count(), flat.len()));
        }
        let mut off = 0;
        for t in self.tensors_mut() {
            let n = t.len();
            t.as_mut_slice().copy_from_slice(&flat[off..off + n]);
            off += n;
        }
        Ok(())
    }

    fn check_dataset(&self, data: &WindowedDataset) -> Result<()> {
        if data.layout() != self.layout() {
            return Err(Error::Usage(format!(
                "{} model needs {:?} windows, got {:?}",
                self.kind(),
                self.layout(),
                data.layout()
            )));
        }
        match self {
            Forecaster::Rnn(m) => {
                if data.width() != m.features() {
                    return Err(Error::dim("dataset", format!("{} features", m.features()), data.width()));
                }
            }
            Forecaster::Stgnn(m) => {
                if data.columns() != m.graph.nodes() {
                    return Err(Error::Graph(format!(
                        "dataset nodes {:?} do not match graph nodes {:?}",
                        data.columns(),
                        m.graph.nodes()
                    )));
                }
            }
        }
        Ok(())
    }

    fn batch_forward(&self, data: &WindowedDataset, idx: &[usize], pass: Pass) -> Result<Vec<f64>> {
        match self {
            Forecaster::Rnn(m) => Ok(m.forward_batch(m.gather(data, idx), pass)?.0),
            Forecaster::Stgnn(m) => {
                let x = m.gather(data, idx);
                Ok(m.forward_batch(&x, data.seq_len(), idx.len(), pass)?.0)
            }
        }
    }

    /// Mean squared error on windows `idx` and its gradient, in tensor order.
    pub fn loss_and_grads(&self, data: &WindowedDataset, idx: &[usize], pass: Pass) -> Result<(f64, Vec<Tensor2>)> {
        self.check_dataset(data)?;
        let y: Vec<f64> = idx.iter().map(|&i| data.target(i)).collect();
        match self {
            Forecaster::Rnn(m) => {
                let (pred, tape) = m.forward_batch(m.gather(data, idx), pass)?;
                let (loss, d_y) = mse_loss(&y, &pred)?;
                let mut g = m.zeros_like();
                m.backward_batch(&tape, &d_y, &mut g)?;
                Ok((loss, g.tensors().into_iter().cloned().collect()))
            }
            Forecaster::Stgnn(m) => {
                let x = m.gather(data, idx);
                let (pred, tape) = m.forward_batch(&x, data.seq_len(), idx.len(), pass)?;
                let (loss, d_y) = mse_loss(&y, &pred)?;
                let mut g = m.zeros_like();
                m.backward_batch(&tape, &d_y, &mut g)?;
                Ok((loss, g.tensors().into_iter().cloned().collect()))
            }
        }
    }

    /// Loss only, for finite-difference checks.
    pub fn loss(&self, data: &WindowedDataset, idx: &[usize], pass: Pass) -> Result<f64> {
        self.check_dataset(data)?;
        let y: Vec<f64> = idx.iter().map(|&i| data.target(i)).collect();
        Ok(mse_loss(&y, &self.batch_forward(data, idx, pass)?)?.0)
    }
}

// ---------------------------------------------------------------------------
// Training state
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub train_loss: f64,
    pub validation_loss: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelState {
    pub schema_version: u32,
    pub config: TrainConfig,
    pub model: Forecaster,
    pub optimizer: Vec<AdamState>,
    pub epoch: usize,
    pub history: Vec<EpochRecord>,
}

impl ModelState {
    pub fn new(model: Forecaster, config: TrainConfig) -> Result<Self> {
        config.validate()?;
        let optimizer = model.tensors().iter().map(|t| AdamState::for_param(t, config.adam)).collect();
        log::info!("{} model built with {} parameters", model.kind(), model.parameter_count());
        Ok(Self {
            schema_version: CHECKPOINT_SCHEMA_VERSION,
            config,
            model,
            optimizer,
            epoch: 0,
            history: Vec::new(),
        })
    }

    pub fn new_rnn(features: usize, config: TrainConfig) -> Result<Self> {
        Self::new(Forecaster::Rnn(RnnForecaster::init(features, &config)), config)
    }

    pub fn new_stgnn(graph: &FeatureGraph, config: TrainConfig) -> Result<Self> {
        Self::new(Forecaster::Stgnn(StgnnForecaster::init(graph, &config)?), config)
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string(self)?)
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let state: Self = serde_json::from_str(text)?;
        if state.schema_version != CHECKPOINT_SCHEMA_VERSION {
            return Err(Error::Config(format!(
                "checkpoint schema {} is not supported (expected {CHECKPOINT_SCHEMA_VERSION})",
                state.schema_version
            )));
        }
        if state.optimizer.len() != state.model.tensors().len() {
            return Err(Error::Config("checkpoint optimizer state does not match the model".into()));
        }
        Ok(state)
    }
}

/// Number of training windows after holding out the chronological tail.
pub fn train_count(windows: usize, validation_fraction: f64) -> usize {
    (windows as f64 * (1.0 - validation_fraction)).floor() as usize
}

/// Runs epochs until `state.config.epochs` have completed.
///
/// The last `validation_fraction` of windows is held out and scored each
/// epoch in eval mode.
pub fn train(state: &mut ModelState, data: &WindowedDataset) -> Result<()> {
    let cfg = state.config.clone();
    cfg.validate()?;
    if data.is_empty() {
        return Err(Error::Data("training dataset has no windows".into()));
    }
    state.model.check_dataset(data)?;
    if data.seq_len() != cfg.seq_len {
        return Err(Error::Config(format!(
            "dataset windows have length {}, config expects {}",
            data.seq_len(),
            cfg.seq_len
        )));
    }
    let n_train = train_count(data.len(), cfg.validation_fraction);
    if n_train == 0 {
        return Err(Error::Data("validation split leaves no training windows".into()));
    }
    let val: Vec<usize> = (n_train..data.len()).collect();
    let salt = state.model.kind() as u64;

    while state.epoch < cfg.epochs {
        let epoch = state.epoch;
        let mut order: Vec<usize> = (0..n_train).collect();
        if cfg.shuffle {
            let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(cfg.seed, &[TAG_SHUFFLE, salt, epoch as u64]));
            order.shuffle(&mut rng);
        }
        let mut total = 0.0;
        for (b, idx) in order.chunks(cfg.batch_size).enumerate() {
            let seed = derive_seed(cfg.seed, &[TAG_DROPOUT, salt, epoch as u64, b as u64]);
            let (loss, grads) = state.model.loss_and_grads(data, idx, Pass::Train { seed })?;
            if !loss.is_finite() {
                return Err(Error::Divergence { epoch, batch: b, loss });
            }
            total += loss * idx.len() as f64;
            for ((p, g), s) in state.model.tensors_mut().into_iter().zip(&grads).zip(&mut state.optimizer) {
                adam_step(p, g, s)?;
            }
        }
        let train_loss = total / n_train as f64;
        let validation_loss = if val.is_empty() {
            None
        } else {
            let pred = predict_indices(&state.model, data, &val, cfg.batch_size)?;
            let y: Vec<f64> = val.iter().map(|&i| data.target(i)).collect();
            Some(mse_loss(&y, &pred)?.0)
        };
        log::info!(
            "{} epoch {}/{}: train {:.6} val {}",
            state.model.kind(),
            epoch + 1,
            cfg.epochs,
            train_loss,
            validation_loss.map_or("-".into(), |v| format!("{v:.6}"))
        );
        state.history.push(EpochRecord {
            epoch: epoch + 1,
            train_loss,
            validation_loss,
        });
        state.epoch += 1;
    }
    Ok(())
}

fn predict_indices(model: &Forecaster, data: &WindowedDataset, idx: &[usize], chunk: usize) -> Result<Vec<f64>> {
    let mut out = Vec::with_capacity(idx.len());
    for part in idx.chunks(chunk.max(1)) {
        out.extend(model.batch_forward(data, part, Pass::Eval)?);
    }
    Ok(out)
}

/// Eval-mode predictions for every window, in window order.
pub fn predict_series(model: &Forecaster, data: &WindowedDataset) -> Result<Vec<f64>> {
    model.check_dataset(data)?;
    let idx: Vec<usize> = (0..data.len()).collect();
    predict_indices(model, data, &idx, 256)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::datapipe::make_windows;
    use crate::datapipe::TimeSeriesFrame;
    use crate::graph::SelfLoops;
    use chrono::NaiveDate;
    use rand::Rng;

    fn small_cfg() -> TrainConfig {
        TrainConfig {
            seq_len: 4,
            epochs: 3,
            batch_size: 3,
            rnn_units: 5,
            gat_hidden: 2,
            gat_heads: 2,
            lstm_hidden: 3,
            seed: 11,
            ..TrainConfig::default()
        }
    }

    fn toy_graph() -> FeatureGraph {
        FeatureGraph::new(&["a", "b", "c"], &[("a", "b"), ("b", "c"), ("c", "b")], "c", SelfLoops::WhereNeeded).unwrap()
    }

    fn toy_frame(rows: usize, seed: u64) -> TimeSeriesFrame {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let cols = (0..3).map(|_| (0..rows).map(|_| rng.random_range(0.0..1.0)).collect()).collect();
        let start = NaiveDate::from_ymd_opt(2024, 1, 1).unwrap().and_hms_opt(0, 0, 0).unwrap();
        TimeSeriesFrame::new(start, vec!["a".into(), "b".into(), "c".into()], cols).unwrap()
    }

    #[test]
    fn defaults_follow_protocol() {
        let c = TrainConfig::default();
        assert_eq!((c.seq_len, c.epochs, c.batch_size, c.gat_heads, c.rnn_units), (96, 32, 96, 4, 50));
        assert_eq!(c.validation_fraction, 0.10);
        assert_eq!(c.dropout, 0.2);
        assert_eq!(c.mask, MaskScope::AllSteps);
    }

    #[test]
    fn zero_rnn_predicts_bias() {
        let mut m = RnnForecaster::init(3, &small_cfg());
        for t in m.tensors_mut() {
            t.fill(0.0);
        }
        m.layer2.head.as_mut().unwrap().b.set(0, 0, 0.37);
        let seq = Tensor2::filled(4, 3, 0.9);
        assert_eq!(rnn_forward(&seq, &m, Pass::Eval).unwrap(), 0.37);
        assert_eq!(rnn_forward(&seq, &m, Pass::Train { seed: 3 }).unwrap(), 0.37);
    }

    #[test]
    fn eval_dropout_is_identity() {
        let m = RnnForecaster::init(3, &small_cfg());
        let mut m0 = m.clone();
        m0.dropout = 0.0;
        let seq = Tensor2::filled(4, 3, 0.4);
        assert_eq!(rnn_forward(&seq, &m, Pass::Eval).unwrap(), rnn_forward(&seq, &m0, Pass::Eval).unwrap());
        assert_ne!(
            rnn_forward(&seq, &m, Pass::Train { seed: 1 }).unwrap(),
            rnn_forward(&seq, &m, Pass::Eval).unwrap()
        );
    }

    #[test]
    fn rnn_forward_shape_error() {
        let m = RnnForecaster::init(3, &small_cfg());
        assert!(matches!(rnn_forward(&Tensor2::zeros(4, 2), &m, Pass::Eval), Err(Error::Dimension { .. })));
    }

    #[test]
    fn mask_zeroes_only_target_row() {
        let g = crate::graph::gh2_default_graph();
        let x = Tensor2::from_vec(6, 1, vec![0.1, 0.2, 0.3, 0.4, 0.5, 0.6]).unwrap();
        let y = mask_target_node(&x, &g, "G2_temp").unwrap();
        assert_eq!(y.as_slice(), &[0.1, 0.2, 0.3, 0.4, 0.0, 0.6]);
        assert_eq!(mask_target_node(&y, &g, "G2_temp").unwrap(), y);
        assert!(matches!(mask_target_node(&x, &g, "nope"), Err(Error::Graph(_))));
    }

    #[test]
    fn stgnn_ignores_target_trace() {
        let m = StgnnForecaster::init(&toy_graph(), &small_cfg()).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let mut seq = Tensor3::zeros(4, 3, 1);
        for t in 0..4 {
            for n in 0..3 {
                seq.set(t, n, 0, rng.random_range(0.0..1.0));
            }
        }
        let base = stgnn_forward(&seq, &m, Pass::Eval).unwrap();
        for t in 0..4 {
            seq.set(t, 2, 0, rng.random_range(-50.0..50.0));
        }
        assert_eq!(stgnn_forward(&seq, &m, Pass::Eval).unwrap(), base);
    }

    #[test]
    fn last_step_mask_sees_earlier_target_values() {
        let mut cfg = small_cfg();
        cfg.mask = MaskScope::LastStep;
        let mut m = StgnnForecaster::init(&toy_graph(), &cfg).unwrap();
        for h in &mut m.gat.heads {
            h.w = h.w.map(f64::abs);
        }
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let mut seq = Tensor3::zeros(4, 3, 1);
        for t in 0..4 {
            for n in 0..3 {
                seq.set(t, n, 0, rng.random_range(0.0..1.0));
            }
        }
        let base = stgnn_forward(&seq, &m, Pass::Eval).unwrap();
        seq.set(3, 2, 0, 9.0);
        assert_eq!(stgnn_forward(&seq, &m, Pass::Eval).unwrap(), base);
        seq.set(0, 2, 0, 9.0);
        assert_ne!(stgnn_forward(&seq, &m, Pass::Eval).unwrap(), base);
    }

    #[test]
    fn stgnn_node_mismatch_is_graph_error() {
        let m = StgnnForecaster::init(&toy_graph(), &small_cfg()).unwrap();
        assert!(matches!(stgnn_forward(&Tensor3::zeros(4, 2, 1), &m, Pass::Eval), Err(Error::Graph(_))));
    }

    #[test]
    fn batched_predictions_match_single_windows() {
        let f = toy_frame(30, 2);
        let g = toy_graph();
        let cfg = small_cfg();
        let flat = make_windows(&f, "c", 4, Layout::Flat, Some(&g)).unwrap();
        let nodes = flat.with_layout(Layout::PerNode);
        let rnn = Forecaster::Rnn(RnnForecaster::init(3, &cfg));
        let stg = StgnnForecaster::init(&g, &cfg).unwrap();
        let pr = predict_series(&rnn, &flat).unwrap();
        let ps = predict_series(&Forecaster::Stgnn(stg.clone()), &nodes).unwrap();
        assert_eq!(pr.len(), flat.len());
        let Forecaster::Rnn(r) = &rnn else { unreachable!() };
        for i in 0..flat.len() {
            let w = Tensor2::from_vec(4, 3, flat.window(i).to_vec()).unwrap();
            assert_eq!(rnn_forward(&w, r, Pass::Eval).unwrap(), pr[i]);
            let w3 = Tensor3::from_vec(4, 3, 1, nodes.window(i).to_vec()).unwrap();
            assert_eq!(stgnn_forward(&w3, &stg, Pass::Eval).unwrap(), ps[i]);
        }
    }

    #[test]
    fn layout_mismatch_is_usage_error() {
        let f = toy_frame(10, 1);
        let flat = make_windows(&f, "c", 4, Layout::Flat, None).unwrap();
        let stg = Forecaster::Stgnn(StgnnForecaster::init(&toy_graph(), &small_cfg()).unwrap());
        assert!(matches!(predict_series(&stg, &flat), Err(Error::Usage(_))));
    }

    #[test]
    fn zero_epochs_leaves_parameters() {
        let f = toy_frame(20, 3);
        let d = make_windows(&f, "c", 4, Layout::Flat, None).unwrap();
        let mut cfg = small_cfg();
        cfg.epochs = 0;
        let mut s = ModelState::new_rnn(3, cfg).unwrap();
        let before = s.model.clone();
        train(&mut s, &d).unwrap();
        assert_eq!(s.model, before);
        assert!(s.history.is_empty());
    }

    #[test]
    fn training_is_deterministic_and_records_history() {
        let f = toy_frame(40, 4);
        let g = toy_graph();
        let d = make_windows(&f, "c", 4, Layout::PerNode, Some(&g)).unwrap();
        let mut cfg = small_cfg();
        cfg.shuffle = true;
        let run = || {
            let mut s = ModelState::new_stgnn(&g, cfg.clone()).unwrap();
            train(&mut s, &d).unwrap();
            s
        };
        let (a, b) = (run(), run());
        assert_eq!(a.history.len(), 3);
        assert_eq!(a, b);
        assert!(a.history.iter().all(|h| h.validation_loss.is_some()));
    }

    #[test]
    fn empty_dataset_rejected() {
        let f = toy_frame(5, 4);
        let d = make_windows(&f, "c", 4, Layout::Flat, None).unwrap();
        let mut cfg = small_cfg();
        cfg.validation_fraction = 0.5;
        let mut s = ModelState::new_rnn(3, cfg).unwrap();
        assert!(matches!(train(&mut s, &d), Err(Error::Data(_))));
    }

    #[test]
    fn divergence_reports_epoch_and_batch() {
        let f = toy_frame(20, 6);
        let d = make_windows(&f, "c", 4, Layout::Flat, None).unwrap();
        let mut s = ModelState::new_rnn(3, small_cfg()).unwrap();
        if let Forecaster::Rnn(m) = &mut s.model {
            m.layer2.head.as_mut().unwrap().b.set(0, 0, f64::NAN);
        }
        match train(&mut s, &d) {
            Err(Error::Divergence { epoch, batch, .. }) => assert_eq!((epoch, batch), (0, 0)),
            other => panic!("expected divergence, got {other:?}"),
        }
    }

    #[test]
    fn checkpoint_round_trip_is_exact() {
        let f = toy_frame(20, 8);
        let d = make_windows(&f, "c", 4, Layout::PerNode, Some(&toy_graph())).unwrap();
        let mut s = ModelState::new_stgnn(&toy_graph(), small_cfg()).unwrap();
        train(&mut s, &d).unwrap();
        let text = s.to_json().unwrap();
        let back = ModelState::from_json(&text).unwrap();
        assert_eq!(back, s);
        assert_eq!(back.to_json().unwrap(), text);
    }

    #[test]
    fn parameter_counts() {
        let cfg = TrainConfig::default();
        let rnn = Forecaster::Rnn(RnnForecaster::init(6, &cfg));
        // 6*50 + 50*50 + 50, then 50*50 + 50*50 + 50, then 50 + 1
        assert_eq!(rnn.parameter_count(), 2850 + 5050 + 51);
        let g = crate::graph::gh2_default_graph();
        let stg = Forecaster::Stgnn(StgnnForecaster::init(&g, &cfg).unwrap());
        let lstm_in = 6 * 8 * 4;
        assert_eq!(stg.parameter_count(), 4 * (8 + 16) + 4 * 32 * (lstm_in + 32 + 1) + 33);
    }

    #[test]
    fn default_parameter_gap_stays_under_thirty_thousand() {
        let cfg = TrainConfig::default();
        let g = crate::graph::gh4_default_graph();
        let rnn = Forecaster::Rnn(RnnForecaster::init(g.node_count(), &cfg)).parameter_count();
        let stg = Forecaster::Stgnn(StgnnForecaster::init(&g, &cfg).unwrap()).parameter_count();
        println!("parameters: stgnn {stg}, rnn {rnn}, difference {}", stg - rnn);
        assert!(stg - rnn < 30_000);
    }
}
