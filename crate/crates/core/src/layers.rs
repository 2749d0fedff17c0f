//! Sequence and graph primitives with explicit backward passes.
//!
//! * SimpleRNN cell: `h_t = tanh(x_t W_h + h_{t-1} U_h + b_h)`, optional
//!   linear output head `y = h W_y + b_y`.
//! * LSTM cell with input, forget, output and candidate gates.
//! * Multi-head graph attention over a directed [`FeatureGraph`]; heads are
//!   concatenated and node outputs pass through ReLU.
//!
//! Single-sample entry points (`*_cell_forward`, [`gat_forward`]) are thin
//! wrappers over the batched sequence routines used in training.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::graph::FeatureGraph;
use crate::nn::{
    add_row_bias, col_sum_acc, dot, gemm_a_bt_acc, gemm_acc, gemm_at_b_acc, sigmoid, Tensor2,
};

/// Gradient arriving at a sequence layer's outputs.
#[derive(Debug, Clone, Copy)]
pub enum SeqGrad<'a> {
    /// One `B x U` gradient per time step.
    EveryStep(&'a [Tensor2]),
    /// Only the final hidden state receives gradient.
    LastStep(&'a Tensor2),
}

impl SeqGrad<'_> {
    fn at(&self, t: usize, steps: usize) -> Option<&Tensor2> {
        match self {
            SeqGrad::EveryStep(g) => Some(&g[t]),
            SeqGrad::LastStep(g) => (t + 1 == steps).then_some(*g),
        }
    }

    fn check(&self, steps: usize, shape: (usize, usize), op: &'static str) -> Result<()> {
        let check_one = |g: &Tensor2| {
            if g.shape() != shape {
                return Err(Error::Usage(format!(
                    "{op}: gradient of shape {:?} does not match cached outputs {:?}",
                    g.shape(),
                    shape
                )));
            }
            Ok(())
        };
        match self {
            SeqGrad::EveryStep(g) => {
                if g.len() != steps {
                    return Err(Error::Usage(format!(
                        "{op}: {} step gradients for a cache of {steps} steps",
                        g.len()
                    )));
                }
                g.iter().try_for_each(check_one)
            }
            SeqGrad::LastStep(g) => check_one(g),
        }
    }
}

fn init_scale(fan_in: usize) -> f64 {
    1.0 / (fan_in.max(1) as f64).sqrt()
}

fn check_len(op: &'static str, what: &str, expected: usize, got: usize) -> Result<()> {
    if expected != got {
        return Err(Error::dim(op, format!("{what} of length {expected}"), got));
    }
    Ok(())
}

// ---------------------------------------------------------------------------
// Dense output head
// ---------------------------------------------------------------------------

/// One-unit linear read-out.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DenseHead {
    /// `U x 1`
    pub w: Tensor2,
    /// `1 x 1`
    pub b: Tensor2,
}

impl DenseHead {
    pub fn init<R: Rng>(inputs: usize, rng: &mut R) -> Self {
        Self {
            w: Tensor2::uniform(inputs, 1, init_scale(inputs), rng),
            b: Tensor2::zeros(1, 1),
        }
    }

    pub fn zeros(inputs: usize) -> Self {
        Self {
            w: Tensor2::zeros(inputs, 1),
            b: Tensor2::zeros(1, 1),
        }
    }

    pub fn inputs(&self) -> usize {
        self.w.rows()
    }

    /// Batched read-out of `h [B x U]`.
    pub fn forward(&self, h: &Tensor2) -> Result<Vec<f64>> {
        if h.cols() != self.w.rows() {
            return Err(Error::dim("DenseHead::forward", self.w.rows(), h.cols()));
        }
        let b = self.b.as_slice()[0];
        Ok((0..h.rows()).map(|r| b + dot(h.row(r), self.w.as_slice())).collect())
    }

    /// Accumulates parameter gradients and returns `dL/dh`.
    pub fn backward(&self, h: &Tensor2, d_out: &[f64], grads: &mut DenseHead) -> Tensor2 {
        let u = self.w.rows();
        let mut dh = Tensor2::zeros(h.rows(), u);
        for (r, &g) in d_out.iter().enumerate() {
            grads.b.as_mut_slice()[0] += g;
            let gw = grads.w.as_mut_slice();
            for (k, &hv) in h.row(r).iter().enumerate() {
                gw[k] += g * hv;
            }
            for (d, &w) in dh.row_mut(r).iter_mut().zip(self.w.as_slice()) {
                *d = g * w;
            }
        }
        dh
    }
}

// ---------------------------------------------------------------------------
// SimpleRNN
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RnnCellParams {
    /// `F x U` input weights.
    pub w_h: Tensor2,
    /// `U x U` recurrent weights.
    pub u_h: Tensor2,
    /// `1 x U`
    pub b_h: Tensor2,
    /// Present only on the output-producing layer.
    pub head: Option<DenseHead>,
}

impl RnnCellParams {
    pub fn init<R: Rng>(features: usize, units: usize, with_head: bool, rng: &mut R) -> Self {
        let w_h = Tensor2::uniform(features, units, init_scale(features), rng);
        let u_h = Tensor2::uniform(units, units, init_scale(units), rng);
        let head = with_head.then(|| DenseHead::init(units, rng));
        Self {
            w_h,
            u_h,
            b_h: Tensor2::zeros(1, units),
            head,
        }
    }

    pub fn zeros(features: usize, units: usize, with_head: bool) -> Self {
        Self {
            w_h: Tensor2::zeros(features, units),
            u_h: Tensor2::zeros(units, units),
            b_h: Tensor2::zeros(1, units),
            head: with_head.then(|| DenseHead::zeros(units)),
        }
    }

    pub fn features(&self) -> usize {
        self.w_h.rows()
    }

    pub fn units(&self) -> usize {
        self.u_h.rows()
    }

    pub fn zeros_like(&self) -> Self {
        Self::zeros(self.features(), self.units(), self.head.is_some())
    }

    pub fn tensors(&self) -> Vec<&Tensor2> {
        let mut v = vec![&self.w_h, &self.u_h, &self.b_h];
        if let Some(h) = &self.head {
            v.push(&h.w);
            v.push(&h.b);
        }
        v
    }

    pub fn tensors_mut(&mut self) -> Vec<&mut Tensor2> {
        let mut v = vec![&mut self.w_h, &mut self.u_h, &mut self.b_h];
        if let Some(h) = &mut self.head {
            v.push(&mut h.w);
            v.push(&mut h.b);
        }
        v
    }
}

/// One SimpleRNN step for a single sample.
pub fn rnn_cell_forward(x_t: &[f64], h_prev: &[f64], p: &RnnCellParams) -> Result<Vec<f64>> {
    check_len("rnn_cell_forward", "input", p.features(), x_t.len())?;
    check_len("rnn_cell_forward", "hidden state", p.units(), h_prev.len())?;
    let mut cache = RnnSeqCache {
        inputs: vec![Tensor2::row_vector(x_t)],
        hidden: vec![Tensor2::row_vector(h_prev)],
    };
    rnn_step(p, &mut cache);
    Ok(cache.hidden.pop().expect("one step").into_vec())
}

/// Linear output head `W_y h + b_y`.
pub fn rnn_output(h_t: &[f64], p: &RnnCellParams) -> Result<f64> {
    let head = p
        .head
        .as_ref()
        .ok_or_else(|| Error::Config("RNN layer has no output head".into()))?;
    check_len("rnn_output", "hidden state", p.units(), h_t.len())?;
    Ok(head.forward(&Tensor2::row_vector(h_t))?[0])
}

/// Forward activations of an unrolled SimpleRNN layer.
#[derive(Debug, Clone)]
pub struct RnnSeqCache {
    inputs: Vec<Tensor2>,
    /// `hidden[0]` is the initial state; `hidden[t + 1]` follows input `t`.
    hidden: Vec<Tensor2>,
}

impl RnnSeqCache {
    pub fn steps(&self) -> usize {
        self.inputs.len()
    }

    /// Hidden states after each step.
    pub fn outputs(&self) -> &[Tensor2] {
        &self.hidden[1..]
    }

    pub fn last(&self) -> &Tensor2 {
        self.hidden.last().expect("initial state present")
    }
}

fn rnn_step(p: &RnnCellParams, cache: &mut RnnSeqCache) {
    let t = cache.hidden.len() - 1;
    let x = &cache.inputs[t];
    let h_prev = &cache.hidden[t];
    let (b, f, u) = (x.rows(), p.features(), p.units());
    let mut z = Tensor2::zeros(b, u);
    let zs = z.as_mut_slice();
    add_row_bias(zs, p.b_h.as_slice());
    gemm_acc(zs, x.as_slice(), p.w_h.as_slice(), b, f, u);
    gemm_acc(zs, h_prev.as_slice(), p.u_h.as_slice(), b, u, u);
    zs.iter_mut().for_each(|v| *v = v.tanh());
    cache.hidden.push(z);
}

/// Runs the layer over `inputs` (one `B x F` matrix per step) from a zero state.
pub fn rnn_seq_forward(p: &RnnCellParams, inputs: Vec<Tensor2>) -> Result<RnnSeqCache> {
    let batch = inputs.first().map_or(0, Tensor2::rows);
    for x in &inputs {
        x.expect_shape("rnn_seq_forward", (batch, p.features()))?;
    }
    let mut cache = RnnSeqCache {
        hidden: Vec::with_capacity(inputs.len() + 1),
        inputs,
    };
    cache.hidden.push(Tensor2::zeros(batch, p.units()));
    for _ in 0..cache.inputs.len() {
        rnn_step(p, &mut cache);
    }
    Ok(cache)
}

/// Backpropagation through time. Accumulates into `grads` (head untouched)
/// and optionally returns gradients with respect to each step's input.
pub fn rnn_seq_backward(
    p: &RnnCellParams,
    cache: &RnnSeqCache,
    d_out: SeqGrad<'_>,
    grads: &mut RnnCellParams,
    want_input_grads: bool,
) -> Result<Option<Vec<Tensor2>>> {
    let steps = cache.steps();
    if steps == 0 {
        return Err(Error::Usage("rnn_seq_backward called with an empty cache".into()));
    }
    let (f, u) = (p.features(), p.units());
    let b = cache.inputs[0].rows();
    if cache.inputs[0].cols() != f || cache.hidden[0].cols() != u {
        return Err(Error::Usage("rnn_seq_backward: cache was built with different parameters".into()));
    }
    d_out.check(steps, (b, u), "rnn_seq_backward")?;

    let mut d_inputs = want_input_grads.then(|| vec![Tensor2::zeros(0, 0); steps]);
    let mut dh_next = Tensor2::zeros(b, u);
    for t in (0..steps).rev() {
        let h = &cache.hidden[t + 1];
        let mut dz = dh_next;
        if let Some(g) = d_out.at(t, steps) {
            dz.add_assign(g)?;
        }
        for (d, &hv) in dz.as_mut_slice().iter_mut().zip(h.as_slice()) {
            *d *= 1.0 - hv * hv;
        }
        gemm_at_b_acc(grads.w_h.as_mut_slice(), cache.inputs[t].as_slice(), dz.as_slice(), b, f, u);
        gemm_at_b_acc(grads.u_h.as_mut_slice(), cache.hidden[t].as_slice(), dz.as_slice(), b, u, u);
        col_sum_acc(grads.b_h.as_mut_slice(), dz.as_slice());
        if let Some(di) = d_inputs.as_mut() {
            let mut dx = Tensor2::zeros(b, f);
            gemm_a_bt_acc(dx.as_mut_slice(), dz.as_slice(), p.w_h.as_slice(), b, u, f);
            di[t] = dx;
        }
        let mut dh = Tensor2::zeros(b, u);
        if t > 0 {
            gemm_a_bt_acc(dh.as_mut_slice(), dz.as_slice(), p.u_h.as_slice(), b, u, u);
        }
        dh_next = dh;
    }
    Ok(d_inputs)
}

// ---------------------------------------------------------------------------
// LSTM
// ---------------------------------------------------------------------------

/// Gate blocks are stored side by side in the fused weight matrices, in
/// this order.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Gate {
    Input,
    Forget,
    Output,
    Candidate,
}

impl Gate {
    pub const ALL: [Gate; 4] = [Gate::Input, Gate::Forget, Gate::Output, Gate::Candidate];

    fn block(self) -> usize {
        self as usize
    }
}

/// LSTM weights with the four gates fused column-wise: `[i | f | o | g]`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LstmParams {
    /// `I x 4H`
    pub w: Tensor2,
    /// `H x 4H`
    pub u: Tensor2,
    /// `1 x 4H`
    pub b: Tensor2,
}

impl LstmParams {
    pub fn init<R: Rng>(inputs: usize, hidden: usize, rng: &mut R) -> Self {
        Self {
            w: Tensor2::uniform(inputs, 4 * hidden, init_scale(inputs), rng),
            u: Tensor2::uniform(hidden, 4 * hidden, init_scale(hidden), rng),
            b: Tensor2::zeros(1, 4 * hidden),
        }
    }

    pub fn zeros(inputs: usize, hidden: usize) -> Self {
        Self {
            w: Tensor2::zeros(inputs, 4 * hidden),
            u: Tensor2::zeros(hidden, 4 * hidden),
            b: Tensor2::zeros(1, 4 * hidden),
        }
    }

    pub fn inputs(&self) -> usize {
        self.w.rows()
    }

    pub fn hidden(&self) -> usize {
        self.u.rows()
    }

    pub fn zeros_like(&self) -> Self {
        Self::zeros(self.inputs(), self.hidden())
    }

    /// Input-weight block of one gate, `I x H`.
    pub fn gate_input_weights(&self, gate: Gate) -> Tensor2 {
        self.gate_block(&self.w, gate)
    }

    /// Recurrent-weight block of one gate, `H x H`.
    pub fn gate_recurrent_weights(&self, gate: Gate) -> Tensor2 {
        self.gate_block(&self.u, gate)
    }

    pub fn gate_bias(&self, gate: Gate) -> Vec<f64> {
        let h = self.hidden();
        self.b.as_slice()[gate.block() * h..(gate.block() + 1) * h].to_vec()
    }

    pub fn set_gate_bias(&mut self, gate: Gate, values: &[f64]) {
        let h = self.hidden();
        self.b.as_mut_slice()[gate.block() * h..(gate.block() + 1) * h].copy_from_slice(values);
    }

    fn gate_block(&self, m: &Tensor2, gate: Gate) -> Tensor2 {
        let h = self.hidden();
        let mut out = Tensor2::zeros(m.rows(), h);
        for r in 0..m.rows() {
            out.row_mut(r)
                .copy_from_slice(&m.row(r)[gate.block() * h..(gate.block() + 1) * h]);
        }
        out
    }

    pub fn tensors(&self) -> Vec<&Tensor2> {
        vec![&self.w, &self.u, &self.b]
    }

    pub fn tensors_mut(&mut self) -> Vec<&mut Tensor2> {
        vec![&mut self.w, &mut self.u, &mut self.b]
    }
}

/// One LSTM step for a single sample; returns `(h_t, c_t)`.
pub fn lstm_cell_forward(
    x_t: &[f64],
    h_prev: &[f64],
    c_prev: &[f64],
    p: &LstmParams,
) -> Result<(Vec<f64>, Vec<f64>)> {
    check_len("lstm_cell_forward", "input", p.inputs(), x_t.len())?;
    check_len("lstm_cell_forward", "hidden state", p.hidden(), h_prev.len())?;
    check_len("lstm_cell_forward", "cell state", p.hidden(), c_prev.len())?;
    let mut cache = LstmSeqCache {
        inputs: vec![Tensor2::row_vector(x_t)],
        h: vec![Tensor2::row_vector(h_prev)],
        c: vec![Tensor2::row_vector(c_prev)],
        gates: Vec::new(),
    };
    lstm_step(p, &mut cache);
    Ok((
        cache.h.pop().expect("one step").into_vec(),
        cache.c.pop().expect("one step").into_vec(),
    ))
}

#[derive(Debug, Clone)]
pub struct LstmSeqCache {
    inputs: Vec<Tensor2>,
    h: Vec<Tensor2>,
    c: Vec<Tensor2>,
    /// Post-activation gate values per step, `B x 4H`.
    gates: Vec<Tensor2>,
}

impl LstmSeqCache {
    pub fn steps(&self) -> usize {
        self.inputs.len()
    }

    pub fn outputs(&self) -> &[Tensor2] {
        &self.h[1..]
    }

    pub fn last(&self) -> &Tensor2 {
        self.h.last().expect("initial state present")
    }
}

fn lstm_step(p: &LstmParams, cache: &mut LstmSeqCache) {
    let t = cache.h.len() - 1;
    let x = &cache.inputs[t];
    let (b, i_dim, hd) = (x.rows(), p.inputs(), p.hidden());
    let mut z = Tensor2::zeros(b, 4 * hd);
    {
        let zs = z.as_mut_slice();
        add_row_bias(zs, p.b.as_slice());
        gemm_acc(zs, x.as_slice(), p.w.as_slice(), b, i_dim, 4 * hd);
        gemm_acc(zs, cache.h[t].as_slice(), p.u.as_slice(), b, hd, 4 * hd);
    }
    let mut h = Tensor2::zeros(b, hd);
    let mut c = Tensor2::zeros(b, hd);
    for r in 0..b {
        let zr = z.row_mut(r);
        for v in &mut zr[..3 * hd] {
            *v = sigmoid(*v);
        }
        for v in &mut zr[3 * hd..] {
            *v = v.tanh();
        }
        let c_prev = cache.c[t].row(r);
        let (hr, cr) = (h.row_mut(r), c.row_mut(r));
        for k in 0..hd {
            let (ig, fg, og, gg) = (zr[k], zr[hd + k], zr[2 * hd + k], zr[3 * hd + k]);
            let cv = fg * c_prev[k] + ig * gg;
            cr[k] = cv;
            hr[k] = og * cv.tanh();
        }
        // the row borrow of `c` ends here
        let _ = cr;
    }
    cache.gates.push(z);
    cache.h.push(h);
    cache.c.push(c);
}

/// Runs the LSTM over `inputs` (one `B x I` matrix per step) from zero states.
pub fn lstm_seq_forward(p: &LstmParams, inputs: Vec<Tensor2>) -> Result<LstmSeqCache> {
    let batch = inputs.first().map_or(0, Tensor2::rows);
    for x in &inputs {
        x.expect_shape("lstm_seq_forward", (batch, p.inputs()))?;
    }
    let steps = inputs.len();
    let mut cache = LstmSeqCache {
        inputs,
        h: Vec::with_capacity(steps + 1),
        c: Vec::with_capacity(steps + 1),
        gates: Vec::with_capacity(steps),
    };
    cache.h.push(Tensor2::zeros(batch, p.hidden()));
    cache.c.push(Tensor2::zeros(batch, p.hidden()));
    for _ in 0..steps {
        lstm_step(p, &mut cache);
    }
    Ok(cache)
}

/// Backpropagation through time for the LSTM.
pub fn lstm_seq_backward(
    p: &LstmParams,
    cache: &LstmSeqCache,
    d_out: SeqGrad<'_>,
    grads: &mut LstmParams,
    want_input_grads: bool,
) -> Result<Option<Vec<Tensor2>>> {
    let steps = cache.steps();
    if steps == 0 || cache.gates.len() != steps {
        return Err(Error::Usage("lstm_seq_backward called without a forward cache".into()));
    }
    let (i_dim, hd) = (p.inputs(), p.hidden());
    let b = cache.inputs[0].rows();
    if cache.inputs[0].cols() != i_dim || cache.h[0].cols() != hd {
        return Err(Error::Usage("lstm_seq_backward: cache was built with different parameters".into()));
    }
    d_out.check(steps, (b, hd), "lstm_seq_backward")?;

    let mut d_inputs = want_input_grads.then(|| vec![Tensor2::zeros(0, 0); steps]);
    let mut dh_next = Tensor2::zeros(b, hd);
    let mut dc_next = Tensor2::zeros(b, hd);
    for t in (0..steps).rev() {
        let gates = &cache.gates[t];
        let c = &cache.c[t + 1];
        let c_prev = &cache.c[t];
        let mut dh = dh_next;
        if let Some(g) = d_out.at(t, steps) {
            dh.add_assign(g)?;
        }
        let mut dz = Tensor2::zeros(b, 4 * hd);
        let mut dc_prev = Tensor2::zeros(b, hd);
        for r in 0..b {
            let gr = gates.row(r);
            let (dhr, dcn, cr, cpr) = (dh.row(r), dc_next.row(r), c.row(r), c_prev.row(r));
            let dzr = dz.row_mut(r);
            let mut dcp = vec![0.0; hd];
            for k in 0..hd {
                let (ig, fg, og, gg) = (gr[k], gr[hd + k], gr[2 * hd + k], gr[3 * hd + k]);
                let tc = cr[k].tanh();
                let dc = dcn[k] + dhr[k] * og * (1.0 - tc * tc);
                dzr[k] = dc * gg * ig * (1.0 - ig);
                dzr[hd + k] = dc * cpr[k] * fg * (1.0 - fg);
                dzr[2 * hd + k] = dhr[k] * tc * og * (1.0 - og);
                dzr[3 * hd + k] = dc * ig * (1.0 - gg * gg);
                dcp[k] = dc * fg;
            }
            dc_prev.row_mut(r).copy_from_slice(&dcp);
        }
        gemm_at_b_acc(grads.w.as_mut_slice(), cache.inputs[t].as_slice(), dz.as_slice(), b, i_dim, 4 * hd);
        gemm_at_b_acc(grads.u.as_mut_slice(), cache.h[t].as_slice(), dz.as_slice(), b, hd, 4 * hd);
        col_sum_acc(grads.b.as_mut_slice(), dz.as_slice());
        if let Some(di) = d_inputs.as_mut() {
            let mut dx = Tensor2::zeros(b, i_dim);
            gemm_a_bt_acc(dx.as_mut_slice(), dz.as_slice(), p.w.as_slice(), b, 4 * hd, i_dim);
            di[t] = dx;
        }
        let mut dhp = Tensor2::zeros(b, hd);
        if t > 0 {
            gemm_a_bt_acc(dhp.as_mut_slice(), dz.as_slice(), p.u.as_slice(), b, 4 * hd, hd);
        }
        dh_next = dhp;
        dc_next = dc_prev;
    }
    Ok(d_inputs)
}

// ---------------------------------------------------------------------------
// Graph attention
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GatHead {
    /// `F x H`
    pub w: Tensor2,
    /// `1 x 2H`: the first half scores the destination node, the second
    /// half the source node.
    pub a: Tensor2,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GatParams {
    pub heads: Vec<GatHead>,
    pub leaky_slope: f64,
}

impl GatParams {
    pub fn init<R: Rng>(features: usize, hidden: usize, heads: usize, leaky_slope: f64, rng: &mut R) -> Self {
        let heads = (0..heads)
            .map(|_| GatHead {
                w: Tensor2::uniform(features, hidden, init_scale(features), rng),
                a: Tensor2::uniform(1, 2 * hidden, init_scale(2 * hidden), rng),
            })
            .collect();
        Self { heads, leaky_slope }
    }

    pub fn zeros(features: usize, hidden: usize, heads: usize, leaky_slope: f64) -> Self {
        let heads = (0..heads)
            .map(|_| GatHead {
                w: Tensor2::zeros(features, hidden),
                a: Tensor2::zeros(1, 2 * hidden),
            })
            .collect();
        Self { heads, leaky_slope }
    }

    pub fn features(&self) -> usize {
        self.heads[0].w.rows()
    }

    /// Hidden size per head.
    pub fn hidden(&self) -> usize {
        self.heads[0].w.cols()
    }

    pub fn head_count(&self) -> usize {
        self.heads.len()
    }

    /// Per-node output width, `H * K`.
    pub fn out_dim(&self) -> usize {
        self.hidden() * self.heads.len()
    }

    pub fn zeros_like(&self) -> Self {
        Self::zeros(self.features(), self.hidden(), self.head_count(), self.leaky_slope)
    }

    pub fn validate(&self) -> Result<()> {
        if self.heads.is_empty() {
            return Err(Error::Config("GAT needs at least one head".into()));
        }
        let (f, h) = (self.features(), self.hidden());
        for head in &self.heads {
            head.w.expect_shape("GatParams", (f, h))?;
            head.a.expect_shape("GatParams", (1, 2 * h))?;
        }
        Ok(())
    }

    pub fn tensors(&self) -> Vec<&Tensor2> {
        self.heads.iter().flat_map(|h| [&h.w, &h.a]).collect()
    }

    pub fn tensors_mut(&mut self) -> Vec<&mut Tensor2> {
        self.heads.iter_mut().flat_map(|h| [&mut h.w, &mut h.a]).collect()
    }
}

/// Normalised attention weights per head, per destination node.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AttentionCoefficients {
    /// `heads[k][i]` lists `(source j, alpha_ij)` for destination `i`.
    pub heads: Vec<Vec<Vec<(usize, f64)>>>,
}

impl AttentionCoefficients {
    /// `alpha` for edge `src -> dst`; zero when the edge does not exist.
    pub fn get(&self, head: usize, src: usize, dst: usize) -> f64 {
        self.heads[head][dst]
            .iter()
            .find(|&&(j, _)| j == src)
            .map_or(0.0, |&(_, a)| a)
    }

    pub fn incoming_sum(&self, head: usize, dst: usize) -> f64 {
        self.heads[head][dst].iter().map(|&(_, a)| a).sum()
    }
}

/// Incoming adjacency flattened for the attention kernels.
#[derive(Debug, Clone)]
struct Csr {
    offsets: Vec<usize>,
    sources: Vec<usize>,
}

impl Csr {
    fn from_graph(graph: &FeatureGraph) -> Result<Self> {
        graph.check_incoming()?;
        let mut offsets = vec![0];
        let mut sources = Vec::new();
        for i in 0..graph.node_count() {
            sources.extend_from_slice(graph.incoming(i));
            offsets.push(sources.len());
        }
        Ok(Self { offsets, sources })
    }

    fn nodes(&self) -> usize {
        self.offsets.len() - 1
    }

    fn edges(&self) -> usize {
        self.sources.len()
    }
}

/// Cached activations of [`gat_batch_forward`] over `graphs` independent
/// node-feature matrices sharing one graph and one parameter set.
#[derive(Debug, Clone)]
pub struct GatCache {
    graphs: usize,
    csr: Csr,
    /// `graphs x N x F`
    x: Vec<f64>,
    /// `graphs x N x (K*H)`: transformed features `W x_j` per head.
    z: Vec<f64>,
    /// `graphs x K x E`: raw scores before LeakyReLU.
    score: Vec<f64>,
    /// `graphs x K x E`
    alpha: Vec<f64>,
    /// `graphs x N x (K*H)` aggregated features before ReLU.
    pre: Vec<f64>,
}

/// Graph attention over a batch of node-feature matrices.
///
/// `x` holds `graphs` consecutive `N x F` blocks. Returns `graphs`
/// consecutive `N x (H*K)` output blocks and the forward cache.
pub fn gat_batch_forward(
    x: &[f64],
    graphs: usize,
    graph: &FeatureGraph,
    p: &GatParams,
) -> Result<(Vec<f64>, GatCache)> {
    p.validate()?;
    let csr = Csr::from_graph(graph)?;
    let (n, f, hd, k) = (csr.nodes(), p.features(), p.hidden(), p.head_count());
    check_len("gat_forward", "node features", graphs * n * f, x.len())?;
    let od = hd * k;
    let e = csr.edges();
    let mut z = vec![0.0; graphs * n * od];
    let mut score = vec![0.0; graphs * k * e];
    let mut alpha = vec![0.0; graphs * k * e];
    let mut pre = vec![0.0; graphs * n * od];
    let mut out = vec![0.0; graphs * n * od];
    let slope = p.leaky_slope;
    let mut s_dst = vec![0.0; n];
    let mut s_src = vec![0.0; n];

    for g in 0..graphs {
        let xg = &x[g * n * f..(g + 1) * n * f];
        let zg = &mut z[g * n * od..(g + 1) * n * od];
        for (kh, head) in p.heads.iter().enumerate() {
            let w = head.w.as_slice();
            for j in 0..n {
                let zj = &mut zg[j * od + kh * hd..j * od + (kh + 1) * hd];
                for (fi, &xv) in xg[j * f..(j + 1) * f].iter().enumerate() {
                    for (zv, &wv) in zj.iter_mut().zip(&w[fi * hd..(fi + 1) * hd]) {
                        *zv += xv * wv;
                    }
                }
            }
        }
        for (kh, head) in p.heads.iter().enumerate() {
            let (a_dst, a_src) = head.a.as_slice().split_at(hd);
            for j in 0..n {
                let zj = &zg[j * od + kh * hd..j * od + (kh + 1) * hd];
                s_dst[j] = dot(a_dst, zj);
                s_src[j] = dot(a_src, zj);
            }
            let sc = &mut score[(g * k + kh) * e..(g * k + kh + 1) * e];
            let al = &mut alpha[(g * k + kh) * e..(g * k + kh + 1) * e];
            for i in 0..n {
                let range = csr.offsets[i]..csr.offsets[i + 1];
                let mut max = f64::NEG_INFINITY;
                for ei in range.clone() {
                    let u = s_dst[i] + s_src[csr.sources[ei]];
                    sc[ei] = u;
                    let ev = if u >= 0.0 { u } else { slope * u };
                    al[ei] = ev;
                    max = max.max(ev);
                }
                let mut sum = 0.0;
                for ei in range.clone() {
                    al[ei] = (al[ei] - max).exp();
                    sum += al[ei];
                }
                for ei in range.clone() {
                    al[ei] /= sum;
                }
                let pg = &mut pre[g * n * od..(g + 1) * n * od];
                let pi = &mut pg[i * od + kh * hd..i * od + (kh + 1) * hd];
                for ei in range {
                    let j = csr.sources[ei];
                    let zj = &zg[j * od + kh * hd..j * od + (kh + 1) * hd];
                    for (pv, &zv) in pi.iter_mut().zip(zj) {
                        *pv += al[ei] * zv;
                    }
                }
            }
        }
    }
    for (o, &v) in out.iter_mut().zip(&pre) {
        *o = v.max(0.0);
    }
    let cache = GatCache {
        graphs,
        csr,
        x: x.to_vec(),
        z,
        score,
        alpha,
        pre,
    };
    Ok((out, cache))
}

impl GatCache {
    pub fn graphs(&self) -> usize {
        self.graphs
    }

    /// Attention coefficients of graph `g` in the batch.
    pub fn attention(&self, g: usize, heads: usize) -> AttentionCoefficients {
        let (n, e) = (self.csr.nodes(), self.csr.edges());
        let heads = (0..heads)
            .map(|kh| {
                let al = &self.alpha[(g * heads + kh) * e..(g * heads + kh + 1) * e];
                (0..n)
                    .map(|i| {
                        (self.csr.offsets[i]..self.csr.offsets[i + 1])
                            .map(|ei| (self.csr.sources[ei], al[ei]))
                            .collect()
                    })
                    .collect()
            })
            .collect();
        AttentionCoefficients { heads }
    }
}

/// Backward pass of [`gat_batch_forward`]. `d_out` matches the forward
/// output layout. Accumulates into `grads`; optionally returns `dL/dx`.
pub fn gat_batch_backward(
    cache: &GatCache,
    p: &GatParams,
    d_out: &[f64],
    grads: &mut GatParams,
    want_input_grads: bool,
) -> Result<Option<Vec<f64>>> {
    let csr = &cache.csr;
    let (n, f, hd, k, e) = (csr.nodes(), p.features(), p.hidden(), p.head_count(), csr.edges());
    let od = hd * k;
    let graphs = cache.graphs;
    if cache.z.len() != graphs * n * od || cache.x.len() != graphs * n * f {
        return Err(Error::Usage("gat_batch_backward: cache was built with different parameters".into()));
    }
    if d_out.len() != graphs * n * od {
        return Err(Error::Usage(format!(
            "gat_batch_backward: gradient of length {} for outputs of length {}",
            d_out.len(),
            graphs * n * od
        )));
    }
    let slope = p.leaky_slope;
    let mut dx = want_input_grads.then(|| vec![0.0; graphs * n * f]);
    let mut dpre = vec![0.0; n * od];
    let mut dz = vec![0.0; n * od];
    let mut ds_dst = vec![0.0; n];
    let mut ds_src = vec![0.0; n];
    let mut dalpha = vec![0.0; e];

    for g in 0..graphs {
        let zg = &cache.z[g * n * od..(g + 1) * n * od];
        let pg = &cache.pre[g * n * od..(g + 1) * n * od];
        let xg = &cache.x[g * n * f..(g + 1) * n * f];
        let dg = &d_out[g * n * od..(g + 1) * n * od];
        for ((dp, &pv), &dv) in dpre.iter_mut().zip(pg).zip(dg) {
            *dp = if pv > 0.0 { dv } else { 0.0 };
        }
        dz.iter_mut().for_each(|v| *v = 0.0);
        for kh in 0..k {
            let al = &cache.alpha[(g * k + kh) * e..(g * k + kh + 1) * e];
            let sc = &cache.score[(g * k + kh) * e..(g * k + kh + 1) * e];
            let (a_dst, a_src) = p.heads[kh].a.as_slice().split_at(hd);
            ds_dst.iter_mut().for_each(|v| *v = 0.0);
            ds_src.iter_mut().for_each(|v| *v = 0.0);
            for i in 0..n {
                let range = csr.offsets[i]..csr.offsets[i + 1];
                let dpi = &dpre[i * od + kh * hd..i * od + (kh + 1) * hd];
                let mut weighted = 0.0;
                for ei in range.clone() {
                    let j = csr.sources[ei];
                    let zj = &zg[j * od + kh * hd..j * od + (kh + 1) * hd];
                    dalpha[ei] = dot(dpi, zj);
                    weighted += al[ei] * dalpha[ei];
                    let dzj = &mut dz[j * od + kh * hd..j * od + (kh + 1) * hd];
                    for (d, &v) in dzj.iter_mut().zip(dpi) {
                        *d += al[ei] * v;
                    }
                }
                for ei in range {
                    let de = al[ei] * (dalpha[ei] - weighted);
                    let du = if sc[ei] >= 0.0 { de } else { slope * de };
                    ds_dst[i] += du;
                    ds_src[csr.sources[ei]] += du;
                }
            }
            let ga = grads.heads[kh].a.as_mut_slice();
            for j in 0..n {
                let zj = &zg[j * od + kh * hd..j * od + (kh + 1) * hd];
                let dzj = &mut dz[j * od + kh * hd..j * od + (kh + 1) * hd];
                for h in 0..hd {
                    ga[h] += ds_dst[j] * zj[h];
                    ga[hd + h] += ds_src[j] * zj[h];
                    dzj[h] += ds_dst[j] * a_dst[h] + ds_src[j] * a_src[h];
                }
            }
        }
        for kh in 0..k {
            let w = p.heads[kh].w.as_slice();
            let gw = grads.heads[kh].w.as_mut_slice();
            for j in 0..n {
                let dzj = &dz[j * od + kh * hd..j * od + (kh + 1) * hd];
                for fi in 0..f {
                    let xv = xg[j * f + fi];
                    for (gv, &d) in gw[fi * hd..(fi + 1) * hd].iter_mut().zip(dzj) {
                        *gv += xv * d;
                    }
                    if let Some(dx) = dx.as_mut() {
                        dx[(g * n + j) * f + fi] += dot(&w[fi * hd..(fi + 1) * hd], dzj);
                    }
                }
            }
        }
    }
    Ok(dx)
}

/// Graph attention for one node-feature matrix `x [N_n x F]`.
pub fn gat_forward(x: &Tensor2, graph: &FeatureGraph, p: &GatParams) -> Result<(Tensor2, AttentionCoefficients)> {
    if x.rows() != graph.node_count() {
        return Err(Error::Graph(format!(
            "feature matrix has {} rows for a graph of {} nodes",
            x.rows(),
            graph.node_count()
        )));
    }
    p.validate()?;
    if x.cols() != p.features() {
        return Err(Error::dim("gat_forward", format!("{} features", p.features()), x.cols()));
    }
    let (out, cache) = gat_batch_forward(x.as_slice(), 1, graph, p)?;
    let attn = cache.attention(0, p.head_count());
    Ok((Tensor2::from_vec(x.rows(), p.out_dim(), out)?, attn))
}
