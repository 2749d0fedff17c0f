//! Shared test helpers: direct-formula reference implementations, the
//! finite-difference gradient suite and small fixtures.
//!
//! The reference forwards below are written element by element from the
//! model equations and share no code with the library kernels.

#![allow(dead_code)]

use chrono::NaiveDate;
use greenhouse_core::datapipe::{make_windows, Layout, TimeSeriesFrame, WindowedDataset};
use greenhouse_core::graph::{gh4_default_graph, FeatureGraph, SelfLoops};
use greenhouse_core::layers::{
    gat_batch_backward, gat_batch_forward, gat_forward, lstm_cell_forward, lstm_seq_backward, lstm_seq_forward,
    rnn_seq_backward, rnn_seq_forward, GatParams, LstmParams, RnnCellParams, SeqGrad,
};
use greenhouse_core::models::{
    rnn_forward, stgnn_forward, Forecaster, MaskScope, Pass, RnnForecaster, StgnnForecaster, TrainConfig,
};
use greenhouse_core::nn::{dense_backward, dense_forward, grad_check, mse_loss, Activation, Tensor2, Tensor3};

// ---------------------------------------------------------------------------
// Reference forwards
// ---------------------------------------------------------------------------

fn tanh(x: f64) -> f64 {
    x.tanh()
}

fn logistic(x: f64) -> f64 {
    1.0 / (1.0 + (-x).exp())
}

/// `h_t = tanh(W^T x_t + U^T h_{t-1} + b)` for one sample.
pub fn ref_rnn_layer(xs: &[Vec<f64>], p: &RnnCellParams) -> Vec<Vec<f64>> {
    let (f, u) = (p.w_h.rows(), p.u_h.rows());
    let mut h = vec![0.0; u];
    let mut out = Vec::new();
    for x in xs {
        let mut next = vec![0.0; u];
        for (k, nk) in next.iter_mut().enumerate() {
            let mut s = p.b_h.get(0, k);
            for i in 0..f {
                s += x[i] * p.w_h.get(i, k);
            }
            for j in 0..u {
                s += h[j] * p.u_h.get(j, k);
            }
            *nk = tanh(s);
        }
        h = next;
        out.push(h.clone());
    }
    out
}

/// Two stacked SimpleRNN layers and a linear read-out, dropout off.
pub fn ref_rnn_forward(xs: &[Vec<f64>], m: &RnnForecaster) -> f64 {
    let h1 = ref_rnn_layer(xs, &m.layer1);
    let h2 = ref_rnn_layer(&h1, &m.layer2);
    let last = h2.last().expect("non-empty sequence");
    let head = m.layer2.head.as_ref().expect("read-out present");
    let mut y = head.b.get(0, 0);
    for (k, v) in last.iter().enumerate() {
        y += v * head.w.get(k, 0);
    }
    y
}

/// One LSTM step; gate blocks ordered input, forget, output, candidate.
pub fn ref_lstm_cell(x: &[f64], h: &[f64], c: &[f64], p: &LstmParams) -> (Vec<f64>, Vec<f64>) {
    let hd = p.u.rows();
    let pre = |gate: usize, k: usize| {
        let col = gate * hd + k;
        let mut s = p.b.get(0, col);
        for (i, xv) in x.iter().enumerate() {
            s += xv * p.w.get(i, col);
        }
        for (j, hv) in h.iter().enumerate() {
            s += hv * p.u.get(j, col);
        }
        s
    };
    let mut h_new = vec![0.0; hd];
    let mut c_new = vec![0.0; hd];
    for k in 0..hd {
        let i = logistic(pre(0, k));
        let f = logistic(pre(1, k));
        let o = logistic(pre(2, k));
        let g = tanh(pre(3, k));
        c_new[k] = f * c[k] + i * g;
        h_new[k] = o * tanh(c_new[k]);
    }
    (h_new, c_new)
}

/// Multi-head graph attention on `x [N][F]`; heads concatenated per node.
pub fn ref_gat(x: &[Vec<f64>], graph: &FeatureGraph, p: &GatParams) -> Vec<Vec<f64>> {
    let n = x.len();
    let mut out = vec![Vec::new(); n];
    for head in &p.heads {
        let (f, hd) = (head.w.rows(), head.w.cols());
        let z: Vec<Vec<f64>> = x
            .iter()
            .map(|xj| {
                (0..hd)
                    .map(|h| (0..f).map(|fi| xj[fi] * head.w.get(fi, h)).sum())
                    .collect()
            })
            .collect();
        for i in 0..n {
            let nbrs = graph.incoming(i);
            let e: Vec<f64> = nbrs
                .iter()
                .map(|&j| {
                    let mut s = 0.0;
                    for h in 0..hd {
                        s += head.a.get(0, h) * z[i][h] + head.a.get(0, hd + h) * z[j][h];
                    }
                    if s >= 0.0 {
                        s
                    } else {
                        p.leaky_slope * s
                    }
                })
                .collect();
            let denom: f64 = e.iter().map(|v| v.exp()).sum();
            for h in 0..hd {
                let mut s = 0.0;
                for (idx, &j) in nbrs.iter().enumerate() {
                    s += e[idx].exp() / denom * z[j][h];
                }
                out[i].push(s.max(0.0));
            }
        }
    }
    out
}

/// Masked GAT per step, node-major flatten, LSTM, read-out; dropout off.
pub fn ref_stgnn_forward(window: &[Vec<Vec<f64>>], m: &StgnnForecaster) -> f64 {
    let target = m.graph.target();
    let steps = window.len();
    let hd = m.lstm.u.rows();
    let mut h = vec![0.0; hd];
    let mut c = vec![0.0; hd];
    for (t, nodes) in window.iter().enumerate() {
        let mut x = nodes.clone();
        let masked = match m.mask {
            MaskScope::AllSteps => true,
            MaskScope::LastStep => t + 1 == steps,
        };
        if masked {
            x[target].iter_mut().for_each(|v| *v = 0.0);
        }
        let g = ref_gat(&x, &m.graph, &m.gat);
        let flat: Vec<f64> = g.into_iter().flatten().collect();
        let (h2, c2) = ref_lstm_cell(&flat, &h, &c, &m.lstm);
        h = h2;
        c = c2;
    }
    let mut y = m.head.b.get(0, 0);
    for (k, v) in h.iter().enumerate() {
        y += v * m.head.w.get(k, 0);
    }
    y
}

// ---------------------------------------------------------------------------
// Fixtures
// ---------------------------------------------------------------------------

/// Deterministic "hand-set" value pattern in roughly [-0.5, 0.5].
pub fn pattern(i: usize, salt: f64) -> f64 {
    0.5 * ((i as f64 + 1.0) * 0.7 + salt).sin()
}

pub fn set_pattern(t: &mut Tensor2, salt: f64) {
    for (i, v) in t.as_mut_slice().iter_mut().enumerate() {
        *v = pattern(i, salt);
    }
}

/// a -> b -> c with c -> b feedback; c is the target.
pub fn three_node_graph() -> FeatureGraph {
    FeatureGraph::new(&["a", "b", "c"], &[("a", "b"), ("b", "c"), ("c", "b")], "c", SelfLoops::WhereNeeded)
        .expect("valid graph")
}

pub fn small_train_config(seed: u64) -> TrainConfig {
    TrainConfig {
        seq_len: 4,
        epochs: 2,
        batch_size: 4,
        rnn_units: 5,
        gat_hidden: 3,
        gat_heads: 2,
        lstm_hidden: 4,
        seed,
        ..TrainConfig::default()
    }
}

pub fn start_time() -> chrono::NaiveDateTime {
    NaiveDate::from_ymd_opt(2024, 1, 1)
        .and_then(|d| d.and_hms_opt(0, 0, 0))
        .expect("valid date")
}

/// Frame over the graph's nodes with smooth deterministic values in [0, 1].
pub fn toy_frame(graph: &FeatureGraph, rows: usize) -> TimeSeriesFrame {
    let values = (0..graph.node_count())
        .map(|c| {
            (0..rows)
                .map(|r| 0.5 + 0.4 * ((r as f64) * 0.3 + c as f64 * 1.1).sin())
                .collect()
        })
        .collect();
    TimeSeriesFrame::new(start_time(), graph.nodes().to_vec(), values).expect("valid frame")
}

pub fn toy_windows(graph: &FeatureGraph, rows: usize, seq_len: usize, layout: Layout) -> WindowedDataset {
    make_windows(&toy_frame(graph, rows), graph.target_name(), seq_len, layout, Some(graph)).expect("windows")
}

// ---------------------------------------------------------------------------
// Gradient suite
// ---------------------------------------------------------------------------

pub const FD_STEP: f64 = 1e-5;

fn flatten(ts: &[&Tensor2]) -> Vec<f64> {
    ts.iter().flat_map(|t| t.as_slice().iter().copied()).collect()
}

fn unflatten(ts: Vec<&mut Tensor2>, flat: &[f64]) {
    let mut off = 0;
    for t in ts {
        let n = t.len();
        t.as_mut_slice().copy_from_slice(&flat[off..off + n]);
        off += n;
    }
}

fn weights(rows: usize, cols: usize, salt: f64) -> Tensor2 {
    let mut t = Tensor2::zeros(rows, cols);
    set_pattern(&mut t, salt);
    t
}

fn check_dense() -> f64 {
    let x = weights(3, 4, 0.1);
    let w = weights(4, 2, 0.7);
    let b = vec![0.05, -0.2];
    let r = weights(3, 2, 1.9);
    let loss = |x: &Tensor2, w: &Tensor2, b: &[f64]| -> f64 {
        let out = dense_forward(x, w, b).expect("shapes");
        out.as_slice().iter().zip(r.as_slice()).map(|(o, r)| o * r).sum()
    };
    let (dx, dw, db) = dense_backward(&x, &w, &r).expect("shapes");
    let mut params = flatten(&[&x, &w]);
    params.extend_from_slice(&b);
    let mut analytic = flatten(&[&dx, &dw]);
    analytic.extend_from_slice(&db);
    let (nx, nw) = (x.len(), w.len());
    grad_check(
        |p| {
            let xx = Tensor2::from_vec(3, 4, p[..nx].to_vec()).expect("shape");
            let ww = Tensor2::from_vec(4, 2, p[nx..nx + nw].to_vec()).expect("shape");
            loss(&xx, &ww, &p[nx + nw..])
        },
        &params,
        &analytic,
        FD_STEP,
    )
    .expect("finite")
}

fn check_activation(act: Activation) -> f64 {
    // stays clear of the LeakyReLU kink at zero
    let xs: Vec<f64> = (0..12).map(|i| pattern(i, 0.3) * 4.0 + if i % 2 == 0 { 0.05 } else { -0.05 }).collect();
    let rs: Vec<f64> = (0..12).map(|i| pattern(i, 2.2)).collect();
    let analytic: Vec<f64> = xs.iter().zip(&rs).map(|(&x, r)| r * act.derivative(x)).collect();
    grad_check(
        |p| p.iter().zip(&rs).map(|(&x, r)| r * act.apply(x)).sum(),
        &xs,
        &analytic,
        FD_STEP,
    )
    .expect("finite")
}

fn check_mse() -> f64 {
    let y: Vec<f64> = (0..7).map(|i| pattern(i, 0.9)).collect();
    let p: Vec<f64> = (0..7).map(|i| pattern(i, 3.1)).collect();
    let (_, g) = mse_loss(&y, &p).expect("shapes");
    grad_check(|q| mse_loss(&y, q).expect("shapes").0, &p, &g, FD_STEP).expect("finite")
}

fn seq_inputs(steps: usize, batch: usize, width: usize, salt: f64) -> Vec<Tensor2> {
    (0..steps).map(|t| weights(batch, width, salt + t as f64)).collect()
}

fn check_rnn_cell() -> f64 {
    let (steps, b, f, u) = (4, 2, 3, 5);
    let mut p = RnnCellParams::zeros(f, u, false);
    set_pattern(&mut p.w_h, 0.2);
    set_pattern(&mut p.u_h, 1.3);
    set_pattern(&mut p.b_h, 2.4);
    let xs = seq_inputs(steps, b, f, 0.5);
    let rs = seq_inputs(steps, b, u, 4.0);
    let loss = |p: &RnnCellParams, xs: Vec<Tensor2>| -> f64 {
        let cache = rnn_seq_forward(p, xs).expect("shapes");
        cache
            .outputs()
            .iter()
            .zip(&rs)
            .map(|(h, r)| h.as_slice().iter().zip(r.as_slice()).map(|(a, b)| a * b).sum::<f64>())
            .sum()
    };
    let cache = rnn_seq_forward(&p, xs.clone()).expect("shapes");
    let mut g = p.zeros_like();
    let dx = rnn_seq_backward(&p, &cache, SeqGrad::EveryStep(&rs), &mut g, true)
        .expect("backward")
        .expect("input grads");
    let mut params = flatten(&p.tensors());
    params.extend(xs.iter().flat_map(|x| x.as_slice().to_vec()));
    let mut analytic = flatten(&g.tensors());
    analytic.extend(dx.iter().flat_map(|x| x.as_slice().to_vec()));
    let np = flatten(&p.tensors()).len();
    grad_check(
        |v| {
            let mut q = p.clone();
            unflatten(q.tensors_mut(), &v[..np]);
            let xs = (0..steps)
                .map(|t| Tensor2::from_vec(b, f, v[np + t * b * f..np + (t + 1) * b * f].to_vec()).expect("shape"))
                .collect();
            loss(&q, xs)
        },
        &params,
        &analytic,
        FD_STEP,
    )
    .expect("finite")
}

fn check_lstm_cell() -> f64 {
    let (steps, b, i_dim, hd) = (4, 2, 3, 4);
    let mut p = LstmParams::zeros(i_dim, hd);
    set_pattern(&mut p.w, 0.4);
    set_pattern(&mut p.u, 1.7);
    set_pattern(&mut p.b, 2.9);
    let xs = seq_inputs(steps, b, i_dim, 0.8);
    let rs = seq_inputs(steps, b, hd, 5.0);
    let loss = |p: &LstmParams, xs: Vec<Tensor2>| -> f64 {
        let cache = lstm_seq_forward(p, xs).expect("shapes");
        cache
            .outputs()
            .iter()
            .zip(&rs)
            .map(|(h, r)| h.as_slice().iter().zip(r.as_slice()).map(|(a, b)| a * b).sum::<f64>())
            .sum()
    };
    let cache = lstm_seq_forward(&p, xs.clone()).expect("shapes");
    let mut g = p.zeros_like();
    let dx = lstm_seq_backward(&p, &cache, SeqGrad::EveryStep(&rs), &mut g, true)
        .expect("backward")
        .expect("input grads");
    let mut params = flatten(&p.tensors());
    params.extend(xs.iter().flat_map(|x| x.as_slice().to_vec()));
    let mut analytic = flatten(&g.tensors());
    analytic.extend(dx.iter().flat_map(|x| x.as_slice().to_vec()));
    let np = flatten(&p.tensors()).len();
    grad_check(
        |v| {
            let mut q = p.clone();
            unflatten(q.tensors_mut(), &v[..np]);
            let xs = (0..steps)
                .map(|t| {
                    Tensor2::from_vec(b, i_dim, v[np + t * b * i_dim..np + (t + 1) * b * i_dim].to_vec())
                        .expect("shape")
                })
                .collect();
            loss(&q, xs)
        },
        &params,
        &analytic,
        FD_STEP,
    )
    .expect("finite")
}

fn check_gat() -> f64 {
    let graph = three_node_graph();
    let (n, f, hd, k) = (3, 2, 3, 2);
    let mut p = GatParams::zeros(f, hd, k, 0.2);
    for (i, head) in p.heads.iter_mut().enumerate() {
        set_pattern(&mut head.w, 0.3 + i as f64);
        head.w = head.w.map(|v| v.abs() + 0.05);
        set_pattern(&mut head.a, 1.1 + 2.0 * i as f64);
    }
    let x: Vec<f64> = (0..n * f).map(|i| pattern(i, 0.6).abs() + 0.1).collect();
    let r: Vec<f64> = (0..n * hd * k).map(|i| pattern(i, 3.3)).collect();
    let loss = |p: &GatParams, x: &[f64]| -> f64 {
        let (out, _) = gat_batch_forward(x, 1, &graph, p).expect("shapes");
        out.iter().zip(&r).map(|(a, b)| a * b).sum()
    };
    let (_, cache) = gat_batch_forward(&x, 1, &graph, &p).expect("shapes");
    let mut g = p.zeros_like();
    let dx = gat_batch_backward(&cache, &p, &r, &mut g, true)
        .expect("backward")
        .expect("input grads");
    let mut params = flatten(&p.tensors());
    params.extend_from_slice(&x);
    let mut analytic = flatten(&g.tensors());
    analytic.extend_from_slice(&dx);
    let np = flatten(&p.tensors()).len();
    grad_check(
        |v| {
            let mut q = p.clone();
            unflatten(q.tensors_mut(), &v[..np]);
            loss(&q, &v[np..])
        },
        &params,
        &analytic,
        FD_STEP,
    )
    .expect("finite")
}

fn check_stgnn_end_to_end() -> f64 {
    let graph = three_node_graph();
    let cfg = small_train_config(3);
    let mut model = StgnnForecaster::init(&graph, &cfg).expect("model");
    for head in &mut model.gat.heads {
        head.w = head.w.map(|v| v.abs() + 0.05);
    }
    let model = Forecaster::Stgnn(model);
    let data = toy_windows(&graph, 12, 4, Layout::PerNode);
    let idx: Vec<usize> = (0..data.len()).collect();
    let pass = Pass::Train { seed: 17 };
    let (_, grads) = model.loss_and_grads(&data, &idx, pass).expect("grads");
    let analytic: Vec<f64> = grads.iter().flat_map(|g| g.as_slice().to_vec()).collect();
    let params = model.flat_params();
    grad_check(
        |v| {
            let mut m = model.clone();
            m.set_flat_params(v).expect("length");
            m.loss(&data, &idx, pass).expect("loss")
        },
        &params,
        &analytic,
        FD_STEP,
    )
    .expect("finite")
}

/// Worst relative error per component.
pub fn gradient_suite() -> Vec<(&'static str, f64)> {
    vec![
        ("dense", check_dense()),
        ("tanh", check_activation(Activation::Tanh)),
        ("sigmoid", check_activation(Activation::Sigmoid)),
        ("leaky_relu", check_activation(Activation::LeakyRelu { slope: 0.2 })),
        ("mse", check_mse()),
        ("rnn_cell_t4", check_rnn_cell()),
        ("lstm_cell_t4", check_lstm_cell()),
        ("gat_3_node", check_gat()),
        ("stgnn_t4_n3", check_stgnn_end_to_end()),
    ]
}

// ---------------------------------------------------------------------------
// Oracle suite
// ---------------------------------------------------------------------------

fn hand_set_rnn() -> RnnForecaster {
    let mut m = RnnForecaster::init(3, &small_train_config(0));
    for (i, t) in m.layer1.tensors_mut().into_iter().enumerate() {
        set_pattern(t, 0.3 * i as f64);
    }
    for (i, t) in m.layer2.tensors_mut().into_iter().enumerate() {
        set_pattern(t, 1.0 + 0.4 * i as f64);
    }
    m
}

fn oracle_rnn() -> f64 {
    let m = hand_set_rnn();
    let xs: Vec<Vec<f64>> = (0..6).map(|t| (0..3).map(|f| pattern(t * 3 + f, 0.2)).collect()).collect();
    let seq = Tensor2::from_rows(&xs).expect("rows");
    let got = rnn_forward(&seq, &m, Pass::Eval).expect("rnn forward");
    (got - ref_rnn_forward(&xs, &m)).abs()
}

fn oracle_lstm_cell() -> f64 {
    let mut p = LstmParams::zeros(3, 4);
    set_pattern(&mut p.w, 0.1);
    set_pattern(&mut p.u, 0.9);
    set_pattern(&mut p.b, 1.7);
    let x = [0.3, -0.8, 0.5];
    let h = [0.1, -0.2, 0.05, 0.4];
    let c = [-0.3, 0.6, 0.2, -0.1];
    let (h1, c1) = lstm_cell_forward(&x, &h, &c, &p).expect("lstm cell");
    let (h2, c2) = ref_lstm_cell(&x, &h, &c, &p);
    h1.iter()
        .zip(&h2)
        .chain(c1.iter().zip(&c2))
        .map(|(a, b)| (a - b).abs())
        .fold(0.0, f64::max)
}

fn gat_gap(graph: &FeatureGraph, p: &GatParams, x: &[Vec<f64>]) -> f64 {
    let (got, _) = gat_forward(&Tensor2::from_rows(x).expect("rows"), graph, p).expect("gat forward");
    let want = ref_gat(x, graph, p);
    let mut worst = 0.0f64;
    for (i, row) in want.iter().enumerate() {
        for (k, w) in row.iter().enumerate() {
            worst = worst.max((got.get(i, k) - w).abs());
        }
    }
    worst
}

fn oracle_gat_three_nodes() -> f64 {
    let mut p = GatParams::zeros(2, 3, 2, 0.2);
    for (i, head) in p.heads.iter_mut().enumerate() {
        set_pattern(&mut head.w, 0.5 + i as f64);
        set_pattern(&mut head.a, 2.0 + i as f64);
    }
    let x = vec![vec![0.9, 0.1], vec![0.3, 0.7], vec![0.5, 0.4]];
    gat_gap(&three_node_graph(), &p, &x)
}

fn oracle_gat_eight_nodes() -> f64 {
    let mut p = GatParams::zeros(1, 4, 3, 0.2);
    for (i, head) in p.heads.iter_mut().enumerate() {
        set_pattern(&mut head.w, 0.2 + i as f64);
        set_pattern(&mut head.a, 1.3 + i as f64);
    }
    let x: Vec<Vec<f64>> = (0..8).map(|j| vec![pattern(j, 4.0) + 0.5]).collect();
    gat_gap(&gh4_default_graph(), &p, &x)
}

fn oracle_stgnn(mask: MaskScope) -> f64 {
    let mut cfg = small_train_config(0);
    cfg.mask = mask;
    let mut m = StgnnForecaster::init(&three_node_graph(), &cfg).expect("init");
    for (i, t) in m.tensors_mut().into_iter().enumerate() {
        set_pattern(t, 0.37 * i as f64);
    }
    let window: Vec<Vec<Vec<f64>>> = (0..5)
        .map(|t| (0..3).map(|j| vec![pattern(t * 3 + j, 1.5) + 0.5]).collect())
        .collect();
    let flat: Vec<f64> = window.iter().flatten().flatten().copied().collect();
    let seq = Tensor3::from_vec(5, 3, 1, flat).expect("window");
    let got = stgnn_forward(&seq, &m, Pass::Eval).expect("stgnn forward");
    (got - ref_stgnn_forward(&window, &m)).abs()
}

/// Largest absolute library-vs-reference difference per forward.
pub fn oracle_suite() -> Vec<(&'static str, f64)> {
    vec![
        ("rnn_forward", oracle_rnn()),
        ("lstm_cell_forward", oracle_lstm_cell()),
        ("gat_forward_3_node", oracle_gat_three_nodes()),
        ("gat_forward_8_node", oracle_gat_eight_nodes()),
        ("stgnn_forward_all_steps", oracle_stgnn(MaskScope::AllSteps)),
        ("stgnn_forward_last_step", oracle_stgnn(MaskScope::LastStep)),
    ]
}

// ---------------------------------------------------------------------------
// ADF reference series
// ---------------------------------------------------------------------------

fn splitmix(state: &mut u64) -> u64 {
    *state = state.wrapping_add(0x9E37_79B9_7F4A_7C15);
    let mut z = *state;
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Box-Muller normals over splitmix64; the reference statistics below
/// were computed from exactly this stream.
pub fn normals(seed: u64, n: usize) -> Vec<f64> {
    let mut s = seed;
    let mut out = Vec::with_capacity(n + 1);
    while out.len() < n {
        let a = splitmix(&mut s);
        let b = splitmix(&mut s);
        let u1 = ((a >> 11) + 1) as f64 / 9_007_199_254_740_993.0;
        let u2 = (b >> 11) as f64 / 9_007_199_254_740_992.0;
        let r = (-2.0 * u1.ln()).sqrt();
        let th = 2.0 * std::f64::consts::PI * u2;
        out.push(r * th.cos());
        out.push(r * th.sin());
    }
    out.truncate(n);
    out
}

/// (name, series, reference statistic, stationary?) at n = 2000, 4 lags,
/// constant only.
pub fn adf_reference_cases() -> Vec<(&'static str, Vec<f64>, f64, bool)> {
    let e = normals(42, 2000);
    let walk: Vec<f64> = e
        .iter()
        .scan(0.0, |acc, v| {
            *acc += v;
            Some(*acc)
        })
        .collect();
    let ar: Vec<f64> = e
        .iter()
        .scan(0.0, |prev, v| {
            *prev = 0.5 * *prev + v;
            Some(*prev)
        })
        .collect();
    vec![
        ("white_noise", e, -20.387094853219402, true),
        ("random_walk", walk, -1.6894364670902189, false),
        ("ar_0.5", ar, -17.69658981952004, true),
    ]
}
