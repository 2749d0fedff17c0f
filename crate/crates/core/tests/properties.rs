//! Property tests for attention, data preparation and the generator.

mod support;

use greenhouse_core::datapipe::{
    chronological_split, impute_directional_mean, make_windows, minmax_fit, split_index, Layout, TimeSeriesFrame,
    ROWS_PER_DAY,
};
use greenhouse_core::graph::{FeatureGraph, SelfLoops};
use greenhouse_core::layers::{gat_forward, GatParams};
use greenhouse_core::nn::{dropout_apply, DropoutSpec, Mode, Tensor2};
use greenhouse_core::synth::{ventilate, Regime, SynthConfig};
use proptest::prelude::*;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn node_names(n: usize) -> Vec<String> {
    (0..n).map(|i| format!("n{i}")).collect()
}

/// Random digraph on `n` nodes from an adjacency bit pattern.
fn graph_from_bits(n: usize, bits: &[bool]) -> FeatureGraph {
    let names = node_names(n);
    let mut edges = Vec::new();
    for s in 0..n {
        for d in 0..n {
            if s != d && bits[s * n + d] {
                edges.push((names[s].as_str(), names[d].as_str()));
            }
        }
    }
    let nodes: Vec<&str> = names.iter().map(String::as_str).collect();
    FeatureGraph::new(&nodes, &edges, "n0", SelfLoops::WhereNeeded).unwrap()
}

fn random_gat(f: usize, h: usize, k: usize, seed: u64) -> GatParams {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    GatParams::init(f, h, k, 0.2, &mut rng)
}

fn features(n: usize, f: usize, vals: &[f64]) -> Tensor2 {
    Tensor2::from_vec(n, f, vals[..n * f].to_vec()).unwrap()
}

prop_compose! {
    fn gat_case()(n in 2usize..7, f in 1usize..4, h in 1usize..5, k in 1usize..5, seed in any::<u64>())
        (bits in prop::collection::vec(any::<bool>(), n * n),
         vals in prop::collection::vec(-3.0f64..3.0, n * f),
         n in Just(n), f in Just(f), h in Just(h), k in Just(k), seed in Just(seed))
        -> (FeatureGraph, GatParams, Tensor2) {
        (graph_from_bits(n, &bits), random_gat(f, h, k, seed), features(n, f, &vals))
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(100))]

    #[test]
    fn attention_rows_are_distributions((graph, p, x) in gat_case()) {
        let (_, attn) = gat_forward(&x, &graph, &p).unwrap();
        for kh in 0..p.head_count() {
            for i in 0..graph.node_count() {
                prop_assert!((attn.incoming_sum(kh, i) - 1.0).abs() < 1e-9);
                for &(_, a) in &attn.heads[kh][i] {
                    prop_assert!(a >= 0.0);
                }
            }
        }
    }

    #[test]
    fn gat_commutes_with_node_relabelling((graph, p, x) in gat_case(), rot in 1usize..6) {
        let n = graph.node_count();
        // new position q holds old node perm[q]
        let perm: Vec<usize> = (0..n).map(|q| (q + rot) % n).collect();
        let names: Vec<&str> = perm.iter().map(|&o| graph.nodes()[o].as_str()).collect();
        let edges = graph.edge_names();
        let permuted = FeatureGraph::new(&names, &edges, graph.target_name(), graph.self_loops()).unwrap();
        let rows: Vec<Vec<f64>> = perm.iter().map(|&o| x.row(o).to_vec()).collect();
        let (a, _) = gat_forward(&x, &graph, &p).unwrap();
        let (b, _) = gat_forward(&Tensor2::from_rows(&rows).unwrap(), &permuted, &p).unwrap();
        for (q, &o) in perm.iter().enumerate() {
            for c in 0..a.cols() {
                prop_assert!((a.get(o, c) - b.get(q, c)).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn nodes_ignore_non_neighbours((graph, p, x) in gat_case(), node in 0usize..6, bump in 0.5f64..5.0) {
        let n = graph.node_count();
        let i = node % n;
        let (base, _) = gat_forward(&x, &graph, &p).unwrap();
        for j in 0..n {
            if j == i || graph.incoming(i).contains(&j) {
                continue;
            }
            let mut y = x.clone();
            for v in y.row_mut(j) {
                *v += bump;
            }
            let (moved, _) = gat_forward(&y, &graph, &p).unwrap();
            prop_assert_eq!(base.row(i), moved.row(i));
        }
    }

    #[test]
    fn periodic_gaps_recovered(amp in 0.1f64..10.0, offset in -5.0f64..5.0, gaps in prop::collection::btree_set(2 * ROWS_PER_DAY..4 * ROWS_PER_DAY, 1..20)) {
        // five days of a strictly daily-periodic signal; gaps in days 3-4
        let rows = 5 * ROWS_PER_DAY;
        let v: Vec<f64> = (0..rows)
            .map(|r| offset + amp * (2.0 * std::f64::consts::PI * (r % ROWS_PER_DAY) as f64 / ROWS_PER_DAY as f64).sin())
            .collect();
        let mut missing = vec![false; rows];
        for &g in &gaps {
            missing[g] = true;
        }
        // leave at least one neighbour day observed for every gap
        for &g in &gaps {
            missing[g - 2 * ROWS_PER_DAY] = false;
        }
        let frame = TimeSeriesFrame::with_missing(support::start_time(), vec!["x".into()], vec![v.clone()], vec![missing]).unwrap();
        let (filled, log) = impute_directional_mean(&frame, "x").unwrap();
        prop_assert!(log.unfilled.is_empty());
        for &g in &gaps {
            let got = filled.value(g, 0).unwrap();
            prop_assert!((got - v[g]).abs() <= 1e-12 * (1.0 + v[g].abs()));
        }
    }

    #[test]
    fn minmax_round_trip(vals in prop::collection::vec(-1e3f64..1e3, 20..80), frac in 0.3f64..0.9) {
        let n = vals.len();
        let other: Vec<f64> = vals.iter().map(|v| 0.5 * v + 3.0).collect();
        let frame = TimeSeriesFrame::new(support::start_time(), vec!["a".into(), "b".into()], vec![vals.clone(), other]).unwrap();
        let cut = split_index(n, frac).unwrap();
        let scaler = minmax_fit(&frame, &["a", "b"], 0..cut.max(1)).unwrap();
        let back = scaler.inverse(&scaler.transform(&frame).unwrap()).unwrap();
        for c in 0..2 {
            for (x, y) in frame.column_at(c).iter().zip(back.column_at(c)) {
                prop_assert!((x - y).abs() <= 1e-12 * (1.0 + x.abs()));
            }
        }
        let scaled = scaler.transform(&frame).unwrap();
        for &v in &scaled.column_at(0)[..cut.max(1)] {
            prop_assert!((-1e-12..=1.0 + 1e-12).contains(&v));
        }
    }

    #[test]
    fn split_is_a_partition(rows in 2usize..100_000, frac in 0.01f64..0.99) {
        let cut = split_index(rows, frac).unwrap();
        prop_assert_eq!(cut, (rows as f64 * frac).floor() as usize);
        prop_assert!(cut <= rows);
    }

    #[test]
    fn windows_are_contiguous_slices(rows in 6usize..40, t in 1usize..5) {
        let graph = support::three_node_graph();
        let frame = support::toy_frame(&graph, rows);
        let data = make_windows(&frame, "c", t, Layout::Flat, Some(&graph)).unwrap();
        prop_assert_eq!(data.len(), rows - t);
        for i in 0..data.len() {
            for s in 0..t {
                for c in 0..3 {
                    prop_assert_eq!(data.window(i)[s * 3 + c], frame.column_at(c)[i + s]);
                }
            }
            prop_assert_eq!(data.target(i), frame.column_at(2)[i + t]);
            prop_assert_eq!(data.source_indices()[i], i + t);
        }
    }

    #[test]
    fn inverted_dropout_values(rate in 0.0f64..0.95, seed in any::<u64>(), len in 1usize..200) {
        let x = Tensor2::filled(1, len, 1.0);
        let y = dropout_apply(&x, &DropoutSpec { rate, mode: Mode::Train, seed }).unwrap();
        let kept = 1.0 / (1.0 - rate);
        for &v in y.as_slice() {
            prop_assert!(v == 0.0 || v == kept);
        }
        let e = dropout_apply(&x, &DropoutSpec { rate, mode: Mode::Eval, seed }).unwrap();
        prop_assert_eq!(e, x);
    }

    #[test]
    fn ventilation_lands_strictly_between(inside in -10.0f64..45.0, outside in -10.0f64..45.0) {
        prop_assume!((inside - outside).abs() > 1e-6);
        let v = ventilate(inside, outside);
        prop_assert!(v > inside.min(outside) && v < inside.max(outside));
    }
}

#[test]
fn chronological_split_keeps_order() {
    let graph = support::three_node_graph();
    let frame = support::toy_frame(&graph, 50);
    let (a, b) = chronological_split(&frame, 0.8).unwrap();
    assert_eq!((a.rows(), b.rows()), (40, 10));
    assert_eq!(b.timestamp(0), frame.timestamp(40));
    assert_eq!(b.column_at(0), &frame.column_at(0)[40..]);
}

#[test]
fn synthetic_regimes_use_their_default_graphs() {
    for regime in [Regime::Chain, Regime::Feedback] {
        let mut cfg = SynthConfig::for_regime(regime, 1);
        cfg.days = 3;
        let frame = greenhouse_core::synth::generate(&cfg).unwrap();
        greenhouse_core::graph::validate_graph(&regime.default_graph(), frame.columns()).unwrap();
    }
}
