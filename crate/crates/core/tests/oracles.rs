//! Library forwards against the element-wise reference implementations.

mod support;

use greenhouse_core::graph::{FeatureGraph, SelfLoops};
use greenhouse_core::layers::{lstm_cell_forward, LstmParams};

#[test]
fn forwards_match_reference() {
    for (name, gap) in support::oracle_suite() {
        assert!(gap < 1e-12, "{name}: {gap:e}");
    }
}

#[test]
fn lstm_forget_gate_carries_cell_state() {
    // i = o = sigmoid(-inf) = 0 and f = 1 hold the cell state
    let mut p = LstmParams::zeros(2, 2);
    let big = 1e3;
    p.b.as_mut_slice().copy_from_slice(&[-big, -big, big, big, -big, -big, 0.0, 0.0]);
    let (h, c) = lstm_cell_forward(&[0.4, 0.2], &[0.0, 0.0], &[0.7, -0.3], &p).unwrap();
    assert_eq!(c, vec![0.7, -0.3]);
    assert_eq!(h, vec![0.0, 0.0]);
}

#[test]
fn self_loop_policy_changes_neighbourhoods() {
    let all = FeatureGraph::new(&["a", "b"], &[("a", "b")], "b", SelfLoops::All).unwrap();
    assert_eq!(all.incoming(1).len(), 2);
    let some = FeatureGraph::new(&["a", "b"], &[("a", "b")], "b", SelfLoops::WhereNeeded).unwrap();
    assert_eq!(some.incoming(1), &[0]);
    assert_eq!(some.incoming(0), &[0]);
}
