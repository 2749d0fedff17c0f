//! Finite-difference checks of every hand-written backward pass.

mod support;

#[test]
fn all_components_within_tolerance() {
    for (name, err) in support::gradient_suite() {
        assert!(err < 1e-4, "{name}: worst relative error {err:e}");
    }
}
