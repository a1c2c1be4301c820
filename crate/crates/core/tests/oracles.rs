//! Graph implementations against the loop references, on 100 seeded
//! instances each.

use hymesh_core::oracles::{attention_core_max_error, gru_max_error, hyperbolic_attention_max_error, losses_max_error};

const TOL: f64 = 1e-9;
const INSTANCES: u64 = 100;

#[test]
fn attention_core_matches_loop() {
    let e = attention_core_max_error(INSTANCES).unwrap();
    assert!(e < TOL, "max error {e:e}");
}

#[test]
fn hyperbolic_attention_matches_loop() {
    let e = hyperbolic_attention_max_error(INSTANCES).unwrap();
    assert!(e < TOL, "max error {e:e}");
}

#[test]
fn gru_matches_unrolled_loop() {
    let e = gru_max_error(INSTANCES).unwrap();
    assert!(e < TOL, "max error {e:e}");
}

#[test]
fn losses_match_loops() {
    let e = losses_max_error(INSTANCES).unwrap();
    assert!(e < TOL, "max error {e:e}");
}
