mod support {
    pub mod props;
}

use support::props;

const CASES: u32 = 48;

#[test]
fn saliency_brute_force() {
    props::saliency_brute_force(CASES).unwrap();
}

#[test]
fn ranking_scale_invariance() {
    props::ranking_scale_invariance(CASES).unwrap();
}

#[test]
fn plan_determinism_and_monotonicity() {
    props::plan_determinism_and_monotonicity(CASES).unwrap();
}

#[test]
fn masked_zero_invariance() {
    props::masked_zero_invariance(CASES).unwrap();
}

#[test]
fn compaction_equivalence() {
    props::compaction_equivalence(16).unwrap();
}

#[test]
fn extractor_and_frozen_immutability() {
    props::extractor_and_frozen_immutability(8).unwrap();
}

#[test]
fn routing_brute_force() {
    props::routing_brute_force(CASES).unwrap();
}

#[test]
fn logit_shift_invariance() {
    props::logit_shift_invariance(CASES).unwrap();
}

#[test]
fn ensemble_degeneracy() {
    props::ensemble_degeneracy(8).unwrap();
}

#[test]
fn average_accuracy_closure() {
    props::average_accuracy_closure(CASES).unwrap();
}
