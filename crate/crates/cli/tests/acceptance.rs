//! The acceptance suite as a test target: one test per criterion, each
//! printing its pass/fail line. The same checks back the `vaelab verify`
//! subcommand.
//!
//! Criteria 4-6 train full sweeps and dominate the runtime; criterion 8
//! re-runs criterion 4's configuration and compares CSV bytes.

use vaelab_cli::verify::{
    criterion_1, criterion_2, criterion_3, criterion_4, criterion_5, criterion_6, criterion_7,
    criterion_8, CriterionOutcome,
};

fn assert_pass(outcome: CriterionOutcome) {
    println!("{outcome}");
    assert!(
        outcome.pass,
        "criterion {} [{}] failed: {}",
        outcome.id, outcome.name, outcome.details
    );
}

#[test]
fn acceptance_1_gradient_correctness() {
    let o = criterion_1();
    assert!(o.seconds < 30.0, "runtime {:.1}s over budget", o.seconds);
    assert_pass(o);
}

#[test]
fn acceptance_2_ima_contrast_identities() {
    let o = criterion_2();
    assert!(o.seconds < 30.0, "runtime {:.1}s over budget", o.seconds);
    assert_pass(o);
}

#[test]
fn acceptance_3_linear_closed_forms() {
    let o = criterion_3();
    assert!(o.seconds < 120.0, "runtime {:.1}s over budget", o.seconds);
    assert_pass(o);
}

#[test]
fn acceptance_4_self_consistency_sweep() {
    let o = criterion_4();
    assert!(o.seconds < 2700.0, "runtime {:.1}s over budget", o.seconds);
    assert_pass(o);
}

#[test]
fn acceptance_5_elbo_vs_regularized_likelihood() {
    let o = criterion_5();
    assert!(o.seconds < 1800.0, "runtime {:.1}s over budget", o.seconds);
    assert_pass(o);
}

#[test]
fn acceptance_6_moebius_identifiability() {
    let o = criterion_6();
    assert!(o.seconds < 5400.0, "runtime {:.1}s over budget", o.seconds);
    assert_pass(o);
}

#[test]
fn acceptance_7_mcc_oracle_equivalence() {
    let o = criterion_7();
    assert!(o.seconds < 30.0, "runtime {:.1}s over budget", o.seconds);
    assert_pass(o);
}

#[test]
fn acceptance_8_determinism() {
    assert_pass(criterion_8());
}
