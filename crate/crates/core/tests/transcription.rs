//! The fusion units against their straight-line scalar transcriptions.
//!
//! Over a hundred randomized tiny configurations per unit, the library's
//! tape-driven forward pass must agree with a from-scratch nested-loop
//! restatement of the architecture to within 1e-6 in f64.

mod common;

use common::refnet::{mhsiu_cases, rgpu_cases, run_mhsiu_case, run_rgpu_case};

const TOL: f64 = 1e-6;

#[test]
fn scale_integration_matches_transcription_on_randomized_instances() {
    let cases = mhsiu_cases();
    assert!(
        cases.len() >= 100,
        "need at least 100 cases, got {}",
        cases.len()
    );
    let mut worst = 0.0f64;
    for case in &cases {
        let diff = run_mhsiu_case(case);
        assert!(
            diff < TOL,
            "C={} M={} K={} n={} {}x{} seed={}: diff {diff:.3e}",
            case.channels,
            case.heads,
            case.scales,
            case.n,
            case.h,
            case.w,
            case.seed
        );
        worst = worst.max(diff);
    }
    println!(
        "scale integration: {} instances, worst diff {worst:.3e}",
        cases.len()
    );
}

#[test]
fn group_iteration_and_modulation_match_transcription_on_randomized_instances() {
    let cases = rgpu_cases();
    assert!(
        cases.len() >= 100,
        "need at least 100 cases, got {}",
        cases.len()
    );
    let mut worst = 0.0f64;
    for case in &cases {
        let diff = run_rgpu_case(case);
        assert!(
            diff < TOL,
            "C={} G={} n={} {}x{} seed={}: diff {diff:.3e}",
            case.channels,
            case.groups,
            case.n,
            case.h,
            case.w,
            case.seed
        );
        worst = worst.max(diff);
    }
    println!(
        "group iteration: {} instances, worst diff {worst:.3e}",
        cases.len()
    );
}
