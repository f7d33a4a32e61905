//! Training objectives against independent closed forms.
//!
//! Every loss value is recomputed from its textbook expression on a dense
//! 1001-probability x 101-target grid (with exponents from 1/8 to 8 for
//! the uncertainty forms) and must agree to within 1e-12. The coefficient
//! schedules are checked at every step of several run lengths, including
//! the windowed 0.3..0.7 ramp, and the differentiable tape versions of
//! each loss must match the same closed forms.

mod common;

use common::reflosses::{
    bce_ref, g_grid, lambda_ref, max_bce_err, max_schedule_err, max_ual_err, max_wbce_err,
    p_grid, ual_exp_ref, ual_pow_ref, wbce_ref, ALPHAS,
};
use znext_core::losses::{
    bce_logits_loss, bce_loss, lambda_at, ual_loss, weighted_bce_loss, LambdaSchedule,
    ScheduleKind, UalForm,
};
use znext_core::tensor::{Tape, Tensor};

const TOL: f64 = 1e-12;

#[test]
fn uncertainty_forms_match_closed_forms_pointwise() {
    let err = max_ual_err();
    assert!(err < TOL, "worst uncertainty disagreement {err:.3e}");
}

#[test]
fn cross_entropy_matches_closed_form_on_grid() {
    let err = max_bce_err();
    assert!(err < TOL, "worst cross-entropy disagreement {err:.3e}");
}

#[test]
fn weighted_cross_entropy_matches_closed_form_on_grid() {
    let err = max_wbce_err();
    assert!(err < TOL, "worst weighted disagreement {err:.3e}");
}

#[test]
fn schedules_match_closed_form_at_every_step() {
    let err = max_schedule_err();
    assert!(err < TOL, "worst schedule disagreement {err:.3e}");
}

#[test]
fn windowed_ramp_clamps_and_eases() {
    // Spot values of the 0.3..0.7 window at total = 1000, restated by hand.
    let s = LambdaSchedule {
        kind: ScheduleKind::Cosine,
        t_min: 0.3,
        t_max: 0.7,
        lambda_min: 0.0,
        lambda_max: 1.0,
    };
    assert_eq!(lambda_at(0, 1000, &s), 0.0);
    assert_eq!(lambda_at(300, 1000, &s), 0.0);
    let mid = lambda_at(500, 1000, &s);
    assert!((mid - 0.5).abs() < TOL, "cosine midpoint {mid}");
    assert_eq!(lambda_at(700, 1000, &s), 1.0);
    assert_eq!(lambda_at(1000, 1000, &s), 1.0);
    // Quarter point of the window: 0.5 * (1 - cos(pi/4)).
    let quarter = lambda_at(400, 1000, &s);
    let want = 0.5 * (1.0 - (std::f64::consts::PI / 4.0).cos());
    assert!((quarter - want).abs() < TOL, "quarter {quarter} vs {want}");
    // The reference helper must agree with the hand values too.
    assert_eq!(
        lambda_ref(400, 1000, ScheduleKind::Cosine, 0.3, 0.7, 0.0, 1.0),
        quarter
    );
}

/// Tape losses reduce with a mean; summing the closed forms in the same
/// element order reproduces the value to within rounding.
#[test]
fn tape_losses_match_closed_form_means() {
    let ps = p_grid();
    let n = ps.len();
    let p = Tensor::new(&[n], ps.clone()).unwrap();

    for &alpha in &ALPHAS {
        for (form, reference) in [
            (UalForm::Pow { alpha }, ual_pow_ref as fn(f64, f64) -> f64),
            (UalForm::Exp { alpha }, ual_exp_ref as fn(f64, f64) -> f64),
        ] {
            let mut tape = Tape::new();
            let pv = tape.leaf(&p, true).unwrap();
            let loss = ual_loss(&mut tape, pv, form).unwrap();
            let got = tape.value(loss).item();
            let want = ps.iter().map(|&v| reference(alpha, v)).sum::<f64>() / n as f64;
            assert!(
                (got - want).abs() < TOL,
                "{form:?}: tape {got} vs closed form {want}"
            );
        }
    }

    for &g in &[0.0, 0.25, 0.5, 0.75, 1.0] {
        let gt = Tensor::new(&[n], vec![g; n]).unwrap();

        let mut tape = Tape::new();
        let pv = tape.leaf(&p, true).unwrap();
        let loss = bce_loss(&mut tape, pv, &gt).unwrap();
        let got = tape.value(loss).item();
        let want = ps.iter().map(|&v| bce_ref(v, g)).sum::<f64>() / n as f64;
        assert!((got - want).abs() < TOL, "bce g={g}: {got} vs {want}");

        let mut tape = Tape::new();
        let pv = tape.leaf(&p, true).unwrap();
        let loss = weighted_bce_loss(&mut tape, pv, &gt).unwrap();
        let got = tape.value(loss).item();
        let want = ps.iter().map(|&v| wbce_ref(v, g)).sum::<f64>() / n as f64;
        assert!((got - want).abs() < TOL, "weighted g={g}: {got} vs {want}");
    }
}

/// The logit form agrees with sigmoid-then-cross-entropy computed
/// independently, on a symmetric logit grid where both are well conditioned.
#[test]
fn logit_loss_matches_sigmoid_composition() {
    let n = 1001;
    let zs: Vec<f64> = (0..n).map(|i| -8.0 + 16.0 * i as f64 / (n - 1) as f64).collect();
    let z = Tensor::new(&[n], zs.clone()).unwrap();
    for &g in &g_grid() {
        let gt = Tensor::new(&[n], vec![g; n]).unwrap();
        let mut tape = Tape::new();
        let zv = tape.leaf(&z, true).unwrap();
        let loss = bce_logits_loss(&mut tape, zv, &gt).unwrap();
        let got = tape.value(loss).item();
        let want = zs
            .iter()
            .map(|&zi| {
                let p = 1.0 / (1.0 + (-zi).exp());
                -g * p.ln() - (1.0 - g) * (1.0 - p).ln()
            })
            .sum::<f64>()
            / n as f64;
        assert!(
            (got - want).abs() < 1e-11,
            "logits g={g}: {got} vs {want}"
        );
    }
}
