//! Closed-form references for the training objectives and the coefficient
//! schedules, evaluated pointwise against the library on a dense grid.

use znext_core::losses::{
    bce_value, lambda_at, ual_value, weighted_bce_value, LambdaSchedule, ScheduleKind, UalForm,
};
use znext_core::tensor::Tensor;

/// Exponent sweep for the power/exponential uncertainty forms.
pub const ALPHAS: [f64; 7] = [0.125, 0.25, 0.5, 1.0, 2.0, 4.0, 8.0];

/// 1001 evenly spaced probabilities covering [0, 1].
pub fn p_grid() -> Vec<f64> {
    (0..=1000).map(|i| i as f64 / 1000.0).collect()
}

/// 101 evenly spaced targets covering [0, 1].
pub fn g_grid() -> Vec<f64> {
    (0..=100).map(|j| j as f64 / 100.0).collect()
}

pub fn ual_pow_ref(alpha: f64, p: f64) -> f64 {
    1.0 - (2.0 * p - 1.0).abs().powf(alpha)
}

pub fn ual_exp_ref(alpha: f64, p: f64) -> f64 {
    (-(alpha * (p - 0.5)).powi(2)).exp()
}

/// Clamped cross entropy; probabilities pull back to [1e-7, 1 - 1e-7].
pub fn bce_ref(p: f64, g: f64) -> f64 {
    let pc = p.clamp(1e-7, 1.0 - 1e-7);
    -g * pc.ln() - (1.0 - g) * (1.0 - pc).ln()
}

/// Certainty-weighted cross entropy: weight 1 + (1 - |2p-1|^2).
pub fn wbce_ref(p: f64, g: f64) -> f64 {
    (1.0 + ual_pow_ref(2.0, p)) * bce_ref(p, g)
}

/// Ramp coefficient restated from its definition: endpoints clamp, the
/// constant strategy is identically one, cosine eases with 0.5(1-cos).
pub fn lambda_ref(
    t: usize,
    total: usize,
    kind: ScheduleKind,
    t_min: f64,
    t_max: f64,
    lmin: f64,
    lmax: f64,
) -> f64 {
    if kind == ScheduleKind::Constant {
        return 1.0;
    }
    let t0 = t_min * total as f64;
    let t1 = t_max * total as f64;
    let tf = t as f64;
    if tf <= t0 {
        return lmin;
    }
    if tf >= t1 {
        return lmax;
    }
    let frac = (tf - t0) / (t1 - t0);
    let ramp = match kind {
        ScheduleKind::Cosine => 0.5 * (1.0 - (frac * std::f64::consts::PI).cos()),
        ScheduleKind::Linear => frac,
        ScheduleKind::Constant => unreachable!(),
    };
    lmin + ramp * (lmax - lmin)
}

fn singleton(v: f64) -> Tensor<f64> {
    Tensor::new(&[1], vec![v]).unwrap()
}

/// Worst pointwise disagreement of the uncertainty forms over the
/// probability grid and every exponent, both power and exponential.
pub fn max_ual_err() -> f64 {
    let mut worst = 0.0f64;
    for &alpha in &ALPHAS {
        for &p in &p_grid() {
            let t = singleton(p);
            let got_pow = ual_value(&t, UalForm::Pow { alpha });
            let got_exp = ual_value(&t, UalForm::Exp { alpha });
            worst = worst.max((got_pow - ual_pow_ref(alpha, p)).abs());
            worst = worst.max((got_exp - ual_exp_ref(alpha, p)).abs());
        }
    }
    worst
}

/// Worst pointwise disagreement of plain cross entropy over the full
/// probability x target grid.
pub fn max_bce_err() -> f64 {
    let mut worst = 0.0f64;
    for &g in &g_grid() {
        let gt = singleton(g);
        for &p in &p_grid() {
            let got = bce_value(&singleton(p), &gt);
            worst = worst.max((got - bce_ref(p, g)).abs());
        }
    }
    worst
}

/// Worst pointwise disagreement of the certainty-weighted variant.
pub fn max_wbce_err() -> f64 {
    let mut worst = 0.0f64;
    for &g in &g_grid() {
        let gt = singleton(g);
        for &p in &p_grid() {
            let got = weighted_bce_value(&singleton(p), &gt);
            worst = worst.max((got - wbce_ref(p, g)).abs());
        }
    }
    worst
}

/// Worst disagreement of the coefficient schedule over all three kinds,
/// the full and the 0.3..0.7 ramp windows, two coefficient ranges, and
/// every step of several total lengths.
pub fn max_schedule_err() -> f64 {
    let mut worst = 0.0f64;
    for kind in [ScheduleKind::Cosine, ScheduleKind::Linear, ScheduleKind::Constant] {
        for &(t_min, t_max) in &[(0.0, 1.0), (0.3, 0.7)] {
            for &(lmin, lmax) in &[(0.0, 1.0), (0.2, 0.7)] {
                let s = LambdaSchedule {
                    kind,
                    t_min,
                    t_max,
                    lambda_min: lmin,
                    lambda_max: lmax,
                };
                for &total in &[1usize, 10, 100, 1000] {
                    for t in 0..=total {
                        let got = lambda_at(t, total, &s);
                        let want = lambda_ref(t, total, kind, t_min, t_max, lmin, lmax);
                        worst = worst.max((got - want).abs());
                    }
                }
            }
        }
    }
    worst
}
