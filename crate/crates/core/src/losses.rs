//! Training objectives: binary cross entropy, the uncertainty-awareness
//! regularizer (UAL) in its power and exponential forms, the weighted-BCE
//! variant, and the ramp schedules for the UAL coefficient.
//!
//! The total objective is `mean BCE + lambda(t) * mean UAL`. UAL measures how
//! far each predicted probability sits from a confident 0 or 1: with
//! certainty delta = |2p-1|, the power form is 1 - delta^alpha and the
//! exponential form is exp(-(alpha*(p-0.5))^2). Both are maximal at p = 0.5,
//! so minimizing them polarizes predictions.

use crate::tensor::{elem, Elem, Result, Tape, Tensor, Var};

/// Probabilities are clamped to [EPS, 1-EPS] before any logarithm.
/// Training computes BCE from logits instead, so in practice the clamp
/// only guards externally supplied probability maps.
pub const BCE_EPS: f64 = 1e-7;

/// Pointwise uncertainty measure.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum UalForm {
    /// 1 - |2p-1|^alpha
    Pow { alpha: f64 },
    /// exp(-(alpha*(p-0.5))^2)
    Exp { alpha: f64 },
}

/// Which auxiliary objective accompanies BCE.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum UalChoice {
    Form(UalForm),
    /// Replaces the whole objective with (1 + Phi_pow^2(p)) * BCE(p, g).
    WeightedBce,
    Off,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ScheduleKind {
    Cosine,
    Linear,
    Constant,
}

/// Ramp for the UAL coefficient over training iterations.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LambdaSchedule {
    pub kind: ScheduleKind,
    /// Ramp interval endpoints as fractions of the total iteration count.
    pub t_min: f64,
    pub t_max: f64,
    pub lambda_min: f64,
    pub lambda_max: f64,
}

impl Default for LambdaSchedule {
    fn default() -> Self {
        LambdaSchedule {
            kind: ScheduleKind::Cosine,
            t_min: 0.0,
            t_max: 1.0,
            lambda_min: 0.0,
            lambda_max: 1.0,
        }
    }
}

/// Coefficient at iteration `t` of `total`. Clamped to the endpoint values
/// outside the ramp interval; the constant strategy is identically 1.
pub fn lambda_at(t: usize, total: usize, s: &LambdaSchedule) -> f64 {
    match s.kind {
        ScheduleKind::Constant => 1.0,
        _ => {
            let t0 = s.t_min * total as f64;
            let t1 = s.t_max * total as f64;
            let tf = t as f64;
            if tf <= t0 {
                return s.lambda_min;
            }
            if tf >= t1 {
                return s.lambda_max;
            }
            let frac = (tf - t0) / (t1 - t0);
            let ramp = match s.kind {
                ScheduleKind::Cosine => 0.5 * (1.0 - (frac * std::f64::consts::PI).cos()),
                ScheduleKind::Linear => frac,
                ScheduleKind::Constant => unreachable!(),
            };
            s.lambda_min + ramp * (s.lambda_max - s.lambda_min)
        }
    }
}

/// Certainty map |2p - 1|.
pub fn delta<E: Elem>(p: &Tensor<E>) -> Tensor<E> {
    let two = elem::<E>(2.0);
    p.map(|v| (two * v - E::one()).abs())
}

fn ual_pointwise(form: UalForm, p: f64) -> f64 {
    match form {
        UalForm::Pow { alpha } => 1.0 - (2.0 * p - 1.0).abs().powf(alpha),
        UalForm::Exp { alpha } => (-(alpha * (p - 0.5)).powi(2)).exp(),
    }
}

fn ual_derivative(form: UalForm, p: f64) -> f64 {
    match form {
        UalForm::Pow { alpha } => {
            let u = (2.0 * p - 1.0).abs();
            if u == 0.0 {
                // Subgradient convention at the p = 0.5 kink.
                0.0
            } else {
                -2.0 * alpha * u.powf(alpha - 1.0) * (2.0 * p - 1.0).signum()
            }
        }
        UalForm::Exp { alpha } => {
            -2.0 * alpha * alpha * (p - 0.5) * ual_pointwise(form, p)
        }
    }
}

/// Mean UAL over a probability map, differentiable through the tape.
pub fn ual_loss<E: Elem>(tape: &mut Tape<E>, p: Var, form: UalForm) -> Result<Var> {
    tape.mean_map(
        "ual",
        p,
        move |v| elem::<E>(ual_pointwise(form, v.to_f64().unwrap())),
        move |v| elem::<E>(ual_derivative(form, v.to_f64().unwrap())),
    )
}

/// Mean UAL of a plain tensor (no gradients); used for evaluation.
pub fn ual_value<E: Elem>(p: &Tensor<E>, form: UalForm) -> f64 {
    let n = p.numel() as f64;
    p.data()
        .iter()
        .map(|&v| ual_pointwise(form, v.to_f64().unwrap()))
        .sum::<f64>()
        / n
}

/// Mean clamped binary cross entropy on probabilities.
pub fn bce_loss<E: Elem>(tape: &mut Tape<E>, p: Var, g: &Tensor<E>) -> Result<Var> {
    tape.bce_prob(p, g, BCE_EPS)
}

/// Mean binary cross entropy from logits (numerically stable form).
pub fn bce_logits_loss<E: Elem>(tape: &mut Tape<E>, z: Var, g: &Tensor<E>) -> Result<Var> {
    tape.bce_with_logits(z, g)
}

fn bce_pointwise(p: f64, g: f64) -> f64 {
    let pc = p.clamp(BCE_EPS, 1.0 - BCE_EPS);
    -g * pc.ln() - (1.0 - g) * (1.0 - pc).ln()
}

/// Mean BCE of a plain tensor (no gradients).
pub fn bce_value<E: Elem>(p: &Tensor<E>, g: &Tensor<E>) -> f64 {
    assert_eq!(p.shape(), g.shape());
    let n = p.numel() as f64;
    p.data()
        .iter()
        .zip(g.data())
        .map(|(&pv, &gv)| bce_pointwise(pv.to_f64().unwrap(), gv.to_f64().unwrap()))
        .sum::<f64>()
        / n
}

/// BCE with the per-pixel weight 1 + Phi_pow^2(p). The weight is treated as
/// a constant during backpropagation.
pub fn weighted_bce_loss<E: Elem>(tape: &mut Tape<E>, p: Var, g: &Tensor<E>) -> Result<Var> {
    let pow2 = UalForm::Pow { alpha: 2.0 };
    tape.mean_map2(
        "weighted_bce",
        p,
        g,
        move |pv, gv| {
            let p = pv.to_f64().unwrap();
            let w = 1.0 + ual_pointwise(pow2, p);
            elem::<E>(w * bce_pointwise(p, gv.to_f64().unwrap()))
        },
        move |pv, gv| {
            let p = pv.to_f64().unwrap();
            let g = gv.to_f64().unwrap();
            if p <= BCE_EPS || p >= 1.0 - BCE_EPS {
                return E::zero();
            }
            let w = 1.0 + ual_pointwise(pow2, p);
            elem::<E>(w * (-g / p + (1.0 - g) / (1.0 - p)))
        },
    )
}

/// Closed-form weighted BCE on plain tensors.
pub fn weighted_bce_value<E: Elem>(p: &Tensor<E>, g: &Tensor<E>) -> f64 {
    assert_eq!(p.shape(), g.shape());
    let pow2 = UalForm::Pow { alpha: 2.0 };
    let n = p.numel() as f64;
    p.data()
        .iter()
        .zip(g.data())
        .map(|(&pv, &gv)| {
            let pf = pv.to_f64().unwrap();
            (1.0 + ual_pointwise(pow2, pf)) * bce_pointwise(pf, gv.to_f64().unwrap())
        })
        .sum::<f64>()
        / n
}
