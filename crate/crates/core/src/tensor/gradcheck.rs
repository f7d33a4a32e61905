//! Finite-difference verification of every differentiable operation.
//!
//! The analytic gradient from one backward sweep is compared against central
//! differences (f(x+e) - f(x-e)) / 2e at 64-bit precision. The relative error
//! uses a floored denominator so exactly-zero gradients (dead ReLU units) do
//! not divide by zero.

use super::tape::{Tape, Var};
use super::{Result, Tensor};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub const DEFAULT_EPS: f64 = 1e-5;
pub const DEFAULT_TOL: f64 = 1e-4;
/// Composite whole-model check tolerance.
pub const MODEL_TOL: f64 = 1e-3;

/// Max relative error between analytic and numeric gradients over all input
/// elements. `build` must construct the same loss for every call; leaves are
/// registered in the order of `inputs`.
pub fn gradcheck<F>(build: F, inputs: &[Tensor<f64>], eps: f64) -> Result<f64>
where
    F: Fn(&mut Tape<f64>, &[Var]) -> Result<Var>,
{
    gradcheck_corrupt(build, inputs, eps, false)
}

/// Gradcheck with an optional fault injection that perturbs one analytic
/// gradient element. Used to prove the checker can fail.
pub fn gradcheck_corrupt<F>(
    build: F,
    inputs: &[Tensor<f64>],
    eps: f64,
    corrupt: bool,
) -> Result<f64>
where
    F: Fn(&mut Tape<f64>, &[Var]) -> Result<Var>,
{
    let eval = |tensors: &[Tensor<f64>]| -> Result<f64> {
        let mut tape = Tape::new();
        let vars: Vec<Var> = tensors
            .iter()
            .map(|t| tape.leaf(t, false))
            .collect::<Result<_>>()?;
        let loss = build(&mut tape, &vars)?;
        Ok(tape.value(loss).item())
    };

    let mut tape = Tape::new();
    let vars: Vec<Var> = inputs
        .iter()
        .map(|t| tape.leaf(t, true))
        .collect::<Result<_>>()?;
    let loss = build(&mut tape, &vars)?;
    let grads = tape.backward(loss)?;
    let mut analytic: Vec<Tensor<f64>> = Vec::with_capacity(inputs.len());
    for (i, t) in inputs.iter().enumerate() {
        analytic.push(grads.get(vars[i]).unwrap_or_else(|| Tensor::zeros(t.shape())));
    }
    if corrupt {
        if let Some(first) = analytic.get_mut(0) {
            if first.numel() > 0 {
                first.data_mut()[0] += 1.0;
            }
        }
    }

    let mut max_rel = 0.0f64;
    let mut work: Vec<Tensor<f64>> = inputs.to_vec();
    for ti in 0..inputs.len() {
        for j in 0..inputs[ti].numel() {
            let orig = work[ti].data()[j];
            work[ti].data_mut()[j] = orig + eps;
            let fp = eval(&work)?;
            work[ti].data_mut()[j] = orig - eps;
            let fm = eval(&work)?;
            work[ti].data_mut()[j] = orig;
            let numeric = (fp - fm) / (2.0 * eps);
            let a = analytic[ti].data()[j];
            let rel = (a - numeric).abs() / a.abs().max(numeric.abs()).max(1e-3);
            if rel > max_rel {
                max_rel = rel;
            }
        }
    }
    Ok(max_rel)
}

#[derive(Debug, Clone)]
pub struct GradcheckOutcome {
    pub name: &'static str,
    pub module: &'static str,
    pub max_rel_err: f64,
    pub tol: f64,
    pub pass: bool,
    pub error: Option<String>,
}

#[derive(Debug, Clone, Default)]
pub struct GradcheckReport {
    pub outcomes: Vec<GradcheckOutcome>,
}

impl GradcheckReport {
    pub fn all_pass(&self) -> bool {
        self.outcomes.iter().all(|o| o.pass)
    }
}

pub struct OpCheck {
    pub name: &'static str,
    pub module: &'static str,
    pub tol: f64,
    pub run: fn(u64, bool) -> Result<f64>,
}

fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

fn uniform(r: &mut ChaCha8Rng, shape: &[usize], lo: f64, hi: f64) -> Tensor<f64> {
    Tensor::from_fn(shape, |_| r.gen_range(lo..hi))
}

/// Values bounded away from zero, for ops with a kink at the origin.
fn off_zero(r: &mut ChaCha8Rng, shape: &[usize]) -> Tensor<f64> {
    Tensor::from_fn(shape, |_| {
        let sign = if r.gen_bool(0.5) { 1.0 } else { -1.0 };
        sign * r.gen_range(0.1..1.0)
    })
}

/// Loss that weights every output element differently, so gradients cannot
/// cancel by symmetry.
fn weighted_loss(tape: &mut Tape<f64>, y: Var, seed: u64) -> Result<Var> {
    let shape = tape.shape(y).to_vec();
    let mut r = rng(seed ^ 0x5eed);
    let w = uniform(&mut r, &shape, -1.0, 1.0);
    let wv = tape.constant(&w)?;
    let prod = tape.mul(y, wv)?;
    tape.mean_all(prod)
}

macro_rules! check {
    ($name:literal, $module:literal, $tol:expr, $fn:expr) => {
        OpCheck {
            name: $name,
            module: $module,
            tol: $tol,
            run: $fn,
        }
    };
}

/// Every registered differentiable operation with its checker.
pub fn registry() -> Vec<OpCheck> {
    vec![
        check!("add", "tensor", DEFAULT_TOL, |s, c| {
            let mut r = rng(s);
            let a = uniform(&mut r, &[2, 3, 4], -1.0, 1.0);
            let b = uniform(&mut r, &[2, 3, 4], -1.0, 1.0);
            gradcheck_corrupt(
                |t, v| {
                    let y = t.add(v[0], v[1])?;
                    weighted_loss(t, y, s)
                },
                &[a, b],
                DEFAULT_EPS,
                c,
            )
        }),
        check!("sub", "tensor", DEFAULT_TOL, |s, c| {
            let mut r = rng(s);
            let a = uniform(&mut r, &[3, 4], -1.0, 1.0);
            let b = uniform(&mut r, &[3, 4], -1.0, 1.0);
            gradcheck_corrupt(
                |t, v| {
                    let y = t.sub(v[0], v[1])?;
                    weighted_loss(t, y, s)
                },
                &[a, b],
                DEFAULT_EPS,
                c,
            )
        }),
        check!("mul", "tensor", DEFAULT_TOL, |s, c| {
            let mut r = rng(s);
            let a = uniform(&mut r, &[2, 3, 4], -1.0, 1.0);
            let b = uniform(&mut r, &[2, 3, 4], -1.0, 1.0);
            gradcheck_corrupt(
                |t, v| {
                    let y = t.mul(v[0], v[1])?;
                    weighted_loss(t, y, s)
                },
                &[a, b],
                DEFAULT_EPS,
                c,
            )
        }),
        check!("mul_broadcast", "tensor", DEFAULT_TOL, |s, c| {
            let mut r = rng(s);
            let a = uniform(&mut r, &[2, 1, 3, 4], -1.0, 1.0);
            let b = uniform(&mut r, &[2, 5, 1, 4], -1.0, 1.0);
            gradcheck_corrupt(
                |t, v| {
                    let y = t.mul(v[0], v[1])?;
                    weighted_loss(t, y, s)
                },
                &[a, b],
                DEFAULT_EPS,
                c,
            )
        }),
        check!("matmul", "tensor", DEFAULT_TOL, |s, c| {
            let mut r = rng(s);
            let a = uniform(&mut r, &[3, 4], -1.0, 1.0);
            let b = uniform(&mut r, &[4, 5], -1.0, 1.0);
            gradcheck_corrupt(
                |t, v| {
                    let y = t.matmul(v[0], v[1])?;
                    weighted_loss(t, y, s)
                },
                &[a, b],
                DEFAULT_EPS,
                c,
            )
        }),
        check!("transpose2d", "tensor", DEFAULT_TOL, |s, c| {
            let mut r = rng(s);
            let a = uniform(&mut r, &[3, 5], -1.0, 1.0);
            gradcheck_corrupt(
                |t, v| {
                    let y = t.transpose2d(v[0])?;
                    weighted_loss(t, y, s)
                },
                &[a],
                DEFAULT_EPS,
                c,
            )
        }),
        check!("reshape", "tensor", DEFAULT_TOL, |s, c| {
            let mut r = rng(s);
            let a = uniform(&mut r, &[2, 6], -1.0, 1.0);
            gradcheck_corrupt(
                |t, v| {
                    let y = t.reshape(v[0], &[3, 4])?;
                    weighted_loss(t, y, s)
                },
                &[a],
                DEFAULT_EPS,
                c,
            )
        }),
        check!("relu", "tensor", DEFAULT_TOL, |s, c| {
            let mut r = rng(s);
            let a = off_zero(&mut r, &[2, 3, 4]);
            gradcheck_corrupt(
                |t, v| {
                    let y = t.relu(v[0])?;
                    weighted_loss(t, y, s)
                },
                &[a],
                DEFAULT_EPS,
                c,
            )
        }),
        check!("sigmoid", "tensor", DEFAULT_TOL, |s, c| {
            let mut r = rng(s);
            let a = uniform(&mut r, &[2, 3, 4], -2.0, 2.0);
            gradcheck_corrupt(
                |t, v| {
                    let y = t.sigmoid(v[0])?;
                    weighted_loss(t, y, s)
                },
                &[a],
                DEFAULT_EPS,
                c,
            )
        }),
        check!("ln", "tensor", DEFAULT_TOL, |s, c| {
            let mut r = rng(s);
            let a = uniform(&mut r, &[3, 4], 0.2, 2.0);
            gradcheck_corrupt(
                |t, v| {
                    let y = t.ln(v[0])?;
                    weighted_loss(t, y, s)
                },
                &[a],
                DEFAULT_EPS,
                c,
            )
        }),
        check!("clamp", "tensor", DEFAULT_TOL, |s, c| {
            let mut r = rng(s);
            // Stay away from the clamp edges; the kink there is intentional.
            let a = Tensor::from_fn(&[40], |_| {
                let v: f64 = r.gen_range(0.0..1.0);
                if (v - 0.2).abs() < 0.02 || (v - 0.8).abs() < 0.02 {
                    0.5
                } else {
                    v
                }
            });
            gradcheck_corrupt(
                |t, v| {
                    let y = t.clamp(v[0], 0.2, 0.8)?;
                    weighted_loss(t, y, s)
                },
                &[a],
                DEFAULT_EPS,
                c,
            )
        }),
        check!("concat_split", "tensor", DEFAULT_TOL, |s, c| {
            let mut r = rng(s);
            let a = uniform(&mut r, &[2, 3, 4], -1.0, 1.0);
            let b = uniform(&mut r, &[2, 2, 4], -1.0, 1.0);
            gradcheck_corrupt(
                |t, v| {
                    let y = t.concat(1, &[v[0], v[1]])?;
                    let parts = t.split(y, 1, &[1, 4])?;
                    let z = t.mul(parts[1], parts[1])?;
                    weighted_loss(t, z, s)
                },
                &[a, b],
                DEFAULT_EPS,
                c,
            )
        }),
        check!("mean", "tensor", DEFAULT_TOL, |s, c| {
            let mut r = rng(s);
            let a = uniform(&mut r, &[3, 4], -1.0, 1.0);
            gradcheck_corrupt(|t, v| t.mean_all(v[0]), &[a], DEFAULT_EPS, c)
        }),
        check!("sum", "tensor", DEFAULT_TOL, |s, c| {
            let mut r = rng(s);
            let a = uniform(&mut r, &[3, 4], -1.0, 1.0);
            gradcheck_corrupt(
                |t, v| {
                    let y = t.mul(v[0], v[0])?;
                    t.sum_all(y)
                },
                &[a],
                DEFAULT_EPS,
                c,
            )
        }),
        check!("conv2d", "tensor", DEFAULT_TOL, |s, c| {
            let mut r = rng(s);
            let x = uniform(&mut r, &[2, 3, 6, 6], -1.0, 1.0);
            let w = uniform(&mut r, &[4, 3, 3, 3], -0.5, 0.5);
            let b = uniform(&mut r, &[4], -0.5, 0.5);
            gradcheck_corrupt(
                |t, v| {
                    let y = t.conv2d(v[0], v[1], Some(v[2]), 1, 1, 1)?;
                    weighted_loss(t, y, s)
                },
                &[x, w, b],
                DEFAULT_EPS,
                c,
            )
        }),
        check!("conv2d_strided", "tensor", DEFAULT_TOL, |s, c| {
            let mut r = rng(s);
            let x = uniform(&mut r, &[1, 2, 7, 7], -1.0, 1.0);
            let w = uniform(&mut r, &[3, 2, 3, 3], -0.5, 0.5);
            gradcheck_corrupt(
                |t, v| {
                    let y = t.conv2d(v[0], v[1], None, 2, 1, 1)?;
                    weighted_loss(t, y, s)
                },
                &[x, w],
                DEFAULT_EPS,
                c,
            )
        }),
        check!("conv2d_grouped", "tensor", DEFAULT_TOL, |s, c| {
            let mut r = rng(s);
            let x = uniform(&mut r, &[1, 4, 5, 5], -1.0, 1.0);
            let w = uniform(&mut r, &[6, 2, 3, 3], -0.5, 0.5);
            let b = uniform(&mut r, &[6], -0.5, 0.5);
            gradcheck_corrupt(
                |t, v| {
                    let y = t.conv2d(v[0], v[1], Some(v[2]), 1, 1, 2)?;
                    weighted_loss(t, y, s)
                },
                &[x, w, b],
                DEFAULT_EPS,
                c,
            )
        }),
        check!("adaptive_pool_max", "tensor", DEFAULT_TOL, |s, c| {
            let mut r = rng(s);
            let x = uniform(&mut r, &[2, 3, 5, 5], -1.0, 1.0);
            gradcheck_corrupt(
                |t, v| {
                    let y = t.adaptive_pool(v[0], 2, 2, super::kernels::PoolKind::Max)?;
                    weighted_loss(t, y, s)
                },
                &[x],
                DEFAULT_EPS,
                c,
            )
        }),
        check!("adaptive_pool_avg", "tensor", DEFAULT_TOL, |s, c| {
            let mut r = rng(s);
            let x = uniform(&mut r, &[2, 3, 5, 5], -1.0, 1.0);
            gradcheck_corrupt(
                |t, v| {
                    let y = t.adaptive_pool(v[0], 3, 2, super::kernels::PoolKind::Avg)?;
                    weighted_loss(t, y, s)
                },
                &[x],
                DEFAULT_EPS,
                c,
            )
        }),
        check!("bilinear_resize", "tensor", DEFAULT_TOL, |s, c| {
            let mut r = rng(s);
            let x = uniform(&mut r, &[1, 2, 3, 4], -1.0, 1.0);
            gradcheck_corrupt(
                |t, v| {
                    let up = t.bilinear_resize(v[0], 5, 7)?;
                    let down = t.bilinear_resize(up, 2, 2)?;
                    weighted_loss(t, down, s)
                },
                &[x],
                DEFAULT_EPS,
                c,
            )
        }),
        check!("softmax", "tensor", DEFAULT_TOL, |s, c| {
            let mut r = rng(s);
            let x = uniform(&mut r, &[2, 3, 4], -2.0, 2.0);
            gradcheck_corrupt(
                |t, v| {
                    let y = t.softmax(v[0], 1)?;
                    weighted_loss(t, y, s)
                },
                &[x],
                DEFAULT_EPS,
                c,
            )
        }),
        check!("batchnorm_train", "tensor", DEFAULT_TOL, |s, c| {
            let mut r = rng(s);
            let x = uniform(&mut r, &[2, 3, 4, 4], -1.0, 1.0);
            let gamma = uniform(&mut r, &[3], 0.5, 1.5);
            let beta = uniform(&mut r, &[3], -0.5, 0.5);
            gradcheck_corrupt(
                |t, v| {
                    let mut rm = Tensor::zeros(&[3]);
                    let mut rv = Tensor::full(&[3], 1.0);
                    let y = t.batchnorm_train(v[0], v[1], v[2], &mut rm, &mut rv, 1e-5, 0.1)?;
                    weighted_loss(t, y, s)
                },
                &[x, gamma, beta],
                DEFAULT_EPS,
                c,
            )
        }),
        check!("batchnorm_eval", "tensor", DEFAULT_TOL, |s, c| {
            let mut r = rng(s);
            let x = uniform(&mut r, &[2, 3, 4, 4], -1.0, 1.0);
            let gamma = uniform(&mut r, &[3], 0.5, 1.5);
            let beta = uniform(&mut r, &[3], -0.5, 0.5);
            let rm = uniform(&mut r, &[3], -0.3, 0.3);
            let rv = uniform(&mut r, &[3], 0.5, 1.5);
            gradcheck_corrupt(
                |t, v| {
                    let y = t.batchnorm_eval(v[0], v[1], v[2], &rm, &rv, 1e-5)?;
                    weighted_loss(t, y, s)
                },
                &[x, gamma, beta],
                DEFAULT_EPS,
                c,
            )
        }),
        check!("shift_frames", "tensor", DEFAULT_TOL, |s, c| {
            let mut r = rng(s);
            let x = uniform(&mut r, &[3, 2, 2, 2], -1.0, 1.0);
            gradcheck_corrupt(
                |t, v| {
                    let y = t.shift_frames(v[0])?;
                    weighted_loss(t, y, s)
                },
                &[x],
                DEFAULT_EPS,
                c,
            )
        }),
        check!("temporal_conv_circular", "tensor", DEFAULT_TOL, |s, c| {
            let mut r = rng(s);
            let x = uniform(&mut r, &[3, 2, 4, 4], -1.0, 1.0);
            let w = uniform(&mut r, &[2, 2, 3, 3, 3], -0.3, 0.3);
            gradcheck_corrupt(
                |t, v| {
                    let y = t.temporal_conv_circular(v[0], v[1])?;
                    weighted_loss(t, y, s)
                },
                &[x, w],
                DEFAULT_EPS,
                c,
            )
        }),
        check!("bce_with_logits", "tensor", DEFAULT_TOL, |s, c| {
            let mut r = rng(s);
            let z = uniform(&mut r, &[4, 5], -2.0, 2.0);
            let tgt = Tensor::from_fn(&[4, 5], |_| if r.gen_bool(0.5) { 1.0 } else { 0.0 });
            gradcheck_corrupt(
                |t, v| t.bce_with_logits(v[0], &tgt),
                &[z],
                DEFAULT_EPS,
                c,
            )
        }),
        check!("bce", "tensor", DEFAULT_TOL, |s, c| {
            let mut r = rng(s);
            let p = uniform(&mut r, &[4, 5], 0.1, 0.9);
            let tgt = Tensor::from_fn(&[4, 5], |_| if r.gen_bool(0.5) { 1.0 } else { 0.0 });
            gradcheck_corrupt(
                |t, v| t.bce_prob(v[0], &tgt, 1e-7),
                &[p],
                DEFAULT_EPS,
                c,
            )
        }),
        check!("ual_pow", "tensor", DEFAULT_TOL, |s, c| {
            let mut r = rng(s);
            // Keep p away from the |2p-1| = 0 kink at one half.
            let p = Tensor::from_fn(&[40], |_| {
                let v: f64 = r.gen_range(0.05..0.95);
                if (v - 0.5).abs() < 0.05 {
                    0.7
                } else {
                    v
                }
            });
            gradcheck_corrupt(
                |t, v| crate::losses::ual_loss(t, v[0], crate::losses::UalForm::Pow { alpha: 2.0 }),
                &[p],
                DEFAULT_EPS,
                c,
            )
        }),
        check!("ual_exp", "tensor", DEFAULT_TOL, |s, c| {
            let mut r = rng(s);
            let p = uniform(&mut r, &[40], 0.05, 0.95);
            gradcheck_corrupt(
                |t, v| crate::losses::ual_loss(t, v[0], crate::losses::UalForm::Exp { alpha: 1.0 }),
                &[p],
                DEFAULT_EPS,
                c,
            )
        }),
        check!("weighted_bce", "tensor", DEFAULT_TOL, |s, c| {
            // The confidence weight is a constant during backpropagation, so
            // differencing the loss itself would pick up the weight's own
            // variation. The analytic gradient is instead compared against
            // central differences of the objective with each element's weight
            // frozen at the unperturbed point.
            let mut r = rng(s);
            let p = uniform(&mut r, &[40], 0.1, 0.9);
            let tgt: Tensor<f64> =
                Tensor::from_fn(&[40], |_| if r.gen_bool(0.5) { 1.0 } else { 0.0 });

            let mut tape = Tape::new();
            let pv = tape.leaf(&p, true)?;
            let loss = crate::losses::weighted_bce_loss(&mut tape, pv, &tgt)?;
            let grads = tape.backward(loss)?;
            let mut analytic = grads.get(pv).unwrap();
            if c && analytic.numel() > 0 {
                analytic.data_mut()[0] += 1.0;
            }

            let n = p.numel() as f64;
            let bce = |pv: f64, gv: f64| {
                let ph = pv.clamp(1e-7, 1.0 - 1e-7);
                -(gv * ph.ln() + (1.0 - gv) * (1.0 - ph).ln())
            };
            let mut max_rel = 0.0f64;
            for j in 0..p.numel() {
                let pj = p.data()[j];
                let gj = tgt.data()[j];
                let w = 2.0 - (2.0 * pj - 1.0).powi(2);
                let numeric =
                    w * (bce(pj + DEFAULT_EPS, gj) - bce(pj - DEFAULT_EPS, gj))
                        / (2.0 * DEFAULT_EPS)
                        / n;
                let a = analytic.data()[j];
                let rel = (a - numeric).abs() / a.abs().max(numeric.abs()).max(1e-3);
                max_rel = max_rel.max(rel);
            }
            Ok(max_rel)
        }),
        check!("mhsiu_forward", "mhsiu", DEFAULT_TOL, |s, c| {
            crate::mhsiu::gradcheck_mhsiu(s, c)
        }),
        check!("rgpu_static", "rgpu", DEFAULT_TOL, |s, c| {
            crate::rgpu::gradcheck_rgpu_static(s, c)
        }),
        check!("rgpu_temporal", "rgpu", DEFAULT_TOL, |s, c| {
            crate::rgpu::gradcheck_rgpu_temporal(s, c)
        }),
        check!("model_forward", "model", MODEL_TOL, |s, c| {
            crate::model::gradcheck_model(s, c)
        }),
    ]
}

/// Run the registry, optionally filtered by module name ("all" keeps every
/// entry). `corrupt` injects a deliberate gradient fault into each check.
pub fn run_registry(module: &str, seed: u64, corrupt: bool) -> GradcheckReport {
    let mut report = GradcheckReport::default();
    for check in registry() {
        if module != "all" && check.module != module {
            continue;
        }
        let outcome = match (check.run)(seed, corrupt) {
            Ok(err) => GradcheckOutcome {
                name: check.name,
                module: check.module,
                max_rel_err: err,
                tol: check.tol,
                pass: err < check.tol,
                error: None,
            },
            Err(e) => GradcheckOutcome {
                name: check.name,
                module: check.module,
                max_rel_err: f64::INFINITY,
                tol: check.tol,
                pass: false,
                error: Some(e.to_string()),
            },
        };
        report.outcomes.push(outcome);
    }
    report
}
