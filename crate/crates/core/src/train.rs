//! Training loop: Adam on BCE plus the scheduled uncertainty-awareness
//! term, with seeded shuffling and augmentation so a fixed seed reproduces
//! checkpoints bit for bit.

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::data::augment::{augment_image, augment_mask, AugmentParams};
use crate::data::{stack_frames, LoadedSample};
use crate::losses::{lambda_at, LambdaSchedule, UalChoice, UalForm};
use crate::model::{training_loss, Model};
use crate::nn::{Adam, Binding, Fwd, ParamStore};
use crate::tensor::{Elem, Tape, Tensor, TensorError, Var};

#[derive(Debug, Clone, PartialEq)]
pub struct TrainConfig {
    pub lr: f64,
    pub epochs: usize,
    pub batch_size: usize,
    pub ual: UalChoice,
    pub schedule: LambdaSchedule,
    pub augment: bool,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            lr: 1e-4,
            epochs: 10,
            batch_size: 4,
            ual: UalChoice::Form(UalForm::Pow { alpha: 2.0 }),
            schedule: LambdaSchedule::default(),
            augment: true,
            seed: 0,
        }
    }
}

/// One row of the training log.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct EpochLog {
    pub epoch: usize,
    /// Mean combined loss over the epoch's steps.
    pub loss: f64,
    /// Mean auxiliary-term coefficient actually applied this epoch.
    pub lambda: f64,
    pub lr: f64,
}

#[derive(Debug)]
pub struct TrainReport {
    pub epoch_logs: Vec<EpochLog>,
    /// Combined loss at every optimization step, in order.
    pub step_losses: Vec<f64>,
}

impl TrainReport {
    /// CSV with a header row: epoch, loss, lambda, lr.
    pub fn to_csv(&self) -> String {
        let mut out = String::from("epoch,loss,lambda,lr\n");
        for row in &self.epoch_logs {
            out.push_str(&format!(
                "{},{:.10},{:.10},{:.10}\n",
                row.epoch, row.loss, row.lambda, row.lr
            ));
        }
        out
    }
}

#[derive(Debug, thiserror::Error)]
pub enum TrainError {
    /// The forward or backward pass produced a non-finite value.
    #[error("training aborted at step {step}: {source}")]
    NonFinite { step: usize, source: TensorError },
    #[error(transparent)]
    Other(#[from] TensorError),
}

/// Learning rate for an epoch: halved every ceil(epochs/3) epochs.
pub fn lr_for_epoch(base: f64, epoch: usize, epochs: usize) -> f64 {
    let span = epochs.div_ceil(3).max(1);
    base * 0.5f64.powi((epoch / span) as i32)
}

/// One optimization step over pre-stacked (images, masks) pairs. Image
/// batches arrive as a single stacked pair; clip batches keep one pair per
/// clip because the refinement units read the batch axis as time. Returns
/// (combined loss, applied lambda).
fn run_step<E: Elem>(
    model: &Model,
    store: &mut ParamStore<E>,
    adam: &mut Adam<E>,
    pairs: &[(Tensor<E>, Tensor<E>)],
    clip: bool,
    ual: UalChoice,
    lambda: f64,
    lr: f64,
) -> Result<(f64, f64), TensorError> {
    let mut tape = Tape::new();
    let bind = Binding::bind(&mut tape, store, true)?;
    let mut total: Option<Var> = None;
    let mut applied = 0.0;
    for (images, masks) in pairs {
        let xv = tape.leaf(images, false)?;
        let out = {
            let mut f = Fwd {
                tape: &mut tape,
                store,
                bind: &bind,
                train: true,
            };
            model.forward(&mut f, xv, clip)?
        };
        let (l, a) = training_loss(&mut tape, &out, masks, ual, lambda)?;
        applied = a;
        total = Some(match total {
            None => l,
            Some(t) => tape.add(t, l)?,
        });
    }
    let mut loss_var = total.expect("non-empty step");
    if pairs.len() > 1 {
        loss_var = tape.mul_scalar(loss_var, 1.0 / pairs.len() as f64)?;
    }
    let loss_val = tape.value(loss_var).data()[0].to_f64().unwrap();
    if !loss_val.is_finite() {
        return Err(TensorError::NonFinite { op: "loss" });
    }
    let grads = tape.backward(loss_var)?;
    adam.step(store, &bind, &grads, lr);
    Ok((loss_val, applied))
}

/// Run the optimization loop over in-memory samples, mutating `store`.
pub fn train<E: Elem>(
    model: &Model,
    store: &mut ParamStore<E>,
    samples: &[LoadedSample<E>],
    cfg: &TrainConfig,
) -> Result<TrainReport, TrainError> {
    if samples.is_empty() {
        return Err(TrainError::Other(TensorError::Invalid(
            "training requires at least one sample".into(),
        )));
    }
    if cfg.batch_size == 0 || cfg.epochs == 0 {
        return Err(TrainError::Other(TensorError::Invalid(
            "batch_size and epochs must be positive".into(),
        )));
    }
    let clip_len = model.config().clip_len;
    for s in samples {
        if s.frames.is_empty() {
            return Err(TrainError::Other(TensorError::Invalid(format!(
                "sample {} has no frames",
                s.name
            ))));
        }
        if clip_len > 1 && s.frames.len() != clip_len {
            return Err(TrainError::Other(TensorError::Invalid(format!(
                "sample {} has {} frames but the model expects clips of {}",
                s.name,
                s.frames.len(),
                clip_len
            ))));
        }
    }
    let video = clip_len > 1;
    let steps_per_epoch = samples.len().div_ceil(cfg.batch_size);
    let total_steps = cfg.epochs * steps_per_epoch;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut adam = Adam::new(store);
    let mut report = TrainReport {
        epoch_logs: Vec::with_capacity(cfg.epochs),
        step_losses: Vec::with_capacity(total_steps),
    };
    let mut step = 0usize;
    for epoch in 0..cfg.epochs {
        let lr = lr_for_epoch(cfg.lr, epoch, cfg.epochs);
        let mut order: Vec<usize> = (0..samples.len()).collect();
        order.shuffle(&mut rng);
        let mut loss_sum = 0.0;
        let mut lambda_sum = 0.0;
        for chunk in order.chunks(cfg.batch_size) {
            let lambda = lambda_at(step, total_steps, &cfg.schedule);
            // Augment up front; one parameter draw per sample covers all
            // of its frames.
            let mut per_sample: Vec<(Tensor<E>, Tensor<E>)> = Vec::with_capacity(chunk.len());
            for &i in chunk {
                let s = &samples[i];
                let p = if cfg.augment {
                    AugmentParams::draw(&mut rng)
                } else {
                    AugmentParams::IDENTITY
                };
                let images: Vec<Tensor<E>> =
                    s.frames.iter().map(|f| augment_image(&f.image, &p)).collect();
                let masks: Vec<Tensor<E>> =
                    s.frames.iter().map(|f| augment_mask(&f.mask, &p)).collect();
                per_sample.push((
                    stack_frames(images.iter()).map_err(TrainError::Other)?,
                    stack_frames(masks.iter()).map_err(TrainError::Other)?,
                ));
            }
            let pairs: Vec<(Tensor<E>, Tensor<E>)> = if video {
                per_sample
            } else {
                // Merge [1, 3, H, W] stacks into one [B, 3, H, W] batch.
                let images: Vec<Tensor<E>> = per_sample.iter().map(|(i, _)| i.clone()).collect();
                let masks: Vec<Tensor<E>> = per_sample.into_iter().map(|(_, m)| m).collect();
                let cat = |ts: &[Tensor<E>]| -> Result<Tensor<E>, TensorError> {
                    let mut shape = ts[0].shape().to_vec();
                    shape[0] = ts.iter().map(|t| t.shape()[0]).sum();
                    let mut data = Vec::new();
                    for t in ts {
                        if t.shape()[1..] != ts[0].shape()[1..] {
                            return Err(TensorError::Invalid(
                                "batch mixes image sizes; dataset must be uniform".into(),
                            ));
                        }
                        data.extend_from_slice(t.data());
                    }
                    Tensor::new(&shape, data)
                };
                vec![(
                    cat(&images).map_err(TrainError::Other)?,
                    cat(&masks).map_err(TrainError::Other)?,
                )]
            };
            let (loss_val, applied_lambda) = run_step(
                model, store, &mut adam, &pairs, video, cfg.ual, lambda, lr,
            )
            .map_err(|e| match e {
                TensorError::NonFinite { .. } => TrainError::NonFinite { step, source: e },
                other => TrainError::Other(other),
            })?;
            report.step_losses.push(loss_val);
            loss_sum += loss_val;
            lambda_sum += applied_lambda;
            step += 1;
        }
        report.epoch_logs.push(EpochLog {
            epoch,
            loss: loss_sum / steps_per_epoch as f64,
            lambda: lambda_sum / steps_per_epoch as f64,
            lr,
        });
    }
    Ok(report)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::synth::{generate, SyntheticSpec};
    use crate::model::ModelConfig;
    use crate::pyramid::Scale;

    fn tiny_model_cfg() -> ModelConfig {
        ModelConfig {
            channels: 4,
            levels: 2,
            heads: 2,
            groups: 2,
            scales: vec![Scale::Half, Scale::Main],
            ..ModelConfig::default()
        }
    }

    fn tiny_data(count: usize, clip_len: usize) -> Vec<LoadedSample<f32>> {
        generate(&SyntheticSpec {
            count,
            side: 32,
            contrast: 0.4,
            clip_len,
            seed: 11,
        })
        .unwrap()
    }

    fn run(cfg_train: &TrainConfig) -> (Vec<f32>, TrainReport) {
        let (mut store, model) = Model::build::<f32>(&tiny_model_cfg(), 42).unwrap();
        let report = train(&model, &mut store, &tiny_data(4, 1), cfg_train).unwrap();
        let mut flat = Vec::new();
        for (_, t, _) in store.iter() {
            flat.extend_from_slice(t.data());
        }
        (flat, report)
    }

    #[test]
    fn first_step_loss_is_near_ln2() {
        let cfg = TrainConfig {
            epochs: 1,
            batch_size: 4,
            augment: false,
            ..TrainConfig::default()
        };
        let (_, report) = run(&cfg);
        let l0 = report.step_losses[0];
        assert!(
            (l0 - std::f64::consts::LN_2).abs() < 0.15,
            "first-step loss {l0}"
        );
    }

    #[test]
    fn fixed_seed_reproduces_weights_bit_for_bit() {
        let cfg = TrainConfig {
            epochs: 2,
            batch_size: 2,
            ..TrainConfig::default()
        };
        let (a, ra) = run(&cfg);
        let (b, rb) = run(&cfg);
        assert_eq!(a, b);
        assert_eq!(ra.step_losses, rb.step_losses);
    }

    #[test]
    fn ual_off_logs_zero_lambda() {
        let cfg = TrainConfig {
            epochs: 2,
            batch_size: 2,
            ual: UalChoice::Off,
            ..TrainConfig::default()
        };
        let (_, report) = run(&cfg);
        assert!(report.epoch_logs.iter().all(|e| e.lambda == 0.0));
    }

    #[test]
    fn lambda_column_ramps_with_cosine_schedule() {
        let cfg = TrainConfig {
            epochs: 3,
            batch_size: 1,
            augment: false,
            ..TrainConfig::default()
        };
        let (_, report) = run(&cfg);
        let l: Vec<f64> = report.epoch_logs.iter().map(|e| e.lambda).collect();
        assert!(l[0] < l[1] && l[1] < l[2], "{l:?}");
    }

    #[test]
    fn lr_halves_every_third_of_training() {
        assert_eq!(lr_for_epoch(1e-4, 0, 9), 1e-4);
        assert_eq!(lr_for_epoch(1e-4, 2, 9), 1e-4);
        assert_eq!(lr_for_epoch(1e-4, 3, 9), 5e-5);
        assert_eq!(lr_for_epoch(1e-4, 6, 9), 2.5e-5);
        assert_eq!(lr_for_epoch(1e-4, 9, 10), 2.5e-5);
    }

    #[test]
    fn loss_decreases_over_training() {
        let cfg = TrainConfig {
            lr: 2e-3,
            epochs: 8,
            batch_size: 4,
            augment: false,
            ual: UalChoice::Off,
            ..TrainConfig::default()
        };
        let (_, report) = run(&cfg);
        let first = report.epoch_logs.first().unwrap().loss;
        let last = report.epoch_logs.last().unwrap().loss;
        assert!(last < first, "loss went {first} -> {last}");
    }

    #[test]
    fn video_clips_train() {
        let cfg_model = ModelConfig {
            clip_len: 2,
            ..tiny_model_cfg()
        };
        let (mut store, model) = Model::build::<f32>(&cfg_model, 1).unwrap();
        let report = train(
            &model,
            &mut store,
            &tiny_data(2, 2),
            &TrainConfig {
                epochs: 1,
                batch_size: 2,
                ..TrainConfig::default()
            },
        )
        .unwrap();
        assert_eq!(report.step_losses.len(), 1);
        assert!(report.step_losses[0].is_finite());
    }

    #[test]
    fn wrong_clip_length_rejected() {
        let cfg_model = ModelConfig {
            clip_len: 3,
            ..tiny_model_cfg()
        };
        let (mut store, model) = Model::build::<f32>(&cfg_model, 1).unwrap();
        let err = train(
            &model,
            &mut store,
            &tiny_data(2, 2),
            &TrainConfig::default(),
        );
        assert!(err.is_err());
    }

    #[test]
    fn csv_has_header_and_rows() {
        let cfg = TrainConfig {
            epochs: 2,
            batch_size: 4,
            ..TrainConfig::default()
        };
        let (_, report) = run(&cfg);
        let csv = report.to_csv();
        let lines: Vec<&str> = csv.lines().collect();
        assert_eq!(lines[0], "epoch,loss,lambda,lr");
        assert_eq!(lines.len(), 3);
    }
}
