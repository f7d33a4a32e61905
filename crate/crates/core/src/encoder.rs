//! Shared convolutional encoder.
//!
//! One parameter set is applied to every pyramid view (a siamese triplet):
//! each stage halves resolution with a strided 3x3 block followed by a
//! second 3x3 block, and every stage output is compressed to a common
//! channel width with a 1x1 block so downstream fusion sees uniform
//! feature maps.

use rand_chacha::ChaCha8Rng;

use crate::nn::{ConvBnRelu, Fwd, ParamStore};
use crate::tensor::{Elem, Result, TensorError, Var};

/// Deepest supported stage count.
pub const MAX_LEVELS: usize = 5;

/// Internal widths per stage for base width `c`: doubling up to 4x, then
/// flat. `levels` selects a prefix.
pub fn stage_widths(c: usize, levels: usize) -> Vec<usize> {
    [c, 2 * c, 4 * c, 4 * c, 4 * c][..levels].to_vec()
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct EncoderConfig {
    /// Channel width of every exported feature level.
    pub channels: usize,
    /// Number of stages; level i has spatial size H / 2^(i+1).
    pub levels: usize,
}

impl EncoderConfig {
    pub fn validate(&self) -> Result<()> {
        if self.channels == 0 {
            return Err(TensorError::Invalid("encoder channels must be > 0".into()));
        }
        if self.levels == 0 || self.levels > MAX_LEVELS {
            return Err(TensorError::Invalid(format!(
                "encoder levels must be in 1..={MAX_LEVELS}, got {}",
                self.levels
            )));
        }
        Ok(())
    }
}

struct Stage {
    down: ConvBnRelu,
    refine: ConvBnRelu,
    compress: ConvBnRelu,
}

pub struct Encoder {
    stages: Vec<Stage>,
}

impl Encoder {
    pub fn new<E: Elem>(
        store: &mut ParamStore<E>,
        name: &str,
        cfg: EncoderConfig,
        rng: &mut ChaCha8Rng,
    ) -> Self {
        let widths = stage_widths(cfg.channels, cfg.levels);
        let mut stages = Vec::with_capacity(cfg.levels);
        let mut cin = 3;
        for (i, &w) in widths.iter().enumerate() {
            let base = format!("{name}.stage{i}");
            stages.push(Stage {
                down: ConvBnRelu::new(store, &format!("{base}.down"), cin, w, 3, 2, 1, rng),
                refine: ConvBnRelu::new(store, &format!("{base}.refine"), w, w, 3, 1, 1, rng),
                compress: ConvBnRelu::new(
                    store,
                    &format!("{base}.compress"),
                    w,
                    cfg.channels,
                    1,
                    1,
                    0,
                    rng,
                ),
            });
            cin = w;
        }
        Encoder { stages }
    }

    /// Encode one batch [N, 3, H, W] into per-level features, shallowest
    /// first: level i is [N, C, H/2^(i+1), W/2^(i+1)].
    pub fn forward<E: Elem>(&self, f: &mut Fwd<'_, E>, x: Var) -> Result<Vec<Var>> {
        let shape = f.tape.shape(x).to_vec();
        if shape.len() != 4 || shape[1] != 3 {
            return Err(TensorError::shape(
                "encoder",
                format!("expected [N, 3, H, W], got {shape:?}"),
            ));
        }
        let mut levels = Vec::with_capacity(self.stages.len());
        let mut cur = x;
        for stage in &self.stages {
            cur = stage.down.forward(f, cur)?;
            cur = stage.refine.forward(f, cur)?;
            levels.push(stage.compress.forward(f, cur)?);
        }
        Ok(levels)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::Binding;
    use crate::tensor::{Tape, Tensor};
    use rand::SeedableRng;

    fn build(c: usize, l: usize) -> (ParamStore<f64>, Encoder) {
        let mut store = ParamStore::new();
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let enc = Encoder::new(
            &mut store,
            "enc",
            EncoderConfig {
                channels: c,
                levels: l,
            },
            &mut rng,
        );
        (store, enc)
    }

    fn encode_shapes(h: usize, w: usize, c: usize, l: usize) -> Vec<Vec<usize>> {
        let (mut store, enc) = build(c, l);
        let mut tape = Tape::new();
        let bind = Binding::bind(&mut tape, &store, false).unwrap();
        let x = tape
            .leaf(&Tensor::from_fn(&[2, 3, h, w], |i| (i % 7) as f64 * 0.1), false)
            .unwrap();
        let mut f = Fwd {
            tape: &mut tape,
            store: &mut store,
            bind: &bind,
            train: true,
        };
        let levels = enc.forward(&mut f, x).unwrap();
        levels.iter().map(|&v| tape.shape(v).to_vec()).collect()
    }

    #[test]
    fn widths_follow_doubling_then_flat() {
        assert_eq!(stage_widths(16, 5), [16, 32, 64, 64, 64]);
        assert_eq!(stage_widths(8, 2), [8, 16]);
    }

    #[test]
    fn levels_halve_resolution_and_share_width() {
        let shapes = encode_shapes(64, 48, 16, 3);
        assert_eq!(
            shapes,
            vec![[2, 16, 32, 24], [2, 16, 16, 12], [2, 16, 8, 6]]
        );
    }

    #[test]
    fn scaled_input_scales_every_level() {
        let full = encode_shapes(64, 64, 8, 2);
        let half = encode_shapes(32, 32, 8, 2);
        for (a, b) in full.iter().zip(&half) {
            assert_eq!(a[2], 2 * b[2]);
            assert_eq!(a[3], 2 * b[3]);
        }
    }

    #[test]
    fn parameter_names_are_deterministic() {
        let (s1, _) = build(8, 2);
        let (s2, _) = build(8, 2);
        let n1: Vec<String> = s1.iter().map(|(n, _, _)| n.to_string()).collect();
        let n2: Vec<String> = s2.iter().map(|(n, _, _)| n.to_string()).collect();
        assert_eq!(n1, n2);
        // Same seed, same init values.
        for ((_, t1, _), (_, t2, _)) in s1.iter().zip(s2.iter()) {
            assert_eq!(t1.data(), t2.data());
        }
    }

    #[test]
    fn config_validation() {
        assert!(EncoderConfig {
            channels: 16,
            levels: 3
        }
        .validate()
        .is_ok());
        assert!(EncoderConfig {
            channels: 0,
            levels: 3
        }
        .validate()
        .is_err());
        assert!(EncoderConfig {
            channels: 16,
            levels: 6
        }
        .validate()
        .is_err());
    }

    #[test]
    fn rejects_non_rgb_input() {
        let (mut store, enc) = build(8, 1);
        let mut tape = Tape::new();
        let bind = Binding::bind(&mut tape, &store, false).unwrap();
        let x = tape
            .leaf(&Tensor::<f64>::zeros(&[1, 4, 16, 16]), false)
            .unwrap();
        let mut f = Fwd {
            tape: &mut tape,
            store: &mut store,
            bind: &bind,
            train: false,
        };
        assert!(enc.forward(&mut f, x).is_err());
    }
}
