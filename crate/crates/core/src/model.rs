//! Full segmentation model: zoom pyramid -> shared encoder -> per-level
//! scale fusion -> top-down refinement chain -> prediction head.
//!
//! One weight set serves both single images and clips: the batch axis is
//! reinterpreted as time when a clip is declared, and the refinement units'
//! temporal branches contribute exact zeros for single frames, so the two
//! paths coincide bit-for-bit on one-frame inputs.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use sha2::{Digest, Sha256};

use crate::encoder::{Encoder, EncoderConfig};
use crate::mhsiu::{Mhsiu, MhsiuConfig};
use crate::nn::{Binding, Conv2d, ConvBnRelu, Fwd, ParamStore};
use crate::pyramid::{align_to_grid, build_pyramid, validate_grid, DownsampleMode, Scale};
use crate::rgpu::{Rgpu, RgpuConfig};
use crate::tensor::{
    gradcheck_corrupt, Elem, Result, Tape, Tensor, TensorError, Var, DEFAULT_EPS,
};

/// How aligned scale features are merged per level.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Fusion {
    /// Multi-head per-pixel attention over the scale axis.
    Mhsiu,
    /// Plain element-wise sum of the aligned features.
    Addition,
}

impl Fusion {
    /// Parse a fusion-mode name, case-insensitively.
    pub fn from_name(s: &str) -> Option<Fusion> {
        match s.trim().to_ascii_lowercase().as_str() {
            "mhsiu" | "attention" => Some(Fusion::Mhsiu),
            "addition" | "add" | "sum" => Some(Fusion::Addition),
            _ => None,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ModelConfig {
    /// Working channel width C.
    pub channels: usize,
    /// Encoder depth L; feature level i lives at H / 2^(i+1).
    pub levels: usize,
    /// Scale-integration heads M.
    pub heads: usize,
    /// Refinement groups G.
    pub groups: usize,
    /// Clip length T; 1 selects image mode.
    pub clip_len: usize,
    /// Pyramid scales consumed, kept sorted ascending by factor.
    pub scales: Vec<Scale>,
    /// Downsampling operator for finer-than-target grids.
    pub downsample: DownsampleMode,
    pub fusion: Fusion,
    pub use_intraframe_attention: bool,
    pub use_temporal_diffusion: bool,
    pub use_temporal_shift: bool,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            channels: 16,
            levels: 3,
            heads: 4,
            groups: 6,
            clip_len: 1,
            scales: Scale::ALL.to_vec(),
            downsample: DownsampleMode::Hybrid,
            fusion: Fusion::Mhsiu,
            use_intraframe_attention: true,
            use_temporal_diffusion: true,
            use_temporal_shift: true,
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        EncoderConfig {
            channels: self.channels,
            levels: self.levels,
        }
        .validate()?;
        if self.channels % self.heads != 0 || self.heads == 0 {
            return Err(TensorError::Invalid(format!(
                "heads ({}) must divide channels ({})",
                self.heads, self.channels
            )));
        }
        if self.scales.is_empty() {
            return Err(TensorError::Invalid("at least one scale required".into()));
        }
        let mut sorted = self.scales.clone();
        sorted.sort_by(|a, b| a.factor().partial_cmp(&b.factor()).unwrap());
        sorted.dedup();
        if sorted != self.scales {
            return Err(TensorError::Invalid(
                "scales must be sorted ascending and unique".into(),
            ));
        }
        self.rgpu_config().validate()
    }

    /// Bring an arbitrary scale list into canonical form.
    pub fn set_scales(&mut self, scales: &[Scale]) {
        let mut s = scales.to_vec();
        s.sort_by(|a, b| a.factor().partial_cmp(&b.factor()).unwrap());
        s.dedup();
        self.scales = s;
    }

    fn rgpu_config(&self) -> RgpuConfig {
        RgpuConfig {
            channels: self.channels,
            groups: self.groups,
            clip_len: self.clip_len,
            use_intraframe_attention: self.use_intraframe_attention,
            use_temporal_diffusion: self.use_temporal_diffusion,
            use_temporal_shift: self.use_temporal_shift,
        }
    }

    /// Canonical text form; the checkpoint digest hashes exactly this.
    pub fn digest_string(&self) -> String {
        let scales: Vec<&str> = self.scales.iter().map(|s| s.label()).collect();
        format!(
            "channels={}\nlevels={}\nheads={}\ngroups={}\nclip_len={}\nscales={}\ndownsample={:?}\nfusion={:?}\nintraframe_attention={}\ntemporal_diffusion={}\ntemporal_shift={}\n",
            self.channels,
            self.levels,
            self.heads,
            self.groups,
            self.clip_len,
            scales.join(","),
            self.downsample,
            self.fusion,
            self.use_intraframe_attention,
            self.use_temporal_diffusion,
            self.use_temporal_shift,
        )
    }

    pub fn digest(&self) -> [u8; 32] {
        let mut h = Sha256::new();
        h.update(self.digest_string().as_bytes());
        h.finalize().into()
    }

    /// Rebuild a configuration from the text produced by
    /// [`ModelConfig::digest_string`]. Every line must be a known
    /// `key=value` pair; the result is validated before it is returned.
    pub fn from_digest_string(text: &str) -> Result<ModelConfig> {
        fn bad(key: &str, value: &str) -> TensorError {
            TensorError::Invalid(format!("config: bad value {value:?} for key {key:?}"))
        }
        let mut cfg = ModelConfig::default();
        for line in text.lines() {
            let line = line.trim();
            if line.is_empty() {
                continue;
            }
            let (key, value) = line.split_once('=').ok_or_else(|| {
                TensorError::Invalid(format!("config: line {line:?} is not key=value"))
            })?;
            let (key, value) = (key.trim(), value.trim());
            let parse_usize = || value.parse::<usize>().map_err(|_| bad(key, value));
            let parse_bool = || value.parse::<bool>().map_err(|_| bad(key, value));
            match key {
                "channels" => cfg.channels = parse_usize()?,
                "levels" => cfg.levels = parse_usize()?,
                "heads" => cfg.heads = parse_usize()?,
                "groups" => cfg.groups = parse_usize()?,
                "clip_len" => cfg.clip_len = parse_usize()?,
                "scales" => {
                    let scales: Option<Vec<Scale>> =
                        value.split(',').map(Scale::from_label).collect();
                    cfg.set_scales(&scales.ok_or_else(|| bad(key, value))?);
                }
                "downsample" => {
                    cfg.downsample = DownsampleMode::from_name(value).ok_or_else(|| bad(key, value))?
                }
                "fusion" => cfg.fusion = Fusion::from_name(value).ok_or_else(|| bad(key, value))?,
                "intraframe_attention" => cfg.use_intraframe_attention = parse_bool()?,
                "temporal_diffusion" => cfg.use_temporal_diffusion = parse_bool()?,
                "temporal_shift" => cfg.use_temporal_shift = parse_bool()?,
                _ => {
                    return Err(TensorError::Invalid(format!(
                        "config: unknown key {key:?}"
                    )))
                }
            }
        }
        cfg.validate()?;
        Ok(cfg)
    }
}

enum FusionUnit {
    Mhsiu(Mhsiu),
    Addition,
}

pub struct Model {
    cfg: ModelConfig,
    encoder: Encoder,
    fusion: Vec<FusionUnit>,
    refine: Vec<Rgpu>,
    head1: ConvBnRelu,
    head2: ConvBnRelu,
    head_out: Conv2d,
}

/// Result of one forward pass: pre-activation logits and the probability
/// map, both already resized to the input resolution [N, 1, H, W].
pub struct ForwardOutput {
    pub logits: Var,
    pub probs: Var,
}

impl Model {
    pub fn new<E: Elem>(
        store: &mut ParamStore<E>,
        cfg: &ModelConfig,
        rng: &mut ChaCha8Rng,
    ) -> Result<Self> {
        cfg.validate()?;
        let encoder = Encoder::new(
            store,
            "encoder",
            EncoderConfig {
                channels: cfg.channels,
                levels: cfg.levels,
            },
            rng,
        );
        let mut fusion = Vec::with_capacity(cfg.levels);
        let mut refine = Vec::with_capacity(cfg.levels);
        for i in 0..cfg.levels {
            fusion.push(match cfg.fusion {
                Fusion::Mhsiu => FusionUnit::Mhsiu(Mhsiu::new(
                    store,
                    &format!("fuse{i}"),
                    MhsiuConfig {
                        channels: cfg.channels,
                        heads: cfg.heads,
                        scales: cfg.scales.len(),
                    },
                    rng,
                )?),
                Fusion::Addition => FusionUnit::Addition,
            });
            refine.push(Rgpu::new(
                store,
                &format!("refine{i}"),
                cfg.rgpu_config(),
                rng,
            )?);
        }
        let c = cfg.channels;
        let head1 = ConvBnRelu::new(store, "head.block1", c, c, 3, 1, 1, rng);
        let head2 = ConvBnRelu::new(store, "head.block2", c, c, 3, 1, 1, rng);
        let head_out = Conv2d::new(store, "head.out", c, 1, 1, 1, 0, 1, true, rng);
        Ok(Model {
            cfg: cfg.clone(),
            encoder,
            fusion,
            refine,
            head1,
            head2,
            head_out,
        })
    }

    /// Build a fresh parameter store and model for a config and seed.
    pub fn build<E: Elem>(cfg: &ModelConfig, seed: u64) -> Result<(ParamStore<E>, Model)> {
        let mut store = ParamStore::new();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let model = Model::new(&mut store, cfg, &mut rng)?;
        Ok((store, model))
    }

    pub fn config(&self) -> &ModelConfig {
        &self.cfg
    }

    pub fn refine_units(&self) -> &[Rgpu] {
        &self.refine
    }

    /// Full forward pass over [N, 3, H, W]. With `clip`, the batch axis is
    /// one clip's frames and the temporal branch may engage.
    pub fn forward<E: Elem>(&self, f: &mut Fwd<'_, E>, x: Var, clip: bool) -> Result<ForwardOutput> {
        let shape = f.tape.shape(x).to_vec();
        if shape.len() != 4 || shape[1] != 3 {
            return Err(TensorError::shape(
                "model",
                format!("expected [N, 3, H, W] input, got {shape:?}"),
            ));
        }
        let (h, w) = (shape[2], shape[3]);
        validate_grid(h, w)?;
        let pyramid = build_pyramid(f.tape, x, &self.cfg.scales)?;
        // Shared encoder over every view, finest-to-coarsest scale order.
        let mut per_scale: Vec<Vec<Var>> = Vec::with_capacity(self.cfg.scales.len());
        for &s in &self.cfg.scales {
            let view = pyramid.get(s).unwrap();
            per_scale.push(self.encoder.forward(f, view)?);
        }
        // Residual source: the reference scale when present, else the
        // largest available one.
        let residual_idx = self
            .cfg
            .scales
            .iter()
            .position(|&s| s == Scale::Main)
            .unwrap_or(self.cfg.scales.len() - 1);
        let mut fused = Vec::with_capacity(self.cfg.levels);
        for i in 0..self.cfg.levels {
            let (th, tw) = (h >> (i + 1), w >> (i + 1));
            let aligned: Vec<Var> = per_scale
                .iter()
                .map(|levels| align_to_grid(f.tape, levels[i], th, tw, self.cfg.downsample))
                .collect::<Result<_>>()?;
            fused.push(match &self.fusion[i] {
                FusionUnit::Mhsiu(unit) => unit.forward(f, &aligned, aligned[residual_idx])?,
                FusionUnit::Addition => {
                    let mut acc = aligned[0];
                    for &v in &aligned[1..] {
                        acc = f.tape.add(acc, v)?;
                    }
                    acc
                }
            });
        }
        // Top-down refinement: coarsest level first, each finer level adds
        // the upsampled refinement from above.
        let mut above: Option<Var> = None;
        for i in (0..self.cfg.levels).rev() {
            above = Some(self.refine[i].forward(f, fused[i], above, clip)?);
        }
        let finest = above.expect("at least one level");
        let y = self.head1.forward(f, finest)?;
        let y = self.head2.forward(f, y)?;
        let logits_half = self.head_out.forward(f, y)?;
        let logits = f.tape.bilinear_resize(logits_half, h, w)?;
        let probs = f.tape.sigmoid(logits)?;
        Ok(ForwardOutput { logits, probs })
    }

    /// Inference convenience: probability map as a plain tensor.
    pub fn predict<E: Elem>(
        &self,
        store: &mut ParamStore<E>,
        x: &Tensor<E>,
        clip: bool,
    ) -> Result<Tensor<E>> {
        let mut tape = Tape::new();
        let bind = Binding::bind(&mut tape, store, false)?;
        let xv = tape.leaf(x, false)?;
        let mut f = Fwd {
            tape: &mut tape,
            store,
            bind: &bind,
            train: false,
        };
        let out = self.forward(&mut f, xv, clip)?;
        Ok(tape.value(out.probs).clone())
    }
}

/// Trainable scalar count for a config; a pure function of the config.
pub fn model_param_count(cfg: &ModelConfig) -> Result<usize> {
    let (store, _) = Model::build::<f32>(cfg, 0)?;
    Ok(store.trainable_scalars())
}

/// Resize a probability map to ground-truth size, clamped to [0, 1].
pub fn predict_to_gt_size<E: Elem>(pred: &Tensor<E>, gt_h: usize, gt_w: usize) -> Result<Tensor<E>> {
    let resized = crate::pyramid::resize_tensor(pred, gt_h, gt_w)?;
    Ok(resized.map(|v| v.max(E::zero()).min(E::one())))
}

/// Micro-model configuration used for end-to-end gradient verification.
pub fn micro_config() -> ModelConfig {
    ModelConfig {
        channels: 4,
        levels: 2,
        heads: 2,
        groups: 2,
        clip_len: 2,
        ..ModelConfig::default()
    }
}

/// Finite-difference check through the assembled micro model (clip of 2).
pub fn gradcheck_model(seed: u64, corrupt: bool) -> Result<f64> {
    let cfg = micro_config();
    let mut r = ChaCha8Rng::seed_from_u64(seed);
    use rand::Rng;
    let input = Tensor::from_fn(&[2, 3, 16, 16], |_| r.gen_range(0.0..1.0));
    let target = Tensor::from_fn(&[2, 1, 16, 16], |_| {
        if r.gen_bool(0.5) {
            1.0
        } else {
            0.0
        }
    });
    gradcheck_corrupt(
        |tape, vars| {
            let mut store = ParamStore::<f64>::new();
            let mut prng = ChaCha8Rng::seed_from_u64(seed ^ 0x0de1);
            let model = Model::new(&mut store, &cfg, &mut prng)?;
            let bind = Binding::bind(tape, &store, false)?;
            let mut f = Fwd {
                tape,
                store: &mut store,
                bind: &bind,
                train: true,
            };
            let out = model.forward(&mut f, vars[0], true)?;
            f.tape.bce_with_logits(out.logits, &target)
        },
        &[input],
        DEFAULT_EPS,
        corrupt,
    )
}

/// Training objective pieces shared by the trainer and tests: combined
/// loss variable plus the scalar weight actually applied to the auxiliary
/// term this step.
pub fn training_loss<E: Elem>(
    tape: &mut Tape<E>,
    out: &ForwardOutput,
    target: &Tensor<E>,
    ual: crate::losses::UalChoice,
    lambda: f64,
) -> Result<(Var, f64)> {
    use crate::losses::{bce_logits_loss, ual_loss, weighted_bce_loss, UalChoice};
    match ual {
        UalChoice::Off => Ok((bce_logits_loss(tape, out.logits, target)?, 0.0)),
        UalChoice::WeightedBce => Ok((weighted_bce_loss(tape, out.probs, target)?, 0.0)),
        UalChoice::Form(form) => {
            let bce = bce_logits_loss(tape, out.logits, target)?;
            let aux = ual_loss(tape, out.probs, form)?;
            let scaled = tape.mul_scalar(aux, lambda)?;
            Ok((tape.add(bce, scaled)?, lambda))
        }
    }
}
