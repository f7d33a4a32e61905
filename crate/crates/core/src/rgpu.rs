//! Grouped granularity-perception unit with difference-driven temporal
//! routing.
//!
//! The static path expands a fused feature map into G channel groups,
//! mixes them iteratively (each group's block also digests a message from
//! the previous group), gates the collected outputs with a squeeze-style
//! channel modulation, reduces back to the working width, and refines
//! through a small fusion stack.
//!
//! The temporal path runs only on clips with more than one frame. It builds
//! an inter-frame difference signal X = shift(f) - f, mixes channels per
//! frame with a self-attention over the channel axis, and diffuses cues
//! across frames with a circular temporal convolution. Every temporal map
//! is bias-free, so a single frame (or a constant clip) yields an exactly
//! zero branch output and the unit degenerates bit-for-bit to the static
//! path.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::nn::{normal_init, Binding, Conv2d, ConvBnRelu, Fwd, ParamRef, ParamStore};
use crate::tensor::{
    gradcheck_corrupt, Elem, PoolKind, Result, Tape, Tensor, TensorError, Var, DEFAULT_EPS,
};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct RgpuConfig {
    /// Working channel width C.
    pub channels: usize,
    /// Feature groups G; at least 2.
    pub groups: usize,
    /// Clip length the unit is built for; 1 disables the temporal branch
    /// entirely (no temporal parameters are allocated).
    pub clip_len: usize,
    /// Ablation: replace the per-frame channel attention with identity.
    pub use_intraframe_attention: bool,
    /// Ablation: skip the circular cross-frame convolution.
    pub use_temporal_diffusion: bool,
    /// Ablation: feed the branch the raw features instead of the
    /// shift-difference signal.
    pub use_temporal_shift: bool,
}

impl RgpuConfig {
    pub fn image(channels: usize, groups: usize) -> Self {
        RgpuConfig {
            channels,
            groups,
            clip_len: 1,
            use_intraframe_attention: true,
            use_temporal_diffusion: true,
            use_temporal_shift: true,
        }
    }

    pub fn video(channels: usize, groups: usize, clip_len: usize) -> Self {
        RgpuConfig {
            clip_len,
            ..Self::image(channels, groups)
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.channels == 0 {
            return Err(TensorError::Invalid("channel width must be > 0".into()));
        }
        if self.groups < 2 {
            return Err(TensorError::Invalid(format!(
                "group-wise iteration needs at least 2 groups, got {}",
                self.groups
            )));
        }
        if self.clip_len == 0 {
            return Err(TensorError::Invalid("clip length must be >= 1".into()));
        }
        Ok(())
    }
}

struct TemporalParams {
    wq: ParamRef,
    wk: ParamRef,
    wv: ParamRef,
    kernel: ParamRef,
}

pub struct Rgpu {
    cfg: RgpuConfig,
    expand: Conv2d,
    /// Group 1 block: C -> 3C.
    first: ConvBnRelu,
    /// Middle blocks (one per group 2..G-1): 2C -> 3C.
    middle: Vec<ConvBnRelu>,
    /// Group G block: 2C -> 2C.
    last: ConvBnRelu,
    gate_a: Conv2d,
    gate_b: Conv2d,
    reduce: Conv2d,
    fuse1: ConvBnRelu,
    fuse2: ConvBnRelu,
    temporal: Option<TemporalParams>,
}

impl Rgpu {
    pub fn new<E: Elem>(
        store: &mut ParamStore<E>,
        name: &str,
        cfg: RgpuConfig,
        rng: &mut ChaCha8Rng,
    ) -> Result<Self> {
        cfg.validate()?;
        let c = cfg.channels;
        let g = cfg.groups;
        let gc = g * c;
        let hidden = (gc / 4).max(1);
        let expand = Conv2d::new(store, &format!("{name}.expand"), c, gc, 1, 1, 0, 1, true, rng);
        let first = ConvBnRelu::new(store, &format!("{name}.group0"), c, 3 * c, 3, 1, 1, rng);
        let middle = (1..g - 1)
            .map(|i| {
                ConvBnRelu::new(store, &format!("{name}.group{i}"), 2 * c, 3 * c, 3, 1, 1, rng)
            })
            .collect();
        let last = ConvBnRelu::new(
            store,
            &format!("{name}.group{}", g - 1),
            2 * c,
            2 * c,
            3,
            1,
            1,
            rng,
        );
        let gate_a = Conv2d::new(store, &format!("{name}.gate_a"), gc, hidden, 1, 1, 0, 1, true, rng);
        let gate_b = Conv2d::new(store, &format!("{name}.gate_b"), hidden, gc, 1, 1, 0, 1, true, rng);
        let reduce = Conv2d::new(store, &format!("{name}.reduce"), gc, c, 1, 1, 0, 1, true, rng);
        let fuse1 = ConvBnRelu::new(store, &format!("{name}.fuse1"), c, c, 3, 1, 1, rng);
        let fuse2 = ConvBnRelu::new(store, &format!("{name}.fuse2"), c, c, 3, 1, 1, rng);
        let temporal = (cfg.clip_len > 1).then(|| {
            let lin_std = (1.0 / c as f64).sqrt();
            let conv_std = (2.0 / (c * cfg.clip_len * 9) as f64).sqrt();
            TemporalParams {
                wq: store.add(&format!("{name}.wq"), normal_init(&[c, c], lin_std, rng)),
                wk: store.add(&format!("{name}.wk"), normal_init(&[c, c], lin_std, rng)),
                wv: store.add(&format!("{name}.wv"), normal_init(&[c, c], lin_std, rng)),
                kernel: store.add(
                    &format!("{name}.tkernel"),
                    normal_init(&[c, c, cfg.clip_len, 3, 3], conv_std, rng),
                ),
            }
        });
        Ok(Rgpu {
            cfg,
            expand,
            first,
            middle,
            last,
            gate_a,
            gate_b,
            reduce,
            fuse1,
            fuse2,
            temporal,
        })
    }

    pub fn config(&self) -> RgpuConfig {
        self.cfg
    }

    /// Iterative group mixing. Returns the gate set and the content set,
    /// each with G entries of C channels.
    pub fn group_iterate<E: Elem>(
        &self,
        f: &mut Fwd<'_, E>,
        fhat: Var,
    ) -> Result<(Vec<Var>, Vec<Var>)> {
        let c = self.cfg.channels;
        let g = self.cfg.groups;
        let expanded = self.expand.forward(f, fhat)?;
        let seeds = f.tape.split(expanded, 1, &vec![c; g])?;
        let mut gate_set = Vec::with_capacity(g);
        let mut content_set = Vec::with_capacity(g);
        let mut message = None;
        for (i, &seed) in seeds.iter().enumerate() {
            if i == 0 {
                let out = self.first.forward(f, seed)?;
                let parts = f.tape.split(out, 1, &[c, c, c])?;
                message = Some(parts[0]);
                gate_set.push(parts[1]);
                content_set.push(parts[2]);
            } else if i < g - 1 {
                let joined = f.tape.concat(1, &[seed, message.unwrap()])?;
                let out = self.middle[i - 1].forward(f, joined)?;
                let parts = f.tape.split(out, 1, &[c, c, c])?;
                message = Some(parts[0]);
                gate_set.push(parts[1]);
                content_set.push(parts[2]);
            } else {
                let joined = f.tape.concat(1, &[seed, message.unwrap()])?;
                let out = self.last.forward(f, joined)?;
                let parts = f.tape.split(out, 1, &[c, c])?;
                gate_set.push(parts[0]);
                content_set.push(parts[1]);
            }
        }
        Ok((gate_set, content_set))
    }

    /// Channel-wise modulation: a global gate derived from the gate set
    /// scales the concatenated content set, which is then reduced to C
    /// channels.
    pub fn channel_modulate<E: Elem>(
        &self,
        f: &mut Fwd<'_, E>,
        gate_set: &[Var],
        content_set: &[Var],
    ) -> Result<Var> {
        let gates = f.tape.concat(1, gate_set)?;
        let content = f.tape.concat(1, content_set)?;
        let pooled = f.tape.adaptive_pool(gates, 1, 1, PoolKind::Avg)?;
        let h = self.gate_a.forward(f, pooled)?;
        let h = f.tape.relu(h)?;
        let h = self.gate_b.forward(f, h)?;
        let omega = f.tape.sigmoid(h)?;
        let gated = f.tape.mul(omega, content)?;
        self.reduce.forward(f, gated)
    }

    /// Difference-driven temporal mixing over a clip [T, C, h, w].
    pub fn temporal_branch<E: Elem>(&self, f: &mut Fwd<'_, E>, ftilde: Var) -> Result<Var> {
        let params = self.temporal.as_ref().ok_or_else(|| {
            TensorError::Invalid("temporal branch requested on an image-mode unit".into())
        })?;
        let shape = f.tape.shape(ftilde).to_vec();
        let (t, c, h, w) = (shape[0], shape[1], shape[2], shape[3]);
        if c != self.cfg.channels {
            return Err(TensorError::shape(
                "temporal_branch",
                format!("expected {} channels, got {c}", self.cfg.channels),
            ));
        }
        let x = if self.cfg.use_temporal_shift {
            let shifted = f.tape.shift_frames(ftilde)?;
            f.tape.sub(shifted, ftilde)?
        } else {
            ftilde
        };
        let z = if self.cfg.use_intraframe_attention {
            let hw = h * w;
            let scale = 1.0 / (hw as f64).sqrt();
            let wq = f.bind.var(params.wq);
            let wk = f.bind.var(params.wk);
            let wv = f.bind.var(params.wv);
            let mut frames = Vec::with_capacity(t);
            for ti in 0..t {
                let frame = f.tape.narrow(x, 0, ti, 1)?;
                let flat = f.tape.reshape(frame, &[c, hw])?;
                let xt = f.tape.transpose2d(flat)?; // [hw, C]
                let q = f.tape.matmul(xt, wq)?;
                let k = f.tape.matmul(xt, wk)?;
                let v = f.tape.matmul(xt, wv)?;
                let kt = f.tape.transpose2d(k)?;
                let scores = f.tape.matmul(kt, q)?;
                let scores = f.tape.mul_scalar(scores, scale)?;
                // Normalize over the key-channel axis: every column of the
                // C x C matrix sums to one, so Z's channels are convex
                // mixtures of V's channels.
                let s = f.tape.softmax(scores, 0)?;
                let zt = f.tape.matmul(v, s)?; // [hw, C]
                let zt = f.tape.transpose2d(zt)?;
                frames.push(f.tape.reshape(zt, &[1, c, h, w])?);
            }
            f.tape.concat(0, &frames)?
        } else {
            x
        };
        if self.cfg.use_temporal_diffusion {
            let kernel = f.bind.var(params.kernel);
            f.tape.temporal_conv_circular(z, kernel)
        } else {
            Ok(z)
        }
    }

    /// Full unit. `clip` marks the batch axis as time; the temporal branch
    /// runs only when `clip` holds and more than one frame is present.
    pub fn forward<E: Elem>(
        &self,
        f: &mut Fwd<'_, E>,
        f_fused: Var,
        f_above: Option<Var>,
        clip: bool,
    ) -> Result<Var> {
        let fhat = rgpu_input(f.tape, f_fused, f_above)?;
        let (gate_set, content_set) = self.group_iterate(f, fhat)?;
        let mut ftilde = self.channel_modulate(f, &gate_set, &content_set)?;
        let frames = f.tape.shape(fhat)[0];
        if clip && frames > 1 {
            if self.cfg.clip_len != frames {
                return Err(TensorError::shape(
                    "rgpu",
                    format!(
                        "unit built for clips of {}, got {frames} frames",
                        self.cfg.clip_len
                    ),
                ));
            }
            let branch = self.temporal_branch(f, ftilde)?;
            ftilde = f.tape.add(ftilde, branch)?;
        }
        let merged = f.tape.add(fhat, ftilde)?;
        let y = self.fuse1.forward(f, merged)?;
        self.fuse2.forward(f, y)
    }
}

/// Residual wiring between pyramid levels: the fused feature of this level
/// plus the upsampled refinement from the level above (when present).
pub fn rgpu_input<E: Elem>(
    tape: &mut Tape<E>,
    f_fused: Var,
    f_above: Option<Var>,
) -> Result<Var> {
    let Some(above) = f_above else {
        return Ok(f_fused);
    };
    let target = tape.shape(f_fused).to_vec();
    let src = tape.shape(above).to_vec();
    if src.len() != 4 || target.len() != 4 || src[1] != target[1] {
        return Err(TensorError::shape(
            "rgpu_input",
            format!("channel mismatch: {src:?} vs {target:?}"),
        ));
    }
    let up = tape.bilinear_resize(above, target[2], target[3])?;
    tape.add(f_fused, up)
}

/// Trainable scalar count of one unit (conv weights and biases, batch-norm
/// affine pairs, temporal maps; running statistics excluded).
pub fn rgpu_param_count(cfg: RgpuConfig) -> usize {
    let c = cfg.channels;
    let g = cfg.groups;
    let gc = g * c;
    let hidden = (gc / 4).max(1);
    let expand = c * gc + gc;
    let first = c * 3 * c * 9 + 2 * 3 * c;
    let middle = (g - 2) * (2 * c * 3 * c * 9 + 2 * 3 * c);
    let last = 2 * c * 2 * c * 9 + 2 * 2 * c;
    let gate = gc * hidden + hidden + hidden * gc + gc;
    let reduce = gc * c + c;
    let fuse = 2 * (c * c * 9 + 2 * c);
    let temporal = if cfg.clip_len > 1 {
        3 * c * c + c * c * cfg.clip_len * 9
    } else {
        0
    };
    expand + first + middle + last + gate + reduce + fuse + temporal
}

fn random_tensor(r: &mut ChaCha8Rng, shape: &[usize]) -> Tensor<f64> {
    use rand::Rng;
    Tensor::from_fn(shape, |_| r.gen_range(-1.0..1.0))
}

fn gradcheck_rgpu(seed: u64, corrupt: bool, cfg: RgpuConfig, frames: usize) -> Result<f64> {
    let mut r = ChaCha8Rng::seed_from_u64(seed);
    let c = cfg.channels;
    let inputs = vec![
        random_tensor(&mut r, &[frames, c, 4, 4]),
        random_tensor(&mut r, &[frames, c, 2, 2]),
    ];
    let clip = frames > 1;
    gradcheck_corrupt(
        |tape, vars| {
            let mut store = ParamStore::<f64>::new();
            let mut prng = ChaCha8Rng::seed_from_u64(seed ^ 0x96b0);
            let unit = Rgpu::new(&mut store, "gpu", cfg, &mut prng)?;
            let bind = Binding::bind(tape, &store, false)?;
            let mut f = Fwd {
                tape,
                store: &mut store,
                bind: &bind,
                train: true,
            };
            let out = unit.forward(&mut f, vars[0], Some(vars[1]), clip)?;
            let wshape = f.tape.shape(out).to_vec();
            let mut wr = ChaCha8Rng::seed_from_u64(seed ^ 0x77aa);
            let w = random_tensor(&mut wr, &wshape);
            let wv = f.tape.constant(&w)?;
            let prod = f.tape.mul(out, wv)?;
            f.tape.mean_all(prod)
        },
        &inputs,
        DEFAULT_EPS,
        corrupt,
    )
}

/// Finite-difference check of the static path (single image, G=2).
pub fn gradcheck_rgpu_static(seed: u64, corrupt: bool) -> Result<f64> {
    gradcheck_rgpu(seed, corrupt, RgpuConfig::image(2, 2), 1)
}

/// Finite-difference check of the full clip path (G=2, T=2).
pub fn gradcheck_rgpu_temporal(seed: u64, corrupt: bool) -> Result<f64> {
    gradcheck_rgpu(seed, corrupt, RgpuConfig::video(2, 2, 2), 2)
}
