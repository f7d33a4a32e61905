//! Multi-head scale-integration unit.
//!
//! Fuses the per-level features of all pyramid scales (already aligned to one
//! grid) into a single map. Heads partition the channel axis: head m sees the
//! m-th channel chunk of every scale, scores each scale per pixel with a 3x3
//! block followed by a softmax across scales, transforms the chunks with a
//! 1x1 block, and blends the transformed scales under the attention weights.
//! Head outputs are concatenated back to the full width, a residual from the
//! reference scale is added, and the sum is renormalized.
//!
//! With the full channel width C, M heads, and K scales, the per-head
//! attention stack costs the same total no matter how many heads there are,
//! while the transform cost shrinks as heads multiply — so the trainable
//! parameter count is non-increasing in M.

use rand_chacha::ChaCha8Rng;
use rand::SeedableRng;

use crate::nn::{BatchNorm2d, Binding, ConvBnRelu, Fwd, ParamStore};
use crate::tensor::{gradcheck_corrupt, Elem, Result, Tensor, TensorError, Var, DEFAULT_EPS};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct MhsiuConfig {
    /// Channel width of every input scale and of the output.
    pub channels: usize,
    /// Attention heads; must divide `channels`.
    pub heads: usize,
    /// Number of scales fused.
    pub scales: usize,
}

impl MhsiuConfig {
    pub fn validate(&self) -> Result<()> {
        if self.channels == 0 || self.heads == 0 || self.scales == 0 {
            return Err(TensorError::Invalid(
                "scale-integration channels, heads, and scales must be > 0".into(),
            ));
        }
        if self.channels % self.heads != 0 {
            return Err(TensorError::Invalid(format!(
                "heads ({}) must divide channels ({})",
                self.heads, self.channels
            )));
        }
        Ok(())
    }

    fn chunk(&self) -> usize {
        self.channels / self.heads
    }
}

struct Head {
    /// K*(C/M) -> K per-pixel scale scores.
    score: ConvBnRelu,
    /// K*(C/M) -> K*(C/M) channel transform, split into K scale branches.
    transform: ConvBnRelu,
}

pub struct Mhsiu {
    cfg: MhsiuConfig,
    heads: Vec<Head>,
    post: BatchNorm2d,
}

impl Mhsiu {
    pub fn new<E: Elem>(
        store: &mut ParamStore<E>,
        name: &str,
        cfg: MhsiuConfig,
        rng: &mut ChaCha8Rng,
    ) -> Result<Self> {
        cfg.validate()?;
        let s = cfg.chunk();
        let kin = cfg.scales * s;
        let mut heads = Vec::with_capacity(cfg.heads);
        for m in 0..cfg.heads {
            let base = format!("{name}.head{m}");
            heads.push(Head {
                score: ConvBnRelu::new(
                    store,
                    &format!("{base}.score"),
                    kin,
                    cfg.scales,
                    3,
                    1,
                    1,
                    rng,
                ),
                transform: ConvBnRelu::new(
                    store,
                    &format!("{base}.transform"),
                    kin,
                    kin,
                    1,
                    1,
                    0,
                    rng,
                ),
            });
        }
        let post = BatchNorm2d::new(store, &format!("{name}.post"), cfg.channels);
        Ok(Mhsiu { cfg, heads, post })
    }

    /// Fuse aligned per-scale features. `feats[k]` is [N, C, H, W]; all must
    /// share one shape. `residual` is the reference-scale feature on the same
    /// grid, added after the heads.
    pub fn forward<E: Elem>(
        &self,
        f: &mut Fwd<'_, E>,
        feats: &[Var],
        residual: Var,
    ) -> Result<Var> {
        if feats.len() != self.cfg.scales {
            return Err(TensorError::shape(
                "mhsiu",
                format!("expected {} scales, got {}", self.cfg.scales, feats.len()),
            ));
        }
        let shape = f.tape.shape(feats[0]).to_vec();
        if shape.len() != 4 || shape[1] != self.cfg.channels {
            return Err(TensorError::shape(
                "mhsiu",
                format!(
                    "expected [N, {}, H, W] features, got {shape:?}",
                    self.cfg.channels
                ),
            ));
        }
        for &v in feats.iter().chain(std::iter::once(&residual)) {
            if f.tape.shape(v) != shape.as_slice() {
                return Err(TensorError::shape(
                    "mhsiu",
                    format!(
                        "scale features and residual must share a shape; {:?} vs {:?}",
                        f.tape.shape(v),
                        shape
                    ),
                ));
            }
        }
        let s = self.cfg.chunk();
        let k = self.cfg.scales;
        let mut head_outs = Vec::with_capacity(self.cfg.heads);
        for (m, head) in self.heads.iter().enumerate() {
            // Chunk m of every scale, concatenated: [N, K*s, H, W].
            let parts: Vec<Var> = feats
                .iter()
                .map(|&v| f.tape.narrow(v, 1, m * s, s))
                .collect::<Result<_>>()?;
            let xm = f.tape.concat(1, &parts)?;
            let scores = head.score.forward(f, xm)?;
            let attn = f.tape.softmax(scores, 1)?;
            let transformed = head.transform.forward(f, xm)?;
            let branches = f.tape.split(transformed, 1, &vec![s; k])?;
            let mut blended: Option<Var> = None;
            for (ki, &branch) in branches.iter().enumerate() {
                let a = f.tape.narrow(attn, 1, ki, 1)?;
                let weighted = f.tape.mul(a, branch)?;
                blended = Some(match blended {
                    None => weighted,
                    Some(acc) => f.tape.add(acc, weighted)?,
                });
            }
            head_outs.push(blended.expect("at least one scale"));
        }
        let merged = if head_outs.len() == 1 {
            head_outs[0]
        } else {
            f.tape.concat(1, &head_outs)?
        };
        let with_res = f.tape.add(merged, residual)?;
        let normed = self.post.forward(f, with_res)?;
        f.tape.relu(normed)
    }
}

/// Trainable scalar count of one unit (convolution weights plus batch-norm
/// affine pairs; running statistics excluded).
pub fn mhsiu_param_count(cfg: MhsiuConfig) -> usize {
    let (c, m, k) = (cfg.channels, cfg.heads, cfg.scales);
    let s = c / m;
    let kin = k * s;
    let score = kin * k * 9 + 2 * k;
    let transform = kin * kin + 2 * kin;
    m * (score + transform) + 2 * c
}

/// Finite-difference check of the full unit at 64-bit precision.
pub fn gradcheck_mhsiu(seed: u64, corrupt: bool) -> Result<f64> {
    let cfg = MhsiuConfig {
        channels: 4,
        heads: 2,
        scales: 3,
    };
    let mut r = ChaCha8Rng::seed_from_u64(seed);
    let shape = [1usize, cfg.channels, 4, 4];
    let mut inputs: Vec<Tensor<f64>> = Vec::new();
    for _ in 0..cfg.scales + 1 {
        inputs.push(Tensor::from_fn(&shape, |_| {
            use rand::Rng;
            r.gen_range(-1.0..1.0)
        }));
    }
    gradcheck_corrupt(
        |tape, vars| {
            let mut store = ParamStore::<f64>::new();
            let mut prng = ChaCha8Rng::seed_from_u64(seed ^ 0x517e);
            let unit = Mhsiu::new(&mut store, "siu", cfg, &mut prng)?;
            let bind = Binding::bind(tape, &store, false)?;
            let mut f = Fwd {
                tape,
                store: &mut store,
                bind: &bind,
                train: true,
            };
            let out = unit.forward(&mut f, &vars[..cfg.scales], vars[cfg.scales])?;
            // Weighted reduction so per-element gradients cannot cancel.
            let wshape = f.tape.shape(out).to_vec();
            let mut wr = ChaCha8Rng::seed_from_u64(seed ^ 0x3b1e);
            let w = Tensor::from_fn(&wshape, |_| {
                use rand::Rng;
                wr.gen_range(-1.0..1.0)
            });
            let wv = f.tape.constant(&w)?;
            let prod = f.tape.mul(out, wv)?;
            f.tape.mean_all(prod)
        },
        &inputs,
        DEFAULT_EPS,
        corrupt,
    )
}
