//! Straight-line scalar transcriptions of the two fusion units.
//!
//! The references below spell out every convolution, normalization, and
//! blending step as plain nested loops over `f64` buffers. They share no
//! code with the library's tensor engine; agreement between the two paths
//! is therefore evidence that the engine computes what the architecture
//! says, not merely that the same code ran twice.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use znext_core::mhsiu::{Mhsiu, MhsiuConfig};
use znext_core::nn::{Binding, Fwd, ParamStore};
use znext_core::rgpu::{Rgpu, RgpuConfig};
use znext_core::tensor::{Tape, Tensor};

/// Batch-norm stabilizer used throughout the layer stack.
pub const BN_EPS: f64 = 1e-5;

/// Dense [N, C, H, W] buffer with row-major layout.
#[derive(Clone)]
pub struct Grid {
    pub n: usize,
    pub c: usize,
    pub h: usize,
    pub w: usize,
    pub data: Vec<f64>,
}

impl Grid {
    pub fn zeros(n: usize, c: usize, h: usize, w: usize) -> Grid {
        Grid {
            n,
            c,
            h,
            w,
            data: vec![0.0; n * c * h * w],
        }
    }

    pub fn at(&self, b: usize, ch: usize, y: usize, x: usize) -> f64 {
        self.data[((b * self.c + ch) * self.h + y) * self.w + x]
    }

    pub fn at_mut(&mut self, b: usize, ch: usize, y: usize, x: usize) -> &mut f64 {
        &mut self.data[((b * self.c + ch) * self.h + y) * self.w + x]
    }

    /// Channels [lo, lo+len) as a new grid.
    pub fn channel_slice(&self, lo: usize, len: usize) -> Grid {
        let mut out = Grid::zeros(self.n, len, self.h, self.w);
        for b in 0..self.n {
            for ch in 0..len {
                for y in 0..self.h {
                    for x in 0..self.w {
                        *out.at_mut(b, ch, y, x) = self.at(b, lo + ch, y, x);
                    }
                }
            }
        }
        out
    }

    pub fn concat_channels(parts: &[Grid]) -> Grid {
        let first = &parts[0];
        let total: usize = parts.iter().map(|p| p.c).sum();
        let mut out = Grid::zeros(first.n, total, first.h, first.w);
        let mut base = 0;
        for p in parts {
            assert_eq!((p.n, p.h, p.w), (first.n, first.h, first.w));
            for b in 0..p.n {
                for ch in 0..p.c {
                    for y in 0..p.h {
                        for x in 0..p.w {
                            *out.at_mut(b, base + ch, y, x) = p.at(b, ch, y, x);
                        }
                    }
                }
            }
            base += p.c;
        }
        out
    }

    pub fn add(&self, other: &Grid) -> Grid {
        assert_eq!(self.data.len(), other.data.len());
        let mut out = self.clone();
        for (a, &b) in out.data.iter_mut().zip(&other.data) {
            *a += b;
        }
        out
    }

    pub fn to_tensor(&self) -> Tensor<f64> {
        Tensor::new(&[self.n, self.c, self.h, self.w], self.data.clone()).unwrap()
    }

    /// Largest absolute elementwise difference against a library tensor.
    pub fn max_abs_diff(&self, t: &Tensor<f64>) -> f64 {
        assert_eq!(t.shape(), [self.n, self.c, self.h, self.w]);
        self.data
            .iter()
            .zip(t.data())
            .map(|(a, b)| (a - b).abs())
            .fold(0.0, f64::max)
    }
}

/// Uniform draw in [-1, 1]; the iteration order fixes the sample sequence.
pub fn rand_grid(rng: &mut ChaCha8Rng, n: usize, c: usize, h: usize, w: usize) -> Grid {
    let mut g = Grid::zeros(n, c, h, w);
    for v in &mut g.data {
        *v = rng.gen::<f64>() * 2.0 - 1.0;
    }
    g
}

/// A named parameter tensor, or a panic naming what was missing.
pub fn fetch<'a>(store: &'a ParamStore<f64>, name: &str) -> &'a Tensor<f64> {
    let r = store
        .find(name)
        .unwrap_or_else(|| panic!("parameter {name} not registered"));
    store.get(r)
}

/// Zero-padded cross-correlation with a [Cout, Cin, K, K] kernel,
/// single-group, square stride/padding.
pub fn conv2d_ref(
    x: &Grid,
    weight: &Tensor<f64>,
    bias: Option<&Tensor<f64>>,
    stride: usize,
    pad: usize,
) -> Grid {
    let ws = weight.shape();
    let (cout, cin, k) = (ws[0], ws[1], ws[2]);
    assert_eq!(ws[3], k);
    assert_eq!(cin, x.c, "kernel input width must match the grid");
    let oh = (x.h + 2 * pad - k) / stride + 1;
    let ow = (x.w + 2 * pad - k) / stride + 1;
    let wd = weight.data();
    let mut out = Grid::zeros(x.n, cout, oh, ow);
    for b in 0..x.n {
        for co in 0..cout {
            let b0 = bias.map_or(0.0, |t| t.data()[co]);
            for oy in 0..oh {
                for ox in 0..ow {
                    let mut acc = b0;
                    for ci in 0..cin {
                        for ky in 0..k {
                            for kx in 0..k {
                                let iy = (oy * stride + ky) as i64 - pad as i64;
                                let ix = (ox * stride + kx) as i64 - pad as i64;
                                if iy < 0 || iy >= x.h as i64 || ix < 0 || ix >= x.w as i64 {
                                    continue;
                                }
                                let wv = wd[((co * cin + ci) * k + ky) * k + kx];
                                acc += wv * x.at(b, ci, iy as usize, ix as usize);
                            }
                        }
                    }
                    *out.at_mut(b, co, oy, ox) = acc;
                }
            }
        }
    }
    out
}

/// Training-mode batch norm: per channel, mean and biased variance over
/// the N*H*W slice, then scale and shift.
pub fn bn_train_ref(x: &Grid, gamma: &Tensor<f64>, beta: &Tensor<f64>) -> Grid {
    let m = (x.n * x.h * x.w) as f64;
    let gd = gamma.data();
    let bd = beta.data();
    let mut out = x.clone();
    for ch in 0..x.c {
        let mut sum = 0.0;
        for b in 0..x.n {
            for y in 0..x.h {
                for xx in 0..x.w {
                    sum += x.at(b, ch, y, xx);
                }
            }
        }
        let mean = sum / m;
        let mut var = 0.0;
        for b in 0..x.n {
            for y in 0..x.h {
                for xx in 0..x.w {
                    let d = x.at(b, ch, y, xx) - mean;
                    var += d * d;
                }
            }
        }
        var /= m;
        let invstd = 1.0 / (var + BN_EPS).sqrt();
        for b in 0..x.n {
            for y in 0..x.h {
                for xx in 0..x.w {
                    let v = (x.at(b, ch, y, xx) - mean) * invstd;
                    *out.at_mut(b, ch, y, xx) = v * gd[ch] + bd[ch];
                }
            }
        }
    }
    out
}

pub fn relu_ref(x: &Grid) -> Grid {
    let mut out = x.clone();
    for v in &mut out.data {
        *v = v.max(0.0);
    }
    out
}

pub fn sigmoid_ref(x: &Grid) -> Grid {
    let mut out = x.clone();
    for v in &mut out.data {
        *v = 1.0 / (1.0 + (-*v).exp());
    }
    out
}

/// Channel-axis softmax per (batch, y, x) lane, with max subtraction.
pub fn softmax_channels_ref(x: &Grid) -> Grid {
    let mut out = x.clone();
    for b in 0..x.n {
        for y in 0..x.h {
            for xx in 0..x.w {
                let mut mx = f64::NEG_INFINITY;
                for ch in 0..x.c {
                    mx = mx.max(x.at(b, ch, y, xx));
                }
                let mut sum = 0.0;
                for ch in 0..x.c {
                    sum += (x.at(b, ch, y, xx) - mx).exp();
                }
                for ch in 0..x.c {
                    *out.at_mut(b, ch, y, xx) = (x.at(b, ch, y, xx) - mx).exp() / sum;
                }
            }
        }
    }
    out
}

/// Global average pool to a [N, C, 1, 1] grid.
pub fn avgpool_ref(x: &Grid) -> Grid {
    let mut out = Grid::zeros(x.n, x.c, 1, 1);
    let m = (x.h * x.w) as f64;
    for b in 0..x.n {
        for ch in 0..x.c {
            let mut sum = 0.0;
            for y in 0..x.h {
                for xx in 0..x.w {
                    sum += x.at(b, ch, y, xx);
                }
            }
            *out.at_mut(b, ch, 0, 0) = sum / m;
        }
    }
    out
}

/// Conv (no bias) -> training batch norm -> relu, reading the three
/// parameter tensors registered under `name`.
pub fn cbr_ref(x: &Grid, store: &ParamStore<f64>, name: &str, pad: usize) -> Grid {
    let conv = conv2d_ref(x, fetch(store, &format!("{name}.conv.weight")), None, 1, pad);
    let bn = bn_train_ref(
        &conv,
        fetch(store, &format!("{name}.bn.gamma")),
        fetch(store, &format!("{name}.bn.beta")),
    );
    relu_ref(&bn)
}

/// One randomized comparison of the multi-head scale-integration unit
/// against its transcription. Returns the largest absolute difference.
pub struct MhsiuCase {
    pub channels: usize,
    pub heads: usize,
    pub scales: usize,
    pub n: usize,
    pub h: usize,
    pub w: usize,
    pub seed: u64,
}

pub fn run_mhsiu_case(case: &MhsiuCase) -> f64 {
    let cfg = MhsiuConfig {
        channels: case.channels,
        heads: case.heads,
        scales: case.scales,
    };
    let mut store = ParamStore::<f64>::new();
    let mut wrng = ChaCha8Rng::seed_from_u64(case.seed);
    let unit = Mhsiu::new(&mut store, "siu", cfg, &mut wrng).unwrap();
    let mut drng = ChaCha8Rng::seed_from_u64(case.seed ^ 0xA5A5_5A5A);
    let feats: Vec<Grid> = (0..case.scales)
        .map(|_| rand_grid(&mut drng, case.n, case.channels, case.h, case.w))
        .collect();
    let residual = rand_grid(&mut drng, case.n, case.channels, case.h, case.w);

    // Library pass in training mode (batch statistics, as used by the
    // optimizer). Buffers mutate; weights do not, so the transcription can
    // read them afterwards.
    let mut tape = Tape::new();
    let bind = Binding::bind(&mut tape, &store, false).unwrap();
    let fvars: Vec<_> = feats
        .iter()
        .map(|g| tape.constant(&g.to_tensor()).unwrap())
        .collect();
    let rvar = tape.constant(&residual.to_tensor()).unwrap();
    let out = {
        let mut f = Fwd {
            tape: &mut tape,
            store: &mut store,
            bind: &bind,
            train: true,
        };
        unit.forward(&mut f, &fvars, rvar).unwrap()
    };
    let module_out = tape.value(out).clone();

    // Transcription: per head, gather chunk m of every scale, score with
    // the 3x3 block, soften across scales, transform with the 1x1 block,
    // blend, then concatenate heads, add the residual, renormalize, clamp.
    let s = case.channels / case.heads;
    let mut head_outs = Vec::with_capacity(case.heads);
    for m in 0..case.heads {
        let parts: Vec<Grid> = feats.iter().map(|ft| ft.channel_slice(m * s, s)).collect();
        let xm = Grid::concat_channels(&parts);
        let scores = cbr_ref(&xm, &store, &format!("siu.head{m}.score"), 1);
        let attn = softmax_channels_ref(&scores);
        let transformed = cbr_ref(&xm, &store, &format!("siu.head{m}.transform"), 0);
        let mut blended = Grid::zeros(case.n, s, case.h, case.w);
        for ki in 0..case.scales {
            let branch = transformed.channel_slice(ki * s, s);
            for b in 0..case.n {
                for ch in 0..s {
                    for y in 0..case.h {
                        for x in 0..case.w {
                            *blended.at_mut(b, ch, y, x) +=
                                attn.at(b, ki, y, x) * branch.at(b, ch, y, x);
                        }
                    }
                }
            }
        }
        head_outs.push(blended);
    }
    let merged = Grid::concat_channels(&head_outs);
    let with_res = merged.add(&residual);
    let post = bn_train_ref(
        &with_res,
        fetch(&store, "siu.post.gamma"),
        fetch(&store, "siu.post.beta"),
    );
    let final_out = relu_ref(&post);
    final_out.max_abs_diff(&module_out)
}

/// Every admissible (channels, heads) pair under 7 channels, crossed with
/// 1..=3 scales and a few batch/grid shapes; at least 100 cases.
pub fn mhsiu_cases() -> Vec<MhsiuCase> {
    let mut cases = Vec::new();
    let mut seed = 0u64;
    for &channels in &[2usize, 4, 6] {
        for heads in 1..=channels {
            if channels % heads != 0 {
                continue;
            }
            for scales in 1..=3 {
                for &(n, h, w) in &[(1usize, 3usize, 3usize), (2, 2, 4), (1, 4, 2), (2, 3, 3)] {
                    cases.push(MhsiuCase {
                        channels,
                        heads,
                        scales,
                        n,
                        h,
                        w,
                        seed,
                    });
                    seed += 1;
                }
            }
        }
    }
    cases
}

/// One randomized comparison of group iteration plus channel modulation
/// against the transcription. Returns the largest absolute difference over
/// every gate tensor, every content tensor, and the modulated output.
pub struct RgpuCase {
    pub channels: usize,
    pub groups: usize,
    pub n: usize,
    pub h: usize,
    pub w: usize,
    pub seed: u64,
}

pub fn run_rgpu_case(case: &RgpuCase) -> f64 {
    let cfg = RgpuConfig::image(case.channels, case.groups);
    let mut store = ParamStore::<f64>::new();
    let mut wrng = ChaCha8Rng::seed_from_u64(case.seed ^ 0x5EED);
    let unit = Rgpu::new(&mut store, "gpu", cfg, &mut wrng).unwrap();
    let mut drng = ChaCha8Rng::seed_from_u64(case.seed ^ 0xD00D);
    let fhat = rand_grid(&mut drng, case.n, case.channels, case.h, case.w);

    let mut tape = Tape::new();
    let bind = Binding::bind(&mut tape, &store, false).unwrap();
    let fvar = tape.constant(&fhat.to_tensor()).unwrap();
    let (gates, contents, modulated) = {
        let mut f = Fwd {
            tape: &mut tape,
            store: &mut store,
            bind: &bind,
            train: true,
        };
        let (gs, cs) = unit.group_iterate(&mut f, fvar).unwrap();
        let out = unit.channel_modulate(&mut f, &gs, &cs).unwrap();
        (gs, cs, out)
    };
    let gate_vals: Vec<Tensor<f64>> = gates.iter().map(|&v| tape.value(v).clone()).collect();
    let content_vals: Vec<Tensor<f64>> = contents.iter().map(|&v| tape.value(v).clone()).collect();
    let modulated_val = tape.value(modulated).clone();

    // Transcription of the iteration: expand to G*C channels, then walk the
    // groups, threading a C-channel message from each block to the next.
    let c = case.channels;
    let g = case.groups;
    let expanded = conv2d_ref(
        &fhat,
        fetch(&store, "gpu.expand.weight"),
        Some(fetch(&store, "gpu.expand.bias")),
        1,
        0,
    );
    let mut ref_gates: Vec<Grid> = Vec::with_capacity(g);
    let mut ref_contents: Vec<Grid> = Vec::with_capacity(g);
    let mut message: Option<Grid> = None;
    for i in 0..g {
        let seed_g = expanded.channel_slice(i * c, c);
        if i == 0 {
            let out = cbr_ref(&seed_g, &store, "gpu.group0", 1);
            message = Some(out.channel_slice(0, c));
            ref_gates.push(out.channel_slice(c, c));
            ref_contents.push(out.channel_slice(2 * c, c));
        } else if i < g - 1 {
            let joined = Grid::concat_channels(&[seed_g, message.take().unwrap()]);
            let out = cbr_ref(&joined, &store, &format!("gpu.group{i}"), 1);
            message = Some(out.channel_slice(0, c));
            ref_gates.push(out.channel_slice(c, c));
            ref_contents.push(out.channel_slice(2 * c, c));
        } else {
            let joined = Grid::concat_channels(&[seed_g, message.take().unwrap()]);
            let out = cbr_ref(&joined, &store, &format!("gpu.group{}", g - 1), 1);
            ref_gates.push(out.channel_slice(0, c));
            ref_contents.push(out.channel_slice(c, c));
        }
    }

    let mut worst = 0.0f64;
    for (r, v) in ref_gates.iter().zip(&gate_vals) {
        worst = worst.max(r.max_abs_diff(v));
    }
    for (r, v) in ref_contents.iter().zip(&content_vals) {
        worst = worst.max(r.max_abs_diff(v));
    }

    // Transcription of the modulation: pooled gates drive a two-layer
    // bottleneck whose sigmoid output scales the content channels before
    // the 1x1 reduction back to C.
    let gates_cat = Grid::concat_channels(&ref_gates);
    let content_cat = Grid::concat_channels(&ref_contents);
    let pooled = avgpool_ref(&gates_cat);
    let a = conv2d_ref(
        &pooled,
        fetch(&store, "gpu.gate_a.weight"),
        Some(fetch(&store, "gpu.gate_a.bias")),
        1,
        0,
    );
    let a = relu_ref(&a);
    let bgate = conv2d_ref(
        &a,
        fetch(&store, "gpu.gate_b.weight"),
        Some(fetch(&store, "gpu.gate_b.bias")),
        1,
        0,
    );
    let omega = sigmoid_ref(&bgate);
    let mut gated = content_cat.clone();
    for b in 0..gated.n {
        for ch in 0..gated.c {
            let scale = omega.at(b, ch, 0, 0);
            for y in 0..gated.h {
                for x in 0..gated.w {
                    *gated.at_mut(b, ch, y, x) *= scale;
                }
            }
        }
    }
    let reduced = conv2d_ref(
        &gated,
        fetch(&store, "gpu.reduce.weight"),
        Some(fetch(&store, "gpu.reduce.bias")),
        1,
        0,
    );
    worst.max(reduced.max_abs_diff(&modulated_val))
}

/// Channel widths 2..=4 crossed with 2..=5 groups and a few shapes; at
/// least 100 cases.
pub fn rgpu_cases() -> Vec<RgpuCase> {
    let mut cases = Vec::new();
    let mut seed = 1000u64;
    for &channels in &[2usize, 3, 4] {
        for groups in 2..=5 {
            for &(n, h, w) in &[
                (1usize, 3usize, 3usize),
                (2, 2, 4),
                (1, 4, 2),
                (2, 3, 3),
                (1, 2, 2),
                (1, 3, 4),
                (2, 4, 3),
                (1, 4, 4),
                (2, 2, 2),
            ] {
                cases.push(RgpuCase {
                    channels,
                    groups,
                    n,
                    h,
                    w,
                    seed,
                });
                seed += 1;
            }
        }
    }
    cases
}
