//! Multi-scale input pyramid and grid alignment.
//!
//! The model consumes each frame at 0.5x, 1.0x, and 1.5x resolution. Encoder
//! outputs from the auxiliary scales are aligned back onto the 1.0x feature
//! grid before fusion: the 0.5x stream is bilinearly upsampled, and the
//! 1.5x stream is downsampled with a configurable operator whose default
//! averages adaptive max and adaptive mean pooling.

use crate::tensor::{Elem, Result, Tape, Tensor, TensorError, Var};

/// Relative input scale of one pyramid level.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Scale {
    Half,
    Main,
    OneAndHalf,
}

impl Scale {
    pub const ALL: [Scale; 3] = [Scale::Half, Scale::Main, Scale::OneAndHalf];

    pub fn factor(self) -> f64 {
        match self {
            Scale::Half => 0.5,
            Scale::Main => 1.0,
            Scale::OneAndHalf => 1.5,
        }
    }

    /// Spatial size of this level for a main-scale size `n`.
    pub fn dim(self, n: usize) -> usize {
        match self {
            Scale::Half => n / 2,
            Scale::Main => n,
            Scale::OneAndHalf => n + n / 2,
        }
    }

    pub fn label(self) -> &'static str {
        match self {
            Scale::Half => "0.5x",
            Scale::Main => "1.0x",
            Scale::OneAndHalf => "1.5x",
        }
    }

    /// Parse a scale label; the trailing `x` is optional.
    pub fn from_label(s: &str) -> Option<Scale> {
        match s.trim().trim_end_matches('x') {
            "0.5" => Some(Scale::Half),
            "1.0" | "1" => Some(Scale::Main),
            "1.5" => Some(Scale::OneAndHalf),
            _ => None,
        }
    }
}

/// How the 1.5x stream is brought down to the main grid.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum DownsampleMode {
    /// Mean of adaptive max pooling and adaptive average pooling.
    Hybrid,
    Max,
    Avg,
    Bilinear,
}

impl DownsampleMode {
    /// Parse a mode name, case-insensitively.
    pub fn from_name(s: &str) -> Option<DownsampleMode> {
        match s.trim().to_ascii_lowercase().as_str() {
            "hybrid" => Some(DownsampleMode::Hybrid),
            "max" => Some(DownsampleMode::Max),
            "avg" => Some(DownsampleMode::Avg),
            "bilinear" => Some(DownsampleMode::Bilinear),
            _ => None,
        }
    }
}

/// Minimum main-scale height/width for dataset images. Network internals
/// only need divisibility (see `validate_grid`), which keeps tiny
/// gradient-check models legal.
pub const MIN_INPUT_SIDE: usize = 32;

/// Validate a dataset-facing image size: at least `MIN_INPUT_SIDE` and
/// divisible by 4.
pub fn validate_input_size(h: usize, w: usize) -> Result<()> {
    for (name, n) in [("height", h), ("width", w)] {
        if n < MIN_INPUT_SIDE || n % 4 != 0 {
            return Err(TensorError::Invalid(format!(
                "input {name} {n} must be >= {MIN_INPUT_SIDE} and divisible by 4"
            )));
        }
    }
    Ok(())
}

/// Structural requirement for pyramid construction: dims divisible by 4 so
/// every scale lands on an integral grid.
pub fn validate_grid(h: usize, w: usize) -> Result<()> {
    for (name, n) in [("height", h), ("width", w)] {
        if n == 0 || n % 4 != 0 {
            return Err(TensorError::Invalid(format!(
                "input {name} {n} must be positive and divisible by 4"
            )));
        }
    }
    Ok(())
}

/// The three scaled views of one batch, as tape variables.
pub struct ScalePyramid {
    views: Vec<(Scale, Var)>,
}

impl ScalePyramid {
    pub fn get(&self, s: Scale) -> Option<Var> {
        self.views.iter().find(|(k, _)| *k == s).map(|(_, v)| *v)
    }

    pub fn scales(&self) -> Vec<Scale> {
        self.views.iter().map(|(k, _)| *k).collect()
    }
}

/// Build the scaled views of `x` ([N, C, H, W]) for the requested scales.
/// The main view aliases `x` directly (no resampling); auxiliary views are
/// produced by bilinear interpolation.
pub fn build_pyramid<E: Elem>(
    tape: &mut Tape<E>,
    x: Var,
    scales: &[Scale],
) -> Result<ScalePyramid> {
    let shape = tape.shape(x).to_vec();
    if shape.len() != 4 {
        return Err(TensorError::shape(
            "build_pyramid",
            format!("expected [N, C, H, W] input, got {shape:?}"),
        ));
    }
    let (h, w) = (shape[2], shape[3]);
    validate_grid(h, w)?;
    let mut views = Vec::with_capacity(scales.len());
    for &s in scales {
        let v = match s {
            Scale::Main => x,
            _ => tape.bilinear_resize(x, s.dim(h), s.dim(w))?,
        };
        views.push((s, v));
    }
    Ok(ScalePyramid { views })
}

/// Downsample `x` to `(oh, ow)` by averaging adaptive max and average pools.
pub fn hybrid_downsample<E: Elem>(
    tape: &mut Tape<E>,
    x: Var,
    oh: usize,
    ow: usize,
) -> Result<Var> {
    let mx = tape.adaptive_pool(x, oh, ow, crate::tensor::PoolKind::Max)?;
    let av = tape.adaptive_pool(x, oh, ow, crate::tensor::PoolKind::Avg)?;
    let sum = tape.add(mx, av)?;
    tape.mul_scalar(sum, 0.5)
}

/// Resample a feature map to the target grid `(oh, ow)`: upsampling is
/// always bilinear, downsampling uses the configured mode, and a size match
/// passes through untouched.
pub fn align_to_grid<E: Elem>(
    tape: &mut Tape<E>,
    x: Var,
    oh: usize,
    ow: usize,
    mode: DownsampleMode,
) -> Result<Var> {
    let shape = tape.shape(x).to_vec();
    if shape.len() != 4 {
        return Err(TensorError::shape(
            "align_to_grid",
            format!("expected [N, C, H, W] input, got {shape:?}"),
        ));
    }
    let (h, w) = (shape[2], shape[3]);
    if h == oh && w == ow {
        return Ok(x);
    }
    if oh > h || ow > w {
        // Mixed aspect changes never occur on pyramid grids; treat any
        // enlargement as upsampling.
        return tape.bilinear_resize(x, oh, ow);
    }
    match mode {
        DownsampleMode::Hybrid => hybrid_downsample(tape, x, oh, ow),
        DownsampleMode::Max => tape.adaptive_pool(x, oh, ow, crate::tensor::PoolKind::Max),
        DownsampleMode::Avg => tape.adaptive_pool(x, oh, ow, crate::tensor::PoolKind::Avg),
        DownsampleMode::Bilinear => tape.bilinear_resize(x, oh, ow),
    }
}

/// Plain-tensor bilinear resize, for data preparation outside the tape.
pub fn resize_tensor<E: Elem>(x: &Tensor<E>, oh: usize, ow: usize) -> Result<Tensor<E>> {
    let mut tape = Tape::new();
    let v = tape.constant(x)?;
    let out = tape.bilinear_resize(v, oh, ow)?;
    Ok(tape.value(out).clone())
}
