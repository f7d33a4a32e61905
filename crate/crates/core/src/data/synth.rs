//! Synthetic camouflage data: background and object share one noise-texture
//! process and differ only by a mean-intensity shift of δ, so the object is
//! invisible to simple thresholding at small δ. Masks are exact elliptical
//! unions; video clips translate each object along a seeded random walk.

use std::path::{Path, PathBuf};

use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::{manifest, netpbm, Frame, LoadedSample};
use crate::tensor::{elem, Elem, Result, Tensor, TensorError};

#[derive(Debug, Clone, PartialEq)]
pub struct SyntheticSpec {
    /// Number of samples (images, or clips in video mode).
    pub count: usize,
    /// Square image side; must be divisible by 4 and at least 32.
    pub side: usize,
    /// Mean-intensity gap between object and background, in (0, 0.5].
    pub contrast: f64,
    /// Frames per sample; 1 selects image mode.
    pub clip_len: usize,
    pub seed: u64,
}

impl Default for SyntheticSpec {
    fn default() -> Self {
        SyntheticSpec {
            count: 16,
            side: 64,
            contrast: 0.3,
            clip_len: 1,
            seed: 0,
        }
    }
}

impl SyntheticSpec {
    pub fn validate(&self) -> Result<()> {
        if self.side < 32 || self.side % 4 != 0 {
            return Err(TensorError::Invalid(format!(
                "side must be >= 32 and divisible by 4, got {}",
                self.side
            )));
        }
        if !(self.contrast > 0.0 && self.contrast <= 0.5) {
            return Err(TensorError::Invalid(format!(
                "contrast must lie in (0, 0.5], got {}",
                self.contrast
            )));
        }
        if self.clip_len == 0 {
            return Err(TensorError::Invalid("clip_len must be at least 1".into()));
        }
        Ok(())
    }
}

/// Amplitude of the coarse (smoothed) noise component.
const COARSE_AMP: f64 = 0.15;
/// Amplitude of the per-pixel fine noise component.
const FINE_AMP: f64 = 0.03;
/// Grid spacing of the coarse noise in pixels.
const COARSE_STEP: usize = 8;
/// Maximum per-axis object drift per frame in pixels (Euclidean <= 4).
const MAX_DRIFT: i64 = 2;

/// A smooth random field in [-1, 1]: coarse grid noise, bilinearly
/// interpolated, plus a little per-pixel noise.
struct TextureField {
    side: usize,
    grid: Vec<f64>,
    gside: usize,
    fine: Vec<f64>,
}

impl TextureField {
    fn draw(side: usize, rng: &mut ChaCha8Rng) -> Self {
        let gside = side / COARSE_STEP + 2;
        let grid = (0..gside * gside)
            .map(|_| rng.gen_range(-1.0..1.0))
            .collect();
        let fine = (0..side * side)
            .map(|_| rng.gen_range(-1.0..1.0))
            .collect();
        TextureField {
            side,
            grid,
            gside,
            fine,
        }
    }

    /// Sample at integer pixel coordinates, clamped to the image.
    fn at(&self, y: i64, x: i64) -> f64 {
        let s = self.side as i64;
        let y = y.clamp(0, s - 1) as usize;
        let x = x.clamp(0, s - 1) as usize;
        let gy = y as f64 / COARSE_STEP as f64;
        let gx = x as f64 / COARSE_STEP as f64;
        let (iy, ix) = (gy.floor() as usize, gx.floor() as usize);
        let (fy, fx) = (gy - iy as f64, gx - ix as f64);
        let g = |r: usize, c: usize| self.grid[r.min(self.gside - 1) * self.gside + c.min(self.gside - 1)];
        let coarse = (1.0 - fy) * ((1.0 - fx) * g(iy, ix) + fx * g(iy, ix + 1))
            + fy * ((1.0 - fx) * g(iy + 1, ix) + fx * g(iy + 1, ix + 1));
        COARSE_AMP * coarse + FINE_AMP * self.fine[y * self.side + x]
    }
}

#[derive(Clone)]
struct Ellipse {
    cy: f64,
    cx: f64,
    a: f64,
    b: f64,
    cos: f64,
    sin: f64,
}

impl Ellipse {
    fn contains(&self, y: f64, x: f64) -> bool {
        let dy = y - self.cy;
        let dx = x - self.cx;
        let u = (dx * self.cos + dy * self.sin) / self.a;
        let v = (-dx * self.sin + dy * self.cos) / self.b;
        u * u + v * v <= 1.0
    }

    fn max_extent(&self) -> f64 {
        self.a.max(self.b)
    }
}

fn draw_ellipses(side: usize, rng: &mut ChaCha8Rng) -> Vec<Ellipse> {
    let s = side as f64;
    let n = rng.gen_range(1..=3);
    (0..n)
        .map(|_| {
            let a = rng.gen_range(s / 8.0..s / 5.0);
            let b = rng.gen_range(s / 8.0..s / 5.0);
            let margin = a.max(b) + 1.0;
            let cy = rng.gen_range(margin..s - margin);
            let cx = rng.gen_range(margin..s - margin);
            let phi = rng.gen_range(0.0..std::f64::consts::PI);
            Ellipse {
                cy,
                cx,
                a,
                b,
                cos: phi.cos(),
                sin: phi.sin(),
            }
        })
        .collect()
}

fn rasterize_mask<E: Elem>(side: usize, ellipses: &[Ellipse]) -> Tensor<E> {
    Tensor::from_fn(&[1, side, side], |i| {
        let y = (i / side) as f64;
        let x = (i % side) as f64;
        if ellipses.iter().any(|e| e.contains(y, x)) {
            E::one()
        } else {
            E::zero()
        }
    })
}

/// Compose one frame: background texture everywhere, object texture
/// (shifted by the object's accumulated offset so it travels with the
/// mask) where the mask is set. Grayscale replicated across RGB.
fn compose_frame<E: Elem>(
    side: usize,
    bg: &TextureField,
    obj: &TextureField,
    mask: &Tensor<E>,
    offset: (i64, i64),
    contrast: f64,
) -> Tensor<E> {
    let bg_mean = 0.5 - contrast / 2.0;
    let obj_mean = 0.5 + contrast / 2.0;
    let hw = side * side;
    let mut gray = vec![0.0f64; hw];
    let mdata = mask.data();
    for y in 0..side {
        for x in 0..side {
            let i = y * side + x;
            gray[i] = if mdata[i] > E::zero() {
                obj_mean + obj.at(y as i64 - offset.0, x as i64 - offset.1)
            } else {
                bg_mean + bg.at(y as i64, x as i64)
            }
            .clamp(0.0, 1.0);
        }
    }
    Tensor::from_fn(&[3, side, side], |i| elem::<E>(gray[i % hw]))
}

/// Generate the full dataset in memory, deterministically per seed.
pub fn generate<E: Elem>(spec: &SyntheticSpec) -> Result<Vec<LoadedSample<E>>> {
    spec.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let mut out = Vec::with_capacity(spec.count);
    for idx in 0..spec.count {
        let bg = TextureField::draw(spec.side, &mut rng);
        let obj = TextureField::draw(spec.side, &mut rng);
        let mut ellipses = draw_ellipses(spec.side, &mut rng);
        let mut offset = (0i64, 0i64);
        let mut frames = Vec::with_capacity(spec.clip_len);
        for _ in 0..spec.clip_len {
            let mask = rasterize_mask::<E>(spec.side, &ellipses);
            let image = compose_frame(spec.side, &bg, &obj, &mask, offset, spec.contrast);
            frames.push(Frame { image, mask });
            if spec.clip_len > 1 {
                let dy = rng.gen_range(-MAX_DRIFT..=MAX_DRIFT);
                let dx = rng.gen_range(-MAX_DRIFT..=MAX_DRIFT);
                offset.0 += dy;
                offset.1 += dx;
                let s = spec.side as f64;
                for e in &mut ellipses {
                    let m = e.max_extent() + 1.0;
                    e.cy = (e.cy + dy as f64).clamp(m, s - m);
                    e.cx = (e.cx + dx as f64).clamp(m, s - m);
                }
            }
        }
        let name = format!("{idx:04}");
        let frame_names = if frames.len() == 1 {
            vec![name.clone()]
        } else {
            (0..frames.len()).map(|t| format!("{name}_f{t:02}")).collect()
        };
        out.push(LoadedSample {
            name,
            frame_names,
            frames,
        });
    }
    Ok(out)
}

/// Generate and write the dataset as PPM/PGM files plus a manifest.
/// Returns the manifest path.
pub fn write_dataset(spec: &SyntheticSpec, dir: &Path) -> Result<PathBuf> {
    let samples = generate::<f32>(spec)?;
    std::fs::create_dir_all(dir)
        .map_err(|e| TensorError::Invalid(format!("{}: {e}", dir.display())))?;
    let mut blocks = Vec::with_capacity(samples.len());
    for sample in &samples {
        let mut block = Vec::with_capacity(sample.frames.len());
        for (stem, frame) in sample.frame_names.iter().zip(&sample.frames) {
            let img_name = format!("{stem}.ppm");
            let mask_name = format!("{stem}.pgm");
            netpbm::write_ppm(&dir.join(&img_name), &frame.image)?;
            netpbm::write_pgm(&dir.join(&mask_name), &frame.mask)?;
            block.push((img_name, mask_name));
        }
        blocks.push(block);
    }
    let manifest_path = dir.join("manifest.txt");
    manifest::write_manifest(&manifest_path, &blocks)?;
    Ok(manifest_path)
}

/// Intersection-over-union of two binary masks.
pub fn mask_iou<E: Elem>(a: &Tensor<E>, b: &Tensor<E>) -> f64 {
    let mut inter = 0usize;
    let mut union = 0usize;
    for (&x, &y) in a.data().iter().zip(b.data()) {
        let (x, y) = (x > E::zero(), y > E::zero());
        inter += (x && y) as usize;
        union += (x || y) as usize;
    }
    if union == 0 {
        1.0
    } else {
        inter as f64 / union as f64
    }
}
