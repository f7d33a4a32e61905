//! Training-time augmentation: horizontal flip, small rotation, and
//! photometric jitter. One parameter draw covers every frame of a clip so
//! temporal structure survives augmentation.

use rand::Rng;
use rand_chacha::ChaCha8Rng;

use crate::tensor::{elem, Elem, Tensor};

/// Maximum rotation magnitude in radians (10 degrees).
const MAX_ROT: f64 = 10.0 * std::f64::consts::PI / 180.0;
/// Photometric jitter bound for brightness offset and contrast gain.
const MAX_JITTER: f64 = 0.1;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AugmentParams {
    pub flip: bool,
    pub angle: f64,
    pub brightness: f64,
    pub contrast: f64,
}

impl AugmentParams {
    pub const IDENTITY: AugmentParams = AugmentParams {
        flip: false,
        angle: 0.0,
        brightness: 0.0,
        contrast: 0.0,
    };

    pub fn draw(rng: &mut ChaCha8Rng) -> Self {
        AugmentParams {
            flip: rng.gen_bool(0.5),
            angle: rng.gen_range(-MAX_ROT..MAX_ROT),
            brightness: rng.gen_range(-MAX_JITTER..MAX_JITTER),
            contrast: rng.gen_range(-MAX_JITTER..MAX_JITTER),
        }
    }
}

/// Source coordinates for an output pixel under flip + rotation about the
/// image center (inverse mapping).
fn source_coords(p: &AugmentParams, h: usize, w: usize, y: usize, x: usize) -> (f64, f64) {
    let x = if p.flip { w - 1 - x } else { x };
    let (cy, cx) = ((h as f64 - 1.0) / 2.0, (w as f64 - 1.0) / 2.0);
    let (dy, dx) = (y as f64 - cy, x as f64 - cx);
    let (s, c) = p.angle.sin_cos();
    (cy + c * dy - s * dx, cx + s * dy + c * dx)
}

fn bilinear_at<E: Elem>(plane: &[E], h: usize, w: usize, sy: f64, sx: f64) -> f64 {
    let sy = sy.clamp(0.0, h as f64 - 1.0);
    let sx = sx.clamp(0.0, w as f64 - 1.0);
    let (y0, x0) = (sy.floor() as usize, sx.floor() as usize);
    let (y1, x1) = ((y0 + 1).min(h - 1), (x0 + 1).min(w - 1));
    let (fy, fx) = (sy - y0 as f64, sx - x0 as f64);
    let at = |r: usize, c: usize| plane[r * w + c].to_f64().unwrap();
    (1.0 - fy) * ((1.0 - fx) * at(y0, x0) + fx * at(y0, x1))
        + fy * ((1.0 - fx) * at(y1, x0) + fx * at(y1, x1))
}

/// Augment a [C, H, W] image: geometric warp with bilinear sampling and
/// edge clamping, then contrast about 0.5 and brightness, clamped to [0, 1].
pub fn augment_image<E: Elem>(img: &Tensor<E>, p: &AugmentParams) -> Tensor<E> {
    let (c, h, w) = (img.shape()[0], img.shape()[1], img.shape()[2]);
    let gain = 1.0 + p.contrast;
    Tensor::from_fn(&[c, h, w], |i| {
        let ch = i / (h * w);
        let y = (i / w) % h;
        let x = i % w;
        let (sy, sx) = source_coords(p, h, w, y, x);
        let plane = &img.data()[ch * h * w..(ch + 1) * h * w];
        let v = bilinear_at(plane, h, w, sy, sx);
        elem::<E>(((v - 0.5) * gain + 0.5 + p.brightness).clamp(0.0, 1.0))
    })
}

/// Augment a [1, H, W] binary mask with the same geometry, nearest-neighbor
/// sampled so it stays exactly binary. Photometric jitter does not apply.
pub fn augment_mask<E: Elem>(mask: &Tensor<E>, p: &AugmentParams) -> Tensor<E> {
    let (h, w) = (mask.shape()[1], mask.shape()[2]);
    Tensor::from_fn(&[1, h, w], |i| {
        let y = (i / w) % h;
        let x = i % w;
        let (sy, sx) = source_coords(p, h, w, y, x);
        let r = (sy.round().clamp(0.0, h as f64 - 1.0)) as usize;
        let c = (sx.round().clamp(0.0, w as f64 - 1.0)) as usize;
        mask.data()[r * w + c]
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;

    fn ramp(c: usize, h: usize, w: usize) -> Tensor<f64> {
        Tensor::from_fn(&[c, h, w], |i| (i % (h * w)) as f64 / (h * w) as f64)
    }

    #[test]
    fn identity_params_change_nothing() {
        let img = ramp(3, 8, 8);
        let out = augment_image(&img, &AugmentParams::IDENTITY);
        assert_eq!(out.data(), img.data());
        let mask = Tensor::<f64>::from_fn(&[1, 8, 8], |i| if i % 3 == 0 { 1.0 } else { 0.0 });
        assert_eq!(augment_mask(&mask, &AugmentParams::IDENTITY).data(), mask.data());
    }

    #[test]
    fn pure_flip_reverses_rows() {
        let p = AugmentParams {
            flip: true,
            ..AugmentParams::IDENTITY
        };
        let img = ramp(1, 2, 4);
        let out = augment_image(&img, &p);
        let d = img.data();
        let o = out.data();
        for y in 0..2 {
            for x in 0..4 {
                assert_eq!(o[y * 4 + x], d[y * 4 + (3 - x)]);
            }
        }
    }

    #[test]
    fn mask_stays_binary_under_rotation() {
        let mask = Tensor::<f64>::from_fn(&[1, 16, 16], |i| {
            let (y, x) = (i / 16, i % 16);
            if (4..12).contains(&y) && (4..12).contains(&x) {
                1.0
            } else {
                0.0
            }
        });
        let p = AugmentParams {
            angle: MAX_ROT,
            ..AugmentParams::IDENTITY
        };
        let out = augment_mask(&mask, &p);
        assert!(out.data().iter().all(|&v| v == 0.0 || v == 1.0));
        assert!(out.data().iter().any(|&v| v == 1.0));
    }

    #[test]
    fn brightness_shifts_mean() {
        let img = Tensor::<f64>::full(&[1, 8, 8], 0.5);
        let p = AugmentParams {
            brightness: 0.1,
            ..AugmentParams::IDENTITY
        };
        let out = augment_image(&img, &p);
        assert!(out.data().iter().all(|&v| (v - 0.6).abs() < 1e-12));
    }

    #[test]
    fn contrast_scales_about_half() {
        let img = Tensor::<f64>::from_fn(&[1, 2, 2], |i| [0.3, 0.7, 0.5, 1.0][i]);
        let p = AugmentParams {
            contrast: 0.1,
            ..AugmentParams::IDENTITY
        };
        let out = augment_image(&img, &p);
        let want = [
            (0.3 - 0.5) * 1.1 + 0.5,
            (0.7 - 0.5) * 1.1 + 0.5,
            0.5,
            1.0, // clamped
        ];
        for (o, w) in out.data().iter().zip(want) {
            assert!((o - w).abs() < 1e-12);
        }
    }

    #[test]
    fn draws_stay_in_bounds() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        for _ in 0..200 {
            let p = AugmentParams::draw(&mut rng);
            assert!(p.angle.abs() <= MAX_ROT);
            assert!(p.brightness.abs() <= MAX_JITTER);
            assert!(p.contrast.abs() <= MAX_JITTER);
        }
    }
}
