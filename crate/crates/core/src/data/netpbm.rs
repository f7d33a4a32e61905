//! Binary netpbm codecs: PGM (P5) for masks and predictions, PPM (P6) for
//! images. 8-bit only (maxval 255), bit-exact round trips.

use std::fs;
use std::io::Write as _;
use std::path::Path;

use crate::tensor::{elem, Elem, Result, Tensor, TensorError};

fn ctx(path: &Path, detail: impl std::fmt::Display) -> TensorError {
    TensorError::Invalid(format!("{}: {detail}", path.display()))
}

/// Parse a netpbm header (after the magic): whitespace-separated decimal
/// fields with `#` comments running to end of line. Returns (width, height)
/// and the offset of the first raster byte.
fn parse_header(path: &Path, bytes: &[u8], magic: &[u8]) -> Result<(usize, usize, usize)> {
    if bytes.len() < 2 || &bytes[..2] != magic {
        return Err(ctx(
            path,
            format!("expected magic {}", String::from_utf8_lossy(magic)),
        ));
    }
    let mut pos = 2;
    let mut fields = [0usize; 3];
    for field in &mut fields {
        // Skip whitespace and comments.
        loop {
            match bytes.get(pos) {
                Some(b) if b.is_ascii_whitespace() => pos += 1,
                Some(b'#') => {
                    while pos < bytes.len() && bytes[pos] != b'\n' {
                        pos += 1;
                    }
                }
                Some(b) if b.is_ascii_digit() => break,
                Some(b) => return Err(ctx(path, format!("unexpected header byte {b:#04x}"))),
                None => return Err(ctx(path, "truncated header")),
            }
        }
        let mut v: usize = 0;
        while let Some(b) = bytes.get(pos) {
            if !b.is_ascii_digit() {
                break;
            }
            v = v
                .checked_mul(10)
                .and_then(|x| x.checked_add((b - b'0') as usize))
                .ok_or_else(|| ctx(path, "header field overflow"))?;
            pos += 1;
        }
        *field = v;
    }
    // Exactly one whitespace byte separates the maxval from the raster.
    match bytes.get(pos) {
        Some(b) if b.is_ascii_whitespace() => pos += 1,
        _ => return Err(ctx(path, "missing separator before raster")),
    }
    let (w, h, maxval) = (fields[0], fields[1], fields[2]);
    if w == 0 || h == 0 {
        return Err(ctx(path, format!("degenerate dimensions {w}x{h}")));
    }
    if maxval != 255 {
        return Err(ctx(path, format!("unsupported maxval {maxval} (want 255)")));
    }
    Ok((w, h, pos))
}

fn read_raster(path: &Path, magic: &[u8], channels: usize) -> Result<(usize, usize, Vec<u8>)> {
    let bytes = fs::read(path).map_err(|e| ctx(path, e))?;
    let (w, h, off) = parse_header(path, &bytes, magic)?;
    let want = w * h * channels;
    let got = bytes.len() - off;
    if got != want {
        return Err(ctx(path, format!("raster holds {got} bytes, want {want}")));
    }
    Ok((w, h, bytes[off..].to_vec()))
}

/// Read an 8-bit grayscale PGM into [1, H, W], scaled to [0, 1] by /255.
pub fn read_pgm<E: Elem>(path: &Path) -> Result<Tensor<E>> {
    let (w, h, raster) = read_raster(path, b"P5", 1)?;
    let data = raster.iter().map(|&b| elem::<E>(b as f64 / 255.0)).collect();
    Tensor::new(&[1, h, w], data)
}

/// Read a binary mask PGM: every byte must be 0 or 255; values map to
/// exactly 0.0 / 1.0.
pub fn read_mask<E: Elem>(path: &Path) -> Result<Tensor<E>> {
    let (w, h, raster) = read_raster(path, b"P5", 1)?;
    let mut data = Vec::with_capacity(raster.len());
    for &b in &raster {
        match b {
            0 => data.push(E::zero()),
            255 => data.push(E::one()),
            other => {
                return Err(ctx(
                    path,
                    format!("mask byte {other} is neither 0 nor 255"),
                ))
            }
        }
    }
    Tensor::new(&[1, h, w], data)
}

/// Read an 8-bit RGB PPM into planar [3, H, W], scaled to [0, 1].
pub fn read_ppm<E: Elem>(path: &Path) -> Result<Tensor<E>> {
    let (w, h, raster) = read_raster(path, b"P6", 3)?;
    let hw = h * w;
    let mut data = vec![E::zero(); 3 * hw];
    for i in 0..hw {
        for c in 0..3 {
            data[c * hw + i] = elem::<E>(raster[3 * i + c] as f64 / 255.0);
        }
    }
    Tensor::new(&[3, h, w], data)
}

/// Quantization used for every write: floor(v * 255), clamped to 0..=255.
pub fn quantize_byte(v: f64) -> u8 {
    (v * 255.0).floor().clamp(0.0, 255.0) as u8
}

fn grayscale_plane<E: Elem>(t: &Tensor<E>) -> Result<(usize, usize, &[E])> {
    match t.shape() {
        [h, w] => Ok((*h, *w, t.data())),
        [1, h, w] => Ok((*h, *w, t.data())),
        [1, 1, h, w] => Ok((*h, *w, t.data())),
        other => Err(TensorError::Invalid(format!(
            "expected a single-channel map, got shape {other:?}"
        ))),
    }
}

/// Write a single-channel map ([H, W], [1, H, W], or [1, 1, H, W]) as a
/// binary PGM with bytes floor(v * 255).
pub fn write_pgm<E: Elem>(path: &Path, t: &Tensor<E>) -> Result<()> {
    let (h, w, data) = grayscale_plane(t)?;
    let mut out = Vec::with_capacity(32 + h * w);
    write!(out, "P5\n{w} {h}\n255\n").expect("vec write");
    out.extend(data.iter().map(|&v| quantize_byte(v.to_f64().unwrap())));
    fs::write(path, out).map_err(|e| ctx(path, e))
}

/// Write a planar [3, H, W] tensor as a binary PPM.
pub fn write_ppm<E: Elem>(path: &Path, t: &Tensor<E>) -> Result<()> {
    let (h, w) = match t.shape() {
        [3, h, w] => (*h, *w),
        other => {
            return Err(TensorError::Invalid(format!(
                "expected [3, H, W] image, got shape {other:?}"
            )))
        }
    };
    let hw = h * w;
    let data = t.data();
    let mut out = Vec::with_capacity(32 + 3 * hw);
    write!(out, "P6\n{w} {h}\n255\n").expect("vec write");
    for i in 0..hw {
        for c in 0..3 {
            out.push(quantize_byte(data[c * hw + i].to_f64().unwrap()));
        }
    }
    fs::write(path, out).map_err(|e| ctx(path, e))
}
