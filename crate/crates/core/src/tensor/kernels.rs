//! Raw compute kernels on contiguous slices.
//!
//! Everything is single-threaded and loops in a fixed order, so results are
//! bit-reproducible across runs. The matmul trio is the only hot path; conv
//! routes through im2col so forward and both backward products are matmuls.

use super::{elem, Elem};
use std::sync::atomic::{AtomicU64, Ordering};

/// TEMPORARY tuning counters: nanoseconds spent in the matmul trio and in
/// the im2col/col2im shufflers. Remove once the hot path is settled.
pub static MM_NANOS: AtomicU64 = AtomicU64::new(0);
pub static NN_NANOS: AtomicU64 = AtomicU64::new(0);
pub static NT_NANOS: AtomicU64 = AtomicU64::new(0);
pub static TN_NANOS: AtomicU64 = AtomicU64::new(0);
pub static IM_NANOS: AtomicU64 = AtomicU64::new(0);

fn timed2<R>(c1: &AtomicU64, c2: &AtomicU64, f: impl FnOnce() -> R) -> R {
    let t0 = std::time::Instant::now();
    let r = f();
    let dt = t0.elapsed().as_nanos() as u64;
    c1.fetch_add(dt, Ordering::Relaxed);
    c2.fetch_add(dt, Ordering::Relaxed);
    r
}

fn timed<R>(counter: &AtomicU64, f: impl FnOnce() -> R) -> R {
    let t0 = std::time::Instant::now();
    let r = f();
    counter.fetch_add(t0.elapsed().as_nanos() as u64, Ordering::Relaxed);
    r
}

/// Row tile height of the blocked matmul core. Together with [`NR`] this
/// fixes the number of independent accumulator chains per tile: plain
/// `acc + a*b` updates are serially dependent per accumulator, so the FPU's
/// add latency only stays hidden when several accumulators are in flight,
/// while too large a tile spills accumulators out of registers. Eight rows
/// of one 8-lane vector each is the measured sweet spot here, and 8 divides
/// every hot dimension of the convolution stack.
const MR: usize = 8;
/// Column tile width of the blocked matmul core.
const NR: usize = 8;

/// c[m,n] += a[k,m]^T * b[k,n], the one shape every matmul entry point
/// reduces to. With the left operand stored [k,m] both operands stream
/// contiguously: each step of p reads one MR-wide band of `a` and one
/// NR-wide row chunk of `b`. Register-tiled over MR x NR output blocks;
/// each block loads its output once, accumulates across all of k, and
/// stores once. Per output element the addition order is ascending p,
/// identical to a textbook triple loop.
fn tn_core<E: Elem>(a: &[E], b: &[E], c: &mut [E], m: usize, k: usize, n: usize) {
    debug_assert_eq!(a.len(), k * m);
    debug_assert_eq!(b.len(), k * n);
    debug_assert_eq!(c.len(), m * n);
    let mut ib = 0;
    while ib < m {
        let mb = (m - ib).min(MR);
        let mut jb = 0;
        while jb < n {
            let nb = (n - jb).min(NR);
            if mb == MR && nb == NR {
                let mut acc = [[E::zero(); NR]; MR];
                for (r, row) in acc.iter_mut().enumerate() {
                    row.copy_from_slice(&c[(ib + r) * n + jb..][..NR]);
                }
                for p in 0..k {
                    let aband = &a[p * m + ib..][..MR];
                    let brow = &b[p * n + jb..][..NR];
                    for (row, &av) in acc.iter_mut().zip(aband) {
                        for (dst, &bv) in row.iter_mut().zip(brow) {
                            *dst = av.mul_add(bv, *dst);
                        }
                    }
                }
                for (r, row) in acc.iter().enumerate() {
                    c[(ib + r) * n + jb..][..NR].copy_from_slice(row);
                }
            } else {
                for r in 0..mb {
                    let i = ib + r;
                    for q in 0..nb {
                        let j = jb + q;
                        let mut acc = c[i * n + j];
                        for p in 0..k {
                            acc = a[p * m + i].mul_add(b[p * n + j], acc);
                        }
                        c[i * n + j] = acc;
                    }
                }
            }
            jb += nb;
        }
        ib += mb;
    }
}

/// c[m,n] += a[m,k] * b[k,n]
///
/// Transposes `a` into a scratch and runs the contiguous-band core: the
/// copy costs m*k moves against m*k*n multiplies, and a strided left
/// operand would otherwise throttle the inner loop on scattered loads.
/// Per output element the addition order is ascending p, identical to a
/// textbook triple loop.
pub fn matmul_nn_acc<E: Elem>(a: &[E], b: &[E], c: &mut [E], m: usize, k: usize, n: usize) {
    timed2(&MM_NANOS, &NN_NANOS, || {
        debug_assert_eq!(a.len(), m * k);
        let mut at = vec![E::zero(); m * k];
        transpose_core(a, m, k, &mut at);
        tn_core(&at, b, c, m, k, n)
    })
}

/// c[m,n] += a[m,k] * b[n,k]^T
///
/// Transposes both operands into scratches and runs the contiguous-band
/// core; per output element the addition order is ascending p, identical
/// to a textbook triple loop.
pub fn matmul_nt_acc<E: Elem>(a: &[E], b: &[E], c: &mut [E], m: usize, k: usize, n: usize) {
    timed2(&MM_NANOS, &NT_NANOS, || {
        debug_assert_eq!(a.len(), m * k);
        debug_assert_eq!(b.len(), n * k);
        let mut at = vec![E::zero(); m * k];
        transpose_core(a, m, k, &mut at);
        let mut bt = vec![E::zero(); n * k];
        transpose_core(b, n, k, &mut bt);
        tn_core(&at, &bt, c, m, k, n)
    })
}

/// c[m,n] += a[k,m]^T * b[k,n]
///
/// The left operand is already stored [k,m], so this is the core kernel
/// with no shuffling. Per output element the addition order is ascending
/// p, identical to a textbook triple loop.
pub fn matmul_tn_acc<E: Elem>(a: &[E], b: &[E], c: &mut [E], m: usize, k: usize, n: usize) {
    timed2(&MM_NANOS, &TN_NANOS, || tn_core(a, b, c, m, k, n))
}

/// Output spatial extent of a convolution axis: (len + 2*pad - k) / stride + 1.
pub fn conv_out_len(len: usize, k: usize, stride: usize, pad: usize) -> Option<usize> {
    let padded = len + 2 * pad;
    if padded < k || stride == 0 {
        return None;
    }
    Some((padded - k) / stride + 1)
}

/// Output columns `lo..hi` whose input column `ox*stride + kj - pad` lands
/// inside `0..w`; everything outside the range reads or writes padding.
fn valid_ox_range(w: usize, kj: usize, stride: usize, pad: usize, ow: usize) -> (usize, usize) {
    let lo = if pad > kj {
        (pad - kj).div_ceil(stride).min(ow)
    } else {
        0
    };
    let hi = if w + pad > kj {
        ((w - 1 + pad - kj) / stride + 1).min(ow)
    } else {
        0
    };
    (lo, hi.max(lo))
}

/// Unfold one image [C,H,W] into columns [C*kh*kw, oh*ow].
#[allow(clippy::too_many_arguments)]
pub fn im2col<E: Elem>(
    x: &[E],
    c: usize,
    h: usize,
    w: usize,
    kh: usize,
    kw: usize,
    stride: usize,
    pad: usize,
    oh: usize,
    ow: usize,
    col: &mut [E],
) {
    timed(&IM_NANOS, || {
        debug_assert_eq!(col.len(), c * kh * kw * oh * ow);
        let l = oh * ow;
        for ch in 0..c {
            let plane = &x[ch * h * w..(ch + 1) * h * w];
            for ki in 0..kh {
                for kj in 0..kw {
                    let row = &mut col[((ch * kh + ki) * kw + kj) * l..][..l];
                    for oy in 0..oh {
                        let iy = (oy * stride + ki) as isize - pad as isize;
                        let dst = &mut row[oy * ow..(oy + 1) * ow];
                        if iy < 0 || iy >= h as isize {
                            for v in dst.iter_mut() {
                                *v = E::zero();
                            }
                            continue;
                        }
                        let src_row = &plane[iy as usize * w..(iy as usize + 1) * w];
                        let (lo, hi) = valid_ox_range(w, kj, stride, pad, ow);
                        for v in dst[..lo].iter_mut() {
                            *v = E::zero();
                        }
                        if stride == 1 {
                            let start = lo + kj - pad;
                            dst[lo..hi].copy_from_slice(&src_row[start..start + (hi - lo)]);
                        } else {
                            for ox in lo..hi {
                                dst[ox] = src_row[ox * stride + kj - pad];
                            }
                        }
                        for v in dst[hi..].iter_mut() {
                            *v = E::zero();
                        }
                    }
                }
            }
        }

    })
}

/// Fold columns back, accumulating into the image gradient.
#[allow(clippy::too_many_arguments)]
pub fn col2im_acc<E: Elem>(
    col: &[E],
    c: usize,
    h: usize,
    w: usize,
    kh: usize,
    kw: usize,
    stride: usize,
    pad: usize,
    oh: usize,
    ow: usize,
    dx: &mut [E],
) {
    timed(&IM_NANOS, || {
        let l = oh * ow;
        for ch in 0..c {
            let plane = &mut dx[ch * h * w..(ch + 1) * h * w];
            for ki in 0..kh {
                for kj in 0..kw {
                    let row = &col[((ch * kh + ki) * kw + kj) * l..][..l];
                    for oy in 0..oh {
                        let iy = (oy * stride + ki) as isize - pad as isize;
                        if iy < 0 || iy >= h as isize {
                            continue;
                        }
                        let dst = &mut plane[iy as usize * w..(iy as usize + 1) * w];
                        let src = &row[oy * ow..(oy + 1) * ow];
                        let (lo, hi) = valid_ox_range(w, kj, stride, pad, ow);
                        if stride == 1 {
                            let start = lo + kj - pad;
                            for (d, &s) in dst[start..start + (hi - lo)].iter_mut().zip(&src[lo..hi])
                            {
                                *d = *d + s;
                            }
                        } else {
                            for ox in lo..hi {
                                let ix = ox * stride + kj - pad;
                                dst[ix] = dst[ix] + src[ox];
                            }
                        }
                    }
                }
            }
        }

    })
}

/// dst[cols,rows] = src[rows,cols], blocked for cache friendliness.
fn transpose_core<E: Elem>(src: &[E], rows: usize, cols: usize, dst: &mut [E]) {
    const B: usize = 32;
    let mut i0 = 0;
    while i0 < rows {
        let i1 = (i0 + B).min(rows);
        let mut j0 = 0;
        while j0 < cols {
            let j1 = (j0 + B).min(cols);
            for i in i0..i1 {
                let srow = &src[i * cols..];
                for j in j0..j1 {
                    dst[j * rows + i] = srow[j];
                }
            }
            j0 = j1;
        }
        i0 = i1;
    }
}

/// dst[cols,rows] = src[rows,cols], blocked for cache friendliness.
fn transpose_into<E: Elem>(src: &[E], rows: usize, cols: usize, dst: &mut [E]) {
    timed(&IM_NANOS, || transpose_core(src, rows, cols, dst))
}

pub struct ConvGeom {
    pub n: usize,
    pub cin: usize,
    pub h: usize,
    pub w: usize,
    pub cout: usize,
    pub kh: usize,
    pub kw: usize,
    pub stride: usize,
    pub pad: usize,
    pub groups: usize,
    pub oh: usize,
    pub ow: usize,
}

impl ConvGeom {
    pub fn col_len(&self) -> usize {
        self.cin * self.kh * self.kw * self.oh * self.ow
    }
}

/// y[N,Cout,OH,OW] = conv(x, w) + b. `col` is scratch of `col_len()`.
pub fn conv2d_forward<E: Elem>(
    x: &[E],
    w: &[E],
    b: Option<&[E]>,
    g: &ConvGeom,
    col: &mut [E],
    y: &mut [E],
) {
    let cin_g = g.cin / g.groups;
    let cout_g = g.cout / g.groups;
    let r = cin_g * g.kh * g.kw;
    let l = g.oh * g.ow;
    let img = g.cin * g.h * g.w;
    let out_img = g.cout * l;
    for n in 0..g.n {
        im2col(
            &x[n * img..(n + 1) * img],
            g.cin,
            g.h,
            g.w,
            g.kh,
            g.kw,
            g.stride,
            g.pad,
            g.oh,
            g.ow,
            col,
        );
        for gi in 0..g.groups {
            let wg = &w[gi * cout_g * r..(gi + 1) * cout_g * r];
            let colg = &col[gi * r * l..(gi + 1) * r * l];
            let yg = &mut y[n * out_img + gi * cout_g * l..][..cout_g * l];
            for v in yg.iter_mut() {
                *v = E::zero();
            }
            matmul_nn_acc(wg, colg, yg, cout_g, r, l);
        }
        if let Some(bias) = b {
            let yn = &mut y[n * out_img..(n + 1) * out_img];
            for co in 0..g.cout {
                let bv = bias[co];
                for v in yn[co * l..(co + 1) * l].iter_mut() {
                    *v = *v + bv;
                }
            }
        }
    }
}

/// Accumulates input/weight/bias gradients for conv2d. Recomputes im2col.
#[allow(clippy::too_many_arguments)]
pub fn conv2d_backward<E: Elem>(
    x: &[E],
    w: &[E],
    dy: &[E],
    g: &ConvGeom,
    col: &mut [E],
    dcol: &mut [E],
    dx: Option<&mut [E]>,
    dw: Option<&mut [E]>,
    db: Option<&mut [E]>,
) {
    let cin_g = g.cin / g.groups;
    let cout_g = g.cout / g.groups;
    let r = cin_g * g.kh * g.kw;
    let l = g.oh * g.ow;
    let img = g.cin * g.h * g.w;
    let out_img = g.cout * l;

    if let Some(db) = db {
        for n in 0..g.n {
            for co in 0..g.cout {
                let dyn_ = &dy[n * out_img + co * l..][..l];
                let mut acc = E::zero();
                for &v in dyn_ {
                    acc = acc + v;
                }
                db[co] = db[co] + acc;
            }
        }
    }

    let want_dx = dx.is_some();
    let want_dw = dw.is_some();
    if !want_dx && !want_dw {
        return;
    }
    let mut dx = dx;
    let mut dw = dw;
    for n in 0..g.n {
        if want_dw {
            im2col(
                &x[n * img..(n + 1) * img],
                g.cin,
                g.h,
                g.w,
                g.kh,
                g.kw,
                g.stride,
                g.pad,
                g.oh,
                g.ow,
                col,
            );
        }
        for gi in 0..g.groups {
            let dyg = &dy[n * out_img + gi * cout_g * l..][..cout_g * l];
            if let Some(dw) = dw.as_deref_mut() {
                let colg = &col[gi * r * l..(gi + 1) * r * l];
                let dwg = &mut dw[gi * cout_g * r..(gi + 1) * cout_g * r];
                if g.groups == 1 {
                    // dw += dy . col^T runs much faster as the nn kernel on a
                    // materialized transpose than as row-by-row dot products:
                    // the dot form re-streams the whole unfolded image per
                    // output row. dcol is free as scratch here; the dx pass
                    // below overwrites it afterwards.
                    transpose_into(colg, r, l, dcol);
                    matmul_nn_acc(dyg, dcol, dwg, cout_g, l, r);
                } else {
                    matmul_nt_acc(dyg, colg, dwg, cout_g, l, r);
                }
            }
            if want_dx {
                let wg = &w[gi * cout_g * r..(gi + 1) * cout_g * r];
                let dcolg = &mut dcol[gi * r * l..(gi + 1) * r * l];
                for v in dcolg.iter_mut() {
                    *v = E::zero();
                }
                matmul_tn_acc(wg, dyg, dcolg, r, cout_g, l);
            }
        }
        if let Some(dx) = dx.as_deref_mut() {
            col2im_acc(
                dcol,
                g.cin,
                g.h,
                g.w,
                g.kh,
                g.kw,
                g.stride,
                g.pad,
                g.oh,
                g.ow,
                &mut dx[n * img..(n + 1) * img],
            );
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum PoolKind {
    Max,
    Avg,
}

/// Adaptive pooling window along one axis: [floor(i*len/out), ceil((i+1)*len/out)).
pub fn pool_window(i: usize, len: usize, out: usize) -> (usize, usize) {
    let lo = i * len / out;
    let hi = ((i + 1) * len + out - 1) / out;
    (lo, hi)
}

/// Forward adaptive pool over [N,C,H,W] -> [N,C,OH,OW].
/// For max pooling, `argmax` records the flat input offset (first row-major
/// maximum) that each output element took its value from.
#[allow(clippy::too_many_arguments)]
pub fn adaptive_pool_forward<E: Elem>(
    x: &[E],
    n: usize,
    c: usize,
    h: usize,
    w: usize,
    oh: usize,
    ow: usize,
    kind: PoolKind,
    y: &mut [E],
    mut argmax: Option<&mut [usize]>,
) {
    for img in 0..n * c {
        let plane = &x[img * h * w..(img + 1) * h * w];
        let out = &mut y[img * oh * ow..(img + 1) * oh * ow];
        for oy in 0..oh {
            let (y0, y1) = pool_window(oy, h, oh);
            for ox in 0..ow {
                let (x0, x1) = pool_window(ox, w, ow);
                let oi = oy * ow + ox;
                match kind {
                    PoolKind::Max => {
                        let mut best = plane[y0 * w + x0];
                        let mut best_at = y0 * w + x0;
                        for iy in y0..y1 {
                            for ix in x0..x1 {
                                let v = plane[iy * w + ix];
                                if v > best {
                                    best = v;
                                    best_at = iy * w + ix;
                                }
                            }
                        }
                        out[oi] = best;
                        if let Some(am) = argmax.as_deref_mut() {
                            am[img * oh * ow + oi] = img * h * w + best_at;
                        }
                    }
                    PoolKind::Avg => {
                        let mut acc = E::zero();
                        for iy in y0..y1 {
                            for ix in x0..x1 {
                                acc = acc + plane[iy * w + ix];
                            }
                        }
                        let cnt = elem::<E>(((y1 - y0) * (x1 - x0)) as f64);
                        out[oi] = acc / cnt;
                    }
                }
            }
        }
    }
}

#[allow(clippy::too_many_arguments)]
pub fn adaptive_pool_backward<E: Elem>(
    dy: &[E],
    n: usize,
    c: usize,
    h: usize,
    w: usize,
    oh: usize,
    ow: usize,
    kind: PoolKind,
    argmax: Option<&[usize]>,
    dx: &mut [E],
) {
    match kind {
        PoolKind::Max => {
            let argmax = argmax.expect("max pool backward needs argmax");
            for (oi, &src) in argmax.iter().enumerate() {
                dx[src] = dx[src] + dy[oi];
            }
        }
        PoolKind::Avg => {
            for img in 0..n * c {
                let dplane = &mut dx[img * h * w..(img + 1) * h * w];
                let dout = &dy[img * oh * ow..(img + 1) * oh * ow];
                for oy in 0..oh {
                    let (y0, y1) = pool_window(oy, h, oh);
                    for ox in 0..ow {
                        let (x0, x1) = pool_window(ox, w, ow);
                        let cnt = elem::<E>(((y1 - y0) * (x1 - x0)) as f64);
                        let g = dout[oy * ow + ox] / cnt;
                        for iy in y0..y1 {
                            for ix in x0..x1 {
                                dplane[iy * w + ix] = dplane[iy * w + ix] + g;
                            }
                        }
                    }
                }
            }
        }
    }
}

/// Source coordinate and lerp weights for align-corners=false bilinear.
/// Returns (i0, i1, w1) with sample = v[i0]*(1-w1) + v[i1]*w1.
pub fn bilinear_axis(i: usize, out: usize, len: usize) -> (usize, usize, f64) {
    let src = (i as f64 + 0.5) * len as f64 / out as f64 - 0.5;
    let src = src.clamp(0.0, (len - 1) as f64);
    let i0 = src.floor() as usize;
    let i1 = (i0 + 1).min(len - 1);
    (i0, i1, src - i0 as f64)
}

pub fn bilinear_forward<E: Elem>(
    x: &[E],
    planes: usize,
    h: usize,
    w: usize,
    oh: usize,
    ow: usize,
    y: &mut [E],
) {
    if oh == h && ow == w {
        y.copy_from_slice(x);
        return;
    }
    let ys: Vec<(usize, usize, f64)> = (0..oh).map(|i| bilinear_axis(i, oh, h)).collect();
    let xs: Vec<(usize, usize, f64)> = (0..ow).map(|j| bilinear_axis(j, ow, w)).collect();
    for p in 0..planes {
        let src = &x[p * h * w..(p + 1) * h * w];
        let dst = &mut y[p * oh * ow..(p + 1) * oh * ow];
        for (oy, &(y0, y1, wy)) in ys.iter().enumerate() {
            let wy = elem::<E>(wy);
            let r0 = &src[y0 * w..(y0 + 1) * w];
            let r1 = &src[y1 * w..(y1 + 1) * w];
            let out_row = &mut dst[oy * ow..(oy + 1) * ow];
            for (ox, &(x0, x1, wx)) in xs.iter().enumerate() {
                let wx = elem::<E>(wx);
                let top = r0[x0] * (E::one() - wx) + r0[x1] * wx;
                let bot = r1[x0] * (E::one() - wx) + r1[x1] * wx;
                out_row[ox] = top * (E::one() - wy) + bot * wy;
            }
        }
    }
}

pub fn bilinear_backward<E: Elem>(
    dy: &[E],
    planes: usize,
    h: usize,
    w: usize,
    oh: usize,
    ow: usize,
    dx: &mut [E],
) {
    if oh == h && ow == w {
        for (d, &g) in dx.iter_mut().zip(dy) {
            *d = *d + g;
        }
        return;
    }
    let ys: Vec<(usize, usize, f64)> = (0..oh).map(|i| bilinear_axis(i, oh, h)).collect();
    let xs: Vec<(usize, usize, f64)> = (0..ow).map(|j| bilinear_axis(j, ow, w)).collect();
    for p in 0..planes {
        let grad = &mut dx[p * h * w..(p + 1) * h * w];
        let gout = &dy[p * oh * ow..(p + 1) * oh * ow];
        for (oy, &(y0, y1, wy)) in ys.iter().enumerate() {
            let wy = elem::<E>(wy);
            for (ox, &(x0, x1, wx)) in xs.iter().enumerate() {
                let wx = elem::<E>(wx);
                let g = gout[oy * ow + ox];
                grad[y0 * w + x0] = grad[y0 * w + x0] + g * (E::one() - wy) * (E::one() - wx);
                grad[y0 * w + x1] = grad[y0 * w + x1] + g * (E::one() - wy) * wx;
                grad[y1 * w + x0] = grad[y1 * w + x0] + g * wy * (E::one() - wx);
                grad[y1 * w + x1] = grad[y1 * w + x1] + g * wy * wx;
            }
        }
    }
}

/// Shape [outer, axis_len, inner] view of a flat tensor for axis reductions.
pub fn axis_split(shape: &[usize], axis: usize) -> (usize, usize, usize) {
    let outer: usize = shape[..axis].iter().product();
    let inner: usize = shape[axis + 1..].iter().product();
    (outer, shape[axis], inner)
}

/// Numerically stabilized softmax along `axis`.
pub fn softmax_forward<E: Elem>(x: &[E], shape: &[usize], axis: usize, y: &mut [E]) {
    let (outer, a, inner) = axis_split(shape, axis);
    for o in 0..outer {
        for i in 0..inner {
            let base = o * a * inner + i;
            let mut m = x[base];
            for t in 1..a {
                let v = x[base + t * inner];
                if v > m {
                    m = v;
                }
            }
            let mut s = E::zero();
            for t in 0..a {
                let e = (x[base + t * inner] - m).exp();
                y[base + t * inner] = e;
                s = s + e;
            }
            for t in 0..a {
                y[base + t * inner] = y[base + t * inner] / s;
            }
        }
    }
}

/// dx += y .* (dy - sum(dy .* y, axis))
pub fn softmax_backward<E: Elem>(y: &[E], dy: &[E], shape: &[usize], axis: usize, dx: &mut [E]) {
    let (outer, a, inner) = axis_split(shape, axis);
    for o in 0..outer {
        for i in 0..inner {
            let base = o * a * inner + i;
            let mut dot = E::zero();
            for t in 0..a {
                dot = dot + dy[base + t * inner] * y[base + t * inner];
            }
            for t in 0..a {
                let idx = base + t * inner;
                dx[idx] = dx[idx] + y[idx] * (dy[idx] - dot);
            }
        }
    }
}

#[cfg(test)]
mod bench {
    //! Temporary microbenchmark, run with:
    //!   cargo test -p znext-core --release --lib kernel_bench -- --ignored --nocapture
    use super::*;
    use std::hint::black_box;
    use std::time::Instant;

    fn bench(name: &str, m: usize, k: usize, n: usize, f: impl Fn(&[f32], &[f32], &mut [f32])) {
        let a: Vec<f32> = (0..m * k).map(|i| (i % 97) as f32 * 0.01).collect();
        let b: Vec<f32> = (0..k * n).map(|i| (i % 89) as f32 * 0.01).collect();
        let mut c = vec![0.0f32; m * n];
        f(&a, &b, &mut c);
        let flops = 2.0 * (m * k * n) as f64;
        let reps = ((2e8 / flops).ceil() as usize).max(1);
        let t0 = Instant::now();
        for _ in 0..reps {
            f(black_box(&a), black_box(&b), black_box(&mut c));
        }
        let dt = t0.elapsed().as_secs_f64();
        let gflops = flops * reps as f64 / dt / 1e9;
        println!("{name:20} m={m:<5} k={k:<5} n={n:<5} reps={reps:<6} {gflops:7.2} GFLOP/s");
    }

    #[test]
    #[ignore]
    fn kernel_bench() {
        for &(m, k, n) in &[(16, 144, 4096), (16, 144, 1024), (48, 432, 1024), (16, 16, 1024)] {
            bench("nn (forward conv)", m, k, n, |a, b, c| {
                matmul_nn_acc(a, b, c, m, k, n)
            });
        }
        for &(m, k, n) in &[(16, 4096, 144), (16, 1024, 144), (16, 1024, 16)] {
            bench("nt (weight grad)", m, k, n, |a, b, c| {
                matmul_nt_acc(a, b, c, m, k, n)
            });
        }
        for &(m, k, n) in &[(144, 16, 4096), (144, 16, 1024), (16, 16, 1024)] {
            bench("tn (input grad)", m, k, n, |a, b, c| {
                matmul_tn_acc(a, b, c, m, k, n)
            });
        }
    }
}
