//! Brute-force re-computation of every segmentation metric.
//!
//! Each score is rebuilt from its definition with plain per-pixel and
//! per-threshold loops: no histograms, no suffix sums, no confusion-cell
//! grouping. The conventions (byte quantization, degenerate ground truths,
//! centroid rounding, tie-breaking, epsilon guards) are restated here so a
//! drift in either path shows up as a disagreement.

/// Scalars plus the four 256-point curves for one prediction/truth pair.
pub struct RefMetrics {
    pub mae: f64,
    pub s_measure: f64,
    pub weighted_f: f64,
    pub max_f: f64,
    pub mean_e: f64,
    pub dice: f64,
    pub iou: f64,
    pub precision: Vec<f64>,
    pub recall: Vec<f64>,
    pub f_curve: Vec<f64>,
    pub e_curve: Vec<f64>,
}

const THRESHOLDS: usize = 256;
const BETA_SQ: f64 = 0.3;

/// Enhanced-alignment score of one binarized map, pixel by pixel.
fn e_ref(bin: &[bool], g: &[bool]) -> f64 {
    let n = g.len() as f64;
    let n_fg = g.iter().filter(|&&b| b).count() as f64;
    if n_fg == 0.0 {
        let tn = bin
            .iter()
            .zip(g)
            .filter(|(&b, &gv)| !b && !gv)
            .count() as f64;
        return tn / n;
    }
    if n_fg == n {
        let tp = bin
            .iter()
            .zip(g)
            .filter(|(&b, &gv)| b && gv)
            .count() as f64;
        return tp / n;
    }
    let mu_p = bin.iter().filter(|&&b| b).count() as f64 / n;
    let mu_g = n_fg / n;
    let mut total = 0.0;
    for (&b, &gv) in bin.iter().zip(g) {
        let ap = if b { 1.0 } else { 0.0 } - mu_p;
        let ag = if gv { 1.0 } else { 0.0 } - mu_g;
        let denom = ap * ap + ag * ag;
        let phi = if denom == 0.0 { 0.0 } else { 2.0 * ap * ag / denom };
        total += (1.0 + phi) * (1.0 + phi) / 4.0;
    }
    total / n
}

/// Structural similarity of one region under sample (n-1) statistics.
fn ssim_ref(xs: &[f64], ys: &[f64]) -> f64 {
    if xs.is_empty() {
        return 0.0;
    }
    let n = xs.len() as f64;
    let mx = xs.iter().sum::<f64>() / n;
    let my = ys.iter().sum::<f64>() / n;
    let (mut vx, mut vy, mut cov) = (0.0, 0.0, 0.0);
    if xs.len() >= 2 {
        for (&x, &y) in xs.iter().zip(ys) {
            vx += (x - mx) * (x - mx);
            vy += (y - my) * (y - my);
            cov += (x - mx) * (y - my);
        }
        vx /= n - 1.0;
        vy /= n - 1.0;
        cov /= n - 1.0;
    }
    let aleph = 4.0 * mx * my * cov;
    let beth = (mx * mx + my * my) * (vx + vy);
    if aleph != 0.0 {
        aleph / (beth + f64::EPSILON)
    } else if beth == 0.0 {
        1.0
    } else {
        0.0
    }
}

fn s_ref(p: &[f64], g: &[bool], h: usize, w: usize) -> f64 {
    let n = p.len() as f64;
    let fg = g.iter().filter(|&&b| b).count();
    let mean_p = p.iter().sum::<f64>() / n;
    if fg == 0 {
        return 1.0 - mean_p;
    }
    if fg == g.len() {
        return mean_p;
    }
    let mu = fg as f64 / n;

    let object = |vals: &[f64]| -> f64 {
        if vals.is_empty() {
            return 0.0;
        }
        let m = vals.iter().sum::<f64>() / vals.len() as f64;
        let var = vals.iter().map(|v| (v - m) * (v - m)).sum::<f64>() / vals.len() as f64;
        2.0 * m / (m * m + 1.0 + var.sqrt() + f64::EPSILON)
    };
    let fg_vals: Vec<f64> = (0..p.len()).filter(|&i| g[i]).map(|i| p[i]).collect();
    let bg_vals: Vec<f64> = (0..p.len()).filter(|&i| !g[i]).map(|i| 1.0 - p[i]).collect();
    let s_object = mu * object(&fg_vals) + (1.0 - mu) * object(&bg_vals);

    let (mut ry, mut rx) = (0.0f64, 0.0f64);
    for i in 0..g.len() {
        if g[i] {
            ry += (i / w) as f64;
            rx += (i % w) as f64;
        }
    }
    let split_r = ((ry / fg as f64).round() as usize + 1).min(h);
    let split_c = ((rx / fg as f64).round() as usize + 1).min(w);
    let mut s_region = 0.0;
    for (r0, r1, c0, c1) in [
        (0, split_r, 0, split_c),
        (0, split_r, split_c, w),
        (split_r, h, 0, split_c),
        (split_r, h, split_c, w),
    ] {
        let mut xs = Vec::new();
        let mut ys = Vec::new();
        for r in r0..r1 {
            for c in c0..c1 {
                xs.push(p[r * w + c]);
                ys.push(if g[r * w + c] { 1.0 } else { 0.0 });
            }
        }
        s_region += (xs.len() as f64 / n) * ssim_ref(&xs, &ys);
    }
    (0.5 * s_object + 0.5 * s_region).max(0.0)
}

fn weighted_f_ref(p: &[f64], g: &[bool], h: usize, w: usize) -> f64 {
    let n_fg = g.iter().filter(|&&b| b).count();
    if n_fg == 0 {
        return 0.0;
    }
    let len = p.len();

    // Exact nearest-foreground search; ties resolve to the smallest
    // row-major foreground index because only a strictly smaller distance
    // displaces the incumbent.
    let mut dist = vec![0.0f64; len];
    let mut idx = vec![0usize; len];
    for r in 0..h {
        for c in 0..w {
            let i = r * w + c;
            if g[i] {
                idx[i] = i;
                continue;
            }
            let mut best = i64::MAX;
            let mut best_i = 0usize;
            for rr in 0..h {
                for cc in 0..w {
                    let j = rr * w + cc;
                    if !g[j] {
                        continue;
                    }
                    let d = (rr as i64 - r as i64).pow(2) + (cc as i64 - c as i64).pow(2);
                    if d < best {
                        best = d;
                        best_i = j;
                    }
                }
            }
            dist[i] = (best as f64).sqrt();
            idx[i] = best_i;
        }
    }

    let e: Vec<f64> = (0..len)
        .map(|i| (p[i] - if g[i] { 1.0 } else { 0.0 }).abs())
        .collect();
    let et: Vec<f64> = (0..len).map(|i| if g[i] { e[i] } else { e[idx[i]] }).collect();

    // 7x7 Gaussian, sigma 5, normalized, zero padding.
    let mut kernel = [0.0f64; 49];
    let mut ksum = 0.0;
    for r in 0..7 {
        for c in 0..7 {
            let dy = r as f64 - 3.0;
            let dx = c as f64 - 3.0;
            let v = (-(dy * dy + dx * dx) / 50.0).exp();
            kernel[r * 7 + c] = v;
            ksum += v;
        }
    }
    for v in &mut kernel {
        *v /= ksum;
    }
    let mut ea = vec![0.0f64; len];
    for r in 0..h {
        for c in 0..w {
            let mut acc = 0.0;
            for kr in 0..7 {
                for kc in 0..7 {
                    let sr = r as i64 + kr as i64 - 3;
                    let sc = c as i64 + kc as i64 - 3;
                    if sr >= 0 && sr < h as i64 && sc >= 0 && sc < w as i64 {
                        acc += kernel[kr * 7 + kc] * et[sr as usize * w + sc as usize];
                    }
                }
            }
            ea[r * w + c] = acc;
        }
    }

    let ln_half = 0.5f64.ln();
    let (mut err_fg, mut err_bg) = (0.0, 0.0);
    for i in 0..len {
        let base = if g[i] && ea[i] < e[i] { ea[i] } else { e[i] };
        if g[i] {
            err_fg += base;
        } else {
            err_bg += base * (2.0 - (ln_half / 5.0 * dist[i]).exp());
        }
    }
    let tpw = (n_fg as f64 - err_fg).max(0.0);
    let recall = tpw / n_fg as f64;
    let precision = tpw / (tpw + err_bg + f64::EPSILON);
    if recall + precision > 0.0 {
        2.0 * recall * precision / (recall + precision)
    } else {
        0.0
    }
}

/// Every metric for a prediction in [0, 1] against a binary ground truth,
/// both flattened row-major over an h x w plane.
pub fn brute_force(p: &[f64], g: &[f64], h: usize, w: usize) -> RefMetrics {
    assert_eq!(p.len(), h * w);
    assert_eq!(g.len(), h * w);
    let gb: Vec<bool> = g.iter().map(|&v| v == 1.0).collect();
    let n = p.len() as f64;
    let n_fg = gb.iter().filter(|&&b| b).count() as f64;

    let mae = (0..p.len())
        .map(|i| (p[i] - g[i]).abs())
        .sum::<f64>()
        / n;

    let q: Vec<usize> = p
        .iter()
        .map(|&v| (v * 255.0).floor().clamp(0.0, 255.0) as usize)
        .collect();
    let mut precision = vec![0.0; THRESHOLDS];
    let mut recall = vec![0.0; THRESHOLDS];
    let mut f_curve = vec![0.0; THRESHOLDS];
    let mut e_curve = vec![0.0; THRESHOLDS];
    for t in 0..THRESHOLDS {
        let bin: Vec<bool> = q.iter().map(|&qi| qi >= t).collect();
        let tp = bin.iter().zip(&gb).filter(|(&b, &gv)| b && gv).count() as f64;
        let fp = bin.iter().zip(&gb).filter(|(&b, &gv)| b && !gv).count() as f64;
        let fnn = n_fg - tp;
        let pr = if tp + fp > 0.0 { tp / (tp + fp) } else { 0.0 };
        let rc = if tp + fnn > 0.0 { tp / (tp + fnn) } else { 0.0 };
        let denom = BETA_SQ * pr + rc;
        precision[t] = pr;
        recall[t] = rc;
        f_curve[t] = if denom > 0.0 {
            (1.0 + BETA_SQ) * pr * rc / denom
        } else {
            0.0
        };
        e_curve[t] = e_ref(&bin, &gb);
    }
    let max_f = f_curve.iter().cloned().fold(0.0, f64::max);
    let mean_e = e_curve.iter().sum::<f64>() / THRESHOLDS as f64;

    let (mut tp5, mut fp5, mut fn5) = (0.0, 0.0, 0.0);
    for i in 0..p.len() {
        match (p[i] >= 0.5, gb[i]) {
            (true, true) => tp5 += 1.0,
            (true, false) => fp5 += 1.0,
            (false, true) => fn5 += 1.0,
            (false, false) => {}
        }
    }
    let dice = if tp5 + fp5 + fn5 == 0.0 {
        1.0
    } else {
        2.0 * tp5 / (2.0 * tp5 + fp5 + fn5)
    };
    let iou = if tp5 + fp5 + fn5 == 0.0 {
        1.0
    } else {
        tp5 / (tp5 + fp5 + fn5)
    };

    RefMetrics {
        mae,
        s_measure: s_ref(p, &gb, h, w),
        weighted_f: weighted_f_ref(p, &gb, h, w),
        max_f,
        mean_e,
        dice,
        iou,
        precision,
        recall,
        f_curve,
        e_curve,
    }
}

/// The eight 3x3 ground-truth patterns the exhaustive sweep runs against:
/// empty, full, center dot, corner dot, plus sign, top row, left column,
/// and the main diagonal.
pub const GT_PATTERNS: [u16; 8] = [
    0b000_000_000,
    0b111_111_111,
    0b000_010_000,
    0b000_000_001,
    0b010_111_010,
    0b000_000_111,
    0b001_001_001,
    0b100_010_001,
];

/// Bits of a 9-bit pattern as row-major 0.0/1.0 pixels.
pub fn pattern_pixels(bits: u16) -> Vec<f64> {
    (0..9).map(|i| ((bits >> i) & 1) as f64).collect()
}
