//! Segmentation quality measures: MAE, thresholded F-measure and its
//! maximum, structure measure, enhanced-alignment measure, weighted
//! F-measure, Dice/IoU at 0.5, and 256-point PR/F/E curves.
//!
//! Everything is computed per image in f64 and averaged across a dataset.
//! A clip contributes one entry per frame.

use crate::tensor::{Elem, Result, Tensor, TensorError};

/// Thresholds sweep the quantized byte values 0..=255.
pub const NUM_THRESHOLDS: usize = 256;
/// Weight of precision in the F-measure (beta squared).
pub const F_BETA_SQ: f64 = 0.3;
/// Object/region balance in the structure measure.
pub const S_ALPHA: f64 = 0.5;

/// Per-image results. Curves are indexed by threshold byte.
#[derive(Debug, Clone)]
pub struct ImageMetrics {
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
    /// Set when the ground truth was empty, which forces weighted_f = 0.
    pub empty_gt: bool,
}

/// Dataset-level aggregate: scalar means and pointwise-mean curves.
#[derive(Debug, Clone)]
pub struct MetricsReport {
    pub s_measure: f64,
    pub weighted_f: f64,
    pub mae: f64,
    pub max_f: f64,
    pub mean_e: f64,
    pub m_dice: f64,
    pub m_iou: f64,
    pub pr_curve: Vec<(f64, f64)>,
    pub f_curve: Vec<f64>,
    pub e_curve: Vec<f64>,
    pub count: usize,
    pub empty_gt_count: usize,
}

fn flatten_pair<E: Elem>(pred: &Tensor<E>, gt: &Tensor<E>) -> Result<(Vec<f64>, Vec<bool>)> {
    if pred.shape() != gt.shape() {
        return Err(TensorError::Invalid(format!(
            "prediction shape {:?} does not match ground truth {:?}",
            pred.shape(),
            gt.shape()
        )));
    }
    let mut p = Vec::with_capacity(pred.numel());
    for &v in pred.data() {
        let v = v.to_f64().unwrap();
        if !(-1e-6..=1.0 + 1e-6).contains(&v) {
            return Err(TensorError::Invalid(format!(
                "prediction value {v} outside [0, 1]"
            )));
        }
        p.push(v.clamp(0.0, 1.0));
    }
    let mut g = Vec::with_capacity(gt.numel());
    for &v in gt.data() {
        let v = v.to_f64().unwrap();
        if v != 0.0 && v != 1.0 {
            return Err(TensorError::Invalid(format!(
                "ground truth value {v} is not binary"
            )));
        }
        g.push(v == 1.0);
    }
    Ok((p, g))
}

/// Spatial dimensions of a map shaped [H, W], [1, H, W], or [1, 1, H, W].
fn plane_dims(shape: &[usize]) -> Result<(usize, usize)> {
    match shape {
        [h, w] => Ok((*h, *w)),
        [1, h, w] => Ok((*h, *w)),
        [1, 1, h, w] => Ok((*h, *w)),
        other => Err(TensorError::Invalid(format!(
            "expected a single-channel map, got shape {other:?}"
        ))),
    }
}

/// F-measure from confusion counts; 0 whenever a denominator vanishes.
fn f_measure(tp: f64, fp: f64, fnn: f64) -> (f64, f64, f64) {
    let precision = if tp + fp > 0.0 { tp / (tp + fp) } else { 0.0 };
    let recall = if tp + fnn > 0.0 { tp / (tp + fnn) } else { 0.0 };
    let denom = F_BETA_SQ * precision + recall;
    let f = if denom > 0.0 {
        (1.0 + F_BETA_SQ) * precision * recall / denom
    } else {
        0.0
    };
    (precision, recall, f)
}

/// Sample statistics (mean, variance with n-1, covariance with n-1);
/// variance terms are 0 for fewer than two points.
fn sample_stats(xs: &[f64], ys: &[f64]) -> (f64, f64, f64, f64, f64) {
    let n = xs.len() as f64;
    let mx = xs.iter().sum::<f64>() / n;
    let my = ys.iter().sum::<f64>() / n;
    if xs.len() < 2 {
        return (mx, my, 0.0, 0.0, 0.0);
    }
    let mut vx = 0.0;
    let mut vy = 0.0;
    let mut cov = 0.0;
    for (&x, &y) in xs.iter().zip(ys) {
        vx += (x - mx) * (x - mx);
        vy += (y - my) * (y - my);
        cov += (x - mx) * (y - my);
    }
    let d = n - 1.0;
    (mx, my, vx / d, vy / d, cov / d)
}

/// Structural similarity of one region, as used by the structure measure.
fn region_ssim(xs: &[f64], ys: &[f64]) -> f64 {
    if xs.is_empty() {
        return 0.0;
    }
    let (mx, my, vx, vy, cov) = sample_stats(xs, ys);
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

/// Structure measure: object-aware and region-aware structural similarity.
/// All-background ground truth scores 1 - mean(pred); all-foreground scores
/// mean(pred).
fn s_measure(p: &[f64], g: &[bool], h: usize, w: usize) -> f64 {
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

    // Object term: foreground scored on pred, background on its complement,
    // each via 2m / (m^2 + 1 + s) with the population standard deviation s.
    let object_score = |vals: &[f64]| -> f64 {
        if vals.is_empty() {
            return 0.0;
        }
        let m = vals.iter().sum::<f64>() / vals.len() as f64;
        let var = vals.iter().map(|v| (v - m) * (v - m)).sum::<f64>() / vals.len() as f64;
        2.0 * m / (m * m + 1.0 + var.sqrt() + f64::EPSILON)
    };
    let fg_vals: Vec<f64> = p
        .iter()
        .zip(g)
        .filter(|(_, &b)| b)
        .map(|(&v, _)| v)
        .collect();
    let bg_vals: Vec<f64> = p
        .iter()
        .zip(g)
        .filter(|(_, &b)| !b)
        .map(|(&v, _)| 1.0 - v)
        .collect();
    let s_object = mu * object_score(&fg_vals) + (1.0 - mu) * object_score(&bg_vals);

    // Region term: split both maps at the foreground centroid and compare
    // structural similarity per quadrant, weighted by quadrant area.
    let mut ry = 0.0;
    let mut rx = 0.0;
    for (i, &b) in g.iter().enumerate() {
        if b {
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
        let mut xs = Vec::with_capacity((r1 - r0) * (c1 - c0));
        let mut ys = Vec::with_capacity(xs.capacity());
        for r in r0..r1 {
            for c in c0..c1 {
                xs.push(p[r * w + c]);
                ys.push(if g[r * w + c] { 1.0 } else { 0.0 });
            }
        }
        let weight = xs.len() as f64 / n;
        s_region += weight * region_ssim(&xs, &ys);
    }
    (S_ALPHA * s_object + (1.0 - S_ALPHA) * s_region).max(0.0)
}

/// Exact Euclidean distance from each pixel to the nearest foreground
/// pixel, plus that pixel's index (smallest row-major index on ties).
/// Foreground pixels map to themselves at distance 0.
fn distance_transform(g: &[bool], h: usize, w: usize) -> (Vec<f64>, Vec<usize>) {
    let fg: Vec<(i64, i64, usize)> = g
        .iter()
        .enumerate()
        .filter(|(_, &b)| b)
        .map(|(i, _)| ((i / w) as i64, (i % w) as i64, i))
        .collect();
    let mut dist = vec![f64::INFINITY; g.len()];
    let mut idx = vec![0usize; g.len()];
    for r in 0..h {
        for c in 0..w {
            let i = r * w + c;
            if g[i] {
                dist[i] = 0.0;
                idx[i] = i;
                continue;
            }
            let mut best = i64::MAX;
            let mut best_i = 0usize;
            for &(fr, fc, fi) in &fg {
                let d = (fr - r as i64).pow(2) + (fc - c as i64).pow(2);
                if d < best {
                    best = d;
                    best_i = fi;
                }
            }
            dist[i] = (best as f64).sqrt();
            idx[i] = best_i;
        }
    }
    (dist, idx)
}

/// 7x7 Gaussian (sigma 5) correlation with zero padding.
fn gaussian_filter(src: &[f64], h: usize, w: usize) -> Vec<f64> {
    const K: usize = 7;
    const SIGMA: f64 = 5.0;
    let mut kernel = [0.0f64; K * K];
    let mut sum = 0.0;
    for r in 0..K {
        for c in 0..K {
            let dy = r as f64 - 3.0;
            let dx = c as f64 - 3.0;
            let v = (-(dy * dy + dx * dx) / (2.0 * SIGMA * SIGMA)).exp();
            kernel[r * K + c] = v;
            sum += v;
        }
    }
    for v in &mut kernel {
        *v /= sum;
    }
    let mut out = vec![0.0; src.len()];
    for r in 0..h {
        for c in 0..w {
            let mut acc = 0.0;
            for kr in 0..K {
                for kc in 0..K {
                    let sr = r as i64 + kr as i64 - 3;
                    let sc = c as i64 + kc as i64 - 3;
                    if sr >= 0 && sr < h as i64 && sc >= 0 && sc < w as i64 {
                        acc += kernel[kr * K + kc] * src[sr as usize * w + sc as usize];
                    }
                }
            }
            out[r * w + c] = acc;
        }
    }
    out
}

/// Weighted F-measure: errors are smoothed toward the object interior and
/// background errors gain weight with distance from the object, so stray
/// far-field responses cost more than boundary fuzz. Empty ground truth
/// scores 0 (flagged upstream).
fn weighted_f_measure(p: &[f64], g: &[bool], h: usize, w: usize) -> f64 {
    let n_fg = g.iter().filter(|&&b| b).count();
    if n_fg == 0 {
        return 0.0;
    }
    let (dist, idx) = distance_transform(g, h, w);
    let e: Vec<f64> = p
        .iter()
        .zip(g)
        .map(|(&pv, &gv)| (pv - if gv { 1.0 } else { 0.0 }).abs())
        .collect();
    // Background pixels borrow the error of their nearest foreground pixel
    // before smoothing.
    let et: Vec<f64> = e
        .iter()
        .enumerate()
        .map(|(i, &v)| if g[i] { v } else { e[idx[i]] })
        .collect();
    let ea = gaussian_filter(&et, h, w);
    let min_e_ea: Vec<f64> = e
        .iter()
        .enumerate()
        .map(|(i, &v)| if g[i] && ea[i] < v { ea[i] } else { v })
        .collect();
    // Distance-based weighting of background errors.
    let ln_half = 0.5f64.ln();
    let ew: Vec<f64> = min_e_ea
        .iter()
        .enumerate()
        .map(|(i, &v)| {
            if g[i] {
                v
            } else {
                v * (2.0 - (ln_half / 5.0 * dist[i]).exp())
            }
        })
        .collect();
    let err_fg: f64 = ew.iter().zip(g).filter(|(_, &b)| b).map(|(&v, _)| v).sum();
    let err_bg: f64 = ew
        .iter()
        .zip(g)
        .filter(|(_, &b)| !b)
        .map(|(&v, _)| v)
        .sum();
    let tpw = (n_fg as f64 - err_fg).max(0.0);
    let fpw = err_bg;
    let recall = tpw / n_fg as f64;
    let precision = tpw / (tpw + fpw + f64::EPSILON);
    let denom = recall + precision;
    if denom > 0.0 {
        2.0 * recall * precision / denom
    } else {
        0.0
    }
}

/// Enhanced-alignment score for one thresholded prediction, via the
/// four-way confusion decomposition. Degenerate ground truths use the
/// complement/identity convention.
fn e_score(tp: f64, fp: f64, fnn: f64, tn: f64) -> f64 {
    let n = tp + fp + fnn + tn;
    let n_fg = tp + fnn;
    let pp = tp + fp;
    if n_fg == 0.0 {
        // Empty ground truth: score the fraction of pixels left unpredicted.
        return tn / n;
    }
    if n_fg == n {
        return tp / n;
    }
    let mu_p = pp / n;
    let mu_g = n_fg / n;
    let mut total = 0.0;
    for (count, bin, gt) in [
        (tp, 1.0, 1.0),
        (fp, 1.0, 0.0),
        (fnn, 0.0, 1.0),
        (tn, 0.0, 0.0),
    ] {
        if count == 0.0 {
            continue;
        }
        let ap = bin - mu_p;
        let ag = gt - mu_g;
        let denom = ap * ap + ag * ag;
        let phi = if denom == 0.0 { 0.0 } else { 2.0 * ap * ag / denom };
        let enhanced = (1.0 + phi) * (1.0 + phi) / 4.0;
        total += count * enhanced;
    }
    total / n
}

/// Evaluate one prediction against one binary ground truth.
pub fn evaluate_pair<E: Elem>(pred: &Tensor<E>, gt: &Tensor<E>) -> Result<ImageMetrics> {
    let (h, w) = plane_dims(pred.shape())?;
    let (p, g) = flatten_pair(pred, gt)?;
    let n = p.len() as f64;
    let n_fg = g.iter().filter(|&&b| b).count() as f64;

    let mae = p
        .iter()
        .zip(&g)
        .map(|(&pv, &gv)| (pv - if gv { 1.0 } else { 0.0 }).abs())
        .sum::<f64>()
        / n;

    // Byte histograms split by ground truth drive every threshold sweep.
    let mut hist_fg = [0u64; NUM_THRESHOLDS];
    let mut hist_bg = [0u64; NUM_THRESHOLDS];
    for (&pv, &gv) in p.iter().zip(&g) {
        let q = (pv * 255.0).floor().clamp(0.0, 255.0) as usize;
        if gv {
            hist_fg[q] += 1;
        } else {
            hist_bg[q] += 1;
        }
    }
    let mut precision = vec![0.0; NUM_THRESHOLDS];
    let mut recall = vec![0.0; NUM_THRESHOLDS];
    let mut f_curve = vec![0.0; NUM_THRESHOLDS];
    let mut e_curve = vec![0.0; NUM_THRESHOLDS];
    let mut tp = 0u64;
    let mut fp = 0u64;
    for t in (0..NUM_THRESHOLDS).rev() {
        tp += hist_fg[t];
        fp += hist_bg[t];
        let fnn = n_fg - tp as f64;
        let tn = (n - n_fg) - fp as f64;
        let (pr, rc, f) = f_measure(tp as f64, fp as f64, fnn);
        precision[t] = pr;
        recall[t] = rc;
        f_curve[t] = f;
        e_curve[t] = e_score(tp as f64, fp as f64, fnn, tn);
    }
    let max_f = f_curve.iter().cloned().fold(0.0, f64::max);
    let mean_e = e_curve.iter().sum::<f64>() / NUM_THRESHOLDS as f64;

    // Dice / IoU at the fixed 0.5 threshold; empty-vs-empty counts as a
    // perfect match.
    let (mut dtp, mut dfp, mut dfn) = (0.0, 0.0, 0.0);
    for (&pv, &gv) in p.iter().zip(&g) {
        let pb = pv >= 0.5;
        match (pb, gv) {
            (true, true) => dtp += 1.0,
            (true, false) => dfp += 1.0,
            (false, true) => dfn += 1.0,
            (false, false) => {}
        }
    }
    let dice = if dtp + dfp + dfn == 0.0 {
        1.0
    } else {
        2.0 * dtp / (2.0 * dtp + dfp + dfn)
    };
    let iou = if dtp + dfp + dfn == 0.0 {
        1.0
    } else {
        dtp / (dtp + dfp + dfn)
    };

    Ok(ImageMetrics {
        mae,
        s_measure: s_measure(&p, &g, h, w),
        weighted_f: weighted_f_measure(&p, &g, h, w),
        max_f,
        mean_e,
        dice,
        iou,
        precision,
        recall,
        f_curve,
        e_curve,
        empty_gt: n_fg == 0.0,
    })
}

/// Average per-image metrics into a dataset report.
pub fn aggregate(items: &[ImageMetrics]) -> MetricsReport {
    let count = items.len();
    let n = count.max(1) as f64;
    let mean = |f: fn(&ImageMetrics) -> f64| items.iter().map(f).sum::<f64>() / n;
    let mut pr_curve = vec![(0.0, 0.0); NUM_THRESHOLDS];
    let mut f_curve = vec![0.0; NUM_THRESHOLDS];
    let mut e_curve = vec![0.0; NUM_THRESHOLDS];
    for it in items {
        for t in 0..NUM_THRESHOLDS {
            pr_curve[t].0 += it.precision[t] / n;
            pr_curve[t].1 += it.recall[t] / n;
            f_curve[t] += it.f_curve[t] / n;
            e_curve[t] += it.e_curve[t] / n;
        }
    }
    MetricsReport {
        s_measure: mean(|m| m.s_measure),
        weighted_f: mean(|m| m.weighted_f),
        mae: mean(|m| m.mae),
        max_f: mean(|m| m.max_f),
        mean_e: mean(|m| m.mean_e),
        m_dice: mean(|m| m.dice),
        m_iou: mean(|m| m.iou),
        pr_curve,
        f_curve,
        e_curve,
        count,
        empty_gt_count: items.iter().filter(|m| m.empty_gt).count(),
    }
}

const SCALAR_HEADER: &str = "name,s_measure,weighted_f,mae,max_f,mean_e,dice,iou";

/// Per-image rows plus a trailing mean row, as CSV.
pub fn report_csv(names: &[String], items: &[ImageMetrics], report: &MetricsReport) -> String {
    assert_eq!(names.len(), items.len());
    let mut out = String::from(SCALAR_HEADER);
    out.push('\n');
    for (name, m) in names.iter().zip(items) {
        out.push_str(&format!(
            "{},{:.8},{:.8},{:.8},{:.8},{:.8},{:.8},{:.8}\n",
            name, m.s_measure, m.weighted_f, m.mae, m.max_f, m.mean_e, m.dice, m.iou
        ));
    }
    out.push_str(&format!(
        "mean,{:.8},{:.8},{:.8},{:.8},{:.8},{:.8},{:.8}\n",
        report.s_measure,
        report.weighted_f,
        report.mae,
        report.max_f,
        report.mean_e,
        report.m_dice,
        report.m_iou
    ));
    out
}

/// 256-row curve CSVs: (PR, F, E).
pub fn curves_csv(report: &MetricsReport) -> (String, String, String) {
    let mut pr = String::from("threshold,precision,recall\n");
    let mut f = String::from("threshold,f_measure\n");
    let mut e = String::from("threshold,e_measure\n");
    for t in 0..NUM_THRESHOLDS {
        pr.push_str(&format!(
            "{},{:.8},{:.8}\n",
            t, report.pr_curve[t].0, report.pr_curve[t].1
        ));
        f.push_str(&format!("{},{:.8}\n", t, report.f_curve[t]));
        e.push_str(&format!("{},{:.8}\n", t, report.e_curve[t]));
    }
    (pr, f, e)
}
