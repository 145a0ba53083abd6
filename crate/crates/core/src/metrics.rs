//! Evaluation measures for binary segmentation maps and the composite Score.
//!
//! Four per-sample measures are exposed: mean absolute error, the structure
//! measure, the mean enhanced-alignment measure over 256 binarization
//! thresholds, and the boundary-aware weighted F-measure. All take an
//! estimated map with values in `[0, 1]` and a binary ground-truth map of the
//! same shape, and all run in `f64`.
//!
//! The implementations here are the optimized production route (closed-form
//! per-threshold counts, an exact integer distance transform, separable
//! filtering). The `reference` module holds deliberately naive plain-loop
//! translations of the same definitions; the test suites hold the two routes
//! against each other.

use alloc::boxed::Box;
use alloc::vec;
use alloc::vec::Vec;

use ndarray::{s, Array2, ArrayView2};
use thiserror::Error;

use crate::fmath;

/// Stabilizer used by the measure definitions, the double-precision machine
/// epsilon.
pub const EPS: f64 = f64::EPSILON;

#[derive(Error, Debug, Clone, PartialEq)]
pub enum MetricError {
    #[error("shape mismatch: prediction {0}x{1} vs ground truth {2}x{3}")]
    ShapeMismatch(usize, usize, usize, usize),
    #[error("maps must be non-empty")]
    EmptyMap,
    #[error("ground truth must be binary, found {found} at ({row}, {col})")]
    NonBinaryGt { found: f64, row: usize, col: usize },
    #[error("prediction value {found} at ({row}, {col}) outside [0, 1]")]
    PredOutOfRange { found: f64, row: usize, col: usize },
    #[error("no samples to evaluate")]
    NoSamples,
    #[error("sample {index}: {source}")]
    Sample {
        index: usize,
        #[source]
        source: Box<MetricError>,
    },
}

fn validate_pair(pred: &Array2<f64>, gt: &Array2<f64>) -> Result<(), MetricError> {
    if pred.dim() != gt.dim() {
        let ((p0, p1), (g0, g1)) = (pred.dim(), gt.dim());
        return Err(MetricError::ShapeMismatch(p0, p1, g0, g1));
    }
    if pred.is_empty() {
        return Err(MetricError::EmptyMap);
    }
    for ((row, col), &v) in gt.indexed_iter() {
        if v != 0.0 && v != 1.0 {
            return Err(MetricError::NonBinaryGt { found: v, row, col });
        }
    }
    for ((row, col), &v) in pred.indexed_iter() {
        if !(0.0..=1.0).contains(&v) {
            return Err(MetricError::PredOutOfRange { found: v, row, col });
        }
    }
    Ok(())
}

/// Mean absolute error between an estimated map and a binary ground truth.
pub fn mae(pred: &Array2<f64>, gt: &Array2<f64>) -> Result<f64, MetricError> {
    validate_pair(pred, gt)?;
    let sum: f64 = pred
        .iter()
        .zip(gt.iter())
        .map(|(&p, &g)| fmath::abs(p - g))
        .sum();
    Ok(sum / pred.len() as f64)
}

/// Structure measure with the conventional object/region mixing weight 0.5.
pub fn s_measure(pred: &Array2<f64>, gt: &Array2<f64>) -> Result<f64, MetricError> {
    s_measure_alpha(pred, gt, 0.5)
}

/// Structure measure: `alpha * S_object + (1 - alpha) * S_region`, with the
/// degenerate branches of the original definition. A ground truth without
/// foreground scores `1 - mean(pred)`; one without background scores
/// `mean(pred)`.
pub fn s_measure_alpha(
    pred: &Array2<f64>,
    gt: &Array2<f64>,
    alpha: f64,
) -> Result<f64, MetricError> {
    validate_pair(pred, gt)?;
    let n = pred.len() as f64;
    let mu = gt.sum() / n;
    let pred_mean = pred.sum() / n;
    let q = if mu == 0.0 {
        1.0 - pred_mean
    } else if mu == 1.0 {
        pred_mean
    } else {
        alpha * s_object(pred, gt, mu) + (1.0 - alpha) * s_region(pred, gt)
    };
    Ok(q.clamp(0.0, 1.0))
}

/// Object-level similarity `2*mean / (mean^2 + 1 + std)` for one region's
/// values, with the sample (n-1) standard deviation.
fn object_score(values: impl Iterator<Item = f64> + Clone) -> f64 {
    let mut n = 0usize;
    let mut sum = 0.0;
    for v in values.clone() {
        n += 1;
        sum += v;
    }
    if n == 0 {
        return 0.0;
    }
    let mean = sum / n as f64;
    let std = if n <= 1 {
        0.0
    } else {
        let ss: f64 = values.map(|v| (v - mean) * (v - mean)).sum();
        fmath::sqrt(ss / (n - 1) as f64)
    };
    2.0 * mean / (mean * mean + 1.0 + std + EPS)
}

fn s_object(pred: &Array2<f64>, gt: &Array2<f64>, mu: f64) -> f64 {
    let fg = object_score(
        pred.iter()
            .zip(gt.iter())
            .filter(|&(_, &g)| g == 1.0)
            .map(|(&p, _)| p),
    );
    let bg = object_score(
        pred.iter()
            .zip(gt.iter())
            .filter(|&(_, &g)| g == 0.0)
            .map(|(&p, _)| 1.0 - p),
    );
    mu * fg + (1.0 - mu) * bg
}

/// Foreground centroid with 1-based coordinates, each rounded half away from
/// zero, matching the original region-split convention.
fn centroid_1based(gt: &Array2<f64>) -> (usize, usize) {
    let (h, w) = gt.dim();
    let total = gt.sum();
    let mut col_acc = 0.0;
    let mut row_acc = 0.0;
    for ((r, c), &g) in gt.indexed_iter() {
        col_acc += g * (c + 1) as f64;
        row_acc += g * (r + 1) as f64;
    }
    let x = fmath::round(col_acc / total) as usize;
    let y = fmath::round(row_acc / total) as usize;
    (y.clamp(1, h), x.clamp(1, w))
}

/// Structural-similarity style score of one region pair, with (n-1+eps)
/// normalized moments.
fn region_ssim(pred: ArrayView2<'_, f64>, gt: ArrayView2<'_, f64>) -> f64 {
    let n = pred.len() as f64;
    let x = pred.sum() / n;
    let y = gt.sum() / n;
    let mut sx = 0.0;
    let mut sy = 0.0;
    let mut sxy = 0.0;
    for (&p, &g) in pred.iter().zip(gt.iter()) {
        sx += (p - x) * (p - x);
        sy += (g - y) * (g - y);
        sxy += (p - x) * (g - y);
    }
    let denom = n - 1.0 + EPS;
    let (sx, sy, sxy) = (sx / denom, sy / denom, sxy / denom);
    let alpha = 4.0 * x * y * sxy;
    let beta = (x * x + y * y) * (sx + sy);
    if alpha != 0.0 {
        alpha / (beta + EPS)
    } else if beta == 0.0 {
        1.0
    } else {
        0.0
    }
}

fn s_region(pred: &Array2<f64>, gt: &Array2<f64>) -> f64 {
    let (h, w) = gt.dim();
    let (y, x) = centroid_1based(gt);
    let area = (h * w) as f64;
    // Quadrant weights are block-area fractions around the centroid.
    let weights = [
        (x * y) as f64 / area,
        ((w - x) * y) as f64 / area,
        (x * (h - y)) as f64 / area,
        0.0,
    ];
    let w4 = 1.0 - weights[0] - weights[1] - weights[2];
    let spans = [
        (0..y, 0..x),
        (0..y, x..w),
        (y..h, 0..x),
        (y..h, x..w),
    ];
    let mut q = 0.0;
    for (i, (rows, cols)) in spans.into_iter().enumerate() {
        if rows.is_empty() || cols.is_empty() {
            continue;
        }
        let weight = if i == 3 { w4 } else { weights[i] };
        let pq = pred.slice(s![rows.clone(), cols.clone()]);
        let gq = gt.slice(s![rows, cols]);
        q += weight * region_ssim(pq, gq);
    }
    q
}

/// Enhanced-alignment score for one binarized map against the ground truth,
/// computed from the four (map, gt) class counts in closed form.
fn enhanced_alignment_from_counts(n: usize, n_gt: usize, n_fm: usize, n_tp: usize) -> f64 {
    let nf = n as f64;
    let sum = if n_gt == 0 {
        (n - n_fm) as f64
    } else if n_gt == n {
        n_fm as f64
    } else {
        let mu_fm = n_fm as f64 / nf;
        let mu_gt = n_gt as f64 / nf;
        let classes = [
            (1.0, 1.0, n_tp),
            (1.0, 0.0, n_fm - n_tp),
            (0.0, 1.0, n_gt - n_tp),
            (0.0, 0.0, (n + n_tp) - n_fm - n_gt),
        ];
        let mut acc = 0.0;
        for (f, g, count) in classes {
            let df = f - mu_fm;
            let dg = g - mu_gt;
            let align = 2.0 * df * dg / (df * df + dg * dg + EPS);
            let enhanced = (align + 1.0) * (align + 1.0) / 4.0;
            acc += count as f64 * enhanced;
        }
        acc
    };
    sum / (nf - 1.0 + EPS)
}

/// Mean enhanced-alignment measure: the map is binarized at the 256
/// thresholds `i/255` (inclusive, `pred >= t`) and the per-threshold scores
/// are averaged.
///
/// The original definition normalizes each per-threshold score by `n - 1`,
/// which pushes the raw mean slightly above 1 for near-perfect maps with few
/// pixels; the result is clamped to the declared `[0, 1]` range.
pub fn e_measure_mean(pred: &Array2<f64>, gt: &Array2<f64>) -> Result<f64, MetricError> {
    validate_pair(pred, gt)?;
    let n = pred.len();
    let n_gt = gt.iter().filter(|&&g| g == 1.0).count();

    let mut all: Vec<f64> = pred.iter().copied().collect();
    all.sort_unstable_by(f64::total_cmp);
    let mut fg: Vec<f64> = pred
        .iter()
        .zip(gt.iter())
        .filter(|&(_, &g)| g == 1.0)
        .map(|(&p, _)| p)
        .collect();
    fg.sort_unstable_by(f64::total_cmp);

    let mut acc = 0.0;
    for i in 0..=255u32 {
        let t = i as f64 / 255.0;
        let n_fm = n - all.partition_point(|&v| v < t);
        let n_tp = fg.len() - fg.partition_point(|&v| v < t);
        acc += enhanced_alignment_from_counts(n, n_gt, n_fm, n_tp);
    }
    Ok((acc / 256.0).clamp(0.0, 1.0))
}

/// Integer square root, exact for non-negative inputs.
fn isqrt(v: i64) -> i64 {
    debug_assert!(v >= 0);
    let mut r = fmath::sqrt(v as f64) as i64;
    while (r + 1) * (r + 1) <= v {
        r += 1;
    }
    while r * r > v {
        r -= 1;
    }
    r
}

/// Exact squared Euclidean distance transform: for every pixel, the squared
/// distance to the nearest foreground pixel. Two-pass (per-column, then
/// per-row lower envelope) in pure integer arithmetic.
fn squared_distance_transform(fg: &Array2<bool>) -> Array2<i64> {
    let (h, w) = fg.dim();
    let big = (h + w + 1) as i64;
    // Vertical pass: distance to the nearest foreground pixel in the same
    // column, or `big` when the column has none.
    let mut g = Array2::<i64>::from_elem((h, w), big);
    for c in 0..w {
        for r in 0..h {
            if fg[(r, c)] {
                g[(r, c)] = 0;
            } else if r > 0 {
                g[(r, c)] = (g[(r - 1, c)] + 1).min(big);
            }
        }
        for r in (0..h.saturating_sub(1)).rev() {
            if g[(r + 1, c)] + 1 < g[(r, c)] {
                g[(r, c)] = g[(r + 1, c)] + 1;
            }
        }
    }
    // Horizontal pass: lower envelope of the parabolas
    // f_i(c) = (c - i)^2 + g(r, i)^2 per row.
    let mut d2 = Array2::<i64>::zeros((h, w));
    let mut sites: Vec<usize> = vec![0; w];
    let mut starts: Vec<usize> = vec![0; w];
    for r in 0..h {
        let f = |c: i64, i: usize| {
            let dc = c - i as i64;
            let gv = g[(r, i)];
            dc * dc + gv * gv
        };
        // Integer abscissa beyond which parabola `u` beats parabola `i`.
        let sep = |i: usize, u: usize| {
            let (i, u, gi, gu) = (i as i64, u as i64, g[(r, i as usize)], g[(r, u as usize)]);
            (u * u - i * i + gu * gu - gi * gi).div_euclid(2 * (u - i))
        };
        let mut q = 0usize;
        sites[0] = 0;
        starts[0] = 0;
        let mut empty = true;
        for u in 0..w {
            if empty {
                sites[0] = u;
                starts[0] = 0;
                empty = false;
                continue;
            }
            loop {
                let t = starts[q] as i64;
                if f(t, sites[q]) > f(t, u) {
                    if q == 0 {
                        sites[0] = u;
                        starts[0] = 0;
                        break;
                    }
                    q -= 1;
                } else {
                    let start = sep(sites[q], u) + 1;
                    if (start as usize) < w && start >= 0 {
                        q += 1;
                        sites[q] = u;
                        starts[q] = start as usize;
                    }
                    break;
                }
            }
        }
        for c in (0..w).rev() {
            d2[(r, c)] = f(c as i64, sites[q]);
            if q > 0 && c == starts[q] {
                q -= 1;
            }
        }
    }
    d2
}

/// Exact distance transform with nearest-site recovery. Returns per pixel the
/// squared distance to the nearest foreground pixel and that pixel's
/// coordinates. Ties between equidistant sites are broken toward the smaller
/// column, then the smaller row; the plain-loop reference route pins the same
/// rule, so the two stay comparable on tie-heavy inputs.
pub fn distance_transform_with_sites(
    fg: &Array2<bool>,
) -> (Array2<i64>, Vec<(usize, usize)>) {
    let (h, w) = fg.dim();
    let d2 = squared_distance_transform(fg);
    let mut sites = vec![(0usize, 0usize); h * w];
    for r in 0..h {
        for c in 0..w {
            if fg[(r, c)] {
                sites[r * w + c] = (r, c);
                continue;
            }
            let dd = d2[(r, c)];
            let rad = isqrt(dd);
            let mut found = None;
            'scan: for dc in -rad..=rad {
                let cc = c as i64 + dc;
                if cc < 0 || cc >= w as i64 {
                    continue;
                }
                let rem = dd - dc * dc;
                let dr = isqrt(rem);
                if dr * dr != rem {
                    continue;
                }
                let rows = if dr == 0 {
                    [Some(r as i64), None]
                } else {
                    [Some(r as i64 - dr), Some(r as i64 + dr)]
                };
                for rr in rows.into_iter().flatten() {
                    if rr >= 0 && rr < h as i64 && fg[(rr as usize, cc as usize)] {
                        found = Some((rr as usize, cc as usize));
                        break 'scan;
                    }
                }
            }
            sites[r * w + c] = found.expect("distance transform produced an unreachable radius");
        }
    }
    (d2, sites)
}

/// 7x7 Gaussian (sigma 5) filtering with zero padding, run separably.
fn gaussian_7x7_sigma5(x: &Array2<f64>) -> Array2<f64> {
    let mut taps = [0.0f64; 7];
    let mut total = 0.0;
    for (i, t) in taps.iter_mut().enumerate() {
        *t = fmath::exp(-((i as f64 - 3.0) * (i as f64 - 3.0)) / 50.0);
        total += *t;
    }
    for t in &mut taps {
        *t /= total;
    }
    let (h, w) = x.dim();
    let mut rows = Array2::<f64>::zeros((h, w));
    for r in 0..h {
        for c in 0..w {
            let mut acc = 0.0;
            for (i, t) in taps.iter().enumerate() {
                let cc = c as i64 + i as i64 - 3;
                if cc >= 0 && cc < w as i64 {
                    acc += t * x[(r, cc as usize)];
                }
            }
            rows[(r, c)] = acc;
        }
    }
    let mut out = Array2::<f64>::zeros((h, w));
    for c in 0..w {
        for r in 0..h {
            let mut acc = 0.0;
            for (i, t) in taps.iter().enumerate() {
                let rr = r as i64 + i as i64 - 3;
                if rr >= 0 && rr < h as i64 {
                    acc += t * rows[(rr as usize, c)];
                }
            }
            out[(r, c)] = acc;
        }
    }
    out
}

/// Weighted F-measure with beta^2 = 1.
pub fn weighted_fmeasure(pred: &Array2<f64>, gt: &Array2<f64>) -> Result<f64, MetricError> {
    weighted_fmeasure_beta2(pred, gt, 1.0)
}

/// Weighted F-measure: errors are redistributed by foreground dependency
/// (background errors take the value at their nearest foreground pixel,
/// foreground errors may be relaxed toward their Gaussian-smoothed
/// neighbourhood) and weighted down far from the object before computing a
/// precision/recall F-score. A ground truth with no foreground returns the
/// defined constant 0.
pub fn weighted_fmeasure_beta2(
    pred: &Array2<f64>,
    gt: &Array2<f64>,
    beta2: f64,
) -> Result<f64, MetricError> {
    validate_pair(pred, gt)?;
    let (h, w) = gt.dim();
    let fg = gt.mapv(|g| g == 1.0);
    let n_fg = fg.iter().filter(|&&b| b).count();
    if n_fg == 0 {
        return Ok(0.0);
    }

    let err = ndarray::Zip::from(pred)
        .and(gt)
        .map_collect(|&p, &g| fmath::abs(p - g));

    let (d2, sites) = distance_transform_with_sites(&fg);
    let mut err_t = err.clone();
    for r in 0..h {
        for c in 0..w {
            if !fg[(r, c)] {
                err_t[(r, c)] = err[sites[r * w + c]];
            }
        }
    }
    let smoothed = gaussian_7x7_sigma5(&err_t);

    let decay = fmath::ln(0.5) / 5.0;
    let mut fg_err_sum = 0.0;
    let mut bg_err_sum = 0.0;
    for r in 0..h {
        for c in 0..w {
            if fg[(r, c)] {
                // Foreground keeps the smaller of its own error and the
                // smoothed dependency error.
                fg_err_sum += err[(r, c)].min(smoothed[(r, c)]);
            } else {
                // Background keeps its raw error (the propagated map only
                // feeds the smoothing), weighted down with distance from the
                // object.
                let dist = fmath::sqrt(d2[(r, c)] as f64);
                let b = 2.0 - fmath::exp(decay * dist);
                bg_err_sum += err[(r, c)] * b;
            }
        }
    }

    let tp_w = n_fg as f64 - fg_err_sum;
    let fp_w = bg_err_sum;
    let recall = 1.0 - fg_err_sum / n_fg as f64;
    let precision = tp_w / (EPS + tp_w + fp_w);
    let f = (1.0 + beta2) * recall * precision / (EPS + beta2 * precision + recall);
    Ok(f.clamp(0.0, 1.0))
}

/// Composite ranking score `s + e + f - m`.
pub fn score(s: f64, e: f64, f: f64, m: f64) -> f64 {
    s + e + f - m
}

/// Per-dataset metric means plus the composite Score computed from them.
#[derive(Clone, Debug, PartialEq)]
pub struct MetricReport {
    pub s_alpha: f64,
    pub e_phi: f64,
    pub f_w_beta: f64,
    pub mae: f64,
    pub score: f64,
    pub n_samples: usize,
}

/// Evaluates a set of (prediction, ground truth) pairs: per-sample measures
/// averaged over samples, Score computed from the means. Every pair must
/// already be at its original resolution and share a shape.
pub fn evaluate_samples(
    samples: &[(Array2<f64>, Array2<f64>)],
) -> Result<MetricReport, MetricError> {
    if samples.is_empty() {
        return Err(MetricError::NoSamples);
    }
    let mut sums = [0.0f64; 4];
    for (index, (pred, gt)) in samples.iter().enumerate() {
        let wrap = |source: MetricError| MetricError::Sample {
            index,
            source: Box::new(source),
        };
        sums[0] += s_measure(pred, gt).map_err(wrap)?;
        sums[1] += e_measure_mean(pred, gt).map_err(wrap)?;
        sums[2] += weighted_fmeasure(pred, gt).map_err(wrap)?;
        sums[3] += mae(pred, gt).map_err(wrap)?;
    }
    let n = samples.len() as f64;
    let (s, e, f, m) = (sums[0] / n, sums[1] / n, sums[2] / n, sums[3] / n);
    Ok(MetricReport {
        s_alpha: s,
        e_phi: e,
        f_w_beta: f,
        mae: m,
        score: score(s, e, f, m),
        n_samples: samples.len(),
    })
}
