//! Plain-loop reference implementations of the evaluation measures.
//!
//! Everything in this module is a deliberately naive, matrix-at-a-time
//! translation of the measures' original definitions: full per-pixel
//! alignment matrices for every binarization threshold, an all-sites scan for
//! nearest-foreground lookups, direct 2-D convolution. The `metrics` module
//! implements the same definitions with closed forms and separable passes;
//! the test suites compare the two routes. Nothing here is tuned for speed.

use alloc::vec;
use alloc::vec::Vec;

use ndarray::Array2;

use crate::fmath;

const EPS: f64 = 2.220446049250313e-16;

fn round_half_up(x: f64) -> f64 {
    // Coordinates are positive, so this matches round-half-away-from-zero.
    fmath::floor(x + 0.5)
}

/// Mean absolute error, plain loop.
pub fn mean_absolute_error(pred: &Array2<f64>, gt: &Array2<f64>) -> f64 {
    assert_eq!(pred.dim(), gt.dim());
    let mut acc = 0.0;
    for (&p, &g) in pred.iter().zip(gt.iter()) {
        acc += fmath::abs(p - g);
    }
    acc / pred.len() as f64
}

fn vec_mean(v: &[f64]) -> f64 {
    v.iter().sum::<f64>() / v.len() as f64
}

fn sample_std(v: &[f64], mean: f64) -> f64 {
    if v.len() <= 1 {
        return 0.0;
    }
    let ss: f64 = v.iter().map(|&x| (x - mean) * (x - mean)).sum();
    fmath::sqrt(ss / (v.len() - 1) as f64)
}

fn object_term(values: &[f64]) -> f64 {
    if values.is_empty() {
        return 0.0;
    }
    let mean = vec_mean(values);
    let std = sample_std(values, mean);
    2.0 * mean / (mean * mean + 1.0 + std + EPS)
}

fn ssim_term(pred: &[f64], gt: &[f64]) -> f64 {
    let n = pred.len() as f64;
    let x = vec_mean(pred);
    let y = vec_mean(gt);
    let mut sx = 0.0;
    let mut sy = 0.0;
    let mut sxy = 0.0;
    for (&p, &g) in pred.iter().zip(gt.iter()) {
        sx += (p - x) * (p - x);
        sy += (g - y) * (g - y);
        sxy += (p - x) * (g - y);
    }
    sx /= n - 1.0 + EPS;
    sy /= n - 1.0 + EPS;
    sxy /= n - 1.0 + EPS;
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

fn collect_region(map: &Array2<f64>, r0: usize, r1: usize, c0: usize, c1: usize) -> Vec<f64> {
    let mut out = Vec::new();
    for r in r0..r1 {
        for c in c0..c1 {
            out.push(map[(r, c)]);
        }
    }
    out
}

/// Structure measure, literal translation (object term, centroid split,
/// region terms with block-area weights, final clamp).
pub fn structure_measure(pred: &Array2<f64>, gt: &Array2<f64>) -> f64 {
    assert_eq!(pred.dim(), gt.dim());
    let (h, w) = gt.dim();
    let n = (h * w) as f64;
    let mu = gt.sum() / n;
    if mu == 0.0 {
        return 1.0 - pred.sum() / n;
    }
    if mu == 1.0 {
        return pred.sum() / n;
    }

    // Object level.
    let mut fg_vals = Vec::new();
    let mut bg_vals = Vec::new();
    for (&p, &g) in pred.iter().zip(gt.iter()) {
        if g == 1.0 {
            fg_vals.push(p);
        } else {
            bg_vals.push(1.0 - p);
        }
    }
    let s_object = mu * object_term(&fg_vals) + (1.0 - mu) * object_term(&bg_vals);

    // Region level: centroid with 1-based rounded coordinates.
    let total = gt.sum();
    let mut col_acc = 0.0;
    let mut row_acc = 0.0;
    for ((r, c), &g) in gt.indexed_iter() {
        col_acc += g * (c + 1) as f64;
        row_acc += g * (r + 1) as f64;
    }
    let x = round_half_up(col_acc / total) as usize;
    let y = round_half_up(row_acc / total) as usize;

    let area = n;
    let w1 = (x * y) as f64 / area;
    let w2 = ((w - x) * y) as f64 / area;
    let w3 = (x * (h - y)) as f64 / area;
    let w4 = 1.0 - w1 - w2 - w3;
    let quads = [
        (0, y, 0, x, w1),
        (0, y, x, w, w2),
        (y, h, 0, x, w3),
        (y, h, x, w, w4),
    ];
    let mut s_region = 0.0;
    for (r0, r1, c0, c1, weight) in quads {
        if r0 == r1 || c0 == c1 {
            continue;
        }
        let pq = collect_region(pred, r0, r1, c0, c1);
        let gq = collect_region(gt, r0, r1, c0, c1);
        s_region += weight * ssim_term(&pq, &gq);
    }

    let q = 0.5 * s_object + 0.5 * s_region;
    q.clamp(0.0, 1.0)
}

fn enhanced_alignment_single(fm: &Array2<f64>, gt: &Array2<f64>) -> f64 {
    let n = gt.len() as f64;
    let gt_sum = gt.sum();
    let enhanced: Array2<f64> = if gt_sum == 0.0 {
        fm.mapv(|f| 1.0 - f)
    } else if gt_sum == n {
        fm.clone()
    } else {
        let mu_fm = fm.sum() / n;
        let mu_gt = gt_sum / n;
        let mut out = Array2::zeros(fm.raw_dim());
        for ((r, c), e) in out.indexed_iter_mut() {
            let df = fm[(r, c)] - mu_fm;
            let dg = gt[(r, c)] - mu_gt;
            let align = 2.0 * df * dg / (df * df + dg * dg + EPS);
            *e = (align + 1.0) * (align + 1.0) / 4.0;
        }
        out
    };
    enhanced.sum() / (n - 1.0 + EPS)
}

/// Mean enhanced-alignment measure, literal translation: one full binarized
/// map and alignment matrix per threshold `i/255`, averaged, clamped to the
/// declared range.
pub fn enhanced_alignment_mean(pred: &Array2<f64>, gt: &Array2<f64>) -> f64 {
    assert_eq!(pred.dim(), gt.dim());
    let mut acc = 0.0;
    for i in 0..=255u32 {
        let t = i as f64 / 255.0;
        let fm = pred.mapv(|p| if p >= t { 1.0 } else { 0.0 });
        acc += enhanced_alignment_single(&fm, gt);
    }
    (acc / 256.0).clamp(0.0, 1.0)
}

/// Brute-force nearest-foreground transform: for every pixel, scan all
/// foreground pixels and keep the minimum of (squared distance, column, row).
/// Returns squared distances and the chosen sites (row-major indexing).
pub fn nearest_foreground_brute(fg: &Array2<bool>) -> (Array2<i64>, Vec<(usize, usize)>) {
    let (h, w) = fg.dim();
    let mut fg_list = Vec::new();
    for r in 0..h {
        for c in 0..w {
            if fg[(r, c)] {
                fg_list.push((r, c));
            }
        }
    }
    assert!(!fg_list.is_empty(), "needs at least one foreground pixel");
    let mut d2 = Array2::<i64>::zeros((h, w));
    let mut sites = vec![(0usize, 0usize); h * w];
    for r in 0..h {
        for c in 0..w {
            let mut best = (i64::MAX, usize::MAX, usize::MAX);
            for &(rr, cc) in &fg_list {
                let dr = rr as i64 - r as i64;
                let dc = cc as i64 - c as i64;
                let dist = dr * dr + dc * dc;
                let key = (dist, cc, rr);
                if key < best {
                    best = key;
                }
            }
            d2[(r, c)] = best.0;
            sites[r * w + c] = (best.2, best.1);
        }
    }
    (d2, sites)
}

/// Direct (non-separable) 7x7 Gaussian filtering with sigma 5 and zero
/// padding; the kernel is normalized by its full 2-D sum.
pub fn gaussian_7x7_sigma5_direct(x: &Array2<f64>) -> Array2<f64> {
    let mut kernel = [[0.0f64; 7]; 7];
    let mut total = 0.0;
    for (i, row) in kernel.iter_mut().enumerate() {
        for (j, k) in row.iter_mut().enumerate() {
            let di = i as f64 - 3.0;
            let dj = j as f64 - 3.0;
            *k = fmath::exp(-(di * di + dj * dj) / 50.0);
            total += *k;
        }
    }
    for row in &mut kernel {
        for k in row.iter_mut() {
            *k /= total;
        }
    }
    let (h, w) = x.dim();
    let mut out = Array2::<f64>::zeros((h, w));
    for r in 0..h {
        for c in 0..w {
            let mut acc = 0.0;
            for (i, row) in kernel.iter().enumerate() {
                for (j, k) in row.iter().enumerate() {
                    let rr = r as i64 + i as i64 - 3;
                    let cc = c as i64 + j as i64 - 3;
                    if rr >= 0 && rr < h as i64 && cc >= 0 && cc < w as i64 {
                        acc += k * x[(rr as usize, cc as usize)];
                    }
                }
            }
            out[(r, c)] = acc;
        }
    }
    out
}

/// Weighted F-measure (beta^2 = 1), literal translation: raw error map,
/// dependency propagation from nearest foreground sites, direct Gaussian
/// smoothing, distance-decayed background importance, then the F-score.
pub fn weighted_f_measure(pred: &Array2<f64>, gt: &Array2<f64>) -> f64 {
    assert_eq!(pred.dim(), gt.dim());
    let (h, w) = gt.dim();
    let fg = gt.mapv(|g| g == 1.0);
    let n_fg = fg.iter().filter(|&&b| b).count();
    if n_fg == 0 {
        return 0.0;
    }

    let mut err = Array2::<f64>::zeros((h, w));
    for ((r, c), e) in err.indexed_iter_mut() {
        *e = fmath::abs(pred[(r, c)] - gt[(r, c)]);
    }

    let (d2, sites) = nearest_foreground_brute(&fg);
    let mut err_t = err.clone();
    for r in 0..h {
        for c in 0..w {
            if !fg[(r, c)] {
                err_t[(r, c)] = err[sites[r * w + c]];
            }
        }
    }
    let smoothed = gaussian_7x7_sigma5_direct(&err_t);

    let mut min_e_ea = err.clone();
    for r in 0..h {
        for c in 0..w {
            if fg[(r, c)] && smoothed[(r, c)] < err[(r, c)] {
                min_e_ea[(r, c)] = smoothed[(r, c)];
            }
        }
    }

    let mut importance = Array2::<f64>::from_elem((h, w), 1.0);
    for r in 0..h {
        for c in 0..w {
            if !fg[(r, c)] {
                let dist = fmath::sqrt(d2[(r, c)] as f64);
                importance[(r, c)] = 2.0 - fmath::exp(fmath::ln(0.5) / 5.0 * dist);
            }
        }
    }

    let mut fg_err_sum = 0.0;
    let mut bg_err_sum = 0.0;
    for r in 0..h {
        for c in 0..w {
            let ew = min_e_ea[(r, c)] * importance[(r, c)];
            if fg[(r, c)] {
                fg_err_sum += ew;
            } else {
                bg_err_sum += ew;
            }
        }
    }

    let tp_w = n_fg as f64 - fg_err_sum;
    let fp_w = bg_err_sum;
    let recall = 1.0 - fg_err_sum / n_fg as f64;
    let precision = tp_w / (EPS + tp_w + fp_w);
    let f = 2.0 * recall * precision / (EPS + recall + precision);
    f.clamp(0.0, 1.0)
}
