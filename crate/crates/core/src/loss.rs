//! Boundary-weighted training objective: weighted BCE plus weighted IoU.
//!
//! Every pixel is weighted by how much it disagrees with its local
//! neighbourhood mean, `w = 1 + gain * |boxmean_k(gt) - gt|`, so thin
//! structures and object boundaries dominate the loss while large uniform
//! regions contribute their base weight of 1.
//!
//! The module keeps two routes on purpose. The `f64` functions here are the
//! plain-arithmetic definitions, used directly for evaluation and as the
//! finite-difference oracle; [`total_loss_on_tape`] is the `f32` training
//! path with hand-derived backward closures. Tests hold the two against each
//! other.

use alloc::boxed::Box;

use ndarray::{Array2, ArrayD};
use thiserror::Error;

use crate::autograd::{Graph, Var};
use crate::fmath;
use crate::ops;

#[derive(Clone, Debug, PartialEq)]
pub struct LossConfig {
    /// Gain on the neighbourhood-disagreement term.
    pub weight_gain: f64,
    /// Box window side for the local mean; must be odd.
    pub weight_window: usize,
    /// Stabilizer in the IoU ratio.
    pub eps: f64,
}

impl Default for LossConfig {
    fn default() -> Self {
        Self {
            weight_gain: 5.0,
            weight_window: 31,
            eps: 1e-6,
        }
    }
}

#[derive(Error, Debug, Clone, PartialEq)]
pub enum LossError {
    #[error("ground truth must be binary, found {found} at ({row}, {col})")]
    NonBinaryGt { found: f64, row: usize, col: usize },
    #[error("shape mismatch: {0}x{1} vs {2}x{3}")]
    ShapeMismatch(usize, usize, usize, usize),
    #[error("weight window must be odd, got {0}")]
    EvenWindow(usize),
    #[error("maps must be non-empty")]
    EmptyMap,
}

fn check_binary(gt: &Array2<f64>) -> Result<(), LossError> {
    for ((row, col), &v) in gt.indexed_iter() {
        if v != 0.0 && v != 1.0 {
            return Err(LossError::NonBinaryGt { found: v, row, col });
        }
    }
    Ok(())
}

fn check_same_shape(a: &Array2<f64>, b: &Array2<f64>) -> Result<(), LossError> {
    if a.dim() != b.dim() {
        let ((a0, a1), (b0, b1)) = (a.dim(), b.dim());
        return Err(LossError::ShapeMismatch(a0, a1, b0, b1));
    }
    Ok(())
}

/// Mirrors an out-of-range index back into `[0, n)` with symmetric (edge
/// repeating) padding; folds as often as needed for windows wider than the
/// axis.
fn sym_index(mut i: isize, n: isize) -> usize {
    debug_assert!(n > 0);
    loop {
        if i < 0 {
            i = -i - 1;
        } else if i >= n {
            i = 2 * n - i - 1;
        } else {
            return i as usize;
        }
    }
}

/// `k x k` box mean with symmetric padding, separable implementation.
pub fn box_mean_symmetric(x: &Array2<f64>, k: usize) -> Array2<f64> {
    assert!(k % 2 == 1, "box window must be odd");
    let (h, w) = x.dim();
    let pad = (k / 2) as isize;
    let inv_k = 1.0 / k as f64;

    let mut rows = Array2::<f64>::zeros((h, w));
    for r in 0..h {
        for c in 0..w {
            let mut acc = 0.0;
            for d in -pad..=pad {
                acc += x[(r, sym_index(c as isize + d, w as isize))];
            }
            rows[(r, c)] = acc * inv_k;
        }
    }
    let mut out = Array2::<f64>::zeros((h, w));
    for c in 0..w {
        for r in 0..h {
            let mut acc = 0.0;
            for d in -pad..=pad {
                acc += rows[(sym_index(r as isize + d, h as isize), c)];
            }
            out[(r, c)] = acc * inv_k;
        }
    }
    out
}

/// Per-pixel loss weights, `1 + gain * |boxmean(gt) - gt|`.
pub fn pixel_weights(gt: &Array2<f64>, cfg: &LossConfig) -> Result<Array2<f64>, LossError> {
    if gt.is_empty() {
        return Err(LossError::EmptyMap);
    }
    if cfg.weight_window % 2 == 0 {
        return Err(LossError::EvenWindow(cfg.weight_window));
    }
    check_binary(gt)?;
    let mean = box_mean_symmetric(gt, cfg.weight_window);
    Ok(ndarray::Zip::from(&mean)
        .and(gt)
        .map_collect(|&m, &g| 1.0 + cfg.weight_gain * fmath::abs(m - g)))
}

/// Per-pixel binary cross-entropy on a logit, the overflow-safe form
/// `max(z,0) - z*y + ln(1 + exp(-|z|))`.
fn bce_logit(z: f64, y: f64) -> f64 {
    z.max(0.0) - z * y + fmath::ln_1p(fmath::exp(-fmath::abs(z)))
}

/// Weighted BCE over logits, normalized by the total weight.
pub fn weighted_bce(
    logits: &Array2<f64>,
    gt: &Array2<f64>,
    w: &Array2<f64>,
) -> Result<f64, LossError> {
    check_same_shape(logits, gt)?;
    check_same_shape(logits, w)?;
    if logits.is_empty() {
        return Err(LossError::EmptyMap);
    }
    check_binary(gt)?;
    let mut num = 0.0;
    let mut den = 0.0;
    for ((&z, &y), &wi) in logits.iter().zip(gt.iter()).zip(w.iter()) {
        num += wi * bce_logit(z, y);
        den += wi;
    }
    Ok(num / den)
}

/// Weighted soft-IoU loss over probabilities,
/// `1 - (sum w*p*g + eps) / (sum w*(p + g - p*g) + eps)`.
pub fn weighted_iou(
    probs: &Array2<f64>,
    gt: &Array2<f64>,
    w: &Array2<f64>,
    eps: f64,
) -> Result<f64, LossError> {
    check_same_shape(probs, gt)?;
    check_same_shape(probs, w)?;
    if probs.is_empty() {
        return Err(LossError::EmptyMap);
    }
    check_binary(gt)?;
    let mut inter = 0.0;
    let mut union = 0.0;
    for ((&p, &gv), &wi) in probs.iter().zip(gt.iter()).zip(w.iter()) {
        inter += wi * p * gv;
        union += wi * (p + gv - p * gv);
    }
    Ok(1.0 - (inter + eps) / (union + eps))
}

/// Full objective: weighted BCE plus weighted IoU, with weights derived from
/// the ground truth.
pub fn total_loss(
    logits: &Array2<f64>,
    gt: &Array2<f64>,
    cfg: &LossConfig,
) -> Result<f64, LossError> {
    check_same_shape(logits, gt)?;
    let w = pixel_weights(gt, cfg)?;
    let bce = weighted_bce(logits, gt, &w)?;
    let probs = logits.mapv(fmath::sigmoid);
    let iou = weighted_iou(&probs, gt, &w, cfg.eps)?;
    Ok(bce + iou)
}

/// Training-path objective on the tape: same math as [`total_loss`] in `f32`,
/// with analytic backward closures. `logits` must be a `[H, W]` tape value
/// matching `gt`'s shape.
pub fn total_loss_on_tape(
    g: &Graph,
    logits: Var,
    gt: &Array2<f32>,
    cfg: &LossConfig,
) -> Result<Var, LossError> {
    let shape = g.shape(logits);
    if shape != [gt.nrows(), gt.ncols()] {
        return Err(LossError::ShapeMismatch(
            shape[0],
            shape.get(1).copied().unwrap_or(0),
            gt.nrows(),
            gt.ncols(),
        ));
    }
    let gt64 = gt.mapv(|v| v as f64);
    let w64 = pixel_weights(&gt64, cfg)?;
    let w = w64.mapv(|v| v as f32);
    let gt = gt.clone();

    let bce = weighted_bce_on_tape(g, logits, &gt, &w);
    let probs = ops::sigmoid(g, logits);
    let iou = weighted_iou_on_tape(g, probs, &gt, &w, cfg.eps as f32);
    Ok(ops::add(g, bce, iou))
}

fn weighted_bce_on_tape(g: &Graph, logits: Var, gt: &Array2<f32>, w: &Array2<f32>) -> Var {
    let zv = g.value(logits);
    let mut num = 0.0f64;
    let mut den = 0.0f64;
    for ((&z, &y), &wi) in zv.iter().zip(gt.iter()).zip(w.iter()) {
        num += wi as f64 * bce_logit(z as f64, y as f64);
        den += wi as f64;
    }
    let out = ArrayD::from_elem(ndarray::IxDyn(&[1]), (num / den) as f32);
    let gt = gt.clone();
    let w = w.clone();
    let zc = alloc::rc::Rc::clone(&zv);
    let total_w = den as f32;
    g.push(
        out,
        g.needs_grad(logits),
        Some(Box::new(move |gy, sink| {
            let scale = gy[[0]] / total_w;
            let mut dz = ArrayD::<f32>::zeros(zc.raw_dim());
            for ((d, &z), (&y, &wi)) in dz
                .iter_mut()
                .zip(zc.iter())
                .zip(gt.iter().zip(w.iter()))
            {
                *d = scale * wi * (fmath::sigmoidf(z) - y);
            }
            sink.add(logits, dz);
        })),
    )
}

fn weighted_iou_on_tape(g: &Graph, probs: Var, gt: &Array2<f32>, w: &Array2<f32>, eps: f32) -> Var {
    let pv = g.value(probs);
    let mut inter = 0.0f64;
    let mut union = 0.0f64;
    for ((&p, &y), &wi) in pv.iter().zip(gt.iter()).zip(w.iter()) {
        inter += (wi * p * y) as f64;
        union += (wi * (p + y - p * y)) as f64;
    }
    let a = inter as f32 + eps;
    let b = union as f32 + eps;
    let out = ArrayD::from_elem(ndarray::IxDyn(&[1]), 1.0 - a / b);
    let gt = gt.clone();
    let w = w.clone();
    g.push(
        out,
        g.needs_grad(probs),
        Some(Box::new(move |gy, sink| {
            let gy0 = gy[[0]];
            let b2 = b * b;
            let mut dp = ArrayD::<f32>::zeros(ndarray::IxDyn(&[gt.nrows(), gt.ncols()]));
            for (d, (&y, &wi)) in dp.iter_mut().zip(gt.iter().zip(w.iter())) {
                // d(1 - A/B)/dp = -wi*y/B + A*wi*(1-y)/B^2
                *d = gy0 * (-wi * y / b + a * wi * (1.0 - y) / b2);
            }
            sink.add(probs, dp);
        })),
    )
}
