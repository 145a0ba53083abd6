//! In-memory samples, preprocessing, and the synthetic desk-scale corpus.
//!
//! File decoding lives in the companion crate; this module starts from
//! decoded arrays. Preprocessing follows the usual dense-prediction recipe:
//! bilinear resize of the image to the square working resolution, nearest
//! resize of the mask (so it stays binary), and per-channel normalization
//! with the standard large-corpus statistics. The original size rides along
//! for the postprocessing resize.

use alloc::string::String;
use alloc::vec::Vec;

use ndarray::{Array2, Array3};

use crate::kernels;
use crate::rng::SeedRng;

/// Per-channel normalization statistics (RGB order), the de-facto standard
/// values for models pre-trained on large natural-image corpora.
pub const CHANNEL_MEAN: [f32; 3] = [0.485, 0.456, 0.406];
pub const CHANNEL_STD: [f32; 3] = [0.229, 0.224, 0.225];

/// One decoded sample: RGB image in `[0,1]` channel-last, binary mask, and
/// bookkeeping. `gt` values are exactly 0.0 or 1.0.
#[derive(Clone, Debug)]
pub struct ImageSample {
    pub id: String,
    /// `[H, W, 3]`, values in `[0, 1]`.
    pub image: Array3<f32>,
    /// `[H, W]`, values in `{0, 1}`.
    pub gt: Array2<f32>,
    pub task: Option<String>,
    pub original_size: (usize, usize),
}

/// A sample after preprocessing, ready for the model.
#[derive(Clone, Debug)]
pub struct ModelInput {
    pub id: String,
    /// `[3, S, S]`, normalized.
    pub image: Array3<f32>,
    /// `[S, S]`, still binary; training supervision.
    pub gt: Array2<f32>,
    pub original_size: (usize, usize),
}

/// Resize to the working resolution and normalize channels.
pub fn preprocess(sample: &ImageSample, input_size: usize) -> ModelInput {
    let (h, w, _) = sample.image.dim();
    let s = input_size;
    let mut chw = Array3::<f32>::zeros((3, h, w));
    for c in 0..3 {
        for y in 0..h {
            for x in 0..w {
                chw[[c, y, x]] = sample.image[[y, x, c]];
            }
        }
    }
    let mut resized = kernels::resize_bilinear(chw.view(), s, s);
    for c in 0..3 {
        let (mean, std) = (CHANNEL_MEAN[c], CHANNEL_STD[c]);
        resized
            .index_axis_mut(ndarray::Axis(0), c)
            .mapv_inplace(|v| (v - mean) / std);
    }
    let gt = kernels::resize_nearest2(&sample.gt, s, s);
    ModelInput {
        id: sample.id.clone(),
        image: resized,
        gt,
        original_size: sample.original_size,
    }
}

/// Shape family a synthetic task draws from; derived from the task name so
/// distinct tasks have visibly different foregrounds.
fn family_of(task: &str) -> u64 {
    let mut h: u64 = 0xcbf2_9ce4_8422_2325;
    for b in task.as_bytes() {
        h ^= *b as u64;
        h = h.wrapping_mul(0x0000_0100_0000_01b3);
    }
    h % 4
}

/// One deterministic synthetic sample: a low-contrast shape on a noisy
/// background, edges snapped to a 4-pixel grid so a stride-4 head can fit
/// it exactly. The mask is the exact shape support.
pub fn synthetic_sample(task: &str, index: usize, side: usize, rng: &mut SeedRng) -> ImageSample {
    assert!(side >= 32 && side % 4 == 0, "synthetic side {side}");
    let cell = 4usize;
    let cells = side / cell;
    let family = family_of(task);

    // Block-aligned bounding box, kept at least one cell away from borders.
    let span = |rng: &mut SeedRng, max_cells: usize| -> (usize, usize) {
        let len = 3 + rng.index(max_cells.saturating_sub(4).max(1));
        let start = 1 + rng.index(cells - len - 1);
        (start, len)
    };
    let (cy, lh) = span(rng, cells / 2 + 2);
    let (cx, lw) = span(rng, cells / 2 + 2);

    let mut mask = Array2::<f32>::zeros((side, side));
    let in_shape = |r: usize, c: usize| -> bool {
        // Work in cell coordinates so every edge is block-aligned.
        let gy = r / cell;
        let gx = c / cell;
        if gy < cy || gy >= cy + lh || gx < cx || gx >= cx + lw {
            return false;
        }
        let fy = gy - cy;
        let fx = gx - cx;
        match family {
            0 => true,
            1 => {
                // Centered ellipse in cell space.
                let ny = (2.0 * fy as f64 + 1.0) / lh as f64 - 1.0;
                let nx = (2.0 * fx as f64 + 1.0) / lw as f64 - 1.0;
                ny * ny + nx * nx <= 1.0
            }
            2 => fy % 2 == 0,
            _ => {
                // Diamond: L1 ball in cell space.
                let ny = (2.0 * fy as f64 + 1.0) / lh as f64 - 1.0;
                let nx = (2.0 * fx as f64 + 1.0) / lw as f64 - 1.0;
                crate::fmath::abs(ny) + crate::fmath::abs(nx) <= 1.0
            }
        }
    };
    for r in 0..side {
        for c in 0..side {
            if in_shape(r, c) {
                mask[[r, c]] = 1.0;
            }
        }
    }

    // Camouflage: foreground barely brighter than the background, both under
    // shared pixel noise.
    let base = rng.uniform_in(0.3, 0.5);
    let tint = [
        rng.uniform_in(-0.05, 0.05),
        rng.uniform_in(-0.05, 0.05),
        rng.uniform_in(-0.05, 0.05),
    ];
    let mut image = Array3::<f32>::zeros((side, side, 3));
    for r in 0..side {
        for c in 0..side {
            let fg = mask[[r, c]] > 0.5;
            let noise = rng.uniform_in(-0.04, 0.04);
            for ch in 0..3 {
                let mut v = base + tint[ch] + noise;
                if fg {
                    v += 0.15;
                }
                image[[r, c, ch]] = v.clamp(0.0, 1.0);
            }
        }
    }

    ImageSample {
        id: alloc::format!("{task}-{index:04}"),
        image,
        gt: mask,
        task: Some(String::from(task)),
        original_size: (side, side),
    }
}

/// A deterministic corpus for one task: same `(task, seed)` always yields
/// the same samples.
pub fn synthetic_corpus(task: &str, n: usize, side: usize, seed: u64) -> Vec<ImageSample> {
    let mut rng = SeedRng::derive(seed, family_of(task) ^ 0x5eed_c0de);
    (0..n)
        .map(|i| synthetic_sample(task, i, side, &mut rng))
        .collect()
}
