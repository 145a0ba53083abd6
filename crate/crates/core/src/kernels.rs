//! Pure array kernels: convolution, resizing, pooling.
//!
//! These are plain functions over `ndarray` values with no tape involvement,
//! so the same code serves the forward pass, the backward closures and the
//! inference/preprocessing paths. Layouts are channel-first: `[C, H, W]` for
//! maps, `[Cout, Cin, kh, kw]` for convolution weights.

use alloc::vec::Vec;

use ndarray::{Array1, Array2, Array3, Array4, ArrayView3};

use crate::fmath;

/// Output length of a convolution along one axis.
pub fn conv_out_len(len: usize, k: usize, stride: usize, pad: usize) -> usize {
    (len + 2 * pad - k) / stride + 1
}

/// Unfolds `x` into columns: row `c*kh*kw + ki*kw + kj`, column `oy*ow + ox`
/// holds `x[c, oy*stride + ki - pad, ox*stride + kj - pad]` (zero outside).
/// `dot` may hand back a column-major result depending on operand layouts;
/// reshapes require row-major, so normalize first.
fn standardize(a: Array2<f32>) -> Array2<f32> {
    if a.is_standard_layout() {
        a
    } else {
        a.as_standard_layout().into_owned()
    }
}

pub fn im2col(x: ArrayView3<f32>, kh: usize, kw: usize, stride: usize, pad: usize) -> Array2<f32> {
    let (c, h, w) = x.dim();
    let oh = conv_out_len(h, kh, stride, pad);
    let ow = conv_out_len(w, kw, stride, pad);
    let mut cols = Array2::<f32>::zeros((c * kh * kw, oh * ow));
    for ci in 0..c {
        for ki in 0..kh {
            for kj in 0..kw {
                let row = (ci * kh + ki) * kw + kj;
                for oy in 0..oh {
                    let iy = (oy * stride + ki) as isize - pad as isize;
                    if iy < 0 || iy >= h as isize {
                        continue;
                    }
                    for ox in 0..ow {
                        let ix = (ox * stride + kj) as isize - pad as isize;
                        if ix < 0 || ix >= w as isize {
                            continue;
                        }
                        cols[(row, oy * ow + ox)] = x[(ci, iy as usize, ix as usize)];
                    }
                }
            }
        }
    }
    cols
}

/// Adjoint of [`im2col`]: scatter-adds columns back into an image.
pub fn col2im(
    cols: &Array2<f32>,
    c: usize,
    h: usize,
    w: usize,
    kh: usize,
    kw: usize,
    stride: usize,
    pad: usize,
) -> Array3<f32> {
    let oh = conv_out_len(h, kh, stride, pad);
    let ow = conv_out_len(w, kw, stride, pad);
    debug_assert_eq!(cols.dim(), (c * kh * kw, oh * ow));
    let mut x = Array3::<f32>::zeros((c, h, w));
    for ci in 0..c {
        for ki in 0..kh {
            for kj in 0..kw {
                let row = (ci * kh + ki) * kw + kj;
                for oy in 0..oh {
                    let iy = (oy * stride + ki) as isize - pad as isize;
                    if iy < 0 || iy >= h as isize {
                        continue;
                    }
                    for ox in 0..ow {
                        let ix = (ox * stride + kj) as isize - pad as isize;
                        if ix < 0 || ix >= w as isize {
                            continue;
                        }
                        x[(ci, iy as usize, ix as usize)] += cols[(row, oy * ow + ox)];
                    }
                }
            }
        }
    }
    x
}

pub fn conv2d(
    x: ArrayView3<f32>,
    w: &Array4<f32>,
    b: Option<&Array1<f32>>,
    stride: usize,
    pad: usize,
) -> Array3<f32> {
    let (cin, h, width) = x.dim();
    let (cout, wcin, kh, kw) = w.dim();
    assert_eq!(cin, wcin, "conv2d: input channels {cin} != weight {wcin}");
    let oh = conv_out_len(h, kh, stride, pad);
    let ow = conv_out_len(width, kw, stride, pad);
    let cols = im2col(x, kh, kw, stride, pad);
    let wmat = w
        .view()
        .into_shape_with_order((cout, cin * kh * kw))
        .expect("conv weights are contiguous");
    let mut out = standardize(wmat.dot(&cols));
    if let Some(b) = b {
        for (mut row, &bias) in out.rows_mut().into_iter().zip(b.iter()) {
            row += bias;
        }
    }
    out.into_shape_with_order((cout, oh, ow)).unwrap()
}

/// Gradient of conv2d w.r.t. its input.
pub fn conv2d_grad_input(
    gout: ArrayView3<f32>,
    w: &Array4<f32>,
    in_h: usize,
    in_w: usize,
    stride: usize,
    pad: usize,
) -> Array3<f32> {
    let (cout, cin, kh, kw) = w.dim();
    let (gc, goh, gow) = gout.dim();
    debug_assert_eq!(gc, cout);
    let gmat = gout
        .into_shape_with_order((cout, goh * gow))
        .expect("gradient is contiguous");
    let wmat = w
        .view()
        .into_shape_with_order((cout, cin * kh * kw))
        .unwrap();
    let cols_grad = wmat.t().dot(&gmat);
    col2im(&cols_grad, cin, in_h, in_w, kh, kw, stride, pad)
}

/// Gradient of conv2d w.r.t. its weights.
pub fn conv2d_grad_weight(
    gout: ArrayView3<f32>,
    x: ArrayView3<f32>,
    kh: usize,
    kw: usize,
    stride: usize,
    pad: usize,
) -> Array4<f32> {
    let (cin, _, _) = x.dim();
    let (cout, goh, gow) = gout.dim();
    let cols = im2col(x, kh, kw, stride, pad);
    let gmat = gout.into_shape_with_order((cout, goh * gow)).unwrap();
    let wgrad = standardize(gmat.dot(&cols.t()));
    wgrad.into_shape_with_order((cout, cin, kh, kw)).unwrap()
}

/// Transposed convolution with `stride == kernel` and no padding: every input
/// pixel paints a disjoint `k x k` output block, which is exactly the learned
/// upsampling used for the stride-4 pyramid level. Weights are `[Cin, Cout, k, k]`.
pub fn conv_transpose2d(
    x: ArrayView3<f32>,
    w: &Array4<f32>,
    b: Option<&Array1<f32>>,
) -> Array3<f32> {
    let (cin, h, width) = x.dim();
    let (wcin, cout, kh, kw) = w.dim();
    assert_eq!(cin, wcin, "conv_transpose2d: channel mismatch");
    let xmat = x.into_shape_with_order((cin, h * width)).unwrap();
    let wmat = w
        .view()
        .into_shape_with_order((cin, cout * kh * kw))
        .unwrap();
    // [Cout*kh*kw, H*W]
    let cols = wmat.t().dot(&xmat);
    let mut out = Array3::<f32>::zeros((cout, h * kh, width * kw));
    for co in 0..cout {
        for ki in 0..kh {
            for kj in 0..kw {
                let row = (co * kh + ki) * kw + kj;
                for y in 0..h {
                    for xcol in 0..width {
                        out[(co, y * kh + ki, xcol * kw + kj)] = cols[(row, y * width + xcol)];
                    }
                }
            }
        }
    }
    if let Some(b) = b {
        for (mut plane, &bias) in out.outer_iter_mut().zip(b.iter()) {
            plane += bias;
        }
    }
    out
}

pub fn conv_transpose2d_grad_input(gout: ArrayView3<f32>, w: &Array4<f32>) -> Array3<f32> {
    let (cin, cout, kh, kw) = w.dim();
    let (gc, goh, gow) = gout.dim();
    debug_assert_eq!(gc, cout);
    let (h, width) = (goh / kh, gow / kw);
    let mut cols = Array2::<f32>::zeros((cout * kh * kw, h * width));
    for co in 0..cout {
        for ki in 0..kh {
            for kj in 0..kw {
                let row = (co * kh + ki) * kw + kj;
                for y in 0..h {
                    for x in 0..width {
                        cols[(row, y * width + x)] = gout[(co, y * kh + ki, x * kw + kj)];
                    }
                }
            }
        }
    }
    let wmat = w
        .view()
        .into_shape_with_order((cin, cout * kh * kw))
        .unwrap();
    let gmat = standardize(wmat.dot(&cols));
    gmat.into_shape_with_order((cin, h, width)).unwrap()
}

pub fn conv_transpose2d_grad_weight(gout: ArrayView3<f32>, x: ArrayView3<f32>) -> Array4<f32> {
    let (cin, h, width) = x.dim();
    let (cout, goh, gow) = gout.dim();
    let (kh, kw) = (goh / h, gow / width);
    let mut cols = Array2::<f32>::zeros((cout * kh * kw, h * width));
    for co in 0..cout {
        for ki in 0..kh {
            for kj in 0..kw {
                let row = (co * kh + ki) * kw + kj;
                for y in 0..h {
                    for xcol in 0..width {
                        cols[(row, y * width + xcol)] = gout[(co, y * kh + ki, xcol * kw + kj)];
                    }
                }
            }
        }
    }
    let xmat = x.into_shape_with_order((cin, h * width)).unwrap();
    // [Cin, Cout*kh*kw]
    let wgrad = standardize(xmat.dot(&cols.t()));
    wgrad.into_shape_with_order((cin, cout, kh, kw)).unwrap()
}

/// Per-output-index source taps for bilinear resampling along one axis,
/// half-pixel-center convention (`align_corners = false`).
pub fn bilinear_taps(in_len: usize, out_len: usize) -> Vec<(usize, usize, f32, f32)> {
    assert!(in_len > 0 && out_len > 0);
    let scale = in_len as f64 / out_len as f64;
    (0..out_len)
        .map(|o| {
            let src = ((o as f64 + 0.5) * scale - 0.5).max(0.0);
            let i0 = (fmath::floor(src) as usize).min(in_len - 1);
            let i1 = (i0 + 1).min(in_len - 1);
            let t = (src - i0 as f64) as f32;
            (i0, i1, 1.0 - t, t)
        })
        .collect()
}

pub fn resize_bilinear(x: ArrayView3<f32>, oh: usize, ow: usize) -> Array3<f32> {
    let (c, h, w) = x.dim();
    let ty = bilinear_taps(h, oh);
    let tx = bilinear_taps(w, ow);
    let mut out = Array3::<f32>::zeros((c, oh, ow));
    for ci in 0..c {
        for (oy, &(y0, y1, wy0, wy1)) in ty.iter().enumerate() {
            for (ox, &(x0, x1, wx0, wx1)) in tx.iter().enumerate() {
                out[(ci, oy, ox)] = wy0 * (wx0 * x[(ci, y0, x0)] + wx1 * x[(ci, y0, x1)])
                    + wy1 * (wx0 * x[(ci, y1, x0)] + wx1 * x[(ci, y1, x1)]);
            }
        }
    }
    out
}

/// Adjoint of [`resize_bilinear`]: scatters output gradients back to the
/// input grid with the same taps.
pub fn resize_bilinear_adjoint(gout: ArrayView3<f32>, ih: usize, iw: usize) -> Array3<f32> {
    let (c, oh, ow) = gout.dim();
    let ty = bilinear_taps(ih, oh);
    let tx = bilinear_taps(iw, ow);
    let mut gin = Array3::<f32>::zeros((c, ih, iw));
    for ci in 0..c {
        for (oy, &(y0, y1, wy0, wy1)) in ty.iter().enumerate() {
            for (ox, &(x0, x1, wx0, wx1)) in tx.iter().enumerate() {
                let g = gout[(ci, oy, ox)];
                gin[(ci, y0, x0)] += wy0 * wx0 * g;
                gin[(ci, y0, x1)] += wy0 * wx1 * g;
                gin[(ci, y1, x0)] += wy1 * wx0 * g;
                gin[(ci, y1, x1)] += wy1 * wx1 * g;
            }
        }
    }
    gin
}

/// Bilinear resize for double-precision 2-d maps (evaluation paths).
pub fn resize_bilinear2_f64(x: &Array2<f64>, oh: usize, ow: usize) -> Array2<f64> {
    let (h, w) = x.dim();
    let ty = bilinear_taps(h, oh);
    let tx = bilinear_taps(w, ow);
    let mut out = Array2::<f64>::zeros((oh, ow));
    for (oy, &(y0, y1, wy0, wy1)) in ty.iter().enumerate() {
        for (ox, &(x0, x1, wx0, wx1)) in tx.iter().enumerate() {
            out[(oy, ox)] = wy0 as f64 * (wx0 as f64 * x[(y0, x0)] + wx1 as f64 * x[(y0, x1)])
                + wy1 as f64 * (wx0 as f64 * x[(y1, x0)] + wx1 as f64 * x[(y1, x1)]);
        }
    }
    out
}

/// Nearest-neighbour resize (floor convention), used for ground-truth masks
/// so values stay binary.
pub fn resize_nearest2(x: &Array2<f32>, oh: usize, ow: usize) -> Array2<f32> {
    let (h, w) = x.dim();
    let mut out = Array2::<f32>::zeros((oh, ow));
    for oy in 0..oh {
        let iy = (oy * h / oh).min(h - 1);
        for ox in 0..ow {
            let ix = (ox * w / ow).min(w - 1);
            out[(oy, ox)] = x[(iy, ix)];
        }
    }
    out
}

/// Half-open bin ranges for adaptive average pooling: bin `i` of `k` over a
/// length-`len` axis covers `[floor(i*len/k), ceil((i+1)*len/k))`.
pub fn adaptive_bins(len: usize, k: usize) -> Vec<(usize, usize)> {
    (0..k)
        .map(|i| {
            let start = i * len / k;
            let end = ((i + 1) * len).div_ceil(k);
            (start, end.max(start + 1).min(len.max(1)))
        })
        .collect()
}

pub fn adaptive_avg_pool(x: ArrayView3<f32>, bh: usize, bw: usize) -> Array3<f32> {
    let (c, h, w) = x.dim();
    let by = adaptive_bins(h, bh);
    let bx = adaptive_bins(w, bw);
    let mut out = Array3::<f32>::zeros((c, bh, bw));
    for ci in 0..c {
        for (oy, &(y0, y1)) in by.iter().enumerate() {
            for (ox, &(x0, x1)) in bx.iter().enumerate() {
                let mut acc = 0.0f32;
                for y in y0..y1 {
                    for xx in x0..x1 {
                        acc += x[(ci, y, xx)];
                    }
                }
                out[(ci, oy, ox)] = acc / ((y1 - y0) * (x1 - x0)) as f32;
            }
        }
    }
    out
}

pub fn adaptive_avg_pool_adjoint(gout: ArrayView3<f32>, h: usize, w: usize) -> Array3<f32> {
    let (c, bh, bw) = gout.dim();
    let by = adaptive_bins(h, bh);
    let bx = adaptive_bins(w, bw);
    let mut gin = Array3::<f32>::zeros((c, h, w));
    for ci in 0..c {
        for (oy, &(y0, y1)) in by.iter().enumerate() {
            for (ox, &(x0, x1)) in bx.iter().enumerate() {
                let g = gout[(ci, oy, ox)] / ((y1 - y0) * (x1 - x0)) as f32;
                for y in y0..y1 {
                    for xx in x0..x1 {
                        gin[(ci, y, xx)] += g;
                    }
                }
            }
        }
    }
    gin
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::SeedRng;
    use ndarray::{Array1, Array3, Array4};

    fn randn3(rng: &mut SeedRng, c: usize, h: usize, w: usize) -> Array3<f32> {
        Array3::from_shape_simple_fn((c, h, w), || rng.normal())
    }

    fn randn4(rng: &mut SeedRng, a: usize, b: usize, c: usize, d: usize) -> Array4<f32> {
        Array4::from_shape_simple_fn((a, b, c, d), || rng.normal())
    }

    fn dot3(a: &Array3<f32>, b: &Array3<f32>) -> f64 {
        a.iter()
            .zip(b.iter())
            .map(|(&x, &y)| x as f64 * y as f64)
            .sum()
    }

    /// Naive direct convolution used as an oracle for the im2col route.
    fn conv2d_naive(
        x: &Array3<f32>,
        w: &Array4<f32>,
        stride: usize,
        pad: usize,
    ) -> Array3<f32> {
        let (cin, h, width) = x.dim();
        let (cout, _, kh, kw) = w.dim();
        let oh = conv_out_len(h, kh, stride, pad);
        let ow = conv_out_len(width, kw, stride, pad);
        let mut out = Array3::<f32>::zeros((cout, oh, ow));
        for co in 0..cout {
            for oy in 0..oh {
                for ox in 0..ow {
                    let mut acc = 0.0;
                    for ci in 0..cin {
                        for ki in 0..kh {
                            for kj in 0..kw {
                                let iy = (oy * stride + ki) as isize - pad as isize;
                                let ix = (ox * stride + kj) as isize - pad as isize;
                                if iy >= 0 && iy < h as isize && ix >= 0 && ix < width as isize {
                                    acc += x[(ci, iy as usize, ix as usize)]
                                        * w[(co, ci, ki, kj)];
                                }
                            }
                        }
                    }
                    out[(co, oy, ox)] = acc;
                }
            }
        }
        out
    }

    #[test]
    fn conv2d_matches_naive_convolution() {
        let mut rng = SeedRng::new(1);
        for &(stride, pad) in &[(1usize, 1usize), (2, 1), (2, 0), (1, 0)] {
            let x = randn3(&mut rng, 3, 9, 7);
            let w = randn4(&mut rng, 4, 3, 3, 3);
            let got = conv2d(x.view(), &w, None, stride, pad);
            let want = conv2d_naive(&x, &w, stride, pad);
            let max_err = got
                .iter()
                .zip(want.iter())
                .map(|(a, b)| (a - b).abs())
                .fold(0.0f32, f32::max);
            assert!(max_err < 1e-4, "stride={stride} pad={pad} err={max_err}");
        }
    }

    #[test]
    fn conv2d_bias_adds_per_channel() {
        let mut rng = SeedRng::new(2);
        let x = randn3(&mut rng, 2, 5, 5);
        let w = randn4(&mut rng, 3, 2, 3, 3);
        let b = Array1::from_vec(vec![1.0f32, -2.0, 0.5]);
        let with = conv2d(x.view(), &w, Some(&b), 1, 1);
        let without = conv2d(x.view(), &w, None, 1, 1);
        for co in 0..3 {
            let d = &with.index_axis(ndarray::Axis(0), co)
                - &without.index_axis(ndarray::Axis(0), co);
            assert!(d.iter().all(|&v| (v - b[co]).abs() < 1e-6));
        }
    }

    /// <L x, y> == <x, L^T y> pins the gradient kernels to the forward ones.
    #[test]
    fn conv2d_input_gradient_is_the_adjoint() {
        let mut rng = SeedRng::new(3);
        for &(stride, pad) in &[(1usize, 1usize), (2, 1)] {
            let x = randn3(&mut rng, 3, 8, 6);
            let w = randn4(&mut rng, 5, 3, 3, 3);
            let y_shape = conv2d(x.view(), &w, None, stride, pad).dim();
            let y = randn3(&mut rng, y_shape.0, y_shape.1, y_shape.2);
            let lx = conv2d(x.view(), &w, None, stride, pad);
            let lty = conv2d_grad_input(y.view(), &w, 8, 6, stride, pad);
            let lhs = dot3(&lx, &y);
            let rhs = dot3(&x, &lty);
            assert!(
                (lhs - rhs).abs() < 1e-3 * lhs.abs().max(1.0),
                "stride={stride} pad={pad}: {lhs} vs {rhs}"
            );
        }
    }

    #[test]
    fn conv2d_weight_gradient_matches_directional_difference() {
        let mut rng = SeedRng::new(4);
        let x = randn3(&mut rng, 2, 6, 6);
        let w = randn4(&mut rng, 3, 2, 3, 3);
        let gout = randn3(&mut rng, 3, 6, 6);
        let gw = conv2d_grad_weight(gout.view(), x.view(), 3, 3, 1, 1);
        // Directional check: d/dt <conv(x; w + t*dw), gout> == <gw, dw>.
        let dw = randn4(&mut rng, 3, 2, 3, 3);
        let eps = 1e-3f32;
        let analytic: f64 = gw
            .iter()
            .zip(dw.iter())
            .map(|(&a, &b)| a as f64 * b as f64)
            .sum();
        let at = |w: &Array4<f32>| dot3(&conv2d(x.view(), w, None, 1, 1), &gout);
        let mut wp = w.clone();
        wp.zip_mut_with(&dw, |a, &b| *a += eps * b);
        let mut wm = w.clone();
        wm.zip_mut_with(&dw, |a, &b| *a -= eps * b);
        let fd = (at(&wp) - at(&wm)) / (2.0 * eps as f64);
        assert!(
            (analytic - fd).abs() < 1e-2 * analytic.abs().max(1.0),
            "{analytic} vs {fd}"
        );
    }

    #[test]
    fn conv_transpose_paints_disjoint_blocks() {
        // One input pixel, identity-ish weight: output block equals weights.
        let mut x = Array3::<f32>::zeros((1, 2, 2));
        x[(0, 1, 0)] = 2.0;
        let mut w = Array4::<f32>::zeros((1, 1, 2, 2));
        w[(0, 0, 0, 0)] = 1.0;
        w[(0, 0, 0, 1)] = 3.0;
        w[(0, 0, 1, 0)] = -1.0;
        w[(0, 0, 1, 1)] = 0.5;
        let out = conv_transpose2d(x.view(), &w, None);
        assert_eq!(out.dim(), (1, 4, 4));
        assert_eq!(out[(0, 2, 0)], 2.0);
        assert_eq!(out[(0, 2, 1)], 6.0);
        assert_eq!(out[(0, 3, 0)], -2.0);
        assert_eq!(out[(0, 3, 1)], 1.0);
        assert_eq!(out[(0, 0, 0)], 0.0);
    }

    #[test]
    fn conv_transpose_gradients_are_adjoints() {
        let mut rng = SeedRng::new(5);
        let x = randn3(&mut rng, 3, 4, 5);
        let w = randn4(&mut rng, 3, 2, 2, 2);
        let y = randn3(&mut rng, 2, 8, 10);
        let lhs = dot3(&conv_transpose2d(x.view(), &w, None), &y);
        let rhs = dot3(&x, &conv_transpose2d_grad_input(y.view(), &w));
        assert!((lhs - rhs).abs() < 1e-3 * lhs.abs().max(1.0));

        let gw = conv_transpose2d_grad_weight(y.view(), x.view());
        let dw = randn4(&mut rng, 3, 2, 2, 2);
        let eps = 1e-3f32;
        let analytic: f64 = gw
            .iter()
            .zip(dw.iter())
            .map(|(&a, &b)| a as f64 * b as f64)
            .sum();
        let at = |w: &Array4<f32>| dot3(&conv_transpose2d(x.view(), w, None), &y);
        let mut wp = w.clone();
        wp.zip_mut_with(&dw, |a, &b| *a += eps * b);
        let mut wm = w.clone();
        wm.zip_mut_with(&dw, |a, &b| *a -= eps * b);
        let fd = (at(&wp) - at(&wm)) / (2.0 * eps as f64);
        assert!((analytic - fd).abs() < 1e-2 * analytic.abs().max(1.0));
    }

    #[test]
    fn bilinear_resize_to_same_size_is_identity() {
        let mut rng = SeedRng::new(6);
        let x = randn3(&mut rng, 2, 7, 5);
        let y = resize_bilinear(x.view(), 7, 5);
        assert_eq!(x, y);
    }

    #[test]
    fn bilinear_resize_preserves_constants() {
        let x = Array3::from_elem((1, 3, 3), 2.5f32);
        let y = resize_bilinear(x.view(), 8, 5);
        assert!(y.iter().all(|&v| (v - 2.5).abs() < 1e-6));
    }

    #[test]
    fn bilinear_adjoint_satisfies_dot_identity() {
        let mut rng = SeedRng::new(7);
        let x = randn3(&mut rng, 2, 6, 9);
        let y = randn3(&mut rng, 2, 13, 4);
        let lhs = dot3(&resize_bilinear(x.view(), 13, 4), &y);
        let rhs = dot3(&x, &resize_bilinear_adjoint(y.view(), 6, 9));
        assert!((lhs - rhs).abs() < 1e-4 * lhs.abs().max(1.0));
    }

    #[test]
    fn nearest_resize_keeps_values_binary() {
        let mut rng = SeedRng::new(8);
        let x = Array2::from_shape_simple_fn((10, 9), || {
            if rng.uniform() > 0.5 {
                1.0f32
            } else {
                0.0
            }
        });
        let y = resize_nearest2(&x, 17, 5);
        assert!(y.iter().all(|&v| v == 0.0 || v == 1.0));
        // Downsize of a constant region stays constant.
        let ones = Array2::from_elem((8, 8), 1.0f32);
        assert!(resize_nearest2(&ones, 3, 3).iter().all(|&v| v == 1.0));
    }

    #[test]
    fn adaptive_bins_cover_axis_without_gaps() {
        for &(len, k) in &[(7usize, 3usize), (8, 3), (2, 6), (1, 4), (16, 16)] {
            let bins = adaptive_bins(len, k);
            assert_eq!(bins.len(), k);
            assert_eq!(bins[0].0, 0);
            for b in &bins {
                assert!(b.1 > b.0, "empty bin for len={len} k={k}");
                assert!(b.1 <= len.max(1));
            }
            assert_eq!(bins[k - 1].1, len.max(1));
        }
    }

    #[test]
    fn adaptive_pool_to_one_bin_is_global_mean() {
        let mut rng = SeedRng::new(9);
        let x = randn3(&mut rng, 3, 5, 7);
        let y = adaptive_avg_pool(x.view(), 1, 1);
        for c in 0..3 {
            let mean = x.index_axis(ndarray::Axis(0), c).mean().unwrap();
            assert!((y[(c, 0, 0)] - mean).abs() < 1e-5);
        }
    }

    #[test]
    fn adaptive_pool_adjoint_satisfies_dot_identity() {
        let mut rng = SeedRng::new(10);
        let x = randn3(&mut rng, 2, 7, 7);
        let y = randn3(&mut rng, 2, 3, 3);
        let lhs = dot3(&adaptive_avg_pool(x.view(), 3, 3), &y);
        let rhs = dot3(&x, &adaptive_avg_pool_adjoint(y.view(), 7, 7));
        assert!((lhs - rhs).abs() < 1e-4 * lhs.abs().max(1.0));
    }

    #[test]
    fn im2col_col2im_are_adjoint() {
        let mut rng = SeedRng::new(11);
        let x = randn3(&mut rng, 2, 6, 5);
        let cols = im2col(x.view(), 3, 3, 2, 1);
        let y = Array2::from_shape_simple_fn(cols.dim(), || rng.normal());
        let lhs: f64 = cols
            .iter()
            .zip(y.iter())
            .map(|(&a, &b)| a as f64 * b as f64)
            .sum();
        let back = col2im(&y, 2, 6, 5, 3, 3, 2, 1);
        let rhs = dot3(&x, &back);
        assert!((lhs - rhs).abs() < 1e-4 * lhs.abs().max(1.0));
    }
}
