//! Differentiable operations on the [`Graph`](crate::autograd::Graph) tape.
//!
//! Shape conventions follow the rest of the crate: token matrices are
//! `[T, D]`, feature maps `[C, H, W]`. Shape mismatches are programming
//! errors and panic; user-facing validation happens at module boundaries
//! (loss, backbone, ...) before anything touches the tape.

use alloc::boxed::Box;
use alloc::rc::Rc;
use alloc::vec::Vec;

use ndarray::{Array1, Array2, ArrayD, ArrayView2, Axis, Ix1, Ix2, Ix3, Ix4, Slice};

use crate::autograd::{Graph, Var};
use crate::fmath;
use crate::kernels;

fn as2(a: &ArrayD<f32>) -> ArrayView2<'_, f32> {
    a.view()
        .into_dimensionality::<Ix2>()
        .expect("expected a rank-2 value")
}

/// Elementwise sum of two same-shaped values.
pub fn add(g: &Graph, a: Var, b: Var) -> Var {
    let av = g.value(a);
    let bv = g.value(b);
    assert_eq!(av.shape(), bv.shape(), "add: shape mismatch");
    let out = &*av + &*bv;
    let needs = g.needs_grad(a) || g.needs_grad(b);
    g.push(
        out,
        needs,
        Some(Box::new(move |gy, sink| {
            sink.add(a, gy.clone());
            sink.add(b, gy.clone());
        })),
    )
}

/// Elementwise product of two same-shaped values.
pub fn mul(g: &Graph, a: Var, b: Var) -> Var {
    let av = g.value(a);
    let bv = g.value(b);
    assert_eq!(av.shape(), bv.shape(), "mul: shape mismatch");
    let out = &*av * &*bv;
    let needs = g.needs_grad(a) || g.needs_grad(b);
    let (ac, bc) = (Rc::clone(&av), Rc::clone(&bv));
    g.push(
        out,
        needs,
        Some(Box::new(move |gy, sink| {
            if sink.wants(a) {
                sink.add(a, gy * &*bc);
            }
            if sink.wants(b) {
                sink.add(b, gy * &*ac);
            }
        })),
    )
}

/// Adds a length-D row vector to every row of a `[T, D]` matrix.
pub fn add_row(g: &Graph, x: Var, row: Var) -> Var {
    let xv = g.value(x);
    let rv = g.value(row);
    let d = *xv.shape().last().expect("add_row: empty shape");
    assert_eq!(rv.shape(), [d], "add_row: row length mismatch");
    let out = &*xv + &rv.view().into_dimensionality::<Ix1>().unwrap();
    let needs = g.needs_grad(x) || g.needs_grad(row);
    g.push(
        out,
        needs,
        Some(Box::new(move |gy, sink| {
            sink.add(x, gy.clone());
            if sink.wants(row) {
                let g2 = as2(gy);
                sink.add(row, g2.sum_axis(Axis(0)).into_dyn());
            }
        })),
    )
}

/// Multiplies by a compile-time constant.
pub fn scale(g: &Graph, x: Var, c: f32) -> Var {
    let xv = g.value(x);
    let out = &*xv * c;
    g.push(
        out,
        g.needs_grad(x),
        Some(Box::new(move |gy, sink| {
            sink.add(x, gy * c);
        })),
    )
}

/// Multiplies a tensor by a single-element tensor (a learned gate).
pub fn scale_by(g: &Graph, x: Var, s: Var) -> Var {
    let xv = g.value(x);
    let sv = g.value(s);
    assert_eq!(sv.len(), 1, "scale_by: gate must hold one element");
    let sval = sv[[0]];
    let out = &*xv * sval;
    let needs = g.needs_grad(x) || g.needs_grad(s);
    let xc = Rc::clone(&xv);
    g.push(
        out,
        needs,
        Some(Box::new(move |gy, sink| {
            if sink.wants(x) {
                sink.add(x, gy * sval);
            }
            if sink.wants(s) {
                let ds: f32 = gy.iter().zip(xc.iter()).map(|(&a, &b)| a * b).sum();
                sink.add(s, ArrayD::from_elem(ndarray::IxDyn(&[1]), ds));
            }
        })),
    )
}

/// Matrix product with optional transposes: `op(a) . op(b)`.
pub fn matmul(g: &Graph, a: Var, b: Var, ta: bool, tb: bool) -> Var {
    let av = g.value(a);
    let bv = g.value(b);
    let (a2, b2) = (as2(&av), as2(&bv));
    let ae = if ta { a2.t() } else { a2.view() };
    let be = if tb { b2.t() } else { b2.view() };
    assert_eq!(
        ae.ncols(),
        be.nrows(),
        "matmul: inner dimensions disagree ({:?} x {:?}, ta={ta}, tb={tb})",
        av.shape(),
        bv.shape()
    );
    let out = ae.dot(&be).into_dyn();
    let needs = g.needs_grad(a) || g.needs_grad(b);
    let (ac, bc) = (Rc::clone(&av), Rc::clone(&bv));
    g.push(
        out,
        needs,
        Some(Box::new(move |gy, sink| {
            let gy2 = as2(gy);
            let (a2, b2) = (as2(&ac), as2(&bc));
            let ae = if ta { a2.t() } else { a2.view() };
            let be = if tb { b2.t() } else { b2.view() };
            if sink.wants(a) {
                let da_e = gy2.dot(&be.t());
                let da = if ta { da_e.t().to_owned() } else { da_e };
                sink.add(a, da.into_dyn());
            }
            if sink.wants(b) {
                let db_e = ae.t().dot(&gy2);
                let db = if tb { db_e.t().to_owned() } else { db_e };
                sink.add(b, db.into_dyn());
            }
        })),
    )
}

/// Row-wise softmax on a `[T, S]` matrix.
pub fn softmax_rows(g: &Graph, x: Var) -> Var {
    let xv = g.value(x);
    let x2 = as2(&xv);
    let mut out = x2.to_owned();
    for mut row in out.rows_mut() {
        let max = row.iter().copied().fold(f32::NEG_INFINITY, f32::max);
        let mut sum = 0.0f32;
        for v in row.iter_mut() {
            *v = fmath::expf(*v - max);
            sum += *v;
        }
        for v in row.iter_mut() {
            *v /= sum;
        }
    }
    let out = out.into_dyn();
    let y = Rc::new(out);
    let yc = Rc::clone(&y);
    g.push_rc(
        y,
        g.needs_grad(x),
        Some(Box::new(move |gy, sink| {
            let y2 = as2(&yc);
            let g2 = as2(gy);
            let mut dx = Array2::<f32>::zeros(y2.dim());
            for ((yrow, grow), mut drow) in
                y2.rows().into_iter().zip(g2.rows()).zip(dx.rows_mut())
            {
                let dot: f32 = yrow.iter().zip(grow.iter()).map(|(&a, &b)| a * b).sum();
                for ((d, &yv), &gv) in drow.iter_mut().zip(yrow.iter()).zip(grow.iter()) {
                    *d = yv * (gv - dot);
                }
            }
            sink.add(x, dx.into_dyn());
        })),
    )
}

/// Row-wise layer normalization with affine parameters.
pub fn layer_norm(g: &Graph, x: Var, gamma: Var, beta: Var, eps: f32) -> Var {
    let xv = g.value(x);
    let gv = g.value(gamma);
    let bv = g.value(beta);
    let x2 = as2(&xv);
    let d = x2.ncols();
    assert_eq!(gv.len(), d, "layer_norm: gamma length mismatch");
    assert_eq!(bv.len(), d, "layer_norm: beta length mismatch");

    let mut xhat = Array2::<f32>::zeros(x2.dim());
    let mut inv_sigma = Array1::<f32>::zeros(x2.nrows());
    for (i, row) in x2.rows().into_iter().enumerate() {
        let mean = row.sum() / d as f32;
        let var = row.iter().map(|&v| (v - mean) * (v - mean)).sum::<f32>() / d as f32;
        let inv = 1.0 / fmath::sqrtf(var + eps);
        inv_sigma[i] = inv;
        for (o, &v) in xhat.row_mut(i).iter_mut().zip(row.iter()) {
            *o = (v - mean) * inv;
        }
    }
    let g1 = gv.view().into_dimensionality::<Ix1>().unwrap();
    let b1 = bv.view().into_dimensionality::<Ix1>().unwrap();
    let out = (&xhat * &g1 + &b1).into_dyn();

    let needs = g.needs_grad(x) || g.needs_grad(gamma) || g.needs_grad(beta);
    let gc = Rc::clone(&gv);
    let xhat = Rc::new(xhat);
    let xh = Rc::clone(&xhat);
    g.push(
        out,
        needs,
        Some(Box::new(move |gy, sink| {
            let g2 = as2(gy);
            let gamma1 = gc.view().into_dimensionality::<Ix1>().unwrap();
            if sink.wants(x) {
                let d = xh.ncols() as f32;
                let mut dx = Array2::<f32>::zeros(xh.dim());
                for ((grow, xrow), (mut drow, &inv)) in g2
                    .rows()
                    .into_iter()
                    .zip(xh.rows())
                    .zip(dx.rows_mut().into_iter().zip(inv_sigma.iter()))
                {
                    // ghat = gy * gamma; dx = (ghat - mean(ghat) - xhat*mean(ghat*xhat)) / sigma
                    let mut mean_gh = 0.0f32;
                    let mut mean_ghx = 0.0f32;
                    for ((&gv_, &ga), &xv_) in grow.iter().zip(gamma1.iter()).zip(xrow.iter()) {
                        let gh = gv_ * ga;
                        mean_gh += gh;
                        mean_ghx += gh * xv_;
                    }
                    mean_gh /= d;
                    mean_ghx /= d;
                    for (((dv, &gv_), &ga), &xv_) in drow
                        .iter_mut()
                        .zip(grow.iter())
                        .zip(gamma1.iter())
                        .zip(xrow.iter())
                    {
                        *dv = (gv_ * ga - mean_gh - xv_ * mean_ghx) * inv;
                    }
                }
                sink.add(x, dx.into_dyn());
            }
            if sink.wants(gamma) {
                let dgamma = (&g2 * &xh.view()).sum_axis(Axis(0));
                sink.add(gamma, dgamma.into_dyn());
            }
            if sink.wants(beta) {
                sink.add(beta, g2.sum_axis(Axis(0)).into_dyn());
            }
        })),
    )
}

/// Group normalization over a `[C, H, W]` map.
pub fn group_norm(g: &Graph, x: Var, groups: usize, gamma: Var, beta: Var, eps: f32) -> Var {
    let xv = g.value(x);
    let gv = g.value(gamma);
    let bv = g.value(beta);
    let x3 = xv.view().into_dimensionality::<Ix3>().expect("group_norm: [C,H,W]");
    let (c, h, w) = x3.dim();
    assert!(groups > 0 && c % groups == 0, "group_norm: {groups} groups must divide {c} channels");
    assert_eq!(gv.len(), c);
    assert_eq!(bv.len(), c);
    let cg = c / groups;
    let n = (cg * h * w) as f32;

    let mut xhat = ndarray::Array3::<f32>::zeros((c, h, w));
    let mut inv_sigma = Array1::<f32>::zeros(groups);
    for gi in 0..groups {
        let sl = x3.slice_axis(Axis(0), Slice::from(gi * cg..(gi + 1) * cg));
        let mean = sl.sum() / n;
        let var = sl.iter().map(|&v| (v - mean) * (v - mean)).sum::<f32>() / n;
        let inv = 1.0 / fmath::sqrtf(var + eps);
        inv_sigma[gi] = inv;
        let mut dst = xhat.slice_axis_mut(Axis(0), Slice::from(gi * cg..(gi + 1) * cg));
        for (o, &v) in dst.iter_mut().zip(sl.iter()) {
            *o = (v - mean) * inv;
        }
    }
    let mut out = xhat.clone();
    for ci in 0..c {
        let (ga, be) = (gv[[ci]], bv[[ci]]);
        out.index_axis_mut(Axis(0), ci).mapv_inplace(|v| v * ga + be);
    }

    let needs = g.needs_grad(x) || g.needs_grad(gamma) || g.needs_grad(beta);
    let gc = Rc::clone(&gv);
    let xhat = Rc::new(xhat);
    let xh = Rc::clone(&xhat);
    g.push(
        out.into_dyn(),
        needs,
        Some(Box::new(move |gy, sink| {
            let g3 = gy.view().into_dimensionality::<Ix3>().unwrap();
            if sink.wants(x) {
                let mut dx = ndarray::Array3::<f32>::zeros((c, h, w));
                for gi in 0..groups {
                    let range = gi * cg..(gi + 1) * cg;
                    let inv = inv_sigma[gi];
                    let mut mean_gh = 0.0f32;
                    let mut mean_ghx = 0.0f32;
                    for ci in range.clone() {
                        let ga = gc[[ci]];
                        let gplane = g3.index_axis(Axis(0), ci);
                        let xplane = xh.index_axis(Axis(0), ci);
                        for (&gv_, &xv_) in gplane.iter().zip(xplane.iter()) {
                            let gh = gv_ * ga;
                            mean_gh += gh;
                            mean_ghx += gh * xv_;
                        }
                    }
                    mean_gh /= n;
                    mean_ghx /= n;
                    for ci in range {
                        let ga = gc[[ci]];
                        let gplane = g3.index_axis(Axis(0), ci);
                        let xplane = xh.index_axis(Axis(0), ci);
                        let mut dplane = dx.index_axis_mut(Axis(0), ci);
                        for ((dv, &gv_), &xv_) in
                            dplane.iter_mut().zip(gplane.iter()).zip(xplane.iter())
                        {
                            *dv = (gv_ * ga - mean_gh - xv_ * mean_ghx) * inv;
                        }
                    }
                }
                sink.add(x, dx.into_dyn());
            }
            if sink.wants(gamma) {
                let mut dg = Array1::<f32>::zeros(c);
                for ci in 0..c {
                    dg[ci] = g3
                        .index_axis(Axis(0), ci)
                        .iter()
                        .zip(xh.index_axis(Axis(0), ci).iter())
                        .map(|(&a, &b)| a * b)
                        .sum();
                }
                sink.add(gamma, dg.into_dyn());
            }
            if sink.wants(beta) {
                let mut db = Array1::<f32>::zeros(c);
                for ci in 0..c {
                    db[ci] = g3.index_axis(Axis(0), ci).sum();
                }
                sink.add(beta, db.into_dyn());
            }
        })),
    )
}

/// Exact GELU, `0.5 x (1 + erf(x / sqrt(2)))`.
pub fn gelu(g: &Graph, x: Var) -> Var {
    let xv = g.value(x);
    let out = xv.mapv(|v| 0.5 * v * (1.0 + fmath::erff(v * core::f32::consts::FRAC_1_SQRT_2)));
    let xc = Rc::clone(&xv);
    g.push(
        out,
        g.needs_grad(x),
        Some(Box::new(move |gy, sink| {
            const INV_SQRT_2PI: f32 = 0.398_942_28;
            let dx = ndarray::Zip::from(gy).and(&*xc).map_collect(|&gv, &v| {
                let cdf = 0.5 * (1.0 + fmath::erff(v * core::f32::consts::FRAC_1_SQRT_2));
                let pdf = INV_SQRT_2PI * fmath::expf(-0.5 * v * v);
                gv * (cdf + v * pdf)
            });
            sink.add(x, dx);
        })),
    )
}

pub fn relu(g: &Graph, x: Var) -> Var {
    let xv = g.value(x);
    let out = xv.mapv(|v| v.max(0.0));
    let xc = Rc::clone(&xv);
    g.push(
        out,
        g.needs_grad(x),
        Some(Box::new(move |gy, sink| {
            let dx = ndarray::Zip::from(gy)
                .and(&*xc)
                .map_collect(|&gv, &v| if v > 0.0 { gv } else { 0.0 });
            sink.add(x, dx);
        })),
    )
}

pub fn sigmoid(g: &Graph, x: Var) -> Var {
    let xv = g.value(x);
    let out = xv.mapv(fmath::sigmoidf);
    let y = Rc::new(out);
    let yc = Rc::clone(&y);
    g.push_rc(
        y,
        g.needs_grad(x),
        Some(Box::new(move |gy, sink| {
            let dx = ndarray::Zip::from(gy)
                .and(&*yc)
                .map_collect(|&gv, &s| gv * s * (1.0 - s));
            sink.add(x, dx);
        })),
    )
}

pub fn reshape(g: &Graph, x: Var, shape: &[usize]) -> Var {
    let xv = g.value(x);
    let old_shape: Vec<usize> = xv.shape().to_vec();
    let out = xv
        .to_shape(shape)
        .unwrap_or_else(|_| panic!("reshape: {:?} -> {:?}", xv.shape(), shape))
        .to_owned();
    g.push(
        out,
        g.needs_grad(x),
        Some(Box::new(move |gy, sink| {
            sink.add(x, gy.to_shape(&old_shape[..]).unwrap().to_owned());
        })),
    )
}

/// Axis permutation; `axes[i]` names the input axis that becomes output axis `i`.
pub fn permute(g: &Graph, x: Var, axes: &[usize]) -> Var {
    let xv = g.value(x);
    assert_eq!(axes.len(), xv.ndim(), "permute: axis count mismatch");
    let out = xv
        .view()
        .permuted_axes(axes)
        .as_standard_layout()
        .to_owned();
    let mut inverse = alloc::vec![0usize; axes.len()];
    for (i, &a) in axes.iter().enumerate() {
        inverse[a] = i;
    }
    g.push(
        out,
        g.needs_grad(x),
        Some(Box::new(move |gy, sink| {
            sink.add(
                x,
                gy.view()
                    .permuted_axes(&inverse[..])
                    .as_standard_layout()
                    .to_owned(),
            );
        })),
    )
}

/// Contiguous slice `[start, start+len)` along one axis.
pub fn narrow(g: &Graph, x: Var, axis: usize, start: usize, len: usize) -> Var {
    let xv = g.value(x);
    let full = xv.shape()[axis];
    assert!(start + len <= full, "narrow: {start}+{len} > {full}");
    let out = xv
        .slice_axis(Axis(axis), Slice::from(start..start + len))
        .to_owned();
    let in_shape: Vec<usize> = xv.shape().to_vec();
    g.push(
        out,
        g.needs_grad(x),
        Some(Box::new(move |gy, sink| {
            let mut dx = ArrayD::<f32>::zeros(&in_shape[..]);
            dx.slice_axis_mut(Axis(axis), Slice::from(start..start + len))
                .assign(gy);
            sink.add(x, dx);
        })),
    )
}

/// Concatenation along one axis.
pub fn concat(g: &Graph, axis: usize, parts: &[Var]) -> Var {
    assert!(!parts.is_empty(), "concat: no inputs");
    let values: Vec<Rc<ArrayD<f32>>> = parts.iter().map(|&p| g.value(p)).collect();
    let views: Vec<_> = values.iter().map(|v| v.view()).collect();
    let out = ndarray::concatenate(Axis(axis), &views).expect("concat: incompatible shapes");
    let needs = parts.iter().any(|&p| g.needs_grad(p));
    let parts: Vec<Var> = parts.to_vec();
    let lens: Vec<usize> = values.iter().map(|v| v.shape()[axis]).collect();
    g.push(
        out,
        needs,
        Some(Box::new(move |gy, sink| {
            let mut offset = 0;
            for (&p, &len) in parts.iter().zip(lens.iter()) {
                if sink.wants(p) {
                    sink.add(
                        p,
                        gy.slice_axis(Axis(axis), Slice::from(offset..offset + len))
                            .to_owned(),
                    );
                }
                offset += len;
            }
        })),
    )
}

/// 2-d convolution over a `[Cin, H, W]` map; weights `[Cout, Cin, kh, kw]`.
pub fn conv2d(g: &Graph, x: Var, w: Var, b: Option<Var>, stride: usize, pad: usize) -> Var {
    let xv = g.value(x);
    let wv = g.value(w);
    let bv = b.map(|bb| g.value(bb));
    let x3 = xv.view().into_dimensionality::<Ix3>().expect("conv2d: input [C,H,W]");
    let w4 = wv
        .view()
        .into_dimensionality::<Ix4>()
        .expect("conv2d: weights [Cout,Cin,kh,kw]")
        .to_owned();
    let b1 = bv
        .as_ref()
        .map(|v| v.view().into_dimensionality::<Ix1>().unwrap().to_owned());
    let out = kernels::conv2d(x3.view(), &w4, b1.as_ref(), stride, pad);
    let needs =
        g.needs_grad(x) || g.needs_grad(w) || b.map(|bb| g.needs_grad(bb)).unwrap_or(false);
    let (xc, wc) = (Rc::clone(&xv), Rc::clone(&wv));
    let (_, in_h, in_w) = x3.dim();
    let (_, _, kh, kw) = w4.dim();
    g.push(
        out.into_dyn(),
        needs,
        Some(Box::new(move |gy, sink| {
            let g3 = gy.view().into_dimensionality::<Ix3>().unwrap();
            if sink.wants(x) {
                let w4 = wc.view().into_dimensionality::<Ix4>().unwrap().to_owned();
                sink.add(
                    x,
                    kernels::conv2d_grad_input(g3.view(), &w4, in_h, in_w, stride, pad)
                        .into_dyn(),
                );
            }
            if sink.wants(w) {
                let x3 = xc.view().into_dimensionality::<Ix3>().unwrap();
                sink.add(
                    w,
                    kernels::conv2d_grad_weight(g3.view(), x3.view(), kh, kw, stride, pad)
                        .into_dyn(),
                );
            }
            if let Some(bb) = b {
                if sink.wants(bb) {
                    let db: Array1<f32> = g3
                        .outer_iter()
                        .map(|plane| plane.sum())
                        .collect::<Vec<f32>>()
                        .into();
                    sink.add(bb, db.into_dyn());
                }
            }
        })),
    )
}

/// Transposed convolution with `stride == kernel` (learned upsampling);
/// weights `[Cin, Cout, k, k]`.
pub fn conv_transpose2d(g: &Graph, x: Var, w: Var, b: Option<Var>) -> Var {
    let xv = g.value(x);
    let wv = g.value(w);
    let bv = b.map(|bb| g.value(bb));
    let x3 = xv.view().into_dimensionality::<Ix3>().expect("conv_transpose2d: input [C,H,W]");
    let w4 = wv
        .view()
        .into_dimensionality::<Ix4>()
        .expect("conv_transpose2d: weights [Cin,Cout,k,k]")
        .to_owned();
    let b1 = bv
        .as_ref()
        .map(|v| v.view().into_dimensionality::<Ix1>().unwrap().to_owned());
    let out = kernels::conv_transpose2d(x3.view(), &w4, b1.as_ref());
    let needs =
        g.needs_grad(x) || g.needs_grad(w) || b.map(|bb| g.needs_grad(bb)).unwrap_or(false);
    let (xc, wc) = (Rc::clone(&xv), Rc::clone(&wv));
    g.push(
        out.into_dyn(),
        needs,
        Some(Box::new(move |gy, sink| {
            let g3 = gy.view().into_dimensionality::<Ix3>().unwrap();
            if sink.wants(x) {
                let w4 = wc.view().into_dimensionality::<Ix4>().unwrap().to_owned();
                sink.add(
                    x,
                    kernels::conv_transpose2d_grad_input(g3.view(), &w4).into_dyn(),
                );
            }
            if sink.wants(w) {
                let x3 = xc.view().into_dimensionality::<Ix3>().unwrap();
                sink.add(
                    w,
                    kernels::conv_transpose2d_grad_weight(g3.view(), x3.view()).into_dyn(),
                );
            }
            if let Some(bb) = b {
                if sink.wants(bb) {
                    let db: Array1<f32> = g3
                        .outer_iter()
                        .map(|plane| plane.sum())
                        .collect::<Vec<f32>>()
                        .into();
                    sink.add(bb, db.into_dyn());
                }
            }
        })),
    )
}

/// Differentiable bilinear resize of a `[C, H, W]` map.
pub fn bilinear_resize(g: &Graph, x: Var, oh: usize, ow: usize) -> Var {
    let xv = g.value(x);
    let x3 = xv.view().into_dimensionality::<Ix3>().expect("bilinear_resize: [C,H,W]");
    let (_, ih, iw) = x3.dim();
    let out = kernels::resize_bilinear(x3.view(), oh, ow);
    g.push(
        out.into_dyn(),
        g.needs_grad(x),
        Some(Box::new(move |gy, sink| {
            let g3 = gy.view().into_dimensionality::<Ix3>().unwrap();
            sink.add(x, kernels::resize_bilinear_adjoint(g3.view(), ih, iw).into_dyn());
        })),
    )
}

/// Differentiable adaptive average pooling of a `[C, H, W]` map.
pub fn adaptive_avg_pool(g: &Graph, x: Var, bh: usize, bw: usize) -> Var {
    let xv = g.value(x);
    let x3 = xv.view().into_dimensionality::<Ix3>().expect("adaptive_avg_pool: [C,H,W]");
    let (_, h, w) = x3.dim();
    let out = kernels::adaptive_avg_pool(x3.view(), bh, bw);
    g.push(
        out.into_dyn(),
        g.needs_grad(x),
        Some(Box::new(move |gy, sink| {
            let g3 = gy.view().into_dimensionality::<Ix3>().unwrap();
            sink.add(x, kernels::adaptive_avg_pool_adjoint(g3.view(), h, w).into_dyn());
        })),
    )
}

/// Sum of all elements, as a one-element tensor.
pub fn sum_all(g: &Graph, x: Var) -> Var {
    let xv = g.value(x);
    let total: f32 = xv.sum();
    let shape: Vec<usize> = xv.shape().to_vec();
    g.push(
        ArrayD::from_elem(ndarray::IxDyn(&[1]), total),
        g.needs_grad(x),
        Some(Box::new(move |gy, sink| {
            sink.add(x, ArrayD::from_elem(&shape[..], gy[[0]]));
        })),
    )
}

/// Mean of several one-element tensors (e.g. per-sample losses in a batch).
pub fn mean_of(g: &Graph, parts: &[Var]) -> Var {
    assert!(!parts.is_empty(), "mean_of: no inputs");
    let k = parts.len() as f32;
    let mut acc = 0.0f32;
    for &p in parts {
        let v = g.value(p);
        assert_eq!(v.len(), 1, "mean_of: inputs must be scalars");
        acc += v[[0]];
    }
    let needs = parts.iter().any(|&p| g.needs_grad(p));
    let parts: Vec<Var> = parts.to_vec();
    g.push(
        ArrayD::from_elem(ndarray::IxDyn(&[1]), acc / k),
        needs,
        Some(Box::new(move |gy, sink| {
            let share = gy[[0]] / k;
            for &p in &parts {
                sink.add(p, ArrayD::from_elem(ndarray::IxDyn(&[1]), share));
            }
        })),
    )
}
