//! Dense numeric kernels for the autodiff graph: im2col convolution,
//! per-sample group normalization, nearest-neighbour upsampling, and the
//! differentiable crop. All kernels are pure array functions in f64;
//! the graph layer owns caching and gradient routing.

use ndarray::{Array1, Array2, Array3, ArrayView2, ArrayView3};

use crate::roi::{bilinear_sample, crop_source_coord};

/// Spatial output size of a convolution along one axis.
pub fn conv_out_len(len: usize, k: usize, stride: usize, pad: usize) -> usize {
    (len + 2 * pad - k) / stride + 1
}

/// Unfolds (C, H, W) into the im2col matrix of shape
/// (C*kh*kw, out_h*out_w) for the given stride and symmetric zero pad.
/// Works on contiguous buffers; stride-1 inner spans degrade to slice
/// copies.
pub fn im2col(
    x: &ArrayView3<f64>,
    kh: usize,
    kw: usize,
    stride: usize,
    pad: usize,
) -> Array2<f64> {
    let (c, h, w) = x.dim();
    let oh = conv_out_len(h, kh, stride, pad);
    let ow = conv_out_len(w, kw, stride, pad);
    let xs = x.as_slice().expect("im2col input must be standard layout");
    let mut col = Array2::zeros((c * kh * kw, oh * ow));
    let cs = col.as_slice_mut().expect("freshly allocated col is contiguous");
    for ci in 0..c {
        let xplane = &xs[ci * h * w..(ci + 1) * h * w];
        for ki in 0..kh {
            for kj in 0..kw {
                let row = (ci * kh + ki) * kw + kj;
                let crow = &mut cs[row * oh * ow..(row + 1) * oh * ow];
                for oi in 0..oh {
                    let ii = (oi * stride + ki) as isize - pad as isize;
                    if ii < 0 || ii >= h as isize {
                        continue;
                    }
                    let xrow = &xplane[ii as usize * w..(ii as usize + 1) * w];
                    let orow = &mut crow[oi * ow..(oi + 1) * ow];
                    // jj = oj*stride + kj - pad must land in [0, w).
                    let j0 = kj as isize - pad as isize;
                    if stride == 1 {
                        let (dst0, src0) = if j0 < 0 { ((-j0) as usize, 0) } else { (0, j0 as usize) };
                        let n = (w - src0).min(ow - dst0);
                        orow[dst0..dst0 + n].copy_from_slice(&xrow[src0..src0 + n]);
                    } else {
                        for (oj, dst) in orow.iter_mut().enumerate() {
                            let jj = (oj * stride) as isize + j0;
                            if jj >= 0 && (jj as usize) < w {
                                *dst = xrow[jj as usize];
                            }
                        }
                    }
                }
            }
        }
    }
    col
}

/// Adjoint of [`im2col`]: scatter-adds the column gradient back onto the
/// input layout.
pub fn col2im(
    dcol: &ArrayView2<f64>,
    c: usize,
    h: usize,
    w: usize,
    kh: usize,
    kw: usize,
    stride: usize,
    pad: usize,
) -> Array3<f64> {
    let oh = conv_out_len(h, kh, stride, pad);
    let ow = conv_out_len(w, kw, stride, pad);
    let mut dx = Array3::zeros((c, h, w));
    let ds = dx.as_slice_mut().expect("freshly allocated dx is contiguous");
    // GEMM results may come back column-major (e.g. from a transposed
    // left operand); the scatter below needs row-major storage.
    let owned;
    let dc = match dcol.as_slice() {
        Some(s) => s,
        None => {
            owned = dcol.as_standard_layout().into_owned();
            owned.as_slice().expect("standard layout is contiguous")
        }
    };
    for ci in 0..c {
        let dplane = &mut ds[ci * h * w..(ci + 1) * h * w];
        for ki in 0..kh {
            for kj in 0..kw {
                let row = (ci * kh + ki) * kw + kj;
                let crow = &dc[row * oh * ow..(row + 1) * oh * ow];
                for oi in 0..oh {
                    let ii = (oi * stride + ki) as isize - pad as isize;
                    if ii < 0 || ii >= h as isize {
                        continue;
                    }
                    let drow = &mut dplane[ii as usize * w..(ii as usize + 1) * w];
                    let grow = &crow[oi * ow..(oi + 1) * ow];
                    let j0 = kj as isize - pad as isize;
                    if stride == 1 {
                        let (src0, dst0) = if j0 < 0 { ((-j0) as usize, 0) } else { (0, j0 as usize) };
                        let n = (w - dst0).min(ow - src0);
                        for (d, g) in drow[dst0..dst0 + n].iter_mut().zip(&grow[src0..src0 + n]) {
                            *d += g;
                        }
                    } else {
                        for (oj, g) in grow.iter().enumerate() {
                            let jj = (oj * stride) as isize + j0;
                            if jj >= 0 && (jj as usize) < w {
                                drow[jj as usize] += g;
                            }
                        }
                    }
                }
            }
        }
    }
    dx
}

/// Few output channels over many positions: the GEMM runs faster in
/// transposed order (position-major) on tall-skinny shapes.
fn prefer_transposed(out_c: usize, positions: usize) -> bool {
    out_c <= 32 && positions >= 2048
}

/// Convolution forward via im2col + GEMM. `w_flat` is the row-major
/// (out_c, in_c, kh, kw) kernel; bias is optional. Returns the output
/// and the column matrix (cached by the caller for the backward pass).
#[allow(clippy::too_many_arguments)]
pub fn conv2d_forward(
    x: &ArrayView3<f64>,
    w_flat: &[f64],
    bias: Option<&[f64]>,
    out_c: usize,
    kh: usize,
    kw: usize,
    stride: usize,
    pad: usize,
) -> (Array3<f64>, Array2<f64>) {
    let (in_c, h, w) = x.dim();
    let oh = conv_out_len(h, kh, stride, pad);
    let ow = conv_out_len(w, kw, stride, pad);
    let col = im2col(x, kh, kw, stride, pad);
    let wmat = ArrayView2::from_shape((out_c, in_c * kh * kw), w_flat)
        .expect("conv weight length must match (out_c, in_c*kh*kw)");
    let mut y = if prefer_transposed(out_c, oh * ow) {
        let yt = col.t().dot(&wmat.t());
        yt.t().as_standard_layout().into_owned()
    } else {
        wmat.dot(&col)
    };
    if let Some(b) = bias {
        for (mut row, &bv) in y.rows_mut().into_iter().zip(b.iter()) {
            row.mapv_inplace(|v| v + bv);
        }
    }
    let y3 = y
        .into_shape_with_order((out_c, oh, ow))
        .expect("conv output reshape");
    (y3, col)
}

/// Adjoint of [`im2col`] over the transposed (positions, C*kh*kw)
/// gradient layout. Position-major iteration keeps the scatter window
/// cache-resident.
#[allow(clippy::too_many_arguments)]
fn col2im_t(
    dcol_t: &Array2<f64>,
    c: usize,
    h: usize,
    w: usize,
    kh: usize,
    kw: usize,
    stride: usize,
    pad: usize,
) -> Array3<f64> {
    let oh = conv_out_len(h, kh, stride, pad);
    let ow = conv_out_len(w, kw, stride, pad);
    let k = c * kh * kw;
    let mut dx = Array3::zeros((c, h, w));
    let ds = dx.as_slice_mut().expect("freshly allocated dx is contiguous");
    let dt = dcol_t.as_slice().expect("gemm result is standard layout");
    for oi in 0..oh {
        for oj in 0..ow {
            let row = &dt[(oi * ow + oj) * k..(oi * ow + oj + 1) * k];
            for ki in 0..kh {
                let ii = (oi * stride + ki) as isize - pad as isize;
                if ii < 0 || ii >= h as isize {
                    continue;
                }
                for kj in 0..kw {
                    let jj = (oj * stride + kj) as isize - pad as isize;
                    if jj < 0 || jj >= w as isize {
                        continue;
                    }
                    let base = ii as usize * w + jj as usize;
                    for ci in 0..c {
                        ds[ci * h * w + base] += row[(ci * kh + ki) * kw + kj];
                    }
                }
            }
        }
    }
    dx
}

/// Convolution backward. Returns the input gradient and appends the
/// weight/bias gradients into the provided flat accumulators.
#[allow(clippy::too_many_arguments)]
pub fn conv2d_backward(
    dy: &ArrayView3<f64>,
    col: &Array2<f64>,
    w_flat: &[f64],
    dw_flat: &mut [f64],
    db: Option<&mut [f64]>,
    in_shape: (usize, usize, usize),
    kh: usize,
    kw: usize,
    stride: usize,
    pad: usize,
) -> Array3<f64> {
    let (in_c, h, w) = in_shape;
    let (out_c, oh, ow) = dy.dim();
    let dy2 = dy
        .to_shape((out_c, oh * ow))
        .expect("dy reshape")
        .into_owned();
    // dW = dY * col^T, accumulated flat.
    let dw = dy2.dot(&col.t());
    for (acc, g) in dw_flat.iter_mut().zip(dw.iter()) {
        *acc += g;
    }
    if let Some(db) = db {
        for (ci, acc) in db.iter_mut().enumerate() {
            *acc += dy2.row(ci).sum();
        }
    }
    let wmat = ArrayView2::from_shape((out_c, in_c * kh * kw), w_flat).expect("conv weight view");
    if prefer_transposed(out_c, oh * ow) {
        let dcol_t = dy2.t().dot(&wmat);
        col2im_t(&dcol_t, in_c, h, w, kh, kw, stride, pad)
    } else {
        let dcol = wmat.t().dot(&dy2);
        col2im(&dcol.view(), in_c, h, w, kh, kw, stride, pad)
    }
}

/// Numerical-stability constant inside group-norm denominators.
pub const GROUP_NORM_EPS: f64 = 1e-5;

/// Per-sample group normalization forward.
///
/// Channels are split into `groups` contiguous groups; each group is
/// standardized over its (channels/groups, H, W) elements, then scaled
/// and shifted per channel. Statistics never cross samples, which keeps
/// every forward pass batch-independent and deterministic.
///
/// Returns the output plus the per-group (mean, inv_std) needed by the
/// backward pass.
pub fn group_norm_forward(
    x: &ArrayView3<f64>,
    gamma: &[f64],
    beta: &[f64],
    groups: usize,
) -> (Array3<f64>, Vec<(f64, f64)>) {
    let (c, h, w) = x.dim();
    assert!(c % groups == 0, "channels {c} not divisible by groups {groups}");
    let per = c / groups;
    let n = (per * h * w) as f64;
    let mut y = Array3::zeros((c, h, w));
    let mut stats = Vec::with_capacity(groups);
    for g in 0..groups {
        let c0 = g * per;
        let mut sum = 0.0;
        let mut sumsq = 0.0;
        for ci in c0..c0 + per {
            for v in x.index_axis(ndarray::Axis(0), ci).iter() {
                sum += v;
                sumsq += v * v;
            }
        }
        let mean = sum / n;
        let var = (sumsq / n - mean * mean).max(0.0);
        let inv_std = 1.0 / (var + GROUP_NORM_EPS).sqrt();
        stats.push((mean, inv_std));
        for ci in c0..c0 + per {
            let (ga, be) = (gamma[ci], beta[ci]);
            let xin = x.index_axis(ndarray::Axis(0), ci);
            let mut yout = y.index_axis_mut(ndarray::Axis(0), ci);
            for (yv, &xv) in yout.iter_mut().zip(xin.iter()) {
                *yv = ga * (xv - mean) * inv_std + be;
            }
        }
    }
    (y, stats)
}

/// Group normalization backward: input gradient plus flat gamma/beta
/// gradient accumulation.
pub fn group_norm_backward(
    dy: &ArrayView3<f64>,
    x: &ArrayView3<f64>,
    gamma: &[f64],
    dgamma: &mut [f64],
    dbeta: &mut [f64],
    stats: &[(f64, f64)],
    groups: usize,
) -> Array3<f64> {
    let (c, h, w) = x.dim();
    let per = c / groups;
    let n = (per * h * w) as f64;
    let mut dx = Array3::zeros((c, h, w));
    for g in 0..groups {
        let c0 = g * per;
        let (mean, inv_std) = stats[g];
        // dxhat = dy * gamma; accumulate the two reduction terms.
        let mut sum_dxhat = 0.0;
        let mut sum_dxhat_xhat = 0.0;
        for ci in c0..c0 + per {
            let ga = gamma[ci];
            let xin = x.index_axis(ndarray::Axis(0), ci);
            let dyc = dy.index_axis(ndarray::Axis(0), ci);
            for (&dyv, &xv) in dyc.iter().zip(xin.iter()) {
                let xhat = (xv - mean) * inv_std;
                let dxhat = dyv * ga;
                sum_dxhat += dxhat;
                sum_dxhat_xhat += dxhat * xhat;
                dgamma[ci] += dyv * xhat;
                dbeta[ci] += dyv;
            }
        }
        let m1 = sum_dxhat / n;
        let m2 = sum_dxhat_xhat / n;
        for ci in c0..c0 + per {
            let ga = gamma[ci];
            let xin = x.index_axis(ndarray::Axis(0), ci);
            let dyc = dy.index_axis(ndarray::Axis(0), ci);
            let mut dxc = dx.index_axis_mut(ndarray::Axis(0), ci);
            for ((dxv, &dyv), &xv) in dxc.iter_mut().zip(dyc.iter()).zip(xin.iter()) {
                let xhat = (xv - mean) * inv_std;
                let dxhat = dyv * ga;
                *dxv = inv_std * (dxhat - m1 - xhat * m2);
            }
        }
    }
    dx
}

/// Nearest-neighbour 2x upsampling.
pub fn upsample2x_forward(x: &ArrayView3<f64>) -> Array3<f64> {
    let (c, h, w) = x.dim();
    let mut y = Array3::zeros((c, h * 2, w * 2));
    for ci in 0..c {
        for i in 0..h {
            for j in 0..w {
                let v = x[(ci, i, j)];
                y[(ci, 2 * i, 2 * j)] = v;
                y[(ci, 2 * i, 2 * j + 1)] = v;
                y[(ci, 2 * i + 1, 2 * j)] = v;
                y[(ci, 2 * i + 1, 2 * j + 1)] = v;
            }
        }
    }
    y
}

/// Adjoint of 2x nearest upsampling: each source cell gathers its four
/// replicas.
pub fn upsample2x_backward(dy: &ArrayView3<f64>) -> Array3<f64> {
    let (c, h2, w2) = dy.dim();
    let (h, w) = (h2 / 2, w2 / 2);
    let mut dx = Array3::zeros((c, h, w));
    for ci in 0..c {
        for i in 0..h {
            for j in 0..w {
                dx[(ci, i, j)] = dy[(ci, 2 * i, 2 * j)]
                    + dy[(ci, 2 * i, 2 * j + 1)]
                    + dy[(ci, 2 * i + 1, 2 * j)]
                    + dy[(ci, 2 * i + 1, 2 * j + 1)];
            }
        }
    }
    dx
}

/// Differentiable crop: bilinearly resamples the axis-aligned window
/// (per-axis centre and side, in pixel-centre coordinates of `x`) to a
/// square `out_size` output. Coordinates outside `x` read zero.
pub fn crop_resample_forward(
    x: &ArrayView3<f64>,
    center: (f64, f64),
    side: (f64, f64),
    out_size: usize,
) -> Array3<f64> {
    let (c, _, _) = x.dim();
    let mut y = Array3::zeros((c, out_size, out_size));
    for ci in 0..c {
        let plane = x.index_axis(ndarray::Axis(0), ci);
        for ov in 0..out_size {
            let v = crop_source_coord(center.1, side.1, out_size, ov);
            for ou in 0..out_size {
                let u = crop_source_coord(center.0, side.0, out_size, ou);
                y[(ci, ov, ou)] = bilinear_sample(&plane, u, v);
            }
        }
    }
    y
}

/// Adjoint of [`crop_resample_forward`]: scatter-adds each output
/// gradient onto the four source pixels it interpolated. The window
/// geometry is a constant of the operation (no gradient w.r.t. the box).
pub fn crop_resample_backward(
    dy: &ArrayView3<f64>,
    in_shape: (usize, usize, usize),
    center: (f64, f64),
    side: (f64, f64),
) -> Array3<f64> {
    let (c, rows, cols) = in_shape;
    let out_size = dy.dim().1;
    let mut dx = Array3::zeros((c, rows, cols));
    for ci in 0..c {
        for ov in 0..out_size {
            let v = crop_source_coord(center.1, side.1, out_size, ov);
            let v0 = v.floor();
            let fv = v - v0;
            for ou in 0..out_size {
                let u = crop_source_coord(center.0, side.0, out_size, ou);
                let u0 = u.floor();
                let fu = u - u0;
                let g = dy[(ci, ov, ou)];
                if g == 0.0 {
                    continue;
                }
                for (dv, wv) in [(0.0, 1.0 - fv), (1.0, fv)] {
                    for (du, wu) in [(0.0, 1.0 - fu), (1.0, fu)] {
                        let ui = u0 + du;
                        let vi = v0 + dv;
                        if ui >= 0.0 && vi >= 0.0 && (ui as usize) < cols && (vi as usize) < rows
                        {
                            dx[(ci, vi as usize, ui as usize)] += g * wu * wv;
                        }
                    }
                }
            }
        }
    }
    dx
}

/// Dense layer forward: y = W v + b with W row-major (out, in).
pub fn linear_forward(v: &Array1<f64>, w_flat: &[f64], bias: &[f64], out_n: usize) -> Array1<f64> {
    let in_n = v.len();
    let wmat = ArrayView2::from_shape((out_n, in_n), w_flat).expect("linear weight view");
    let mut y = wmat.dot(v);
    for (yv, &bv) in y.iter_mut().zip(bias.iter()) {
        *yv += bv;
    }
    y
}

/// Dense layer backward: accumulates dW = dy v^T and db = dy, returns dv.
pub fn linear_backward(
    dy: &Array1<f64>,
    v: &Array1<f64>,
    w_flat: &[f64],
    dw_flat: &mut [f64],
    db: &mut [f64],
) -> Array1<f64> {
    let (out_n, in_n) = (dy.len(), v.len());
    for i in 0..out_n {
        let dyi = dy[i];
        db[i] += dyi;
        let row = &mut dw_flat[i * in_n..(i + 1) * in_n];
        for (wv, &vv) in row.iter_mut().zip(v.iter()) {
            *wv += dyi * vv;
        }
    }
    let wmat = ArrayView2::from_shape((out_n, in_n), w_flat).expect("linear weight view");
    wmat.t().dot(dy)
}
