//! Dense kernels behind the graph ops. Convolutions use NHWC layout with
//! kernel layout (ky, kx, in_c, out_c) so the innermost loops run over
//! contiguous output channels.

use super::tensor::{Scalar, Tensor};
use rayon::prelude::*;

/// TF-style SAME padding: output side ceil(in/stride).
pub fn conv_out_side(in_side: usize, stride: usize) -> usize {
    in_side.div_ceil(stride)
}

fn pad_begin(in_side: usize, out_side: usize, k: usize, stride: usize) -> isize {
    let total = ((out_side - 1) * stride + k).saturating_sub(in_side) as isize;
    total / 2
}

pub fn conv_forward<T: Scalar>(x: &Tensor<T>, w: &Tensor<T>, bias: Option<&[T]>, stride: usize) -> Tensor<T> {
    let [n, ih, iw, ic] = x.shape();
    let [k, k2, wic, oc] = w.shape();
    assert_eq!(k, k2);
    assert_eq!(ic, wic);
    let oh = conv_out_side(ih, stride);
    let ow = conv_out_side(iw, stride);
    let py = pad_begin(ih, oh, k, stride);
    let px = pad_begin(iw, ow, k, stride);
    let mut out = Tensor::zeros([n, oh, ow, oc]);
    let xd = x.data();
    let wd = w.data();
    let rows: Vec<(usize, usize)> = (0..n).flat_map(|b| (0..oh).map(move |oy| (b, oy))).collect();
    let out_w = ow;
    out.data_mut()
        .par_chunks_mut(ow * oc)
        .zip(rows.par_iter())
        .for_each(|(orow, &(b, oy))| {
            for (ky, wk) in (0..k).zip(wd.chunks(k * ic * oc)) {
                let iy = oy as isize * stride as isize + ky as isize - py;
                if iy < 0 || iy >= ih as isize {
                    continue;
                }
                let xrow = &xd[((b * ih + iy as usize) * iw) * ic..((b * ih + iy as usize) * iw + iw) * ic];
                for ox in 0..out_w {
                    let acc = &mut orow[ox * oc..(ox + 1) * oc];
                    for kx in 0..k {
                        let ixx = ox as isize * stride as isize + kx as isize - px;
                        if ixx < 0 || ixx >= iw as isize {
                            continue;
                        }
                        let xpix = &xrow[ixx as usize * ic..(ixx as usize + 1) * ic];
                        let wpix = &wk[kx * ic * oc..(kx + 1) * ic * oc];
                        for (ci, &xv) in xpix.iter().enumerate() {
                            let wsub = &wpix[ci * oc..(ci + 1) * oc];
                            for (a, &wv) in acc.iter_mut().zip(wsub) {
                                *a += xv * wv;
                            }
                        }
                    }
                }
            }
            if let Some(bv) = bias {
                for ox in 0..out_w {
                    for (a, &b) in orow[ox * oc..(ox + 1) * oc].iter_mut().zip(bv) {
                        *a += b;
                    }
                }
            }
        });
    out
}

/// Gradient with respect to the convolution input (gather form, row-parallel).
pub fn conv_grad_input<T: Scalar>(
    gout: &Tensor<T>,
    w: &Tensor<T>,
    in_shape: [usize; 4],
    stride: usize,
) -> Tensor<T> {
    let [n, ih, iw, ic] = in_shape;
    let [k, _, _, oc] = w.shape();
    let [gn, oh, ow, goc] = gout.shape();
    assert_eq!(gn, n);
    assert_eq!(goc, oc);
    let py = pad_begin(ih, oh, k, stride);
    let px = pad_begin(iw, ow, k, stride);
    let mut gin = Tensor::zeros(in_shape);
    let gd = gout.data();
    let wd = w.data();
    let rows: Vec<(usize, usize)> = (0..n).flat_map(|b| (0..ih).map(move |iy| (b, iy))).collect();
    gin.data_mut()
        .par_chunks_mut(iw * ic)
        .zip(rows.par_iter())
        .for_each(|(grow, &(b, iy))| {
            for ky in 0..k {
                let ty = iy as isize + py - ky as isize;
                if ty < 0 || ty % stride as isize != 0 {
                    continue;
                }
                let oy = (ty / stride as isize) as usize;
                if oy >= oh {
                    continue;
                }
                let gorow = &gd[((b * oh + oy) * ow) * oc..((b * oh + oy) * ow + ow) * oc];
                let wk = &wd[ky * k * ic * oc..(ky + 1) * k * ic * oc];
                for ix in 0..iw {
                    let gpix = &mut grow[ix * ic..(ix + 1) * ic];
                    for kx in 0..k {
                        let tx = ix as isize + px - kx as isize;
                        if tx < 0 || tx % stride as isize != 0 {
                            continue;
                        }
                        let ox = (tx / stride as isize) as usize;
                        if ox >= ow {
                            continue;
                        }
                        let gvec = &gorow[ox * oc..(ox + 1) * oc];
                        let wpix = &wk[kx * ic * oc..(kx + 1) * ic * oc];
                        for (ci, gval) in gpix.iter_mut().enumerate() {
                            let wsub = &wpix[ci * oc..(ci + 1) * oc];
                            let mut acc = T::zero();
                            for (&g, &wv) in gvec.iter().zip(wsub) {
                                acc += g * wv;
                            }
                            *gval += acc;
                        }
                    }
                }
            }
        });
    gin
}

/// Gradient with respect to the convolution weights, parallel over kernel
/// offsets (each owns a disjoint slice of the weight gradient).
pub fn conv_grad_weight<T: Scalar>(x: &Tensor<T>, gout: &Tensor<T>, k: usize, stride: usize) -> Tensor<T> {
    let [n, ih, iw, ic] = x.shape();
    let [_, oh, ow, oc] = gout.shape();
    let py = pad_begin(ih, oh, k, stride);
    let px = pad_begin(iw, ow, k, stride);
    let mut gw = Tensor::zeros([k, k, ic, oc]);
    let xd = x.data();
    let gd = gout.data();
    let offsets: Vec<(usize, usize)> = (0..k).flat_map(|ky| (0..k).map(move |kx| (ky, kx))).collect();
    gw.data_mut()
        .par_chunks_mut(ic * oc)
        .zip(offsets.par_iter())
        .for_each(|(gslice, &(ky, kx))| {
            for b in 0..n {
                for oy in 0..oh {
                    let iy = oy as isize * stride as isize + ky as isize - py;
                    if iy < 0 || iy >= ih as isize {
                        continue;
                    }
                    let xrow = &xd[((b * ih + iy as usize) * iw) * ic..((b * ih + iy as usize) * iw + iw) * ic];
                    let grow = &gd[((b * oh + oy) * ow) * oc..((b * oh + oy) * ow + ow) * oc];
                    for ox in 0..ow {
                        let ixx = ox as isize * stride as isize + kx as isize - px;
                        if ixx < 0 || ixx >= iw as isize {
                            continue;
                        }
                        let xpix = &xrow[ixx as usize * ic..(ixx as usize + 1) * ic];
                        let gvec = &grow[ox * oc..(ox + 1) * oc];
                        for (ci, &xv) in xpix.iter().enumerate() {
                            let gsub = &mut gslice[ci * oc..(ci + 1) * oc];
                            for (gs, &g) in gsub.iter_mut().zip(gvec) {
                                *gs += xv * g;
                            }
                        }
                    }
                }
            }
        });
    gw
}

pub fn bias_grad<T: Scalar>(gout: &Tensor<T>) -> Vec<T> {
    let [n, h, w, c] = gout.shape();
    let mut gb = vec![T::zero(); c];
    for chunk in gout.data().chunks(c).take(n * h * w) {
        for (g, &v) in gb.iter_mut().zip(chunk) {
            *g += v;
        }
    }
    gb
}

pub fn linear_forward<T: Scalar>(x: &Tensor<T>, w: &Tensor<T>, bias: Option<&[T]>) -> Tensor<T> {
    let n = x.n();
    let fi = x.features();
    let [_, _, wfi, fo] = w.shape();
    assert_eq!(fi, wfi, "linear input features");
    let mut out = Tensor::zeros([n, 1, 1, fo]);
    let xd = x.data();
    let wd = w.data();
    out.data_mut().par_chunks_mut(fo).enumerate().for_each(|(b, orow)| {
        let xrow = &xd[b * fi..(b + 1) * fi];
        for (i, &xv) in xrow.iter().enumerate() {
            let wrow = &wd[i * fo..(i + 1) * fo];
            for (o, &wv) in orow.iter_mut().zip(wrow) {
                *o += xv * wv;
            }
        }
        if let Some(bv) = bias {
            for (o, &b) in orow.iter_mut().zip(bv) {
                *o += b;
            }
        }
    });
    out
}

pub fn linear_grad_input<T: Scalar>(gout: &Tensor<T>, w: &Tensor<T>, in_shape: [usize; 4]) -> Tensor<T> {
    let fo = gout.features();
    let fi: usize = in_shape[1] * in_shape[2] * in_shape[3];
    let mut gin = Tensor::zeros(in_shape);
    let gd = gout.data();
    let wd = w.data();
    gin.data_mut().par_chunks_mut(fi).enumerate().for_each(|(b, grow)| {
        let gvec = &gd[b * fo..(b + 1) * fo];
        for (i, gi) in grow.iter_mut().enumerate() {
            let wrow = &wd[i * fo..(i + 1) * fo];
            let mut acc = T::zero();
            for (&g, &wv) in gvec.iter().zip(wrow) {
                acc += g * wv;
            }
            *gi += acc;
        }
    });
    gin
}

pub fn linear_grad_weight<T: Scalar>(x: &Tensor<T>, gout: &Tensor<T>) -> Tensor<T> {
    let n = x.n();
    let fi = x.features();
    let fo = gout.features();
    let mut gw = Tensor::zeros([1, 1, fi, fo]);
    let gd = gout.data();
    let xd = x.data();
    let gwd = gw.data_mut();
    for b in 0..n {
        let xrow = &xd[b * fi..(b + 1) * fi];
        let gvec = &gd[b * fo..(b + 1) * fo];
        for (i, &xv) in xrow.iter().enumerate() {
            let grow = &mut gwd[i * fo..(i + 1) * fo];
            for (gs, &g) in grow.iter_mut().zip(gvec) {
                *gs += xv * g;
            }
        }
    }
    gw
}

/// Per-axis linear resampling taps with center alignment, shared by the
/// bilinear resize forward and its adjoint.
pub fn bilinear_taps(src: usize, dst: usize) -> Vec<(usize, usize, f64)> {
    let scale = src as f64 / dst as f64;
    (0..dst)
        .map(|d| {
            let center = (d as f64 + 0.5) * scale - 0.5;
            let clamped = center.clamp(0.0, (src - 1) as f64);
            let i0 = clamped.floor() as usize;
            let i1 = (i0 + 1).min(src - 1);
            let frac = clamped - i0 as f64;
            (i0, i1, frac)
        })
        .collect()
}

pub fn bilinear_resize<T: Scalar>(x: &Tensor<T>, oh: usize, ow: usize) -> Tensor<T> {
    let [n, ih, iw, c] = x.shape();
    let col = bilinear_taps(iw, ow);
    let row = bilinear_taps(ih, oh);
    // Horizontal pass.
    let mut mid = Tensor::zeros([n, ih, ow, c]);
    {
        let xd = x.data();
        let md = mid.data_mut();
        for b in 0..n {
            for iy in 0..ih {
                let xrow = &xd[((b * ih + iy) * iw) * c..((b * ih + iy) * iw + iw) * c];
                let mrow = &mut md[((b * ih + iy) * ow) * c..((b * ih + iy) * ow + ow) * c];
                for (ox, &(i0, i1, f)) in col.iter().enumerate() {
                    let w0 = T::from_f64(1.0 - f);
                    let w1 = T::from_f64(f);
                    let a = &xrow[i0 * c..(i0 + 1) * c];
                    let bpix = &xrow[i1 * c..(i1 + 1) * c];
                    let o = &mut mrow[ox * c..(ox + 1) * c];
                    for k in 0..c {
                        o[k] = w0 * a[k] + w1 * bpix[k];
                    }
                }
            }
        }
    }
    // Vertical pass.
    let mut out = Tensor::zeros([n, oh, ow, c]);
    {
        let md = mid.data();
        let od = out.data_mut();
        for b in 0..n {
            for (oy, &(i0, i1, f)) in row.iter().enumerate() {
                let w0 = T::from_f64(1.0 - f);
                let w1 = T::from_f64(f);
                let r0 = &md[((b * ih + i0) * ow) * c..((b * ih + i0) * ow + ow) * c];
                let r1 = &md[((b * ih + i1) * ow) * c..((b * ih + i1) * ow + ow) * c];
                let orow = &mut od[((b * oh + oy) * ow) * c..((b * oh + oy) * ow + ow) * c];
                for k in 0..ow * c {
                    orow[k] = w0 * r0[k] + w1 * r1[k];
                }
            }
        }
    }
    out
}

/// Adjoint of [`bilinear_resize`]: scatter through the same taps in reverse
/// order.
pub fn bilinear_resize_adjoint<T: Scalar>(gout: &Tensor<T>, in_shape: [usize; 4]) -> Tensor<T> {
    let [n, ih, iw, c] = in_shape;
    let [_, oh, ow, _] = gout.shape();
    let col = bilinear_taps(iw, ow);
    let row = bilinear_taps(ih, oh);
    // Vertical adjoint.
    let mut mid = Tensor::zeros([n, ih, ow, c]);
    {
        let gd = gout.data();
        let md = mid.data_mut();
        for b in 0..n {
            for (oy, &(i0, i1, f)) in row.iter().enumerate() {
                let w0 = T::from_f64(1.0 - f);
                let w1 = T::from_f64(f);
                let grow = &gd[((b * oh + oy) * ow) * c..((b * oh + oy) * ow + ow) * c];
                for k in 0..ow * c {
                    let g = grow[k];
                    md[((b * ih + i0) * ow) * c + k] += w0 * g;
                    md[((b * ih + i1) * ow) * c + k] += w1 * g;
                }
            }
        }
    }
    // Horizontal adjoint.
    let mut gin = Tensor::zeros(in_shape);
    {
        let md = mid.data();
        let gd = gin.data_mut();
        for b in 0..n {
            for iy in 0..ih {
                let mrow = &md[((b * ih + iy) * ow) * c..((b * ih + iy) * ow + ow) * c];
                let grow = &mut gd[((b * ih + iy) * iw) * c..((b * ih + iy) * iw + iw) * c];
                for (ox, &(i0, i1, f)) in col.iter().enumerate() {
                    let w0 = T::from_f64(1.0 - f);
                    let w1 = T::from_f64(f);
                    let g = &mrow[ox * c..(ox + 1) * c];
                    for k in 0..c {
                        grow[i0 * c + k] += w0 * g[k];
                        grow[i1 * c + k] += w1 * g[k];
                    }
                }
            }
        }
    }
    gin
}

/// Nearest-neighbour index per output position, center-aligned.
pub fn nearest_taps(src: usize, dst: usize) -> Vec<usize> {
    let scale = src as f64 / dst as f64;
    (0..dst)
        .map(|d| {
            let center = (d as f64 + 0.5) * scale - 0.5;
            center.round().clamp(0.0, (src - 1) as f64) as usize
        })
        .collect()
}

pub fn nearest_resize<T: Scalar>(x: &Tensor<T>, oh: usize, ow: usize) -> Tensor<T> {
    let [n, ih, iw, c] = x.shape();
    let col = nearest_taps(iw, ow);
    let row = nearest_taps(ih, oh);
    let mut out = Tensor::zeros([n, oh, ow, c]);
    let xd = x.data();
    let od = out.data_mut();
    for b in 0..n {
        for (oy, &sy) in row.iter().enumerate() {
            let xrow = &xd[((b * ih + sy) * iw) * c..((b * ih + sy) * iw + iw) * c];
            let orow = &mut od[((b * oh + oy) * ow) * c..((b * oh + oy) * ow + ow) * c];
            for (ox, &sx) in col.iter().enumerate() {
                orow[ox * c..(ox + 1) * c].copy_from_slice(&xrow[sx * c..(sx + 1) * c]);
            }
        }
    }
    out
}

pub fn nearest_resize_adjoint<T: Scalar>(gout: &Tensor<T>, in_shape: [usize; 4]) -> Tensor<T> {
    let [n, ih, iw, c] = in_shape;
    let [_, oh, ow, _] = gout.shape();
    let col = nearest_taps(iw, ow);
    let row = nearest_taps(ih, oh);
    let mut gin = Tensor::zeros(in_shape);
    let gd = gout.data();
    let gi = gin.data_mut();
    for b in 0..n {
        for (oy, &sy) in row.iter().enumerate() {
            let grow = &gd[((b * oh + oy) * ow) * c..((b * oh + oy) * ow + ow) * c];
            for (ox, &sx) in col.iter().enumerate() {
                let dst = &mut gi[((b * ih + sy) * iw + sx) * c..((b * ih + sy) * iw + sx + 1) * c];
                for (d, &g) in dst.iter_mut().zip(&grow[ox * c..(ox + 1) * c]) {
                    *d += g;
                }
            }
        }
    }
    gin
}
