//! Forward and backward kernels on plain tensors.
//!
//! These functions know nothing about the tape; [`super::Graph`] wires them
//! together. Every kernel validates its input extents and reports the
//! offending axis on mismatch.

use rayon::prelude::*;

use super::{Scalar, Tensor};
use crate::error::{Error, Result};

/// Geometry of a 2-D correlation window sweep over one sample.
#[derive(Clone, Copy, Debug)]
pub struct ConvGeom {
    pub channels: usize,
    pub h: usize,
    pub w: usize,
    pub kh: usize,
    pub kw: usize,
    pub stride: usize,
    pub pad: usize,
    pub oh: usize,
    pub ow: usize,
}

impl ConvGeom {
    fn new(
        op: &'static str,
        channels: usize,
        (h, w): (usize, usize),
        (kh, kw): (usize, usize),
        stride: usize,
        pad: usize,
    ) -> Result<Self> {
        if stride == 0 {
            return Err(Error::dim(op, "stride", "stride must be >= 1"));
        }
        if h + 2 * pad < kh {
            return Err(Error::dim(
                op,
                "height",
                format!("kernel {kh} larger than padded input {}", h + 2 * pad),
            ));
        }
        if w + 2 * pad < kw {
            return Err(Error::dim(
                op,
                "width",
                format!("kernel {kw} larger than padded input {}", w + 2 * pad),
            ));
        }
        Ok(Self {
            channels,
            h,
            w,
            kh,
            kw,
            stride,
            pad,
            oh: (h + 2 * pad - kh) / stride + 1,
            ow: (w + 2 * pad - kw) / stride + 1,
        })
    }

    fn is_pointwise(&self) -> bool {
        self.kh == 1 && self.kw == 1 && self.stride == 1 && self.pad == 0
    }

    fn col_rows(&self) -> usize {
        self.channels * self.kh * self.kw
    }

    fn out_len(&self) -> usize {
        self.oh * self.ow
    }
}

/// Unrolls every receptive window of `x` (C, H, W) into the columns of
/// `cols` (C·kh·kw, oh·ow).
fn im2col<T: Scalar>(x: &[T], g: &ConvGeom, cols: &mut [T]) {
    let p = g.out_len();
    for ci in 0..g.channels {
        for ki in 0..g.kh {
            for kj in 0..g.kw {
                let row = ((ci * g.kh + ki) * g.kw + kj) * p;
                for oy in 0..g.oh {
                    let dst = &mut cols[row + oy * g.ow..row + (oy + 1) * g.ow];
                    let iy = (oy * g.stride + ki) as isize - g.pad as isize;
                    if iy < 0 || iy >= g.h as isize {
                        dst.fill(T::zero());
                        continue;
                    }
                    let src = &x[(ci * g.h + iy as usize) * g.w..][..g.w];
                    for (ox, d) in dst.iter_mut().enumerate() {
                        let ix = (ox * g.stride + kj) as isize - g.pad as isize;
                        *d = if ix < 0 || ix >= g.w as isize {
                            T::zero()
                        } else {
                            src[ix as usize]
                        };
                    }
                }
            }
        }
    }
}

/// Adjoint of [`im2col`]: scatters columns back, accumulating into `x`.
fn col2im<T: Scalar>(cols: &[T], g: &ConvGeom, x: &mut [T]) {
    let p = g.out_len();
    for ci in 0..g.channels {
        for ki in 0..g.kh {
            for kj in 0..g.kw {
                let row = ((ci * g.kh + ki) * g.kw + kj) * p;
                for oy in 0..g.oh {
                    let iy = (oy * g.stride + ki) as isize - g.pad as isize;
                    if iy < 0 || iy >= g.h as isize {
                        continue;
                    }
                    let src = &cols[row + oy * g.ow..row + (oy + 1) * g.ow];
                    let dst = &mut x[(ci * g.h + iy as usize) * g.w..][..g.w];
                    for (ox, &v) in src.iter().enumerate() {
                        let ix = (ox * g.stride + kj) as isize - g.pad as isize;
                        if ix >= 0 && ix < g.w as isize {
                            dst[ix as usize] += v;
                        }
                    }
                }
            }
        }
    }
}

/// Row-major `c (m×n) = a (m×k) · b (k×n)` with optional transposes given by
/// strides.
#[allow(clippy::too_many_arguments)]
#[inline]
fn matmul<T: Scalar>(
    m: usize,
    k: usize,
    n: usize,
    a: &[T],
    (rsa, csa): (usize, usize),
    b: &[T],
    (rsb, csb): (usize, usize),
    c: &mut [T],
) {
    debug_assert!(c.len() >= m * n);
    // SAFETY: callers pass slices whose extents match (m, k, n) and strides.
    unsafe {
        T::gemm(
            m,
            k,
            n,
            T::one(),
            a.as_ptr(),
            rsa as isize,
            csa as isize,
            b.as_ptr(),
            rsb as isize,
            csb as isize,
            T::zero(),
            c.as_mut_ptr(),
            n as isize,
            1,
        )
    }
}

fn add_bias<T: Scalar>(out: &mut [T], bias: &[T], plane: usize) {
    for (chunk, &b) in out.chunks_mut(plane).zip(bias.iter().cycle()) {
        chunk.iter_mut().for_each(|v| *v += b);
    }
}

fn bias_grad<T: Scalar>(gout: &Tensor<T>, channels: usize, plane: usize) -> Tensor<T> {
    let mut gb = vec![T::zero(); channels];
    for (i, chunk) in gout.data().chunks(plane).enumerate() {
        gb[i % channels] += chunk.iter().copied().sum::<T>();
    }
    Tensor::from_parts(vec![channels], gb)
}

fn check_bias<T: Scalar>(op: &'static str, b: Option<&Tensor<T>>, cout: usize) -> Result<()> {
    if let Some(b) = b {
        if b.shape() != [cout] {
            return Err(Error::dim(
                op,
                "bias",
                format!("expected [{cout}], got {:?}", b.shape()),
            ));
        }
    }
    Ok(())
}

fn conv_geom<T: Scalar>(
    op: &'static str,
    x: &Tensor<T>,
    w: &Tensor<T>,
    stride: usize,
    pad: usize,
) -> Result<(usize, usize, ConvGeom)> {
    let (n, cin, h, wd) = x.dims4()?;
    let (cout, wcin, kh, kw) = w.dims4().map_err(|_| {
        Error::dim(
            op,
            "weight",
            format!("rank-4 weight expected, got {:?}", w.shape()),
        )
    })?;
    if wcin != cin {
        return Err(Error::dim(
            op,
            "channel",
            format!("input has {cin} channels, weight expects {wcin}"),
        ));
    }
    Ok((
        n,
        cout,
        ConvGeom::new(op, cin, (h, wd), (kh, kw), stride, pad)?,
    ))
}

/// 2-D cross-correlation. `w` is (Cout, Cin, kH, kW).
pub fn conv2d<T: Scalar>(
    x: &Tensor<T>,
    w: &Tensor<T>,
    b: Option<&Tensor<T>>,
    stride: usize,
    pad: usize,
) -> Result<Tensor<T>> {
    let (n, cout, g) = conv_geom("conv2d", x, w, stride, pad)?;
    check_bias("conv2d", b, cout)?;
    let (p, k) = (g.out_len(), g.col_rows());
    let in_len = g.channels * g.h * g.w;
    let mut out = vec![T::zero(); n * cout * p];
    out.par_chunks_mut(cout * p)
        .zip(x.data().par_chunks(in_len))
        .for_each(|(o, xs)| {
            if g.is_pointwise() {
                matmul(cout, k, p, w.data(), (k, 1), xs, (p, 1), o);
            } else {
                let mut cols = vec![T::zero(); k * p];
                im2col(xs, &g, &mut cols);
                matmul(cout, k, p, w.data(), (k, 1), &cols, (p, 1), o);
            }
        });
    if let Some(b) = b {
        add_bias(&mut out, b.data(), p);
    }
    Ok(Tensor::from_parts(vec![n, cout, g.oh, g.ow], out))
}

/// Gradients of [`conv2d`] with respect to input, weight and (optionally) bias.
pub fn conv2d_backward<T: Scalar>(
    x: &Tensor<T>,
    w: &Tensor<T>,
    with_bias: bool,
    stride: usize,
    pad: usize,
    gout: &Tensor<T>,
) -> Result<(Tensor<T>, Tensor<T>, Option<Tensor<T>>)> {
    let (_, cout, g) = conv_geom("conv2d", x, w, stride, pad)?;
    let (p, k) = (g.out_len(), g.col_rows());
    let in_len = g.channels * g.h * g.w;
    let per_sample: Vec<(Vec<T>, Vec<T>)> = x
        .data()
        .par_chunks(in_len)
        .zip(gout.data().par_chunks(cout * p))
        .map(|(xs, gs)| {
            let mut gx = vec![T::zero(); in_len];
            let mut gw = vec![T::zero(); cout * k];
            if g.is_pointwise() {
                matmul(k, cout, p, w.data(), (1, k), gs, (p, 1), &mut gx);
                matmul(cout, p, k, gs, (p, 1), xs, (1, p), &mut gw);
            } else {
                let mut cols = vec![T::zero(); k * p];
                im2col(xs, &g, &mut cols);
                matmul(cout, p, k, gs, (p, 1), &cols, (1, p), &mut gw);
                matmul(k, cout, p, w.data(), (1, k), gs, (p, 1), &mut cols);
                col2im(&cols, &g, &mut gx);
            }
            (gx, gw)
        })
        .collect();
    let mut gx = Vec::with_capacity(x.len());
    let mut gw = vec![T::zero(); w.len()];
    for (sx, sw) in per_sample {
        gx.extend_from_slice(&sx);
        gw.iter_mut().zip(&sw).for_each(|(a, &b)| *a += b);
    }
    let gb = with_bias.then(|| bias_grad(gout, cout, p));
    Ok((
        Tensor::from_parts(x.shape().to_vec(), gx),
        Tensor::from_parts(w.shape().to_vec(), gw),
        gb,
    ))
}

fn convt_geom<T: Scalar>(
    x: &Tensor<T>,
    w: &Tensor<T>,
    stride: usize,
    pad: usize,
) -> Result<(usize, usize, usize, ConvGeom)> {
    let op = "conv_transpose2d";
    let (n, cin, h, wd) = x.dims4()?;
    let (wcin, cout, kh, kw) = w.dims4().map_err(|_| {
        Error::dim(
            op,
            "weight",
            format!("rank-4 weight expected, got {:?}", w.shape()),
        )
    })?;
    if wcin != cin {
        return Err(Error::dim(
            op,
            "channel",
            format!("input has {cin} channels, weight expects {wcin}"),
        ));
    }
    if stride == 0 {
        return Err(Error::dim(op, "stride", "stride must be >= 1"));
    }
    let oh = (stride * (h - 1) + kh)
        .checked_sub(2 * pad)
        .filter(|&v| v > 0)
        .ok_or_else(|| Error::dim(op, "height", "padding removes the whole output"))?;
    let ow = (stride * (wd - 1) + kw)
        .checked_sub(2 * pad)
        .filter(|&v| v > 0)
        .ok_or_else(|| Error::dim(op, "width", "padding removes the whole output"))?;
    let g = ConvGeom::new(op, cout, (oh, ow), (kh, kw), stride, pad)?;
    debug_assert_eq!((g.oh, g.ow), (h, wd));
    Ok((n, cin, cout, g))
}

/// Transposed convolution (adjoint of [`conv2d`] in `x`). `w` is
/// (Cin, Cout, kH, kW), i.e. the same tensor a forward conv from Cout to Cin
/// would use.
pub fn conv_transpose2d<T: Scalar>(
    x: &Tensor<T>,
    w: &Tensor<T>,
    b: Option<&Tensor<T>>,
    stride: usize,
    pad: usize,
) -> Result<Tensor<T>> {
    let (n, cin, cout, g) = convt_geom(x, w, stride, pad)?;
    check_bias("conv_transpose2d", b, cout)?;
    let (p, k) = (g.out_len(), g.col_rows());
    let out_len = cout * g.h * g.w;
    let mut out = vec![T::zero(); n * out_len];
    out.par_chunks_mut(out_len)
        .zip(x.data().par_chunks(cin * p))
        .for_each(|(o, xs)| {
            let mut cols = vec![T::zero(); k * p];
            matmul(k, cin, p, w.data(), (1, k), xs, (p, 1), &mut cols);
            col2im(&cols, &g, o);
        });
    if let Some(b) = b {
        add_bias(&mut out, b.data(), g.h * g.w);
    }
    Ok(Tensor::from_parts(vec![n, cout, g.h, g.w], out))
}

pub fn conv_transpose2d_backward<T: Scalar>(
    x: &Tensor<T>,
    w: &Tensor<T>,
    with_bias: bool,
    stride: usize,
    pad: usize,
    gout: &Tensor<T>,
) -> Result<(Tensor<T>, Tensor<T>, Option<Tensor<T>>)> {
    let (_, cin, cout, g) = convt_geom(x, w, stride, pad)?;
    let (p, k) = (g.out_len(), g.col_rows());
    let out_len = cout * g.h * g.w;
    let per_sample: Vec<(Vec<T>, Vec<T>)> = x
        .data()
        .par_chunks(cin * p)
        .zip(gout.data().par_chunks(out_len))
        .map(|(xs, gs)| {
            let mut cols = vec![T::zero(); k * p];
            im2col(gs, &g, &mut cols);
            let mut gx = vec![T::zero(); cin * p];
            let mut gw = vec![T::zero(); cin * k];
            matmul(cin, k, p, w.data(), (k, 1), &cols, (p, 1), &mut gx);
            matmul(cin, p, k, xs, (p, 1), &cols, (1, p), &mut gw);
            (gx, gw)
        })
        .collect();
    let mut gx = Vec::with_capacity(x.len());
    let mut gw = vec![T::zero(); w.len()];
    for (sx, sw) in per_sample {
        gx.extend_from_slice(&sx);
        gw.iter_mut().zip(&sw).for_each(|(a, &b)| *a += b);
    }
    let gb = with_bias.then(|| bias_grad(gout, cout, g.h * g.w));
    Ok((
        Tensor::from_parts(x.shape().to_vec(), gx),
        Tensor::from_parts(w.shape().to_vec(), gw),
        gb,
    ))
}

fn pool_geom(
    op: &'static str,
    h: usize,
    w: usize,
    k: usize,
    stride: usize,
) -> Result<(usize, usize)> {
    if k == 0 || stride == 0 {
        return Err(Error::dim(op, "kernel", "kernel and stride must be >= 1"));
    }
    if h < k || !(h - k).is_multiple_of(stride) {
        return Err(Error::dim(
            op,
            "height",
            format!("extent {h} not tiled by kernel {k} stride {stride}"),
        ));
    }
    if w < k || !(w - k).is_multiple_of(stride) {
        return Err(Error::dim(
            op,
            "width",
            format!("extent {w} not tiled by kernel {k} stride {stride}"),
        ));
    }
    Ok(((h - k) / stride + 1, (w - k) / stride + 1))
}

/// Max pooling over exactly tiled windows. Returns the output and, per
/// output element, the flat input index of the first maximum in scan order.
pub fn maxpool2d<T: Scalar>(
    x: &Tensor<T>,
    k: usize,
    stride: usize,
) -> Result<(Tensor<T>, Vec<usize>)> {
    let (n, c, h, w) = x.dims4()?;
    let (oh, ow) = pool_geom("maxpool2d", h, w, k, stride)?;
    let xd = x.data();
    let mut out = Vec::with_capacity(n * c * oh * ow);
    let mut arg = Vec::with_capacity(out.capacity());
    for plane in 0..n * c {
        let base = plane * h * w;
        for oy in 0..oh {
            for ox in 0..ow {
                let mut best = base + oy * stride * w + ox * stride;
                for ky in 0..k {
                    for kx in 0..k {
                        let idx = base + (oy * stride + ky) * w + ox * stride + kx;
                        if xd[idx] > xd[best] {
                            best = idx;
                        }
                    }
                }
                out.push(xd[best]);
                arg.push(best);
            }
        }
    }
    Ok((Tensor::from_parts(vec![n, c, oh, ow], out), arg))
}

/// Routes each output gradient to its recorded argmax.
pub fn scatter_argmax<T: Scalar>(shape: &[usize], arg: &[usize], gout: &Tensor<T>) -> Tensor<T> {
    let mut gx = Tensor::zeros(shape);
    let gd = gx.data_mut();
    for (&i, &g) in arg.iter().zip(gout.data()) {
        gd[i] += g;
    }
    gx
}

pub fn avgpool2d<T: Scalar>(x: &Tensor<T>, k: usize, stride: usize) -> Result<Tensor<T>> {
    let (n, c, h, w) = x.dims4()?;
    let (oh, ow) = pool_geom("avgpool2d", h, w, k, stride)?;
    let xd = x.data();
    let scale = T::c(1.0 / (k * k) as f64);
    let mut out = Vec::with_capacity(n * c * oh * ow);
    for plane in 0..n * c {
        let base = plane * h * w;
        for oy in 0..oh {
            for ox in 0..ow {
                let mut s = T::zero();
                for ky in 0..k {
                    let row = base + (oy * stride + ky) * w + ox * stride;
                    for kx in 0..k {
                        s += xd[row + kx];
                    }
                }
                out.push(s * scale);
            }
        }
    }
    Ok(Tensor::from_parts(vec![n, c, oh, ow], out))
}

pub fn avgpool2d_backward<T: Scalar>(
    shape: &[usize],
    k: usize,
    stride: usize,
    gout: &Tensor<T>,
) -> Result<Tensor<T>> {
    let (_, _, oh, ow) = gout.dims4()?;
    let (h, w) = (shape[2], shape[3]);
    let scale = T::c(1.0 / (k * k) as f64);
    let mut gx = Tensor::zeros(shape);
    let gd = gx.data_mut();
    for (plane, gp) in gout.data().chunks(oh * ow).enumerate() {
        let base = plane * h * w;
        for oy in 0..oh {
            for ox in 0..ow {
                let v = gp[oy * ow + ox] * scale;
                for ky in 0..k {
                    let row = base + (oy * stride + ky) * w + ox * stride;
                    for kx in 0..k {
                        gd[row + kx] += v;
                    }
                }
            }
        }
    }
    Ok(gx)
}

/// Per-pixel mean and max across channels: (N, C, H, W) -> (N, 2, H, W).
/// The returned indices locate the max input element for each pixel.
pub fn channel_pool<T: Scalar>(x: &Tensor<T>) -> Result<(Tensor<T>, Vec<usize>)> {
    let (n, c, h, w) = x.dims4()?;
    let hw = h * w;
    let xd = x.data();
    let inv = T::c(1.0 / c as f64);
    let mut out = vec![T::zero(); n * 2 * hw];
    let mut arg = vec![0usize; n * hw];
    for b in 0..n {
        let base = b * c * hw;
        for p in 0..hw {
            let mut s = T::zero();
            let mut best = base + p;
            for ch in 0..c {
                let idx = base + ch * hw + p;
                s += xd[idx];
                if xd[idx] > xd[best] {
                    best = idx;
                }
            }
            out[b * 2 * hw + p] = s * inv;
            out[b * 2 * hw + hw + p] = xd[best];
            arg[b * hw + p] = best;
        }
    }
    Ok((Tensor::from_parts(vec![n, 2, h, w], out), arg))
}

pub fn channel_pool_backward<T: Scalar>(
    shape: &[usize],
    arg: &[usize],
    gout: &Tensor<T>,
) -> Tensor<T> {
    let (n, c, h, w) = (shape[0], shape[1], shape[2], shape[3]);
    let hw = h * w;
    let inv = T::c(1.0 / c as f64);
    let mut gx = Tensor::zeros(shape);
    let gd = gx.data_mut();
    let go = gout.data();
    for b in 0..n {
        for p in 0..hw {
            let ga = go[b * 2 * hw + p] * inv;
            for ch in 0..c {
                gd[(b * c + ch) * hw + p] += ga;
            }
            gd[arg[b * hw + p]] += go[b * 2 * hw + hw + p];
        }
    }
    gx
}

/// Mean over rows for each (sample, channel, column): (N, C, H, W) -> (N, C, 1, W).
pub fn column_avg<T: Scalar>(x: &Tensor<T>) -> Result<Tensor<T>> {
    let (n, c, h, w) = x.dims4()?;
    let inv = T::c(1.0 / h as f64);
    let mut out = vec![T::zero(); n * c * w];
    for (o, plane) in out.chunks_mut(w).zip(x.data().chunks(h * w)) {
        for row in plane.chunks(w) {
            o.iter_mut().zip(row).for_each(|(a, &v)| *a += v);
        }
        o.iter_mut().for_each(|a| *a *= inv);
    }
    Ok(Tensor::from_parts(vec![n, c, 1, w], out))
}

pub fn column_avg_backward<T: Scalar>(shape: &[usize], gout: &Tensor<T>) -> Tensor<T> {
    let (h, w) = (shape[2], shape[3]);
    let inv = T::c(1.0 / h as f64);
    let mut gx = Tensor::zeros(shape);
    for (plane, g) in gx.data_mut().chunks_mut(h * w).zip(gout.data().chunks(w)) {
        for row in plane.chunks_mut(w) {
            row.iter_mut().zip(g).for_each(|(a, &v)| *a = v * inv);
        }
    }
    gx
}

/// Max over rows for each (sample, channel, column), with argmax indices.
pub fn column_max<T: Scalar>(x: &Tensor<T>) -> Result<(Tensor<T>, Vec<usize>)> {
    let (n, c, h, w) = x.dims4()?;
    let xd = x.data();
    let mut out = Vec::with_capacity(n * c * w);
    let mut arg = Vec::with_capacity(n * c * w);
    for plane in 0..n * c {
        let base = plane * h * w;
        for col in 0..w {
            let mut best = base + col;
            for row in 1..h {
                let idx = base + row * w + col;
                if xd[idx] > xd[best] {
                    best = idx;
                }
            }
            out.push(xd[best]);
            arg.push(best);
        }
    }
    Ok((Tensor::from_parts(vec![n, c, 1, w], out), arg))
}

/// Source index pairs and weights for 2× bilinear upsampling along one axis
/// (half-pixel centers, edge clamped).
fn bilinear_taps(len: usize) -> Vec<(usize, usize, f64)> {
    (0..2 * len)
        .map(|o| {
            let src = ((o as f64 + 0.5) / 2.0 - 0.5).max(0.0);
            let i0 = (src.floor() as usize).min(len - 1);
            let i1 = (i0 + 1).min(len - 1);
            let frac = if i1 == i0 { 0.0 } else { src - i0 as f64 };
            (i0, i1, frac)
        })
        .collect()
}

/// 2× bilinear upsampling with align-corners=false semantics.
pub fn upsample_bilinear2x<T: Scalar>(x: &Tensor<T>) -> Result<Tensor<T>> {
    let (n, c, h, w) = x.dims4()?;
    let (ty, tx) = (bilinear_taps(h), bilinear_taps(w));
    let (oh, ow) = (2 * h, 2 * w);
    let mut out = vec![T::zero(); n * c * oh * ow];
    for (o, plane) in out.chunks_mut(oh * ow).zip(x.data().chunks(h * w)) {
        for (oy, &(y0, y1, ly)) in ty.iter().enumerate() {
            let (ly, hy) = (T::c(ly), T::c(1.0 - ly));
            for (ox, &(x0, x1, lx)) in tx.iter().enumerate() {
                let (lx, hx) = (T::c(lx), T::c(1.0 - lx));
                o[oy * ow + ox] = hy * (hx * plane[y0 * w + x0] + lx * plane[y0 * w + x1])
                    + ly * (hx * plane[y1 * w + x0] + lx * plane[y1 * w + x1]);
            }
        }
    }
    Ok(Tensor::from_parts(vec![n, c, oh, ow], out))
}

pub fn upsample_bilinear2x_backward<T: Scalar>(shape: &[usize], gout: &Tensor<T>) -> Tensor<T> {
    let (h, w) = (shape[2], shape[3]);
    let (ty, tx) = (bilinear_taps(h), bilinear_taps(w));
    let ow = 2 * w;
    let mut gx = Tensor::zeros(shape);
    for (plane, g) in gx
        .data_mut()
        .chunks_mut(h * w)
        .zip(gout.data().chunks(4 * h * w))
    {
        for (oy, &(y0, y1, ly)) in ty.iter().enumerate() {
            let (ly, hy) = (T::c(ly), T::c(1.0 - ly));
            for (ox, &(x0, x1, lx)) in tx.iter().enumerate() {
                let (lx, hx) = (T::c(lx), T::c(1.0 - lx));
                let v = g[oy * ow + ox];
                plane[y0 * w + x0] += hy * hx * v;
                plane[y0 * w + x1] += hy * lx * v;
                plane[y1 * w + x0] += ly * hx * v;
                plane[y1 * w + x1] += ly * lx * v;
            }
        }
    }
    gx
}

/// Result shape of broadcasting `a` against `b` (equal rank, extents equal or 1).
pub fn broadcast_shape(op: &'static str, a: &[usize], b: &[usize]) -> Result<Vec<usize>> {
    if a.len() != b.len() {
        return Err(Error::dim(op, "rank", format!("{a:?} vs {b:?}")));
    }
    a.iter()
        .zip(b)
        .enumerate()
        .map(|(i, (&x, &y))| match (x, y) {
            _ if x == y => Ok(x),
            (1, y) => Ok(y),
            (x, 1) => Ok(x),
            _ => Err(Error::dim(
                op,
                axis_name(a.len(), i),
                format!("{a:?} vs {b:?}"),
            )),
        })
        .collect()
}

fn axis_name(rank: usize, i: usize) -> &'static str {
    if rank == 4 {
        ["batch", "channel", "height", "width"][i]
    } else {
        "axis"
    }
}

fn strides_for(shape: &[usize], out: &[usize]) -> Vec<usize> {
    let mut strides = vec![0; shape.len()];
    let mut acc = 1;
    for i in (0..shape.len()).rev() {
        strides[i] = if shape[i] == 1 && out[i] != 1 { 0 } else { acc };
        acc *= shape[i];
    }
    strides
}

/// Visits every element of `out_shape` with the matching flat offsets into
/// two broadcast operands.
fn for_each_broadcast(
    out_shape: &[usize],
    sa: &[usize],
    sb: &[usize],
    mut f: impl FnMut(usize, usize, usize),
) {
    let rank = out_shape.len();
    let last = out_shape[rank - 1];
    let (la, lb) = (sa[rank - 1], sb[rank - 1]);
    let outer: usize = out_shape[..rank - 1].iter().product();
    let mut idx = vec![0usize; rank - 1];
    let mut o = 0;
    for _ in 0..outer {
        let ba: usize = idx.iter().zip(sa).map(|(i, s)| i * s).sum();
        let bb: usize = idx.iter().zip(sb).map(|(i, s)| i * s).sum();
        for j in 0..last {
            f(o, ba + j * la, bb + j * lb);
            o += 1;
        }
        for d in (0..rank - 1).rev() {
            idx[d] += 1;
            if idx[d] < out_shape[d] {
                break;
            }
            idx[d] = 0;
        }
    }
}

/// Elementwise binary op with singleton broadcasting.
pub fn broadcast_binary<T: Scalar>(
    op: &'static str,
    a: &Tensor<T>,
    b: &Tensor<T>,
    f: impl Fn(T, T) -> T,
) -> Result<Tensor<T>> {
    let shape = broadcast_shape(op, a.shape(), b.shape())?;
    if a.shape() == b.shape() {
        let data = a
            .data()
            .iter()
            .zip(b.data())
            .map(|(&x, &y)| f(x, y))
            .collect();
        return Ok(Tensor::from_parts(shape, data));
    }
    let (sa, sb) = (
        strides_for(a.shape(), &shape),
        strides_for(b.shape(), &shape),
    );
    let mut out = vec![T::zero(); shape.iter().product()];
    let (ad, bd) = (a.data(), b.data());
    for_each_broadcast(&shape, &sa, &sb, |o, i, j| out[o] = f(ad[i], bd[j]));
    Ok(Tensor::from_parts(shape, out))
}

/// Sums `g` over the axes where `shape` is a singleton.
pub fn reduce_to<T: Scalar>(g: &Tensor<T>, shape: &[usize]) -> Tensor<T> {
    if g.shape() == shape {
        return g.clone();
    }
    let s = strides_for(shape, g.shape());
    let mut out = Tensor::zeros(shape);
    let od = out.data_mut();
    let gd = g.data();
    let zeros = vec![0; shape.len()];
    for_each_broadcast(g.shape(), &s, &zeros, |o, i, _| od[i] += gd[o]);
    out
}

/// Gradient of `a ⊙ b` with respect to `a`: reduce(g ⊙ b) to a's shape.
pub fn mul_backward<T: Scalar>(g: &Tensor<T>, other: &Tensor<T>, shape: &[usize]) -> Tensor<T> {
    let prod = broadcast_binary("mul", g, other, |x, y| x * y).expect("shapes checked in forward");
    reduce_to(&prod, shape)
}

pub fn broadcast_to<T: Scalar>(x: &Tensor<T>, shape: &[usize]) -> Result<Tensor<T>> {
    let target = broadcast_shape("broadcast_to", x.shape(), shape)?;
    if target != shape {
        return Err(Error::dim(
            "broadcast_to",
            "shape",
            format!("{:?} cannot expand to {shape:?}", x.shape()),
        ));
    }
    let ones = Tensor::full(shape, T::one());
    broadcast_binary("broadcast_to", x, &ones, |v, _| v)
}

/// Concatenates along `axis`; all other extents must agree.
pub fn concat<T: Scalar>(xs: &[&Tensor<T>], axis: usize) -> Result<Tensor<T>> {
    let first = xs
        .first()
        .ok_or_else(|| Error::Contract("concat of zero tensors".into()))?;
    let rank = first.shape().len();
    if axis >= rank {
        return Err(Error::dim(
            "concat",
            "axis",
            format!("axis {axis} >= rank {rank}"),
        ));
    }
    for x in xs {
        if x.shape().len() != rank
            || x.shape()
                .iter()
                .zip(first.shape())
                .enumerate()
                .any(|(i, (a, b))| i != axis && a != b)
        {
            return Err(Error::dim(
                "concat",
                axis_name(rank, axis),
                format!("{:?} vs {:?}", x.shape(), first.shape()),
            ));
        }
    }
    let outer: usize = first.shape()[..axis].iter().product();
    let inner: usize = first.shape()[axis + 1..].iter().product();
    let total: usize = xs.iter().map(|x| x.shape()[axis]).sum();
    let mut out = Vec::with_capacity(outer * total * inner);
    for o in 0..outer {
        for x in xs {
            let block = x.shape()[axis] * inner;
            out.extend_from_slice(&x.data()[o * block..(o + 1) * block]);
        }
    }
    let mut shape = first.shape().to_vec();
    shape[axis] = total;
    Ok(Tensor::from_parts(shape, out))
}

/// Contiguous sub-range `[start, start+len)` along `axis`.
pub fn slice<T: Scalar>(x: &Tensor<T>, axis: usize, start: usize, len: usize) -> Result<Tensor<T>> {
    let rank = x.shape().len();
    if axis >= rank {
        return Err(Error::dim(
            "slice",
            "axis",
            format!("axis {axis} >= rank {rank}"),
        ));
    }
    let extent = x.shape()[axis];
    if len == 0 || start + len > extent {
        return Err(Error::dim(
            "slice",
            axis_name(rank, axis),
            format!("range {start}..{} outside extent {extent}", start + len),
        ));
    }
    let outer: usize = x.shape()[..axis].iter().product();
    let inner: usize = x.shape()[axis + 1..].iter().product();
    let mut out = Vec::with_capacity(outer * len * inner);
    for o in 0..outer {
        let base = (o * extent + start) * inner;
        out.extend_from_slice(&x.data()[base..base + len * inner]);
    }
    let mut shape = x.shape().to_vec();
    shape[axis] = len;
    Ok(Tensor::from_parts(shape, out))
}

/// Adds `g` into the `[start, start+len)` range of a zero tensor of `shape`.
pub fn slice_backward<T: Scalar>(
    shape: &[usize],
    axis: usize,
    start: usize,
    g: &Tensor<T>,
) -> Tensor<T> {
    let extent = shape[axis];
    let len = g.shape()[axis];
    let outer: usize = shape[..axis].iter().product();
    let inner: usize = shape[axis + 1..].iter().product();
    let mut gx = Tensor::zeros(shape);
    let gd = gx.data_mut();
    for o in 0..outer {
        let base = (o * extent + start) * inner;
        gd[base..base + len * inner]
            .copy_from_slice(&g.data()[o * len * inner..(o + 1) * len * inner]);
    }
    gx
}

/// Saved statistics of a batch-norm forward pass.
#[derive(Clone, Debug)]
pub struct BatchNormCache<T> {
    pub xhat: Tensor<T>,
    pub inv_std: Vec<T>,
    pub batch_stats: bool,
}

/// Per-channel batch normalization of a rank-4 tensor.
///
/// With `running = None` the batch statistics are used and returned as
/// (mean, unbiased variance) for the caller to fold into running buffers.
pub fn batchnorm2d<T: Scalar>(
    x: &Tensor<T>,
    gamma: &Tensor<T>,
    beta: &Tensor<T>,
    running: Option<(&[T], &[T])>,
    eps: f64,
) -> Result<(Tensor<T>, BatchNormCache<T>, Option<(Vec<T>, Vec<T>)>)> {
    let (n, c, h, w) = x.dims4()?;
    if gamma.shape() != [c] || beta.shape() != [c] {
        return Err(Error::dim(
            "batchnorm2d",
            "channel",
            format!("affine shape {:?} for {c} channels", gamma.shape()),
        ));
    }
    let hw = h * w;
    let count = n * hw;
    let xd = x.data();
    let (mean, var, batch) = match running {
        Some((m, v)) => (m.to_vec(), v.to_vec(), None),
        None => {
            let mut mean = vec![T::zero(); c];
            let mut var = vec![T::zero(); c];
            for ch in 0..c {
                let mut s = 0.0f64;
                for b in 0..n {
                    s += xd[(b * c + ch) * hw..][..hw]
                        .iter()
                        .map(|v| v.as_f64())
                        .sum::<f64>();
                }
                let m = s / count as f64;
                let mut q = 0.0f64;
                for b in 0..n {
                    q += xd[(b * c + ch) * hw..][..hw]
                        .iter()
                        .map(|v| (v.as_f64() - m).powi(2))
                        .sum::<f64>();
                }
                mean[ch] = T::c(m);
                var[ch] = T::c(q / count as f64);
            }
            let unbiased = var
                .iter()
                .map(|&v| {
                    if count > 1 {
                        v * T::c(count as f64 / (count - 1) as f64)
                    } else {
                        v
                    }
                })
                .collect();
            (mean.clone(), var, Some((mean, unbiased)))
        }
    };
    let inv_std: Vec<T> = var
        .iter()
        .map(|&v| T::one() / (v + T::c(eps)).sqrt())
        .collect();
    let mut xhat = vec![T::zero(); x.len()];
    let mut out = vec![T::zero(); x.len()];
    for b in 0..n {
        for ch in 0..c {
            let off = (b * c + ch) * hw;
            let (m, s, g, bt) = (mean[ch], inv_std[ch], gamma.data()[ch], beta.data()[ch]);
            for i in off..off + hw {
                xhat[i] = (xd[i] - m) * s;
                out[i] = g * xhat[i] + bt;
            }
        }
    }
    let cache = BatchNormCache {
        xhat: Tensor::from_parts(x.shape().to_vec(), xhat),
        inv_std,
        batch_stats: batch.is_some(),
    };
    Ok((Tensor::from_parts(x.shape().to_vec(), out), cache, batch))
}

/// Returns (dx, dgamma, dbeta).
pub fn batchnorm2d_backward<T: Scalar>(
    cache: &BatchNormCache<T>,
    gamma: &Tensor<T>,
    g: &Tensor<T>,
) -> (Tensor<T>, Tensor<T>, Tensor<T>) {
    let shape = g.shape();
    let (n, c, hw) = (shape[0], shape[1], shape[2] * shape[3]);
    let count = T::c((n * hw) as f64);
    let (gd, xh) = (g.data(), cache.xhat.data());
    let mut dgamma = vec![T::zero(); c];
    let mut dbeta = vec![T::zero(); c];
    for b in 0..n {
        for ch in 0..c {
            let off = (b * c + ch) * hw;
            for i in off..off + hw {
                dbeta[ch] += gd[i];
                dgamma[ch] += gd[i] * xh[i];
            }
        }
    }
    let mut dx = vec![T::zero(); g.len()];
    for b in 0..n {
        for ch in 0..c {
            let off = (b * c + ch) * hw;
            let scale = gamma.data()[ch] * cache.inv_std[ch];
            for i in off..off + hw {
                dx[i] = if cache.batch_stats {
                    scale * (gd[i] - (dbeta[ch] + xh[i] * dgamma[ch]) / count)
                } else {
                    scale * gd[i]
                };
            }
        }
    }
    (
        Tensor::from_parts(shape.to_vec(), dx),
        Tensor::from_parts(vec![c], dgamma),
        Tensor::from_parts(vec![c], dbeta),
    )
}

/// Unnormalized 2×2 Haar analysis: (N, C, H, W) -> (N, 4C, H/2, W/2) with
/// channel blocks [LL | LH | HL | HH], each multiplied by `scale`.
pub fn haar_analysis<T: Scalar>(x: &Tensor<T>, scale: T) -> Result<Tensor<T>> {
    let (n, c, h, w) = x.dims4()?;
    if h % 2 != 0 {
        return Err(Error::dim("hdwt", "height", format!("extent {h} is odd")));
    }
    if w % 2 != 0 {
        return Err(Error::dim("hdwt", "width", format!("extent {w} is odd")));
    }
    let (oh, ow) = (h / 2, w / 2);
    let q = oh * ow;
    let xd = x.data();
    let mut out = vec![T::zero(); n * 4 * c * q];
    for b in 0..n {
        for ch in 0..c {
            let src = &xd[(b * c + ch) * h * w..][..h * w];
            let band = |k: usize| ((b * 4 + k) * c + ch) * q;
            let (ll, lh, hl, hh) = (band(0), band(1), band(2), band(3));
            for i in 0..oh {
                for j in 0..ow {
                    let p00 = src[2 * i * w + 2 * j];
                    let p01 = src[2 * i * w + 2 * j + 1];
                    let p10 = src[(2 * i + 1) * w + 2 * j];
                    let p11 = src[(2 * i + 1) * w + 2 * j + 1];
                    let o = i * ow + j;
                    out[ll + o] = scale * (p00 + p01 + p10 + p11);
                    out[lh + o] = scale * ((p10 + p11) - (p00 + p01));
                    out[hl + o] = scale * ((p01 + p11) - (p00 + p10));
                    out[hh + o] = scale * ((p00 + p11) - (p01 + p10));
                }
            }
        }
    }
    Ok(Tensor::from_parts(vec![n, 4 * c, oh, ow], out))
}

/// Transpose of [`haar_analysis`] (times `scale`): (N, 4C, H, W) -> (N, C, 2H, 2W).
/// With `scale = 1/4` this is the exact inverse of the unnormalized analysis.
pub fn haar_synthesis<T: Scalar>(x: &Tensor<T>, scale: T) -> Result<Tensor<T>> {
    let (n, c4, h, w) = x.dims4()?;
    if c4 % 4 != 0 {
        return Err(Error::dim(
            "ihdwt",
            "channel",
            format!("{c4} channels is not divisible by 4"),
        ));
    }
    let c = c4 / 4;
    let (oh, ow) = (2 * h, 2 * w);
    let q = h * w;
    let xd = x.data();
    let mut out = vec![T::zero(); n * c * oh * ow];
    for b in 0..n {
        for ch in 0..c {
            let band = |k: usize| &xd[((b * 4 + k) * c + ch) * q..][..q];
            let (ll, lh, hl, hh) = (band(0), band(1), band(2), band(3));
            let dst = &mut out[(b * c + ch) * oh * ow..][..oh * ow];
            for i in 0..h {
                for j in 0..w {
                    let o = i * w + j;
                    let (a, v, hz, d) = (ll[o], lh[o], hl[o], hh[o]);
                    dst[2 * i * ow + 2 * j] = scale * (a - v - hz + d);
                    dst[2 * i * ow + 2 * j + 1] = scale * (a - v + hz - d);
                    dst[(2 * i + 1) * ow + 2 * j] = scale * (a + v - hz - d);
                    dst[(2 * i + 1) * ow + 2 * j + 1] = scale * (a + v + hz + d);
                }
            }
        }
    }
    Ok(Tensor::from_parts(vec![n, c, oh, ow], out))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn bilinear_taps_clamp_at_edges() {
        let taps = bilinear_taps(2);
        assert_eq!(taps[0], (0, 1, 0.0));
        assert_eq!(taps[1], (0, 1, 0.25));
        assert_eq!(taps[2], (0, 1, 0.75));
        assert_eq!(taps[3], (1, 1, 0.0));
    }

    #[test]
    fn broadcast_error_names_axis() {
        let err = broadcast_shape("mul", &[1, 2, 3, 4], &[1, 3, 3, 4]).unwrap_err();
        assert!(err.to_string().contains("channel"), "{err}");
    }

    #[test]
    fn conv_channel_mismatch_names_axis() {
        let x = Tensor::<f64>::zeros(&[1, 2, 4, 4]);
        let w = Tensor::<f64>::zeros(&[1, 3, 3, 3]);
        let err = conv2d(&x, &w, None, 1, 1).unwrap_err();
        assert!(err.to_string().contains("channel"), "{err}");
    }

    #[test]
    fn pool_rejects_untiled_extent() {
        let x = Tensor::<f32>::zeros(&[1, 1, 5, 4]);
        let err = maxpool2d(&x, 2, 2).unwrap_err();
        assert!(err.to_string().contains("height"), "{err}");
    }
}
