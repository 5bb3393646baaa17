//! Cross-correlation convolutions (no kernel flip).
//!
//! `conv1d` is `conv2d` on a height-1 view, so both share one kernel and one
//! backward pass.

use alloc::format;
use alloc::vec;

use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

/// Geometry of a 2-D convolution, per axis `[height, width]`.
///
/// With `depthwise` set the weight is `[C, 1, Kh, Kw]` and output channel
/// `c` reads only input channel `c`.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Conv2dParams {
    pub stride: [usize; 2],
    pub padding: [usize; 2],
    pub dilation: [usize; 2],
    pub depthwise: bool,
}

impl Default for Conv2dParams {
    fn default() -> Self {
        Self { stride: [1, 1], padding: [0, 0], dilation: [1, 1], depthwise: false }
    }
}

impl Conv2dParams {
    /// Stride-`s` convolution padded so a stride-1 pass keeps the extent.
    pub fn same(kernel: usize, stride: usize, dilation: usize) -> Self {
        let pad = dilation * (kernel - 1) / 2;
        Self { stride: [stride; 2], padding: [pad; 2], dilation: [dilation; 2], depthwise: false }
    }
}

/// `floor((n + 2p - d(k-1) - 1) / s) + 1`, or `None` when the dilated
/// kernel does not fit in the padded input.
pub fn conv_out_extent(n: usize, k: usize, s: usize, p: usize, d: usize) -> Option<usize> {
    let span = d * (k - 1) + 1;
    if s == 0 || span > n + 2 * p {
        return None;
    }
    Some((n + 2 * p - span) / s + 1)
}

struct Geometry {
    b: usize,
    ci: usize,
    h: usize,
    w: usize,
    co: usize,
    kh: usize,
    kw: usize,
    ho: usize,
    wo: usize,
    wc: usize,
}

fn geometry<T: Scalar>(x: &Tensor<T>, w: &Tensor<T>, p: &Conv2dParams) -> Result<Geometry> {
    if x.rank() != 4 || w.rank() != 4 {
        return Err(Error::shape("conv2d", "expected x [B,C,H,W] and w [O,I,Kh,Kw]", x.shape(), w.shape()));
    }
    let (b, ci, h, wd) = (x.shape()[0], x.shape()[1], x.shape()[2], x.shape()[3]);
    let (co, wc, kh, kw) = (w.shape()[0], w.shape()[1], w.shape()[2], w.shape()[3]);
    if p.depthwise {
        if co != ci || wc != 1 {
            return Err(Error::config(format!(
                "depthwise convolution needs weight [C, 1, k, k] with C == input channels; got weight {:?} for {} channels",
                w.shape(),
                ci
            )));
        }
    } else if wc != ci {
        return Err(Error::shape("conv2d", format!("weight expects {wc} input channels, input has {ci}"), x.shape(), w.shape()));
    }
    let ho = conv_out_extent(h, kh, p.stride[0], p.padding[0], p.dilation[0]);
    let wo = conv_out_extent(wd, kw, p.stride[1], p.padding[1], p.dilation[1]);
    match (ho, wo) {
        (Some(ho), Some(wo)) => Ok(Geometry { b, ci, h, w: wd, co, kh, kw, ho, wo, wc }),
        _ => Err(Error::shape("conv2d", "kernel larger than padded input", x.shape(), w.shape())),
    }
}

/// Valid output columns `[lo, hi)` for kernel column offset `off` (may be negative).
#[inline]
fn valid_range(off: isize, stride: usize, input: usize, out: usize) -> (usize, usize) {
    let s = stride as isize;
    let lo = if off >= 0 { 0 } else { ((-off) + s - 1) / s };
    let last = input as isize - 1 - off;
    let hi = if last < 0 { 0 } else { (last / s + 1).min(out as isize) };
    (lo as usize, (hi.max(lo)) as usize)
}

/// Iterates every (batch, out channel, in channel, ky, kx, oy) row pairing and
/// hands the caller the aligned output/input row ranges.
#[inline]
fn for_each_row(g: &Geometry, p: &Conv2dParams, mut f: impl FnMut(usize, usize, usize, usize, usize, usize, isize, (usize, usize))) {
    let [sh, sw] = p.stride;
    let [ph, pw] = p.padding;
    let [dh, dw] = p.dilation;
    for b in 0..g.b {
        for oc in 0..g.co {
            let ics = if p.depthwise { oc..oc + 1 } else { 0..g.ci };
            for ic in ics {
                let wcix = if p.depthwise { 0 } else { ic };
                for ky in 0..g.kh {
                    for kx in 0..g.kw {
                        let widx = ((oc * g.wc + wcix) * g.kh + ky) * g.kw + kx;
                        let off_x = (kx * dw) as isize - pw as isize;
                        let range = valid_range(off_x, sw, g.w, g.wo);
                        if range.0 >= range.1 {
                            continue;
                        }
                        for oy in 0..g.ho {
                            let iy = (oy * sh + ky * dh) as isize - ph as isize;
                            if iy < 0 || iy >= g.h as isize {
                                continue;
                            }
                            f(b, oc, ic, widx, oy, iy as usize, off_x, range);
                        }
                    }
                }
            }
        }
    }
}

pub fn conv2d<T: Scalar>(x: &Tensor<T>, w: &Tensor<T>, bias: Option<&Tensor<T>>, p: &Conv2dParams) -> Result<Tensor<T>> {
    let g = geometry(x, w, p)?;
    if let Some(bias) = bias {
        if bias.shape() != [g.co] {
            return Err(Error::shape("conv2d", "bias must be [C_out]", bias.shape(), &[g.co]));
        }
    }
    let plane = g.ho * g.wo;
    let mut out = vec![T::zero(); g.b * g.co * plane];
    if let Some(bias) = bias {
        for (i, chunk) in out.chunks_mut(plane).enumerate() {
            chunk.fill(bias.data()[i % g.co]);
        }
    }
    let (xd, wd) = (x.data(), w.data());
    let sw = p.stride[1];
    for_each_row(&g, p, |b, oc, ic, widx, oy, iy, off_x, (lo, hi)| {
        let wv = wd[widx];
        let orow = &mut out[(b * g.co + oc) * plane + oy * g.wo..][..g.wo];
        let irow = &xd[((b * g.ci + ic) * g.h + iy) * g.w..][..g.w];
        if sw == 1 {
            let start = (lo as isize + off_x) as usize;
            for (o, &i) in orow[lo..hi].iter_mut().zip(&irow[start..start + (hi - lo)]) {
                *o += wv * i;
            }
        } else {
            for ox in lo..hi {
                orow[ox] += wv * irow[(ox as isize * sw as isize + off_x) as usize];
            }
        }
    });
    Tensor::new(&[g.b, g.co, g.ho, g.wo], out)
}

/// Returns `(d_input, d_weight, d_bias)`; the bias gradient is always
/// computed and callers without a bias ignore it.
pub fn conv2d_backward<T: Scalar>(
    x: &Tensor<T>,
    w: &Tensor<T>,
    grad: &Tensor<T>,
    p: &Conv2dParams,
) -> Result<(Tensor<T>, Tensor<T>, Tensor<T>)> {
    let g = geometry(x, w, p)?;
    if grad.shape() != [g.b, g.co, g.ho, g.wo] {
        return Err(Error::shape("conv2d_backward", "gradient shape", grad.shape(), &[g.b, g.co, g.ho, g.wo]));
    }
    let plane = g.ho * g.wo;
    let mut gx = Tensor::zeros(x.shape());
    let mut gw = Tensor::zeros(w.shape());
    let mut gb = Tensor::zeros(&[g.co]);
    for (i, chunk) in grad.data().chunks(plane).enumerate() {
        gb.data_mut()[i % g.co] += chunk.iter().copied().sum();
    }
    let (xd, wd, gd) = (x.data(), w.data(), grad.data());
    let sw = p.stride[1];
    {
        let gxd = gx.data_mut();
        let gwd = gw.data_mut();
        for_each_row(&g, p, |b, oc, ic, widx, oy, iy, off_x, (lo, hi)| {
            let wv = wd[widx];
            let grow = &gd[(b * g.co + oc) * plane + oy * g.wo..][..g.wo];
            let xbase = ((b * g.ci + ic) * g.h + iy) * g.w;
            let irow = &xd[xbase..xbase + g.w];
            let gxrow = &mut gxd[xbase..xbase + g.w];
            let mut acc = T::zero();
            if sw == 1 {
                let start = (lo as isize + off_x) as usize;
                let n = hi - lo;
                for ((gv, gxv), &iv) in grow[lo..hi].iter().zip(&mut gxrow[start..start + n]).zip(&irow[start..start + n]) {
                    *gxv += wv * *gv;
                    acc += *gv * iv;
                }
            } else {
                for (ox, &gv) in grow.iter().enumerate().take(hi).skip(lo) {
                    let ix = (ox as isize * sw as isize + off_x) as usize;
                    gxrow[ix] += wv * gv;
                    acc += gv * irow[ix];
                }
            }
            gwd[widx] += acc;
        });
    }
    Ok((gx, gw, gb))
}

/// 1-D convolution `[B, C_in, L] * [C_out, C_in, K] -> [B, C_out, L']`.
pub fn conv1d<T: Scalar>(
    x: &Tensor<T>,
    w: &Tensor<T>,
    bias: Option<&Tensor<T>>,
    stride: usize,
    padding: usize,
    dilation: usize,
) -> Result<Tensor<T>> {
    if x.rank() != 3 || w.rank() != 3 {
        return Err(Error::shape("conv1d", "expected x [B,C,L] and w [O,I,K]", x.shape(), w.shape()));
    }
    let (x4, w4) = lift_1d(x, w)?;
    let p = params_1d(stride, padding, dilation);
    let y = conv2d(&x4, &w4, bias, &p).map_err(|e| rename(e, x, w))?;
    let s = y.shape();
    y.reshape(&[s[0], s[1], s[3]])
}

pub(crate) fn lift_1d<T: Scalar>(x: &Tensor<T>, w: &Tensor<T>) -> Result<(Tensor<T>, Tensor<T>)> {
    let xs = x.shape();
    let ws = w.shape();
    Ok((x.reshape(&[xs[0], xs[1], 1, xs[2]])?, w.reshape(&[ws[0], ws[1], 1, ws[2]])?))
}

pub(crate) fn params_1d(stride: usize, padding: usize, dilation: usize) -> Conv2dParams {
    Conv2dParams { stride: [1, stride], padding: [0, padding], dilation: [1, dilation], depthwise: false }
}

fn rename<T: Scalar>(e: Error, x: &Tensor<T>, w: &Tensor<T>) -> Error {
    match e {
        Error::Shape { detail, .. } => Error::shape("conv1d", detail, x.shape(), w.shape()),
        other => other,
    }
}
