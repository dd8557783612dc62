//! 2-D convolution and fractionally strided (transposed) convolution.
//!
//! Layouts follow the torch convention: activations `[C, H, W]`, forward
//! conv weights `[Cout, Cin, kh, kw]`, transposed conv weights
//! `[Cin, Cout, kh, kw]`. Padding is explicit and may be asymmetric
//! (`top, bottom, left, right`), which lets callers implement both
//! ceil-mode and floor-mode "same" padding exactly.
//!
//! The transposed convolution is the adjoint of the forward one, so both
//! directions of both ops are served by three scalar kernels below
//! (`conv_fwd`, `conv_dx`, `conv_dw`) with operand roles swapped.

use ndarray::{ArrayD, IxDyn};

use super::{Tape, Var};
use crate::Scalar;

/// Output extent of a strided convolution along one axis.
pub fn conv_out_dim(in_dim: usize, k: usize, stride: usize, pad_total: usize) -> usize {
    assert!(in_dim + pad_total >= k, "kernel larger than padded input");
    (in_dim + pad_total - k) / stride + 1
}

/// Padding (before, after) that makes `out = ceil(in / stride)`, with the
/// odd pixel going after (bottom / right).
pub fn same_pad_ceil(in_dim: usize, k: usize, stride: usize) -> (usize, usize) {
    let out = in_dim.div_ceil(stride);
    let total = ((out - 1) * stride + k).saturating_sub(in_dim);
    (total / 2, total - total / 2)
}

/// Padding (before, after) that makes `out = floor(in / stride)`.
pub fn same_pad_floor(in_dim: usize, k: usize, stride: usize) -> (usize, usize) {
    let out = in_dim / stride;
    assert!(out > 0, "floor-mode same padding needs in_dim >= stride");
    let total = ((out - 1) * stride + k).saturating_sub(in_dim);
    (total / 2, total - total / 2)
}

/// Range `[lo, hi)` of output indices with `0 <= o*stride + off - pad < in_dim`.
fn valid_range(pad: usize, off: usize, stride: usize, in_dim: usize, out_dim: usize) -> (usize, usize) {
    let s = stride as isize;
    let lo_num = pad as isize - off as isize;
    let lo = if lo_num <= 0 { 0 } else { ((lo_num + s - 1) / s) as usize };
    let hi_num = in_dim as isize - 1 + pad as isize - off as isize;
    if hi_num < 0 {
        return (0, 0);
    }
    let hi = (hi_num / s + 1) as usize;
    (lo.min(out_dim), hi.min(out_dim))
}

#[derive(Clone, Copy)]
struct Geom {
    ci: usize,
    h: usize,
    w: usize,
    co: usize,
    kh: usize,
    kw: usize,
    sh: usize,
    sw: usize,
    pt: usize,
    pl: usize,
    ho: usize,
    wo: usize,
}

/// `out[co,oh,ow] (+)= sum_{ci,r,s} wt[co,ci,r,s] * x[ci, oh*sh+r-pt, ow*sw+s-pl]`,
/// plus optional bias per output channel. Out-of-range taps read zero.
fn conv_fwd<T: Scalar>(g: Geom, x: &[T], wt: &[T], bias: Option<&[T]>, out: &mut [T]) {
    debug_assert_eq!(x.len(), g.ci * g.h * g.w);
    debug_assert_eq!(wt.len(), g.co * g.ci * g.kh * g.kw);
    debug_assert_eq!(out.len(), g.co * g.ho * g.wo);
    for co in 0..g.co {
        let ob = co * g.ho * g.wo;
        if let Some(b) = bias {
            let bv = b[co];
            for o in &mut out[ob..ob + g.ho * g.wo] {
                *o = *o + bv;
            }
        }
        for ci in 0..g.ci {
            let ib = ci * g.h * g.w;
            let wb = (co * g.ci + ci) * g.kh * g.kw;
            for r in 0..g.kh {
                let (oh_lo, oh_hi) = valid_range(g.pt, r, g.sh, g.h, g.ho);
                for s in 0..g.kw {
                    let wv = wt[wb + r * g.kw + s];
                    let (ow_lo, ow_hi) = valid_range(g.pl, s, g.sw, g.w, g.wo);
                    if ow_lo >= ow_hi {
                        continue;
                    }
                    for oh in oh_lo..oh_hi {
                        let irow = ib + (oh * g.sh + r - g.pt) * g.w;
                        let orow = ob + oh * g.wo;
                        if g.sw == 1 {
                            let iw0 = irow + ow_lo + s - g.pl;
                            let xs = &x[iw0..iw0 + (ow_hi - ow_lo)];
                            let os = &mut out[orow + ow_lo..orow + ow_hi];
                            for (o, &xv) in os.iter_mut().zip(xs) {
                                *o = *o + wv * xv;
                            }
                        } else {
                            for ow in ow_lo..ow_hi {
                                let iw = irow + ow * g.sw + s - g.pl;
                                out[orow + ow] = out[orow + ow] + wv * x[iw];
                            }
                        }
                    }
                }
            }
        }
    }
}

/// Adjoint of [`conv_fwd`] with respect to `x`: scatters `gout` through the
/// kernel. `gx` is accumulated into.
fn conv_dx<T: Scalar>(g: Geom, wt: &[T], gout: &[T], gx: &mut [T]) {
    debug_assert_eq!(gx.len(), g.ci * g.h * g.w);
    debug_assert_eq!(gout.len(), g.co * g.ho * g.wo);
    for co in 0..g.co {
        let ob = co * g.ho * g.wo;
        for ci in 0..g.ci {
            let ib = ci * g.h * g.w;
            let wb = (co * g.ci + ci) * g.kh * g.kw;
            for r in 0..g.kh {
                let (oh_lo, oh_hi) = valid_range(g.pt, r, g.sh, g.h, g.ho);
                for s in 0..g.kw {
                    let wv = wt[wb + r * g.kw + s];
                    let (ow_lo, ow_hi) = valid_range(g.pl, s, g.sw, g.w, g.wo);
                    if ow_lo >= ow_hi {
                        continue;
                    }
                    for oh in oh_lo..oh_hi {
                        let irow = ib + (oh * g.sh + r - g.pt) * g.w;
                        let orow = ob + oh * g.wo;
                        if g.sw == 1 {
                            let iw0 = irow + ow_lo + s - g.pl;
                            let xs = &mut gx[iw0..iw0 + (ow_hi - ow_lo)];
                            let os = &gout[orow + ow_lo..orow + ow_hi];
                            for (xv, &o) in xs.iter_mut().zip(os) {
                                *xv = *xv + wv * o;
                            }
                        } else {
                            for ow in ow_lo..ow_hi {
                                let iw = irow + ow * g.sw + s - g.pl;
                                gx[iw] = gx[iw] + wv * gout[orow + ow];
                            }
                        }
                    }
                }
            }
        }
    }
}

/// Adjoint of [`conv_fwd`] with respect to the kernel. `gw` is accumulated
/// into and has the forward layout `[co, ci, kh, kw]`.
fn conv_dw<T: Scalar>(g: Geom, x: &[T], gout: &[T], gw: &mut [T]) {
    debug_assert_eq!(gw.len(), g.co * g.ci * g.kh * g.kw);
    for co in 0..g.co {
        let ob = co * g.ho * g.wo;
        for ci in 0..g.ci {
            let ib = ci * g.h * g.w;
            let wb = (co * g.ci + ci) * g.kh * g.kw;
            for r in 0..g.kh {
                let (oh_lo, oh_hi) = valid_range(g.pt, r, g.sh, g.h, g.ho);
                for s in 0..g.kw {
                    let (ow_lo, ow_hi) = valid_range(g.pl, s, g.sw, g.w, g.wo);
                    if ow_lo >= ow_hi {
                        continue;
                    }
                    let mut acc = T::zero();
                    for oh in oh_lo..oh_hi {
                        let irow = ib + (oh * g.sh + r - g.pt) * g.w;
                        let orow = ob + oh * g.wo;
                        if g.sw == 1 {
                            let iw0 = irow + ow_lo + s - g.pl;
                            let xs = &x[iw0..iw0 + (ow_hi - ow_lo)];
                            let os = &gout[orow + ow_lo..orow + ow_hi];
                            for (&xv, &o) in xs.iter().zip(os) {
                                acc = acc + xv * o;
                            }
                        } else {
                            for ow in ow_lo..ow_hi {
                                let iw = irow + ow * g.sw + s - g.pl;
                                acc = acc + x[iw] * gout[orow + ow];
                            }
                        }
                    }
                    gw[wb + r * g.kw + s] = gw[wb + r * g.kw + s] + acc;
                }
            }
        }
    }
}

fn channel_sums<T: Scalar>(gout: &[T], co: usize, plane: usize) -> Vec<T> {
    (0..co).map(|c| gout[c * plane..(c + 1) * plane].iter().copied().sum()).collect()
}

impl<T: Scalar> Tape<T> {
    /// Strided 2-D convolution.
    ///
    /// `x`: `[Cin, H, W]`, `w`: `[Cout, Cin, kh, kw]`, `b`: `[Cout]`.
    /// `pad` is `(top, bottom, left, right)`. Output is
    /// `[Cout, (H+pt+pb-kh)/sh+1, (W+pl+pr-kw)/sw+1]` with floor division.
    pub fn conv2d(
        &mut self,
        x: Var,
        w: Var,
        b: Option<Var>,
        stride: (usize, usize),
        pad: (usize, usize, usize, usize),
    ) -> Var {
        let xs = self.shape_vec(x);
        let ws = self.shape_vec(w);
        assert_eq!(xs.len(), 3, "conv2d input must be [C, H, W]");
        assert_eq!(ws.len(), 4, "conv2d weight must be [Cout, Cin, kh, kw]");
        assert_eq!(ws[1], xs[0], "conv2d channel mismatch");
        let (pt, pb, pl, pr) = pad;
        let geom = Geom {
            ci: xs[0],
            h: xs[1],
            w: xs[2],
            co: ws[0],
            kh: ws[2],
            kw: ws[3],
            sh: stride.0,
            sw: stride.1,
            pt,
            pl,
            ho: conv_out_dim(xs[1], ws[2], stride.0, pt + pb),
            wo: conv_out_dim(xs[2], ws[3], stride.1, pl + pr),
        };
        if let Some(bv) = b {
            assert_eq!(self.shape(bv), [geom.co], "conv2d bias must be [Cout]");
        }
        let mut out = vec![T::zero(); geom.co * geom.ho * geom.wo];
        {
            let xd = self.vals[x.0].as_standard_layout();
            let wd = self.vals[w.0].as_standard_layout();
            let bd = b.map(|bv| self.vals[bv.0].as_standard_layout());
            conv_fwd(
                geom,
                xd.as_slice().expect("standard layout"),
                wd.as_slice().expect("standard layout"),
                bd.as_ref().map(|c| c.as_slice().expect("standard layout")),
                &mut out,
            );
        }
        let val = ArrayD::from_shape_vec(IxDyn(&[geom.co, geom.ho, geom.wo]), out)
            .expect("conv output buffer matches its shape");
        let parents: Vec<Var> = match b {
            Some(bv) => vec![x, w, bv],
            None => vec![x, w],
        };
        self.push_op(val, &parents, move |ctx| {
            let go = ctx.out_grad().as_standard_layout();
            let gout = go.as_slice().expect("standard layout");
            if ctx.needs[x.0] {
                let wd = ctx.val(w).as_standard_layout();
                let mut gx = vec![T::zero(); geom.ci * geom.h * geom.w];
                conv_dx(geom, wd.as_slice().expect("standard layout"), gout, &mut gx);
                ctx.accum(
                    x,
                    ArrayD::from_shape_vec(IxDyn(&[geom.ci, geom.h, geom.w]), gx).expect("shape"),
                );
            }
            if ctx.needs[w.0] {
                let xd = ctx.val(x).as_standard_layout();
                let mut gw = vec![T::zero(); geom.co * geom.ci * geom.kh * geom.kw];
                conv_dw(geom, xd.as_slice().expect("standard layout"), gout, &mut gw);
                ctx.accum(
                    w,
                    ArrayD::from_shape_vec(IxDyn(&[geom.co, geom.ci, geom.kh, geom.kw]), gw)
                        .expect("shape"),
                );
            }
            if let Some(bv) = b {
                let gb = channel_sums(gout, geom.co, geom.ho * geom.wo);
                ctx.accum(bv, ArrayD::from_shape_vec(IxDyn(&[geom.co]), gb).expect("shape"));
            }
        })
    }

    /// Fractionally strided (transposed) 2-D convolution.
    ///
    /// `x`: `[Cin, H, W]`, `w`: `[Cin, Cout, kh, kw]`, `b`: `[Cout]`.
    /// `pad` is `(top, left)` of the forward conv this op transposes;
    /// `out_hw` picks the exact output extent (resolving the ambiguity a
    /// strided conv's floor division introduces). Writes that fall outside
    /// `out_hw` are dropped.
    pub fn conv_transpose2d(
        &mut self,
        x: Var,
        w: Var,
        b: Option<Var>,
        stride: (usize, usize),
        pad: (usize, usize),
        out_hw: (usize, usize),
    ) -> Var {
        let xs = self.shape_vec(x);
        let ws = self.shape_vec(w);
        assert_eq!(xs.len(), 3, "conv_transpose2d input must be [C, H, W]");
        assert_eq!(ws.len(), 4, "conv_transpose2d weight must be [Cin, Cout, kh, kw]");
        assert_eq!(ws[0], xs[0], "conv_transpose2d channel mismatch");
        let (ho, wo) = out_hw;
        assert!(ho >= 1 && wo >= 1, "conv_transpose2d output must be non-empty");
        assert!(
            ho <= (xs[1] - 1) * stride.0 + ws[2] && wo <= (xs[2] - 1) * stride.1 + ws[3],
            "conv_transpose2d output larger than the kernel can reach"
        );
        // Same geometry as the conv this op is the adjoint of: `x` plays the
        // role of that conv's output, `out_hw` its input.
        let geom = Geom {
            ci: ws[1],
            h: ho,
            w: wo,
            co: xs[0],
            kh: ws[2],
            kw: ws[3],
            sh: stride.0,
            sw: stride.1,
            pt: pad.0,
            pl: pad.1,
            ho: xs[1],
            wo: xs[2],
        };
        if let Some(bv) = b {
            assert_eq!(self.shape(bv), [geom.ci], "conv_transpose2d bias must be [Cout]");
        }
        let mut out = vec![T::zero(); geom.ci * ho * wo];
        {
            let xd = self.vals[x.0].as_standard_layout();
            let wd = self.vals[w.0].as_standard_layout();
            conv_dx(
                geom,
                wd.as_slice().expect("standard layout"),
                xd.as_slice().expect("standard layout"),
                &mut out,
            );
        }
        if let Some(bv) = b {
            let bd = self.vals[bv.0].as_standard_layout();
            let bd = bd.as_slice().expect("standard layout");
            for c in 0..geom.ci {
                let base = c * ho * wo;
                for o in &mut out[base..base + ho * wo] {
                    *o = *o + bd[c];
                }
            }
        }
        let val = ArrayD::from_shape_vec(IxDyn(&[geom.ci, ho, wo]), out)
            .expect("conv output buffer matches its shape");
        let parents: Vec<Var> = match b {
            Some(bv) => vec![x, w, bv],
            None => vec![x, w],
        };
        self.push_op(val, &parents, move |ctx| {
            let go = ctx.out_grad().as_standard_layout();
            let gout = go.as_slice().expect("standard layout");
            if ctx.needs[x.0] {
                let wd = ctx.val(w).as_standard_layout();
                let mut gx = vec![T::zero(); geom.co * geom.ho * geom.wo];
                conv_fwd(geom, gout, wd.as_slice().expect("standard layout"), None, &mut gx);
                ctx.accum(
                    x,
                    ArrayD::from_shape_vec(IxDyn(&[geom.co, geom.ho, geom.wo]), gx).expect("shape"),
                );
            }
            if ctx.needs[w.0] {
                let xd = ctx.val(x).as_standard_layout();
                let mut gw = vec![T::zero(); geom.co * geom.ci * geom.kh * geom.kw];
                conv_dw(geom, gout, xd.as_slice().expect("standard layout"), &mut gw);
                ctx.accum(
                    w,
                    ArrayD::from_shape_vec(IxDyn(&[geom.co, geom.ci, geom.kh, geom.kw]), gw)
                        .expect("shape"),
                );
            }
            if let Some(bv) = b {
                let gb = channel_sums(gout, geom.ci, ho * wo);
                ctx.accum(bv, ArrayD::from_shape_vec(IxDyn(&[geom.ci]), gb).expect("shape"));
            }
        })
    }
}
