//! Differentiable bilinear image sampling.

use ndarray::{ArrayD, IxDyn};

use super::{Tape, Var};
use crate::Scalar;

/// Guard band (pixels) at the image border: coordinates this close outside
/// still count as valid and are clamped onto the edge. Absorbs the rounding
/// that projection arithmetic introduces at exact-boundary samples.
pub const EDGE_EPS: f64 = 1e-6;

/// Gathered interpolation data for one output pixel.
struct Tap {
    valid: bool,
    x0: usize,
    y0: usize,
    /// Fractional offsets into the `[x0, x0+1] x [y0, y0+1]` cell.
    fx: f64,
    fy: f64,
}

fn tap(u: f64, v: f64, h: usize, w: usize) -> Tap {
    let valid = u >= -EDGE_EPS
        && u <= (w - 1) as f64 + EDGE_EPS
        && v >= -EDGE_EPS
        && v <= (h - 1) as f64 + EDGE_EPS;
    if !valid {
        return Tap { valid, x0: 0, y0: 0, fx: 0.0, fy: 0.0 };
    }
    let u = u.clamp(0.0, (w - 1) as f64);
    let v = v.clamp(0.0, (h - 1) as f64);
    // Clamp the cell so u == W-1 lands in the last cell with fx == 1.
    let x0 = (u.floor() as usize).min(w - 2);
    let y0 = (v.floor() as usize).min(h - 2);
    Tap { valid, x0, y0, fx: u - x0 as f64, fy: v - y0 as f64 }
}

fn gather_taps<T: Scalar>(uv: &ArrayD<T>, vv: &ArrayD<T>, h: usize, w: usize) -> Vec<Tap> {
    uv.iter()
        .zip(vv.iter())
        .map(|(&uu, &vv)| tap(uu.to_f64(), vv.to_f64(), h, w))
        .collect()
}

impl<T: Scalar> Tape<T> {
    /// Samples `img` (`[C, H, W]`) at continuous pixel coordinates
    /// `u`, `v` (both `[Ho, Wo]`, in units of source pixels).
    ///
    /// Each output pixel is the convex bilinear combination of its four
    /// neighbours: the weights are non-negative and sum to one. Coordinates
    /// outside `[0, W-1] x [0, H-1]` produce zero output and `false` in the
    /// returned mask; gradients there are zero. Gradients flow into both the
    /// image and the coordinates.
    pub fn bilinear_sample(&mut self, img: Var, u: Var, v: Var) -> (Var, ArrayD<bool>) {
        let is = self.shape_vec(img);
        let us = self.shape_vec(u);
        assert_eq!(is.len(), 3, "bilinear_sample image must be [C, H, W]");
        assert_eq!(us.len(), 2, "bilinear_sample coordinates must be [Ho, Wo]");
        assert_eq!(us, self.shape_vec(v), "u and v must have equal shapes");
        let (c_n, h, w) = (is[0], is[1], is[2]);
        assert!(h >= 2 && w >= 2, "bilinear_sample needs at least a 2x2 image");
        let (ho, wo) = (us[0], us[1]);
        let n = ho * wo;

        let taps = gather_taps(&self.vals[u.0], &self.vals[v.0], h, w);

        let mut mask = ArrayD::from_elem(IxDyn(&[ho, wo]), false);
        {
            let m = mask.as_slice_mut().expect("standard layout");
            for (i, t) in taps.iter().enumerate() {
                m[i] = t.valid;
            }
        }

        let img_std = self.vals[img.0].as_standard_layout();
        let id = img_std.as_slice().expect("standard layout");
        let mut out = vec![T::zero(); c_n * n];
        for (i, t) in taps.iter().enumerate() {
            if !t.valid {
                continue;
            }
            let (fx, fy) = (T::c(t.fx), T::c(t.fy));
            let one = T::one();
            let w00 = (one - fx) * (one - fy);
            let w10 = fx * (one - fy);
            let w01 = (one - fx) * fy;
            let w11 = fx * fy;
            let base = t.y0 * w + t.x0;
            for c in 0..c_n {
                let p = c * h * w + base;
                out[c * n + i] = w00 * id[p] + w10 * id[p + 1] + w01 * id[p + w] + w11 * id[p + w + 1];
            }
        }
        drop(img_std);
        let val = ArrayD::from_shape_vec(IxDyn(&[c_n, ho, wo]), out)
            .expect("sample buffer matches its shape");

        let out_var = self.push_op(val, &[img, u, v], move |ctx| {
            let taps = gather_taps(ctx.val(u), ctx.val(v), h, w);
            let go = ctx.out_grad().as_standard_layout();
            let gout = go.as_slice().expect("standard layout");
            let img_std = ctx.val(img).as_standard_layout();
            let id = img_std.as_slice().expect("standard layout");

            let mut gimg = vec![T::zero(); c_n * h * w];
            let mut gu = vec![T::zero(); n];
            let mut gv = vec![T::zero(); n];
            let one = T::one();
            for (i, t) in taps.iter().enumerate() {
                if !t.valid {
                    continue;
                }
                let (fx, fy) = (T::c(t.fx), T::c(t.fy));
                let w00 = (one - fx) * (one - fy);
                let w10 = fx * (one - fy);
                let w01 = (one - fx) * fy;
                let w11 = fx * fy;
                let base = t.y0 * w + t.x0;
                let (mut du, mut dv) = (T::zero(), T::zero());
                for c in 0..c_n {
                    let p = c * h * w + base;
                    let g = gout[c * n + i];
                    gimg[p] = gimg[p] + g * w00;
                    gimg[p + 1] = gimg[p + 1] + g * w10;
                    gimg[p + w] = gimg[p + w] + g * w01;
                    gimg[p + w + 1] = gimg[p + w + 1] + g * w11;
                    let (i00, i10, i01, i11) = (id[p], id[p + 1], id[p + w], id[p + w + 1]);
                    du = du + g * ((one - fy) * (i10 - i00) + fy * (i11 - i01));
                    dv = dv + g * ((one - fx) * (i01 - i00) + fx * (i11 - i10));
                }
                gu[i] = du;
                gv[i] = dv;
            }
            drop(img_std);
            ctx.accum(img, ArrayD::from_shape_vec(IxDyn(&[c_n, h, w]), gimg).expect("shape"));
            ctx.accum(u, ArrayD::from_shape_vec(IxDyn(&[ho, wo]), gu).expect("shape"));
            ctx.accum(v, ArrayD::from_shape_vec(IxDyn(&[ho, wo]), gv).expect("shape"));
        });
        (out_var, mask)
    }
}
