//! Tape composites of the geometric ops, for gradient-based training.
//!
//! These mirror the plain functions in the parent module step for step;
//! consistency between the two routes is covered by tests.

use ndarray::Array2;

use super::{CameraIntrinsics, PixelGrid, MIN_SOURCE_DEPTH};
use crate::diff::{Tape, Var};
use crate::Scalar;

/// Upper clamp for source-camera depth; only there to keep the divide
/// finite, far above any depth the pipeline produces.
const MAX_SOURCE_DEPTH: f64 = 1e12;

/// Result of building an inverse warp on a tape.
pub struct Warp {
    /// Warped source image, `[C, H, W]`.
    pub warped: Var,
    /// Source-pixel sample coordinates, `[H, W]` each.
    pub coord_u: Var,
    pub coord_v: Var,
    /// True where the projection is in front of the source camera and the
    /// sample landed inside the source image.
    pub mask: Array2<bool>,
}

/// Rotation-matrix entries as nine `[1]`-shaped tape variables.
struct RotVars {
    r: [[Var; 3]; 3],
}

fn rotation_entries<T: Scalar>(tape: &mut Tape<T>, pose: Var) -> (RotVars, [Var; 3]) {
    let part = |tape: &mut Tape<T>, i: usize| tape.slice_axis(pose, 0, i, 1);
    let tx = part(tape, 0);
    let ty = part(tape, 1);
    let tz = part(tape, 2);
    let rx = part(tape, 3);
    let ry = part(tape, 4);
    let rz = part(tape, 5);
    let (sx, cx) = (tape.sin(rx), tape.cos(rx));
    let (sy, cy) = (tape.sin(ry), tape.cos(ry));
    let (sz, cz) = (tape.sin(rz), tape.cos(rz));
    // Same expansion of Rz·Ry·Rx as pose_to_matrix.
    let czsy = tape.mul(cz, sy);
    let szsy = tape.mul(sz, sy);
    let r00 = tape.mul(cz, cy);
    let a = tape.mul(czsy, sx);
    let b = tape.mul(sz, cx);
    let r01 = tape.sub(a, b);
    let a = tape.mul(czsy, cx);
    let b = tape.mul(sz, sx);
    let r02 = tape.add(a, b);
    let r10 = tape.mul(sz, cy);
    let a = tape.mul(szsy, sx);
    let b = tape.mul(cz, cx);
    let r11 = tape.add(a, b);
    let a = tape.mul(szsy, cx);
    let b = tape.mul(cz, sx);
    let r12 = tape.sub(a, b);
    let r20 = tape.neg(sy);
    let r21 = tape.mul(cy, sx);
    let r22 = tape.mul(cy, cx);
    (RotVars { r: [[r00, r01, r02], [r10, r11, r12], [r20, r21, r22]] }, [tx, ty, tz])
}

/// Source-pixel coordinates of every target pixel under (depth, pose, K),
/// plus the front-of-camera mask. `depth`: `[H, W]`, `pose`: `[6]`.
pub fn build_projection<T: Scalar>(
    tape: &mut Tape<T>,
    depth: Var,
    pose: Var,
    k: &CameraIntrinsics<T>,
) -> (Var, Var, Array2<bool>) {
    let (h, w) = (k.height, k.width);
    assert_eq!(tape.shape(depth), &[h, w], "depth must match intrinsics extent");
    assert_eq!(tape.shape(pose), &[6], "pose must be a 6-vector");
    let grid = PixelGrid::<T>::new(w, h);
    // Normalized ray directions per pixel, constant across training.
    let xg = {
        let a = grid.u.mapv(|u| (u - k.cx) / k.fx).into_dyn();
        tape.constant(a)
    };
    let yg = {
        let a = grid.v.mapv(|v| (v - k.cy) / k.fy).into_dyn();
        tape.constant(a)
    };

    let (rot, t) = rotation_entries(tape, pose);
    let x = tape.mul(xg, depth);
    let y = tape.mul(yg, depth);
    let z = depth;

    let row = |tape: &mut Tape<T>, i: usize| {
        let a = tape.mul(rot.r[i][0], x);
        let b = tape.mul(rot.r[i][1], y);
        let c = tape.mul(rot.r[i][2], z);
        let ab = tape.add(a, b);
        let abc = tape.add(ab, c);
        tape.add(abc, t[i])
    };
    let xs = row(tape, 0);
    let ys = row(tape, 1);
    let zs = row(tape, 2);

    let zmin = T::c(MIN_SOURCE_DEPTH);
    let mask = {
        let zv = tape.value(zs);
        Array2::from_shape_fn((h, w), |(i, j)| zv[[i, j]] > zmin)
    };
    // Clamping before the divide keeps behind-camera pixels finite; their
    // gradients are cut here and their pixels are masked out of the loss.
    let zc = tape.clamp(zs, zmin, T::c(MAX_SOURCE_DEPTH));
    let un = tape.div(xs, zc);
    let un = tape.scale(un, k.fx);
    let u = tape.shift(un, k.cx);
    let vn = tape.div(ys, zc);
    let vn = tape.scale(vn, k.fy);
    let v = tape.shift(vn, k.cy);
    (u, v, mask)
}

/// Dense rigid flow (du, dv) as tape variables, plus the validity mask.
pub fn build_rigid_flow<T: Scalar>(
    tape: &mut Tape<T>,
    depth: Var,
    pose: Var,
    k: &CameraIntrinsics<T>,
) -> (Var, Var, Array2<bool>) {
    let (u, v, mask) = build_projection(tape, depth, pose, k);
    let grid = PixelGrid::<T>::new(k.width, k.height);
    let ug = tape.constant(grid.u.into_dyn());
    let vg = tape.constant(grid.v.into_dyn());
    let du = tape.sub(u, ug);
    let dv = tape.sub(v, vg);
    (du, dv, mask)
}

/// Differentiable inverse warp: projection then bilinear sampling of the
/// source. Gradients flow into `source`, `depth`, and `pose`.
pub fn build_inverse_warp<T: Scalar>(
    tape: &mut Tape<T>,
    source: Var,
    depth: Var,
    pose: Var,
    k: &CameraIntrinsics<T>,
) -> Warp {
    let (u, v, depth_ok) = build_projection(tape, depth, pose, k);
    let (warped, sample_ok) = tape.bilinear_sample(source, u, v);
    let mut mask = sample_ok
        .into_dimensionality::<ndarray::Ix2>()
        .expect("sample mask is 2-dimensional");
    mask.zip_mut_with(&depth_ok, |m, &d| *m = *m && d);
    Warp { warped, coord_u: u, coord_v: v, mask }
}
