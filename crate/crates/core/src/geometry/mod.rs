//! Differentiable geometric core: SE(3) poses, pinhole projection, rigid
//! flow, and inverse warping.
//!
//! Every operation exists in two forms: a plain function on arrays (used by
//! evaluation code and as the reference in consistency tests) and a tape
//! composite in [`warp`] that exposes the same computation to the autodiff
//! engine. The two are tested against each other to near machine precision.

pub mod warp;


use ndarray::{Array2, Array3};

use crate::error::{Error, Result};
use crate::Scalar;

/// Relative motion as 3 translation components (meters) followed by 3
/// rotation components (radians, Euler angles applied as Rz·Ry·Rx).
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Pose6DoF<T: Scalar> {
    pub translation: [T; 3],
    pub rotation: [T; 3],
}

impl<T: Scalar> Pose6DoF<T> {
    pub fn new(translation: [T; 3], rotation: [T; 3]) -> Result<Self> {
        let p = Pose6DoF { translation, rotation };
        p.validate()?;
        Ok(p)
    }

    pub fn identity() -> Self {
        Pose6DoF { translation: [T::zero(); 3], rotation: [T::zero(); 3] }
    }

    /// Flat `[tx, ty, tz, rx, ry, rz]` layout used by network outputs.
    pub fn from_vector(v: &[T]) -> Result<Self> {
        if v.len() != 6 {
            return Err(Error::Shape(format!("pose vector needs 6 entries, got {}", v.len())));
        }
        Pose6DoF::new([v[0], v[1], v[2]], [v[3], v[4], v[5]])
    }

    pub fn to_vector(&self) -> [T; 6] {
        let (t, r) = (self.translation, self.rotation);
        [t[0], t[1], t[2], r[0], r[1], r[2]]
    }

    pub fn validate(&self) -> Result<()> {
        let pi = T::c(std::f64::consts::PI);
        for x in self.translation.iter().chain(self.rotation.iter()) {
            if !x.is_finite() {
                return Err(Error::invalid("pose entries must be finite"));
            }
        }
        for r in &self.rotation {
            if *r <= -pi || *r > pi {
                return Err(Error::invalid("rotation components must lie in (-pi, pi]"));
            }
        }
        Ok(())
    }
}

/// Rigid transform as a 4x4 matrix with bottom row (0, 0, 0, 1).
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SE3Matrix<T: Scalar> {
    pub m: [[T; 4]; 4],
}

impl<T: Scalar> SE3Matrix<T> {
    pub fn identity() -> Self {
        let mut m = [[T::zero(); 4]; 4];
        for (i, row) in m.iter_mut().enumerate() {
            row[i] = T::one();
        }
        SE3Matrix { m }
    }

    pub fn from_parts(r: [[T; 3]; 3], t: [T; 3]) -> Self {
        let mut m = [[T::zero(); 4]; 4];
        for i in 0..3 {
            m[i][..3].copy_from_slice(&r[i]);
            m[i][3] = t[i];
        }
        m[3][3] = T::one();
        SE3Matrix { m }
    }

    pub fn rotation(&self) -> [[T; 3]; 3] {
        let mut r = [[T::zero(); 3]; 3];
        for i in 0..3 {
            r[i].copy_from_slice(&self.m[i][..3]);
        }
        r
    }

    pub fn translation(&self) -> [T; 3] {
        [self.m[0][3], self.m[1][3], self.m[2][3]]
    }

    /// Applies the transform to a 3-D point.
    pub fn transform_point(&self, p: [T; 3]) -> [T; 3] {
        let m = &self.m;
        [
            m[0][0] * p[0] + m[0][1] * p[1] + m[0][2] * p[2] + m[0][3],
            m[1][0] * p[0] + m[1][1] * p[1] + m[1][2] * p[2] + m[1][3],
            m[2][0] * p[0] + m[2][1] * p[1] + m[2][2] * p[2] + m[2][3],
        ]
    }

    /// Rigid inverse: (R, t) -> (R^T, -R^T t).
    pub fn invert(&self) -> Self {
        let r = self.rotation();
        let t = self.translation();
        let mut rt = [[T::zero(); 3]; 3];
        for i in 0..3 {
            for j in 0..3 {
                rt[i][j] = r[j][i];
            }
        }
        let ti = [
            -(rt[0][0] * t[0] + rt[0][1] * t[1] + rt[0][2] * t[2]),
            -(rt[1][0] * t[0] + rt[1][1] * t[1] + rt[1][2] * t[2]),
            -(rt[2][0] * t[0] + rt[2][1] * t[1] + rt[2][2] * t[2]),
        ];
        SE3Matrix::from_parts(rt, ti)
    }

    /// Checks orthonormality, unit determinant, and the fixed bottom row.
    pub fn validate(&self, tol: T) -> Result<()> {
        let r = self.rotation();
        for i in 0..3 {
            for j in 0..3 {
                let mut dot = T::zero();
                for (ri, rj) in r.iter().map(|row| row[i]).zip(r.iter().map(|row| row[j])) {
                    dot += ri * rj;
                }
                let expect = if i == j { T::one() } else { T::zero() };
                if (dot - expect).abs() > tol {
                    return Err(Error::invalid("rotation block is not orthonormal"));
                }
            }
        }
        let det = r[0][0] * (r[1][1] * r[2][2] - r[1][2] * r[2][1])
            - r[0][1] * (r[1][0] * r[2][2] - r[1][2] * r[2][0])
            + r[0][2] * (r[1][0] * r[2][1] - r[1][1] * r[2][0]);
        if (det - T::one()).abs() > tol {
            return Err(Error::invalid("rotation block determinant differs from 1"));
        }
        let bottom_ok = self.m[3][0] == T::zero()
            && self.m[3][1] == T::zero()
            && self.m[3][2] == T::zero()
            && self.m[3][3] == T::one();
        if !bottom_ok {
            return Err(Error::invalid("bottom row must be (0, 0, 0, 1)"));
        }
        Ok(())
    }
}

/// Pinhole camera parameters, in pixels.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct CameraIntrinsics<T: Scalar> {
    pub fx: T,
    pub fy: T,
    pub cx: T,
    pub cy: T,
    pub width: usize,
    pub height: usize,
}

impl<T: Scalar> CameraIntrinsics<T> {
    pub fn new(fx: T, fy: T, cx: T, cy: T, width: usize, height: usize) -> Result<Self> {
        let k = CameraIntrinsics { fx, fy, cx, cy, width, height };
        k.validate()?;
        Ok(k)
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.fx > T::zero() && self.fy > T::zero()) {
            return Err(Error::invalid("focal lengths must be positive"));
        }
        let (w, h) = (T::c(self.width as f64), T::c(self.height as f64));
        if !(self.cx >= T::zero() && self.cx < w && self.cy >= T::zero() && self.cy < h) {
            return Err(Error::invalid("principal point must lie inside the image"));
        }
        Ok(())
    }

    /// Back-projects pixel (u, v) at depth d to a camera-frame point.
    pub fn back_project(&self, u: T, v: T, d: T) -> [T; 3] {
        [(u - self.cx) / self.fx * d, (v - self.cy) / self.fy * d, d]
    }

    /// Projects a camera-frame point to pixel coordinates. The caller is
    /// responsible for checking z > 0.
    pub fn project(&self, p: [T; 3]) -> (T, T) {
        (self.fx * p[0] / p[2] + self.cx, self.fy * p[1] / p[2] + self.cy)
    }
}

/// Per-pixel positive depth of the target view, in meters.
#[derive(Debug, Clone, PartialEq)]
pub struct DepthMap<T: Scalar> {
    pub values: Array2<T>,
}

impl<T: Scalar> DepthMap<T> {
    pub fn new(values: Array2<T>) -> Result<Self> {
        if values.iter().any(|v| !v.is_finite() || *v <= T::zero()) {
            return Err(Error::invalid("depth values must be finite and positive"));
        }
        Ok(DepthMap { values })
    }
}

/// Dense pixel displacement (du, dv), in pixels.
#[derive(Debug, Clone, PartialEq)]
pub struct FlowField<T: Scalar> {
    pub du: Array2<T>,
    pub dv: Array2<T>,
}

/// Homogeneous pixel coordinates of every target pixel; the third coordinate
/// is identically 1.
#[derive(Debug, Clone, PartialEq)]
pub struct PixelGrid<T: Scalar> {
    pub u: Array2<T>,
    pub v: Array2<T>,
}

impl<T: Scalar> PixelGrid<T> {
    pub fn new(width: usize, height: usize) -> Self {
        let u = Array2::from_shape_fn((height, width), |(_, uu)| T::c(uu as f64));
        let v = Array2::from_shape_fn((height, width), |(vv, _)| T::c(vv as f64));
        PixelGrid { u, v }
    }
}

/// Minimum source-camera depth for a projection to count as in front of the
/// camera. Shared by the plain and tape implementations.
pub const MIN_SOURCE_DEPTH: f64 = 1e-6;

/// Builds the rigid transform: rotation Rz(rz)·Ry(ry)·Rx(rx), translation
/// copied into the last column.
pub fn pose_to_matrix<T: Scalar>(pose: &Pose6DoF<T>) -> Result<SE3Matrix<T>> {
    pose.validate()?;
    let [rx, ry, rz] = pose.rotation;
    let (sx, cx) = (rx.sin(), rx.cos());
    let (sy, cy) = (ry.sin(), ry.cos());
    let (sz, cz) = (rz.sin(), rz.cos());
    // Product Rz·Ry·Rx expanded.
    let r = [
        [cz * cy, cz * sy * sx - sz * cx, cz * sy * cx + sz * sx],
        [sz * cy, sz * sy * sx + cz * cx, sz * sy * cx - cz * sx],
        [-sy, cy * sx, cy * cx],
    ];
    Ok(SE3Matrix::from_parts(r, pose.translation))
}

/// Recovers the 6-vector from a rigid transform. Inverse of
/// [`pose_to_matrix`] away from gimbal lock (|ry| near pi/2); at the lock
/// the split between rx and rz is ambiguous and rz is set to 0.
pub fn matrix_to_pose<T: Scalar>(m: &SE3Matrix<T>) -> Pose6DoF<T> {
    let r = m.rotation();
    let sy = -r[2][0];
    let one = T::one();
    let eps = T::c(1e-12);
    let (rx, ry, rz);
    if (sy.abs() - one).abs() < eps {
        ry = if sy > T::zero() { T::c(std::f64::consts::FRAC_PI_2) } else { T::c(-std::f64::consts::FRAC_PI_2) };
        rz = T::zero();
        rx = (-r[1][2]).atan2(r[1][1]);
    } else {
        ry = sy.asin();
        rx = r[2][1].atan2(r[2][2]);
        rz = r[1][0].atan2(r[0][0]);
    }
    Pose6DoF { translation: m.translation(), rotation: [rx, ry, rz] }
}

/// Rotation matrix for an axis-angle vector (Rodrigues formula).
pub fn so3_exp<T: Scalar>(w: [T; 3]) -> [[T; 3]; 3] {
    let theta = (w[0] * w[0] + w[1] * w[1] + w[2] * w[2]).sqrt();
    let mut r = [[T::zero(); 3]; 3];
    for (i, row) in r.iter_mut().enumerate() {
        row[i] = T::one();
    }
    if theta < T::c(1e-12) {
        return r;
    }
    let k = [w[0] / theta, w[1] / theta, w[2] / theta];
    let kx = [
        [T::zero(), -k[2], k[1]],
        [k[2], T::zero(), -k[0]],
        [-k[1], k[0], T::zero()],
    ];
    let (s, c) = (theta.sin(), theta.cos());
    for i in 0..3 {
        for j in 0..3 {
            let mut kk = T::zero();
            for (l, kxl) in kx.iter().enumerate() {
                kk += kx[i][l] * kxl[j];
            }
            r[i][j] = r[i][j] + s * kx[i][j] + (T::one() - c) * kk;
        }
    }
    r
}

/// Axis-angle vector of a rotation matrix; the returned angle lies in
/// [0, pi]. Inverse of [`so3_exp`].
pub fn so3_log<T: Scalar>(r: &[[T; 3]; 3]) -> [T; 3] {
    let one = T::one();
    let half = T::c(0.5);
    let trace = r[0][0] + r[1][1] + r[2][2];
    let cos_t = ((trace - one) * half).max(-one).min(one);
    let theta = cos_t.acos();
    if theta < T::c(1e-12) {
        return [T::zero(); 3];
    }
    if theta > T::c(std::f64::consts::PI - 1e-6) {
        // Near pi the off-diagonal difference vanishes; recover the axis
        // from the symmetric part instead.
        let mut axis = [
            ((r[0][0] + one) * half).max(T::zero()).sqrt(),
            ((r[1][1] + one) * half).max(T::zero()).sqrt(),
            ((r[2][2] + one) * half).max(T::zero()).sqrt(),
        ];
        // Fix signs using the largest component.
        let imax = if axis[0] >= axis[1] && axis[0] >= axis[2] {
            0
        } else if axis[1] >= axis[2] {
            1
        } else {
            2
        };
        let (j, k) = ((imax + 1) % 3, (imax + 2) % 3);
        if r[imax][j] + r[j][imax] < T::zero() {
            axis[j] = -axis[j];
        }
        if r[imax][k] + r[k][imax] < T::zero() {
            axis[k] = -axis[k];
        }
        return [axis[0] * theta, axis[1] * theta, axis[2] * theta];
    }
    let scale = theta / (T::c(2.0) * theta.sin());
    [
        scale * (r[2][1] - r[1][2]),
        scale * (r[0][2] - r[2][0]),
        scale * (r[1][0] - r[0][1]),
    ]
}

/// Matrix product a·b.
pub fn compose<T: Scalar>(a: &SE3Matrix<T>, b: &SE3Matrix<T>) -> SE3Matrix<T> {
    let mut out = [[T::zero(); 4]; 4];
    for i in 0..4 {
        for j in 0..4 {
            let mut acc = T::zero();
            for (k, bk) in b.m.iter().enumerate() {
                acc += a.m[i][k] * bk[j];
            }
            out[i][j] = acc;
        }
    }
    SE3Matrix { m: out }
}

/// Transform taking frame-a coordinates to frame-b coordinates, given each
/// frame's pose in a common world frame.
pub fn relative_transform<T: Scalar>(
    world_from_a: &SE3Matrix<T>,
    world_from_b: &SE3Matrix<T>,
) -> SE3Matrix<T> {
    compose(&world_from_b.invert(), world_from_a)
}

/// Dense rigid flow of the target pixels under (depth, pose, K):
/// back-project each pixel, transform into the source camera, re-project,
/// and subtract. Pixels landing behind the source camera (z below
/// [`MIN_SOURCE_DEPTH`]) are flagged false in the mask; their flow entries
/// are still finite (computed with z clamped) but meaningless.
pub fn rigid_flow<T: Scalar>(
    depth: &DepthMap<T>,
    pose: &SE3Matrix<T>,
    k: &CameraIntrinsics<T>,
) -> Result<(FlowField<T>, Array2<bool>)> {
    let (h, w) = depth.values.dim();
    if h != k.height || w != k.width {
        return Err(Error::Shape(format!(
            "depth {h}x{w} does not match intrinsics {}x{}",
            k.height, k.width
        )));
    }
    let zmin = T::c(MIN_SOURCE_DEPTH);
    let mut du = Array2::zeros((h, w));
    let mut dv = Array2::zeros((h, w));
    let mut mask = Array2::from_elem((h, w), true);
    for v in 0..h {
        for u in 0..w {
            let (uf, vf) = (T::c(u as f64), T::c(v as f64));
            let p = k.back_project(uf, vf, depth.values[[v, u]]);
            let q = pose.transform_point(p);
            let valid = q[2] > zmin;
            let z = if valid { q[2] } else { zmin };
            let (us, vs) = k.project([q[0], q[1], z]);
            du[[v, u]] = us - uf;
            dv[[v, u]] = vs - vf;
            mask[[v, u]] = valid;
        }
    }
    Ok((FlowField { du, dv }, mask))
}

/// Bilinear lookup of `image` (`[C, H, W]`) at continuous source pixel
/// coordinates. Out-of-bounds samples give 0 and a false mask entry.
pub fn bilinear_sample<T: Scalar>(
    image: &Array3<T>,
    u: &Array2<T>,
    v: &Array2<T>,
) -> (Array3<T>, Array2<bool>) {
    let (c_n, h, w) = image.dim();
    let (ho, wo) = u.dim();
    assert_eq!(u.dim(), v.dim(), "coordinate grids must agree");
    assert!(h >= 2 && w >= 2, "bilinear sampling needs at least 2x2 images");
    let mut out = Array3::zeros((c_n, ho, wo));
    let mut mask = Array2::from_elem((ho, wo), false);
    let one = T::one();
    let eps = T::c(crate::diff::EDGE_EPS);
    for i in 0..ho {
        for j in 0..wo {
            let (mut uu, mut vv) = (u[[i, j]], v[[i, j]]);
            let (umax, vmax) = (T::c((w - 1) as f64), T::c((h - 1) as f64));
            let inside = uu >= -eps && uu <= umax + eps && vv >= -eps && vv <= vmax + eps;
            if !inside {
                continue;
            }
            mask[[i, j]] = true;
            uu = uu.max(T::zero()).min(umax);
            vv = vv.max(T::zero()).min(vmax);
            let x0 = (uu.floor().to_f64() as usize).min(w - 2);
            let y0 = (vv.floor().to_f64() as usize).min(h - 2);
            let fx = uu - T::c(x0 as f64);
            let fy = vv - T::c(y0 as f64);
            for c in 0..c_n {
                out[[c, i, j]] = (one - fx) * (one - fy) * image[[c, y0, x0]]
                    + fx * (one - fy) * image[[c, y0, x0 + 1]]
                    + (one - fx) * fy * image[[c, y0 + 1, x0]]
                    + fx * fy * image[[c, y0 + 1, x0 + 1]];
            }
        }
    }
    (out, mask)
}

/// Synthesizes the target view from a source image: rigid flow from (depth,
/// pose, K), then bilinear sampling of the source at the displaced
/// coordinates. The mask is true where the projection is in front of the
/// source camera and lands inside the source image.
pub fn inverse_warp<T: Scalar>(
    source: &Array3<T>,
    depth: &DepthMap<T>,
    pose: &Pose6DoF<T>,
    k: &CameraIntrinsics<T>,
) -> Result<(Array3<T>, Array2<bool>)> {
    let m = pose_to_matrix(pose)?;
    let (flow, depth_ok) = rigid_flow(depth, &m, k)?;
    let grid = PixelGrid::new(k.width, k.height);
    let us = &grid.u + &flow.du;
    let vs = &grid.v + &flow.dv;
    let (warped, sample_ok) = bilinear_sample(source, &us, &vs);
    let mut mask = sample_ok;
    mask.zip_mut_with(&depth_ok, |m, &d| *m = *m && d);
    let mut out = warped;
    for mut chan in out.outer_iter_mut() {
        chan.zip_mut_with(&mask, |x, &m| {
            if !m {
                *x = T::zero();
            }
        });
    }
    Ok((out, mask))
}
