//! Small 3D geometry kit: vectors, rotations, rigid transforms, pinhole cameras.

use crate::scalar::Scalar;
use serde::{Deserialize, Serialize};
use std::ops::{Add, Div, Mul, Neg, Sub};
use thiserror::Error;

#[derive(Debug, Error)]
pub enum GeomError {
    #[error("camera intrinsics must have positive focal lengths, got fx={fx} fy={fy}")]
    BadFocal { fx: f64, fy: f64 },
    #[error("extrinsics rotation is not orthonormal with det +1 (max deviation {dev:.3e})")]
    NotRigid { dev: f64 },
    #[error("cannot normalize a zero-norm quaternion")]
    ZeroQuaternion,
    #[error("box min must be strictly below max on every axis")]
    EmptyBox,
}

// ── Vec3 ────────────────────────────────────────────────────────────

#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct Vec3<F> {
    pub x: F,
    pub y: F,
    pub z: F,
}

impl<F: Scalar> Vec3<F> {
    pub fn new(x: F, y: F, z: F) -> Self {
        Self { x, y, z }
    }

    pub fn zero() -> Self {
        Self::new(F::zero(), F::zero(), F::zero())
    }

    pub fn splat(v: F) -> Self {
        Self::new(v, v, v)
    }

    pub fn dot(self, o: Self) -> F {
        self.x * o.x + self.y * o.y + self.z * o.z
    }

    pub fn cross(self, o: Self) -> Self {
        Self::new(
            self.y * o.z - self.z * o.y,
            self.z * o.x - self.x * o.z,
            self.x * o.y - self.y * o.x,
        )
    }

    pub fn norm(self) -> F {
        self.dot(self).sqrt()
    }

    pub fn normalized(self) -> Self {
        self / self.norm()
    }

    pub fn dist(self, o: Self) -> F {
        (self - o).norm()
    }

    pub fn to_array(self) -> [F; 3] {
        [self.x, self.y, self.z]
    }

    pub fn from_array(a: [F; 3]) -> Self {
        Self::new(a[0], a[1], a[2])
    }
}

impl<F: Scalar> Add for Vec3<F> {
    type Output = Self;
    fn add(self, o: Self) -> Self {
        Self::new(self.x + o.x, self.y + o.y, self.z + o.z)
    }
}

impl<F: Scalar> Sub for Vec3<F> {
    type Output = Self;
    fn sub(self, o: Self) -> Self {
        Self::new(self.x - o.x, self.y - o.y, self.z - o.z)
    }
}

impl<F: Scalar> Mul<F> for Vec3<F> {
    type Output = Self;
    fn mul(self, s: F) -> Self {
        Self::new(self.x * s, self.y * s, self.z * s)
    }
}

impl<F: Scalar> Div<F> for Vec3<F> {
    type Output = Self;
    fn div(self, s: F) -> Self {
        Self::new(self.x / s, self.y / s, self.z / s)
    }
}

impl<F: Scalar> Neg for Vec3<F> {
    type Output = Self;
    fn neg(self) -> Self {
        Self::new(-self.x, -self.y, -self.z)
    }
}

// ── Mat3 (row-major) ────────────────────────────────────────────────

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Mat3<F> {
    pub m: [[F; 3]; 3],
}

impl<F: Scalar> Mat3<F> {
    pub fn identity() -> Self {
        let (o, z) = (F::one(), F::zero());
        Self { m: [[o, z, z], [z, o, z], [z, z, o]] }
    }

    pub fn from_rows(r0: [F; 3], r1: [F; 3], r2: [F; 3]) -> Self {
        Self { m: [r0, r1, r2] }
    }

    pub fn from_cols(c0: Vec3<F>, c1: Vec3<F>, c2: Vec3<F>) -> Self {
        Self {
            m: [[c0.x, c1.x, c2.x], [c0.y, c1.y, c2.y], [c0.z, c1.z, c2.z]],
        }
    }

    pub fn transpose(self) -> Self {
        let m = self.m;
        Self::from_rows(
            [m[0][0], m[1][0], m[2][0]],
            [m[0][1], m[1][1], m[2][1]],
            [m[0][2], m[1][2], m[2][2]],
        )
    }

    pub fn apply(self, v: Vec3<F>) -> Vec3<F> {
        let m = self.m;
        Vec3::new(
            m[0][0] * v.x + m[0][1] * v.y + m[0][2] * v.z,
            m[1][0] * v.x + m[1][1] * v.y + m[1][2] * v.z,
            m[2][0] * v.x + m[2][1] * v.y + m[2][2] * v.z,
        )
    }

    pub fn matmul(self, o: Self) -> Self {
        let mut out = [[F::zero(); 3]; 3];
        for i in 0..3 {
            for j in 0..3 {
                let mut s = F::zero();
                for k in 0..3 {
                    s = s + self.m[i][k] * o.m[k][j];
                }
                out[i][j] = s;
            }
        }
        Self { m: out }
    }

    pub fn det(self) -> F {
        let m = self.m;
        m[0][0] * (m[1][1] * m[2][2] - m[1][2] * m[2][1])
            - m[0][1] * (m[1][0] * m[2][2] - m[1][2] * m[2][0])
            + m[0][2] * (m[1][0] * m[2][1] - m[1][1] * m[2][0])
    }

    /// Rotation about +z by `angle` radians.
    pub fn rot_z(angle: F) -> Self {
        let (s, c) = angle.sin_cos();
        let (o, z) = (F::one(), F::zero());
        Self::from_rows([c, -s, z], [s, c, z], [z, z, o])
    }

    /// Max deviation of RᵀR from identity plus |det − 1|.
    pub fn rigidity_deviation(self) -> F {
        let rtr = self.transpose().matmul(self);
        let id = Self::identity();
        let mut dev = (self.det() - F::one()).abs();
        for i in 0..3 {
            for j in 0..3 {
                let d = (rtr.m[i][j] - id.m[i][j]).abs();
                if d > dev {
                    dev = d;
                }
            }
        }
        dev
    }

    pub fn flat(self) -> [F; 9] {
        let m = self.m;
        [
            m[0][0], m[0][1], m[0][2], m[1][0], m[1][1], m[1][2], m[2][0], m[2][1], m[2][2],
        ]
    }

    pub fn from_flat(f: [F; 9]) -> Self {
        Self::from_rows([f[0], f[1], f[2]], [f[3], f[4], f[5]], [f[6], f[7], f[8]])
    }
}

// ── Quaternion (w, x, y, z) ─────────────────────────────────────────

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Quat<F> {
    pub w: F,
    pub x: F,
    pub y: F,
    pub z: F,
}

impl<F: Scalar> Quat<F> {
    pub fn new(w: F, x: F, y: F, z: F) -> Self {
        Self { w, x, y, z }
    }

    pub fn identity() -> Self {
        Self::new(F::one(), F::zero(), F::zero(), F::zero())
    }

    pub fn from_axis_angle(axis: Vec3<F>, angle: F) -> Self {
        let half = angle / F::from_f64(2.0);
        let (s, c) = half.sin_cos();
        let a = axis.normalized();
        Self::new(c, a.x * s, a.y * s, a.z * s)
    }

    pub fn norm(self) -> F {
        (self.w * self.w + self.x * self.x + self.y * self.y + self.z * self.z).sqrt()
    }

    pub fn normalized(self) -> Result<Self, GeomError> {
        let n = self.norm();
        if n < F::from_f64(1e-12) {
            return Err(GeomError::ZeroQuaternion);
        }
        Ok(Self::new(self.w / n, self.x / n, self.y / n, self.z / n))
    }

    /// Flip sign so that w ≥ 0 (the canonical hemisphere).
    pub fn canonicalized(self) -> Self {
        if self.w < F::zero() {
            Self::new(-self.w, -self.x, -self.y, -self.z)
        } else {
            self
        }
    }

    pub fn mul(self, o: Self) -> Self {
        Self::new(
            self.w * o.w - self.x * o.x - self.y * o.y - self.z * o.z,
            self.w * o.x + self.x * o.w + self.y * o.z - self.z * o.y,
            self.w * o.y - self.x * o.z + self.y * o.w + self.z * o.x,
            self.w * o.z + self.x * o.y - self.y * o.x + self.z * o.w,
        )
    }

    pub fn rotate(self, v: Vec3<F>) -> Vec3<F> {
        // q v q* for unit q, expanded.
        let u = Vec3::new(self.x, self.y, self.z);
        let two = F::from_f64(2.0);
        let t = u.cross(v) * two;
        v + t * self.w + u.cross(t)
    }

    /// Rotation angle between two unit quaternions, in [0, π].
    pub fn angle_to(self, o: Self) -> F {
        let dot = (self.w * o.w + self.x * o.x + self.y * o.y + self.z * o.z).abs();
        let clamped = if dot > F::one() { F::one() } else { dot };
        F::from_f64(2.0) * clamped.acos()
    }

    pub fn to_array(self) -> [F; 4] {
        [self.w, self.x, self.y, self.z]
    }

    pub fn from_array(a: [F; 4]) -> Self {
        Self::new(a[0], a[1], a[2], a[3])
    }
}

// ── Rigid transform (rotation then translation) ─────────────────────

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RigidTransform<F> {
    pub rotation: Mat3<F>,
    pub translation: Vec3<F>,
}

impl<F: Scalar> RigidTransform<F> {
    pub fn identity() -> Self {
        Self { rotation: Mat3::identity(), translation: Vec3::zero() }
    }

    pub fn new(rotation: Mat3<F>, translation: Vec3<F>) -> Self {
        Self { rotation, translation }
    }

    pub fn apply(self, p: Vec3<F>) -> Vec3<F> {
        self.rotation.apply(p) + self.translation
    }

    pub fn compose(self, inner: Self) -> Self {
        Self {
            rotation: self.rotation.matmul(inner.rotation),
            translation: self.rotation.apply(inner.translation) + self.translation,
        }
    }

    pub fn inverse(self) -> Self {
        let rt = self.rotation.transpose();
        Self { rotation: rt, translation: -rt.apply(self.translation) }
    }
}

// ── Axis-aligned box ────────────────────────────────────────────────

/// Axis-aligned box, used for the robot workspace and box-shaped objects.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Aabb<F> {
    pub min: Vec3<F>,
    pub max: Vec3<F>,
}

impl<F: Scalar> Aabb<F> {
    pub fn new(min: Vec3<F>, max: Vec3<F>) -> Result<Self, GeomError> {
        if !(min.x < max.x && min.y < max.y && min.z < max.z) {
            return Err(GeomError::EmptyBox);
        }
        Ok(Self { min, max })
    }

    pub fn contains(&self, p: Vec3<F>) -> bool {
        p.x >= self.min.x
            && p.x <= self.max.x
            && p.y >= self.min.y
            && p.y <= self.max.y
            && p.z >= self.min.z
            && p.z <= self.max.z
    }

    pub fn center(&self) -> Vec3<F> {
        (self.min + self.max) * F::from_f64(0.5)
    }

    pub fn extent(&self) -> Vec3<F> {
        self.max - self.min
    }
}

// ── Pinhole camera ──────────────────────────────────────────────────

/// Intrinsics as a 3×3 matrix [[fx,0,cx],[0,fy,cy],[0,0,1]] plus a
/// camera-to-world extrinsic transform. Pixel (u, v) at depth z (camera-frame
/// z, not ray length) unprojects to z·K⁻¹[u,v,1].
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Camera<F> {
    pub intrinsics: Mat3<F>,
    pub cam_to_world: RigidTransform<F>,
}

impl<F: Scalar> Camera<F> {
    pub fn new(intrinsics: Mat3<F>, cam_to_world: RigidTransform<F>) -> Result<Self, GeomError> {
        let fx = intrinsics.m[0][0];
        let fy = intrinsics.m[1][1];
        if fx <= F::zero() || fy <= F::zero() {
            return Err(GeomError::BadFocal {
                fx: fx.to_f64().unwrap_or(f64::NAN),
                fy: fy.to_f64().unwrap_or(f64::NAN),
            });
        }
        let dev = cam_to_world.rotation.rigidity_deviation();
        if dev > F::from_f64(1e-9) {
            return Err(GeomError::NotRigid { dev: dev.to_f64().unwrap_or(f64::NAN) });
        }
        Ok(Self { intrinsics, cam_to_world })
    }

    pub fn fx(&self) -> F {
        self.intrinsics.m[0][0]
    }
    pub fn fy(&self) -> F {
        self.intrinsics.m[1][1]
    }
    pub fn cx(&self) -> F {
        self.intrinsics.m[0][2]
    }
    pub fn cy(&self) -> F {
        self.intrinsics.m[1][2]
    }

    /// Camera-frame ray direction through pixel (u, v), unnormalized (z = 1).
    pub fn pixel_ray(&self, u: F, v: F) -> Vec3<F> {
        Vec3::new((u - self.cx()) / self.fx(), (v - self.cy()) / self.fy(), F::one())
    }

    /// World-frame point for pixel (u, v) at camera-frame depth z.
    pub fn unproject(&self, u: F, v: F, depth: F) -> Vec3<F> {
        self.cam_to_world.apply(self.pixel_ray(u, v) * depth)
    }

    /// Project a world point to (u, v, depth). Depth ≤ 0 means behind the camera.
    pub fn project(&self, p: Vec3<F>) -> (F, F, F) {
        let c = self.cam_to_world.inverse().apply(p);
        let u = c.x / c.z * self.fx() + self.cx();
        let v = c.y / c.z * self.fy() + self.cy();
        (u, v, c.z)
    }

    /// Place a camera at `eye` looking at `target`, world +z treated as up,
    /// image v axis pointing world-down.
    pub fn look_at(
        intrinsics: Mat3<F>,
        eye: Vec3<F>,
        target: Vec3<F>,
    ) -> Result<Self, GeomError> {
        let fwd = (target - eye).normalized();
        let up_hint = if fwd.z.abs() > F::from_f64(0.999) {
            Vec3::new(F::zero(), F::one(), F::zero())
        } else {
            Vec3::new(F::zero(), F::zero(), F::one())
        };
        let x_c = fwd.cross(up_hint).normalized();
        let y_c = fwd.cross(x_c);
        let rotation = Mat3::from_cols(x_c, y_c, fwd);
        Self::new(intrinsics, RigidTransform::new(rotation, eye))
    }
}

pub fn intrinsics_for<F: Scalar>(fx: F, fy: F, cx: F, cy: F) -> Mat3<F> {
    let z = F::zero();
    Mat3::from_rows([fx, z, cx], [z, fy, cy], [z, z, F::one()])
}

#[cfg(test)]
mod tests {
    use super::*;

    type V = Vec3<f64>;

    #[test]
    fn cross_follows_right_hand_rule() {
        let x = V::new(1.0, 0.0, 0.0);
        let y = V::new(0.0, 1.0, 0.0);
        assert_eq!(x.cross(y), V::new(0.0, 0.0, 1.0));
    }

    #[test]
    fn quat_rotation_matches_axis_angle() {
        let q = Quat::from_axis_angle(V::new(0.0, 0.0, 1.0), std::f64::consts::FRAC_PI_2);
        let r = q.rotate(V::new(1.0, 0.0, 0.0));
        assert!((r - V::new(0.0, 1.0, 0.0)).norm() < 1e-12);
    }

    #[test]
    fn quat_canonicalization_flips_sign() {
        let q = Quat::new(-0.5, 0.5, 0.5, 0.5).canonicalized();
        assert_eq!(q, Quat::new(0.5, -0.5, -0.5, -0.5));
        assert!(q.angle_to(Quat::new(-0.5, 0.5, 0.5, 0.5)) < 1e-12);
    }

    #[test]
    fn rigid_inverse_roundtrip() {
        let t = RigidTransform::new(Mat3::rot_z(0.7), V::new(0.1, -0.2, 0.3));
        let p = V::new(0.4, 0.5, -0.6);
        let back = t.inverse().apply(t.apply(p));
        assert!((back - p).norm() < 1e-12);
    }

    #[test]
    fn camera_rejects_bad_rotation() {
        let mut r = Mat3::identity();
        r.m[0][0] = 2.0;
        let cam = Camera::new(
            intrinsics_for(50.0, 50.0, 32.0, 32.0),
            RigidTransform::new(r, V::zero()),
        );
        assert!(matches!(cam, Err(GeomError::NotRigid { .. })));
    }

    #[test]
    fn unproject_at_principal_point() {
        let cam = Camera::new(
            intrinsics_for(55.0, 55.0, 31.5, 31.5),
            RigidTransform::identity(),
        )
        .unwrap();
        let p = cam.unproject(31.5, 31.5, 1.0);
        assert!((p - V::new(0.0, 0.0, 1.0)).norm() < 1e-15);
    }

    #[test]
    fn project_unproject_roundtrip() {
        let cam = Camera::look_at(
            intrinsics_for(55.4, 55.4, 31.5, 31.5),
            V::new(1.1, 0.0, 0.55),
            V::new(0.0, 0.0, 0.3),
        )
        .unwrap();
        let p = V::new(0.12, -0.07, 0.21);
        let (u, v, d) = cam.project(p);
        assert!(d > 0.0);
        let back = cam.unproject(u, v, d);
        assert!((back - p).norm() < 1e-12);
    }

    #[test]
    fn look_at_is_rigid_and_v_points_down() {
        let cam = Camera::look_at(
            intrinsics_for(55.0, 55.0, 31.5, 31.5),
            Vec3::new(1.1, 0.0, 0.55),
            Vec3::new(0.0, 0.0, 0.3),
        )
        .unwrap();
        assert!(cam.cam_to_world.rotation.rigidity_deviation() < 1e-12);
        // Column 1 is the image v axis in world coordinates; it should point down.
        assert!(cam.cam_to_world.rotation.m[2][1] < 0.0);
    }
}
