//! Rigid-body pose primitives: translation vectors, scalar-first unit
//! quaternions, and the pinhole camera model used to relate spacecraft
//! positions to image coordinates.
//!
//! Conventions:
//!
//! * Quaternions are stored scalar-first as (w, x, y, z).
//! * Translations are metres in the camera frame, `[x, y, z]` with z > 0
//!   in front of the camera.
//! * Pixel coordinates (u, v) place integer values at pixel centres, with
//!   u along image width and v along image height.

use rand::Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Translation in metres, `[x, y, z]`.
pub type Vec3 = [f64; 3];

/// Euclidean norm of a translation.
pub fn norm3(v: Vec3) -> f64 {
    (v[0] * v[0] + v[1] * v[1] + v[2] * v[2]).sqrt()
}

/// Component-wise difference `a - b`.
pub fn sub3(a: Vec3, b: Vec3) -> Vec3 {
    [a[0] - b[0], a[1] - b[1], a[2] - b[2]]
}

/// Norm below which a quaternion is considered degenerate and cannot be
/// normalized.
pub const QUAT_NORM_EPS: f64 = 1e-12;

/// Rotation as a scalar-first quaternion (w, x, y, z).
///
/// The struct does not enforce unit norm; call [`Quaternion::normalized`]
/// before treating a value as a rotation.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Quaternion {
    pub w: f64,
    pub x: f64,
    pub y: f64,
    pub z: f64,
}

impl Quaternion {
    pub const IDENTITY: Quaternion = Quaternion {
        w: 1.0,
        x: 0.0,
        y: 0.0,
        z: 0.0,
    };

    pub fn new(w: f64, x: f64, y: f64, z: f64) -> Self {
        Quaternion { w, x, y, z }
    }

    /// Builds from a scalar-first array `[w, x, y, z]`.
    pub fn from_wxyz(q: [f64; 4]) -> Self {
        Quaternion::new(q[0], q[1], q[2], q[3])
    }

    /// Builds from a scalar-last array `[x, y, z, w]`.
    pub fn from_xyzw(q: [f64; 4]) -> Self {
        Quaternion::new(q[3], q[0], q[1], q[2])
    }

    /// Scalar-first array form `[w, x, y, z]`.
    pub fn to_wxyz(self) -> [f64; 4] {
        [self.w, self.x, self.y, self.z]
    }

    pub fn norm(self) -> f64 {
        (self.w * self.w + self.x * self.x + self.y * self.y + self.z * self.z).sqrt()
    }

    pub fn dot(self, other: Quaternion) -> f64 {
        self.w * other.w + self.x * other.x + self.y * other.y + self.z * other.z
    }

    pub fn conjugate(self) -> Quaternion {
        Quaternion::new(self.w, -self.x, -self.y, -self.z)
    }

    /// Unit-norm copy, or a numeric error when the norm is below
    /// [`QUAT_NORM_EPS`].
    pub fn normalized(self) -> Result<Quaternion> {
        let n = self.norm();
        if n < QUAT_NORM_EPS {
            return Err(Error::Numeric(format!(
                "cannot normalize quaternion with norm {n:.3e} (< {QUAT_NORM_EPS:.0e})"
            )));
        }
        Ok(Quaternion::new(
            self.w / n,
            self.x / n,
            self.y / n,
            self.z / n,
        ))
    }

    /// Hamilton product `self * other` (applies `other` first).
    pub fn mul(self, o: Quaternion) -> Quaternion {
        Quaternion::new(
            self.w * o.w - self.x * o.x - self.y * o.y - self.z * o.z,
            self.w * o.x + self.x * o.w + self.y * o.z - self.z * o.y,
            self.w * o.y - self.x * o.z + self.y * o.w + self.z * o.x,
            self.w * o.z + self.x * o.y - self.y * o.x + self.z * o.w,
        )
    }

    /// Unit quaternion for a rotation of `angle_rad` about `axis`.
    ///
    /// The axis must be non-degenerate; it is normalized internally.
    pub fn from_axis_angle(axis: Vec3, angle_rad: f64) -> Result<Quaternion> {
        let n = norm3(axis);
        if n < QUAT_NORM_EPS {
            return Err(Error::Numeric(
                "axis-angle rotation requires a non-zero axis".into(),
            ));
        }
        let (s, c) = (angle_rad / 2.0).sin_cos();
        Ok(Quaternion::new(
            c,
            s * axis[0] / n,
            s * axis[1] / n,
            s * axis[2] / n,
        ))
    }

    /// Row-major 3x3 rotation matrix for a unit quaternion.
    ///
    /// The caller must pass a normalized quaternion; the matrix of a
    /// non-unit quaternion is not a rotation.
    pub fn to_rotmat(self) -> [[f64; 3]; 3] {
        let Quaternion { w, x, y, z } = self;
        [
            [
                1.0 - 2.0 * (y * y + z * z),
                2.0 * (x * y - w * z),
                2.0 * (x * z + w * y),
            ],
            [
                2.0 * (x * y + w * z),
                1.0 - 2.0 * (x * x + z * z),
                2.0 * (y * z - w * x),
            ],
            [
                2.0 * (x * z - w * y),
                2.0 * (y * z + w * x),
                1.0 - 2.0 * (x * x + y * y),
            ],
        ]
    }

    /// Rotates a vector by this (unit) quaternion.
    pub fn rotate(self, v: Vec3) -> Vec3 {
        let r = self.to_rotmat();
        [
            r[0][0] * v[0] + r[0][1] * v[1] + r[0][2] * v[2],
            r[1][0] * v[0] + r[1][1] * v[1] + r[1][2] * v[2],
            r[2][0] * v[0] + r[2][1] * v[1] + r[2][2] * v[2],
        ]
    }
}

/// Shared kernel for the angular distance: `2 * acos(d)` for an absolute
/// dot product already clamped into [0, 1].
///
/// Both the evaluation metric and the rotation loss reduce to this after
/// their respective clamps, which keeps the two numerically consistent.
pub fn angle_from_clamped_absdot(d: f64) -> f64 {
    2.0 * d.acos()
}

/// Geodesic angle between two unit quaternions, in radians.
///
/// `theta = 2 * acos(|<q1, q2>|)`, invariant under the sign ambiguity
/// q -> -q. The absolute dot product is clamped to [0, 1] so the result
/// is exact (no differentiability floor is applied here).
pub fn geodesic_angle(q1: Quaternion, q2: Quaternion) -> f64 {
    angle_from_clamped_absdot(q1.dot(q2).abs().min(1.0))
}

/// Backward pass of quaternion normalization q_hat = raw / ||raw||.
///
/// The Jacobian is `(I - q_hat q_hat^T) / ||raw||`; applied to an
/// upstream gradient g w.r.t. q_hat this gives
/// `(g - <g, q_hat> q_hat) / ||raw||`.
pub fn normalize_backward(raw: [f64; 4], grad_unit: [f64; 4]) -> [f64; 4] {
    let n = (raw.iter().map(|v| v * v).sum::<f64>()).sqrt().max(QUAT_NORM_EPS);
    let unit = [raw[0] / n, raw[1] / n, raw[2] / n, raw[3] / n];
    let inner: f64 = grad_unit.iter().zip(unit.iter()).map(|(a, b)| a * b).sum();
    [
        (grad_unit[0] - inner * unit[0]) / n,
        (grad_unit[1] - inner * unit[1]) / n,
        (grad_unit[2] - inner * unit[2]) / n,
        (grad_unit[3] - inner * unit[3]) / n,
    ]
}

/// Uniformly distributed unit quaternion, drawn by normalizing four
/// independent standard normal components.
pub fn random_unit_quaternion<R: Rng + ?Sized>(rng: &mut R) -> Quaternion {
    loop {
        let q = Quaternion::new(
            StandardNormal.sample(rng),
            StandardNormal.sample(rng),
            StandardNormal.sample(rng),
            StandardNormal.sample(rng),
        );
        if let Ok(u) = q.normalized() {
            return u;
        }
    }
}

/// Full rigid pose: translation in metres plus unit orientation quaternion.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Pose {
    pub t: Vec3,
    pub q: Quaternion,
}

/// Checked conversion to a rotation matrix.
///
/// The input must be unit norm within 1e-6; a non-unit quaternion would
/// produce a non-orthogonal matrix, so it is rejected as a contract
/// violation rather than silently renormalized.
pub fn quat_to_rotmat(q: Quaternion) -> Result<[[f64; 3]; 3]> {
    if (q.norm() - 1.0).abs() > 1e-6 {
        return Err(Error::Contract(format!(
            "quat_to_rotmat requires a unit quaternion, got norm {:.9}",
            q.norm()
        )));
    }
    Ok(q.to_rotmat())
}

/// Pinhole camera intrinsics in pixels.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Camera {
    pub fx: f64,
    pub fy: f64,
    pub cx: f64,
    pub cy: f64,
}

impl Camera {
    /// Projects a camera-frame point to pixel coordinates:
    ///
    /// ```text
    /// u = fx * x / z + cx
    /// v = fy * y / z + cy
    /// ```
    ///
    /// Requires z > 0; a point at or behind the camera is a numeric error.
    pub fn project(&self, t: Vec3) -> Result<(f64, f64)> {
        if !(t[2] > 0.0) {
            return Err(Error::Numeric(format!(
                "projection requires z > 0, got z = {}",
                t[2]
            )));
        }
        Ok((
            self.fx * t[0] / t[2] + self.cx,
            self.fy * t[1] / t[2] + self.cy,
        ))
    }

    /// Inverse of [`Camera::project`] at a known depth z > 0.
    pub fn back_project(&self, u: f64, v: f64, z: f64) -> Vec3 {
        [(u - self.cx) * z / self.fx, (v - self.cy) * z / self.fy, z]
    }
}
