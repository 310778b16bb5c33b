//! Rigid-body algebra and the pinhole camera.
//!
//! Poses map world coordinates into the camera frame (world-to-camera).
//! Twists are ordered `(ω, v)`: rotation vector first, then translation.

use std::fmt;
use std::path::Path;

use nalgebra::{Matrix2x3, Matrix3, Matrix4, Rotation3, UnitQuaternion, Vector2, Vector3, Vector6};

use crate::error::{Error, Result};

/// Points with camera-frame depth at or below this are treated as behind the camera.
pub const NEAR_PLANE: f64 = 1e-6;

/// Tangent coordinates of SE(3): `[ωx, ωy, ωz, vx, vy, vz]`.
pub type Twist = Vector6<f64>;

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Quaternion {
    pub w: f64,
    pub x: f64,
    pub y: f64,
    pub z: f64,
}

impl Default for Quaternion {
    fn default() -> Self {
        Self::IDENTITY
    }
}

impl Quaternion {
    pub const IDENTITY: Quaternion = Quaternion {
        w: 1.0,
        x: 0.0,
        y: 0.0,
        z: 0.0,
    };

    pub fn new(w: f64, x: f64, y: f64, z: f64) -> Self {
        Self { w, x, y, z }
    }

    pub fn norm(&self) -> f64 {
        (self.w * self.w + self.x * self.x + self.y * self.y + self.z * self.z).sqrt()
    }

    /// Unit-norm copy. A zero quaternion normalizes to the identity.
    pub fn normalized(&self) -> Self {
        let n = self.norm();
        if n < 1e-300 || !n.is_finite() {
            return Self::IDENTITY;
        }
        Self::new(self.w / n, self.x / n, self.y / n, self.z / n)
    }

    pub fn conjugate(&self) -> Self {
        Self::new(self.w, -self.x, -self.y, -self.z)
    }

    /// Hamilton product `self ⊗ rhs`.
    pub fn mul(&self, rhs: &Quaternion) -> Quaternion {
        let (a, b) = (self, rhs);
        Quaternion::new(
            a.w * b.w - a.x * b.x - a.y * b.y - a.z * b.z,
            a.w * b.x + a.x * b.w + a.y * b.z - a.z * b.y,
            a.w * b.y - a.x * b.z + a.y * b.w + a.z * b.x,
            a.w * b.z + a.x * b.y - a.y * b.x + a.z * b.w,
        )
    }

    /// Exponential map from a rotation vector (axis times angle in radians).
    pub fn from_rotation_vector(omega: &Vector3<f64>) -> Self {
        let theta2 = omega.norm_squared();
        let theta = theta2.sqrt();
        let (half_cos, k) = if theta < 1e-8 {
            (1.0 - theta2 / 8.0, 0.5 - theta2 / 48.0)
        } else {
            ((0.5 * theta).cos(), (0.5 * theta).sin() / theta)
        };
        Quaternion::new(half_cos, k * omega.x, k * omega.y, k * omega.z).normalized()
    }

    /// Logarithm map; returns the rotation vector with angle in `[0, π]`.
    pub fn to_rotation_vector(&self) -> Vector3<f64> {
        let q = self.normalized();
        let q = if q.w < 0.0 {
            Quaternion::new(-q.w, -q.x, -q.y, -q.z)
        } else {
            q
        };
        let v = Vector3::new(q.x, q.y, q.z);
        let s = v.norm();
        if s < 1e-12 {
            return v * (2.0 / q.w);
        }
        let angle = 2.0 * s.atan2(q.w);
        v * (angle / s)
    }

    pub fn to_matrix(&self) -> Matrix3<f64> {
        let q = self.normalized();
        let (w, x, y, z) = (q.w, q.x, q.y, q.z);
        Matrix3::new(
            1.0 - 2.0 * (y * y + z * z),
            2.0 * (x * y - w * z),
            2.0 * (x * z + w * y),
            2.0 * (x * y + w * z),
            1.0 - 2.0 * (x * x + z * z),
            2.0 * (y * z - w * x),
            2.0 * (x * z - w * y),
            2.0 * (y * z + w * x),
            1.0 - 2.0 * (x * x + y * y),
        )
    }

    /// Quaternion of a proper rotation matrix.
    pub fn from_matrix(m: &Matrix3<f64>) -> Self {
        let uq = UnitQuaternion::from_rotation_matrix(&Rotation3::from_matrix_unchecked(*m));
        Quaternion::new(uq.w, uq.i, uq.j, uq.k).normalized()
    }

    pub fn rotate(&self, p: &Vector3<f64>) -> Vector3<f64> {
        self.to_matrix() * p
    }

    /// Rotation angle in radians, in `[0, π]`.
    pub fn angle(&self) -> f64 {
        self.to_rotation_vector().norm()
    }
}

/// Rigid transform `p ↦ R p + t`.
#[derive(Clone, Copy, Debug, PartialEq, Default)]
pub struct Se3Transform {
    pub rotation: Quaternion,
    pub translation: Vector3<f64>,
}

impl fmt::Display for Se3Transform {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let t = &self.translation;
        let q = &self.rotation;
        write!(
            f,
            "SE3(t: [{:.6}, {:.6}, {:.6}], q: [w {:.6}, x {:.6}, y {:.6}, z {:.6}])",
            t.x, t.y, t.z, q.w, q.x, q.y, q.z
        )
    }
}

impl Se3Transform {
    pub fn identity() -> Self {
        Self {
            rotation: Quaternion::IDENTITY,
            translation: Vector3::zeros(),
        }
    }

    pub fn new(rotation: Quaternion, translation: Vector3<f64>) -> Self {
        Self {
            rotation: rotation.normalized(),
            translation,
        }
    }

    pub fn from_translation(t: Vector3<f64>) -> Self {
        Self::new(Quaternion::IDENTITY, t)
    }

    pub fn rotation_matrix(&self) -> Matrix3<f64> {
        self.rotation.to_matrix()
    }

    pub fn apply(&self, p: &Vector3<f64>) -> Vector3<f64> {
        self.rotation_matrix() * p + self.translation
    }

    pub fn inverse(&self) -> Self {
        let inv_q = self.rotation.normalized().conjugate();
        let t = -(inv_q.to_matrix() * self.translation);
        Self {
            rotation: inv_q,
            translation: t,
        }
    }

    /// `self ∘ other`: applies `other` first.
    pub fn compose(&self, other: &Se3Transform) -> Se3Transform {
        compose(self, other)
    }

    pub fn to_matrix(&self) -> Matrix4<f64> {
        let mut m = Matrix4::identity();
        m.fixed_view_mut::<3, 3>(0, 0)
            .copy_from(&self.rotation_matrix());
        m.fixed_view_mut::<3, 1>(0, 3).copy_from(&self.translation);
        m
    }

    pub fn from_matrix(m: &Matrix4<f64>) -> Self {
        let r: Matrix3<f64> = m.fixed_view::<3, 3>(0, 0).into_owned();
        let t: Vector3<f64> = m.fixed_view::<3, 1>(0, 3).into_owned();
        Self::new(Quaternion::from_matrix(&r), t)
    }

    /// Camera centre in world coordinates for a world-to-camera pose.
    pub fn camera_center(&self) -> Vector3<f64> {
        -(self.rotation_matrix().transpose() * self.translation)
    }

    /// Left-multiplicative update `exp(twist) ∘ self`.
    pub fn retract(&self, twist: &Twist) -> Se3Transform {
        compose(&exp_unchecked(twist), self)
    }

    pub fn is_finite(&self) -> bool {
        let q = &self.rotation;
        [q.w, q.x, q.y, q.z].iter().all(|v| v.is_finite())
            && self.translation.iter().all(|v| v.is_finite())
    }
}

pub fn compose(a: &Se3Transform, b: &Se3Transform) -> Se3Transform {
    Se3Transform {
        rotation: a.rotation.mul(&b.rotation).normalized(),
        translation: a.rotation_matrix() * b.translation + a.translation,
    }
}

pub fn skew(v: &Vector3<f64>) -> Matrix3<f64> {
    Matrix3::new(0.0, -v.z, v.y, v.z, 0.0, -v.x, -v.y, v.x, 0.0)
}

fn left_jacobian_coeffs(theta2: f64) -> (f64, f64) {
    if theta2 < 1e-8 {
        (0.5 - theta2 / 24.0, 1.0 / 6.0 - theta2 / 120.0)
    } else {
        let theta = theta2.sqrt();
        (
            (1.0 - theta.cos()) / theta2,
            (theta - theta.sin()) / (theta2 * theta),
        )
    }
}

fn exp_unchecked(twist: &Twist) -> Se3Transform {
    let omega = Vector3::new(twist[0], twist[1], twist[2]);
    let v = Vector3::new(twist[3], twist[4], twist[5]);
    let (b, c) = left_jacobian_coeffs(omega.norm_squared());
    let w = skew(&omega);
    let jac = Matrix3::identity() + w * b + w * w * c;
    Se3Transform {
        rotation: Quaternion::from_rotation_vector(&omega),
        translation: jac * v,
    }
}

/// Exponential map of SE(3).
pub fn se3_exp(twist: &Twist) -> Result<Se3Transform> {
    if !twist.iter().all(|v| v.is_finite()) {
        return Err(Error::InvalidArgument(format!(
            "twist has non-finite components: {:?}",
            twist.as_slice()
        )));
    }
    Ok(exp_unchecked(twist))
}

/// Logarithm map of SE(3); inverse of [`se3_exp`] for rotation angles below π.
pub fn se3_log(t: &Se3Transform) -> Twist {
    let omega = t.rotation.to_rotation_vector();
    let theta2 = omega.norm_squared();
    let w = skew(&omega);
    let d = if theta2 < 1e-8 {
        1.0 / 12.0 + theta2 / 720.0
    } else {
        let theta = theta2.sqrt();
        (1.0 - theta * theta.sin() / (2.0 * (1.0 - theta.cos()))) / theta2
    };
    let jac_inv = Matrix3::identity() - w * 0.5 + w * w * d;
    let v = jac_inv * t.translation;
    Twist::new(omega.x, omega.y, omega.z, v.x, v.y, v.z)
}

/// Pinhole intrinsics in pixel units. Pixel `(u, v)` of an image is sampled at
/// the continuous coordinate `(u, v)`.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Intrinsics {
    pub fx: f64,
    pub fy: f64,
    pub cx: f64,
    pub cy: f64,
    pub width: usize,
    pub height: usize,
}

impl Intrinsics {
    pub fn new(fx: f64, fy: f64, cx: f64, cy: f64, width: usize, height: usize) -> Result<Self> {
        let k = Self {
            fx,
            fy,
            cx,
            cy,
            width,
            height,
        };
        k.validate()?;
        Ok(k)
    }

    pub fn validate(&self) -> Result<()> {
        let finite = [self.fx, self.fy, self.cx, self.cy]
            .iter()
            .all(|v| v.is_finite());
        if !finite || self.fx <= 0.0 || self.fy <= 0.0 {
            return Err(Error::InvalidArgument(format!(
                "focal lengths must be positive and finite: {self:?}"
            )));
        }
        if self.width == 0
            || self.height == 0
            || self.cx < 0.0
            || self.cy < 0.0
            || self.cx >= self.width as f64
            || self.cy >= self.height as f64
        {
            return Err(Error::InvalidArgument(format!(
                "principal point must lie inside the image: {self:?}"
            )));
        }
        Ok(())
    }

    /// Whether a continuous pixel coordinate lies inside `[0, w-1] × [0, h-1]`.
    pub fn contains(&self, p: &Vector2<f64>) -> bool {
        p.x >= 0.0
            && p.y >= 0.0
            && p.x <= (self.width - 1) as f64
            && p.y <= (self.height - 1) as f64
    }

    pub fn pixel_count(&self) -> usize {
        self.width * self.height
    }

    /// Parses `fx fy cx cy width height`.
    pub fn parse(text: &str, path: &Path) -> Result<Self> {
        let (line_no, line) = text
            .lines()
            .enumerate()
            .find(|(_, l)| !l.trim().is_empty() && !l.trim_start().starts_with('#'))
            .ok_or_else(|| Error::parse(path, 1, "empty intrinsics file"))?;
        let fields: Vec<&str> = line.split_whitespace().collect();
        if fields.len() != 6 {
            return Err(Error::parse(
                path,
                line_no + 1,
                format!("expected 6 fields `fx fy cx cy width height`, got {}", fields.len()),
            ));
        }
        let num = |i: usize| -> Result<f64> {
            fields[i]
                .parse::<f64>()
                .map_err(|e| Error::parse(path, line_no + 1, format!("field {}: {e}", i + 1)))
        };
        let dim = |i: usize| -> Result<usize> {
            let v = num(i)?;
            if v < 1.0 || v.fract() != 0.0 {
                return Err(Error::parse(
                    path,
                    line_no + 1,
                    format!("field {} must be a positive integer", i + 1),
                ));
            }
            Ok(v as usize)
        };
        let k = Intrinsics {
            fx: num(0)?,
            fy: num(1)?,
            cx: num(2)?,
            cy: num(3)?,
            width: dim(4)?,
            height: dim(5)?,
        };
        k.validate()
            .map_err(|e| Error::parse(path, line_no + 1, e.to_string()))?;
        Ok(k)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)?;
        Self::parse(&text, path)
    }

    pub fn to_text(&self) -> String {
        format!(
            "{} {} {} {} {} {}\n",
            self.fx, self.fy, self.cx, self.cy, self.width, self.height
        )
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_text())?;
        Ok(())
    }
}

/// Perspective projection of a camera-frame point; caller guarantees `z > 0`.
#[inline]
pub fn project_camera_point(p: &Vector3<f64>, k: &Intrinsics) -> Vector2<f64> {
    Vector2::new(k.fx * p.x / p.z + k.cx, k.fy * p.y / p.z + k.cy)
}

/// Jacobian of [`project_camera_point`] with respect to the camera-frame point.
#[inline]
pub fn projection_jacobian(p: &Vector3<f64>, k: &Intrinsics) -> Matrix2x3<f64> {
    let iz = 1.0 / p.z;
    let iz2 = iz * iz;
    Matrix2x3::new(
        k.fx * iz,
        0.0,
        -k.fx * p.x * iz2,
        0.0,
        k.fy * iz,
        -k.fy * p.y * iz2,
    )
}

/// Projects a world point through `pose` and `k`. Returns pixel coordinates
/// and camera-frame depth.
pub fn project_point(
    p_world: &Vector3<f64>,
    pose: &Se3Transform,
    k: &Intrinsics,
) -> Result<(Vector2<f64>, f64)> {
    let pc = pose.apply(p_world);
    if !(pc.z > NEAR_PLANE) {
        return Err(Error::BehindCamera { z: pc.z });
    }
    Ok((project_camera_point(&pc, k), pc.z))
}

/// Back-projects pixel `(u, v)` at depth `depth` into the camera frame.
pub fn backproject(u: f64, v: f64, depth: f64, k: &Intrinsics) -> Result<Vector3<f64>> {
    if !(depth > 0.0) || !depth.is_finite() {
        return Err(Error::InvalidArgument(format!(
            "depth must be positive, got {depth}"
        )));
    }
    Ok(Vector3::new(
        (u - k.cx) / k.fx * depth,
        (v - k.cy) / k.fy * depth,
        depth,
    ))
}
