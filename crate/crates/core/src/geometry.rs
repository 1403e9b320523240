//! Rigid-body math, the pinhole camera model and the rotation constructions
//! shared by fusion and tracking.

use nalgebra::{Matrix3, Matrix4, Rotation3, UnitQuaternion, Vector2, Vector3, Vector6};
use serde::{Deserialize, Serialize};
use thiserror::Error;

pub type Vec2 = Vector2<f64>;
pub type Vec3 = Vector3<f64>;
pub type Mat3 = Matrix3<f64>;

/// Below this angle two normals are treated as identical.
pub const EPS_PARALLEL: f64 = 1e-8;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum GeometryError {
    #[error("point is behind the camera (z = {z})")]
    BehindCamera { z: f64 },
    #[error("invalid depth {0}")]
    InvalidDepth(f64),
    #[error("rotation axis is not unit length (|axis| = {0})")]
    NonUnitAxis(f64),
    #[error("rotation angle {0} rad is too close to pi for a unique logarithm")]
    DegenerateRotation(f64),
    #[error("invalid intrinsics: {0}")]
    InvalidIntrinsics(String),
}

/// Pinhole intrinsics. Pixel coordinates address pixel centers, so pixel
/// `(i, j)` sits at `u = (i, j)`.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Intrinsics {
    pub fx: f64,
    pub fy: f64,
    pub cx: f64,
    pub cy: f64,
    pub width: usize,
    pub height: usize,
    /// Raw depth units per meter.
    pub depth_scale: f64,
}

impl Intrinsics {
    pub fn new(
        fx: f64,
        fy: f64,
        cx: f64,
        cy: f64,
        width: usize,
        height: usize,
        depth_scale: f64,
    ) -> Result<Self, GeometryError> {
        let k = Self { fx, fy, cx, cy, width, height, depth_scale };
        k.validate()?;
        Ok(k)
    }

    pub fn validate(&self) -> Result<(), GeometryError> {
        let bad = |m: &str| Err(GeometryError::InvalidIntrinsics(m.to_string()));
        if !(self.fx > 0.0 && self.fy > 0.0) {
            return bad("focal lengths must be positive");
        }
        if !(self.cx >= 0.0 && self.cx < self.width as f64) {
            return bad("cx outside image");
        }
        if !(self.cy >= 0.0 && self.cy < self.height as f64) {
            return bad("cy outside image");
        }
        if !(self.depth_scale > 0.0) {
            return bad("depth_scale must be positive");
        }
        Ok(())
    }

    /// Intrinsics of pyramid level `level`, where each level halves the
    /// image by 2x2 block reduction.
    pub fn at_level(&self, level: usize) -> Intrinsics {
        let mut k = *self;
        for _ in 0..level {
            k.fx *= 0.5;
            k.fy *= 0.5;
            k.cx = (k.cx - 0.5) * 0.5;
            k.cy = (k.cy - 0.5) * 0.5;
            k.width /= 2;
            k.height /= 2;
        }
        k
    }

    #[inline]
    pub fn contains(&self, u: &Vec2) -> bool {
        u.x >= 0.0 && u.y >= 0.0 && u.x < self.width as f64 && u.y < self.height as f64
    }

    /// Normalized ray direction `K^-1 [u, 1]` (z component is 1).
    #[inline]
    pub fn ray(&self, u: f64, v: f64) -> Vec3 {
        Vec3::new((u - self.cx) / self.fx, (v - self.cy) / self.fy, 1.0)
    }

    /// Nearest pixel index of a continuous image location, if inside the image.
    #[inline]
    pub fn pixel_index(&self, u: &Vec2) -> Option<(usize, usize)> {
        let x = u.x.round();
        let y = u.y.round();
        if x < 0.0 || y < 0.0 || x >= self.width as f64 || y >= self.height as f64 {
            return None;
        }
        Some((x as usize, y as usize))
    }
}

/// Rigid transform stored as unit quaternion + translation.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Pose {
    rotation: UnitQuaternion<f64>,
    translation: Vec3,
}

impl Default for Pose {
    fn default() -> Self {
        Self::identity()
    }
}

impl Pose {
    pub fn identity() -> Self {
        Self { rotation: UnitQuaternion::identity(), translation: Vec3::zeros() }
    }

    pub fn new(rotation: UnitQuaternion<f64>, translation: Vec3) -> Self {
        Self { rotation: renormalize(rotation), translation }
    }

    pub fn from_translation(t: Vec3) -> Self {
        Self::new(UnitQuaternion::identity(), t)
    }

    /// Builds a pose from a rotation matrix, which is re-orthonormalized.
    pub fn from_matrix(r: &Mat3, t: Vec3) -> Self {
        let rot = Rotation3::from_matrix(r);
        Self::new(UnitQuaternion::from_rotation_matrix(&rot), t)
    }

    #[inline]
    pub fn quaternion(&self) -> &UnitQuaternion<f64> {
        &self.rotation
    }

    #[inline]
    pub fn translation(&self) -> Vec3 {
        self.translation
    }

    #[inline]
    pub fn rotation_matrix(&self) -> Mat3 {
        self.rotation.to_rotation_matrix().into_inner()
    }

    pub fn to_matrix(&self) -> Matrix4<f64> {
        let mut m = Matrix4::identity();
        m.fixed_view_mut::<3, 3>(0, 0).copy_from(&self.rotation_matrix());
        m.fixed_view_mut::<3, 1>(0, 3).copy_from(&self.translation);
        m
    }

    pub fn inverse(&self) -> Self {
        let inv = self.rotation.inverse();
        Self { rotation: inv, translation: -(inv * self.translation) }
    }

    /// `self * other`.
    pub fn compose(&self, other: &Pose) -> Self {
        Self::new(
            self.rotation * other.rotation,
            self.rotation * other.translation + self.translation,
        )
    }

    #[inline]
    pub fn transform_point(&self, p: &Vec3) -> Vec3 {
        self.rotation * p + self.translation
    }

    #[inline]
    pub fn rotate(&self, v: &Vec3) -> Vec3 {
        self.rotation * v
    }

    /// Third column of the rotation: the camera viewing axis in world frame.
    pub fn z_axis(&self) -> Vec3 {
        self.rotation * Vec3::z()
    }

    /// Rotation angle of `self^-1 * other` in radians.
    pub fn angle_to(&self, other: &Pose) -> f64 {
        self.rotation.angle_to(&other.rotation)
    }

    pub fn distance_to(&self, other: &Pose) -> f64 {
        (self.translation - other.translation).norm()
    }
}

impl std::ops::Mul for Pose {
    type Output = Pose;
    fn mul(self, rhs: Pose) -> Pose {
        self.compose(&rhs)
    }
}

impl std::ops::Mul<&Pose> for &Pose {
    type Output = Pose;
    fn mul(self, rhs: &Pose) -> Pose {
        self.compose(rhs)
    }
}

fn renormalize(q: UnitQuaternion<f64>) -> UnitQuaternion<f64> {
    UnitQuaternion::new_normalize(q.into_inner())
}

/// se(3) coordinates, translation part first.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Twist(pub Vector6<f64>);

impl Twist {
    pub fn zero() -> Self {
        Twist(Vector6::zeros())
    }

    pub fn new(translation: Vec3, rotation: Vec3) -> Self {
        let mut v = Vector6::zeros();
        v.fixed_rows_mut::<3>(0).copy_from(&translation);
        v.fixed_rows_mut::<3>(3).copy_from(&rotation);
        Twist(v)
    }

    pub fn translation(&self) -> Vec3 {
        self.0.fixed_rows::<3>(0).into_owned()
    }

    pub fn rotation(&self) -> Vec3 {
        self.0.fixed_rows::<3>(3).into_owned()
    }

    pub fn norm(&self) -> f64 {
        self.0.norm()
    }
}

#[inline]
pub fn skew(v: &Vec3) -> Mat3 {
    Mat3::new(0.0, -v.z, v.y, v.z, 0.0, -v.x, -v.y, v.x, 0.0)
}

/// Left Jacobian `V(w)` of SO(3) that maps the translational twist part.
fn so3_left_jacobian(w: &Vec3) -> Mat3 {
    let theta2 = w.norm_squared();
    let wx = skew(w);
    let wx2 = wx * wx;
    let (a, b) = if theta2 < 1e-10 {
        (0.5 - theta2 / 24.0, 1.0 / 6.0 - theta2 / 120.0)
    } else {
        let theta = theta2.sqrt();
        ((1.0 - theta.cos()) / theta2, (theta - theta.sin()) / (theta2 * theta))
    };
    Mat3::identity() + wx * a + wx2 * b
}

fn so3_left_jacobian_inv(w: &Vec3) -> Mat3 {
    let theta2 = w.norm_squared();
    let wx = skew(w);
    let wx2 = wx * wx;
    let c = if theta2 < 1e-10 {
        1.0 / 12.0 + theta2 / 720.0
    } else {
        let theta = theta2.sqrt();
        (1.0 - theta * theta.sin() / (2.0 * (1.0 - theta.cos()))) / theta2
    };
    Mat3::identity() - wx * 0.5 + wx2 * c
}

pub fn exp_se3(xi: &Twist) -> Pose {
    let w = xi.rotation();
    let rotation = UnitQuaternion::from_scaled_axis(w);
    let translation = so3_left_jacobian(&w) * xi.translation();
    Pose::new(rotation, translation)
}

pub fn log_se3(pose: &Pose) -> Result<Twist, GeometryError> {
    let angle = pose.rotation.angle();
    if angle >= std::f64::consts::PI - 1e-6 {
        return Err(GeometryError::DegenerateRotation(angle));
    }
    let w = pose.rotation.scaled_axis();
    let rho = so3_left_jacobian_inv(&w) * pose.translation;
    Ok(Twist::new(rho, w))
}

pub fn project(k: &Intrinsics, x_cam: &Vec3) -> Result<Vec2, GeometryError> {
    if !(x_cam.z > 0.0) {
        return Err(GeometryError::BehindCamera { z: x_cam.z });
    }
    Ok(Vec2::new(k.fx * x_cam.x / x_cam.z + k.cx, k.fy * x_cam.y / x_cam.z + k.cy))
}

pub fn backproject(k: &Intrinsics, u: &Vec2, d: f64) -> Result<Vec3, GeometryError> {
    if !(d.is_finite() && d > 0.0) {
        return Err(GeometryError::InvalidDepth(d));
    }
    Ok(k.ray(u.x, u.y) * d)
}

/// Cross-product form of Rodrigues' formula.
pub fn rodrigues(axis: &Vec3, theta: f64) -> Result<Mat3, GeometryError> {
    let n = axis.norm();
    if (n - 1.0).abs() > 1e-9 {
        return Err(GeometryError::NonUnitAxis(n));
    }
    let (s, c) = theta.sin_cos();
    Ok(Mat3::identity() * c + axis * axis.transpose() * (1.0 - c) + skew(axis) * s)
}

/// Deterministic right-handed frame `[t1, t2, n]` around unit `n`: Gram-Schmidt
/// against the canonical axis of smallest `|n_i|`.
pub fn tangent_basis(n: &Vec3) -> Mat3 {
    let mut idx = 0;
    for i in 1..3 {
        if n[i].abs() < n[idx].abs() {
            idx = i;
        }
    }
    let mut e = Vec3::zeros();
    e[idx] = 1.0;
    let t1 = (e - n * n.dot(&e)).normalize();
    let t2 = n.cross(&t1);
    Mat3::from_columns(&[t1, t2, *n])
}

/// Rotation taking unit normal `n_g` onto unit normal `n_t` about the axis
/// `n_g x n_t`. Antipodal pairs rotate by pi about a deterministic axis
/// orthogonal to `n_g`.
pub fn rotation_between_normals(n_g: &Vec3, n_t: &Vec3) -> Mat3 {
    let cross = n_g.cross(n_t);
    let s = cross.norm();
    let theta = s.atan2(n_g.dot(n_t));
    if theta < EPS_PARALLEL {
        return Mat3::identity();
    }
    let (axis, theta) = if std::f64::consts::PI - theta < EPS_PARALLEL {
        (tangent_basis(n_g).column(0).into_owned(), std::f64::consts::PI)
    } else {
        (cross / s, theta)
    };
    rodrigues(&axis.normalize(), theta).expect("axis normalized above")
}
