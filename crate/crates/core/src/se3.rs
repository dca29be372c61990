//! Rigid-body geometry on SE(3).
//!
//! Poses are stored as a canonical unit quaternion (w >= 0) plus a
//! translation. Tangent vectors ([`Twist`]) are body-frame increments, so a
//! perturbation is applied on the right: `g * exp(xi)`.

use nalgebra::{Matrix3, Vector3};
use rand::Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};
use std::f64::consts::PI;
use std::fmt;
use std::ops::Mul;
use thiserror::Error;

pub type Vec3 = Vector3<f64>;

/// Below this angle the quaternion half-angle coefficient uses its series.
const QUAT_SERIES_ANGLE: f64 = 1e-8;
/// Below this angle the SO(3) Jacobian coefficients use their series; the
/// closed forms lose digits to cancellation well above 1e-8.
const JACOBIAN_SERIES_ANGLE: f64 = 1e-3;
/// The logarithm is refused within this margin of a half turn.
pub const NEAR_PI_MARGIN: f64 = 1e-6;
const RENORM_TOL: f64 = 1e-14;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum GeometryError {
    #[error("rotation angle {angle} is within {NEAR_PI_MARGIN} of pi; logarithm is ill-conditioned")]
    NearPiRotation { angle: f64 },
    #[error("pose distance weight gamma must be non-negative, got {0}")]
    NegativeGamma(f64),
    #[error("time step must be positive, got {0}")]
    NonPositiveDt(f64),
    #[error("noise scale must be non-negative")]
    NegativeSigma,
    #[error("quaternion has zero or non-finite norm")]
    DegenerateQuaternion,
}

/// Unit quaternion `w + xi + yj + zk` (Hamilton convention).
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct UnitQuaternion {
    pub w: f64,
    pub x: f64,
    pub y: f64,
    pub z: f64,
}

impl UnitQuaternion {
    pub const IDENTITY: Self = Self {
        w: 1.0,
        x: 0.0,
        y: 0.0,
        z: 0.0,
    };

    /// Normalizes and canonicalizes the given components.
    pub fn new(w: f64, x: f64, y: f64, z: f64) -> Result<Self, GeometryError> {
        let n = (w * w + x * x + y * y + z * z).sqrt();
        if !n.is_finite() || n == 0.0 {
            return Err(GeometryError::DegenerateQuaternion);
        }
        Ok(Self {
            w: w / n,
            x: x / n,
            y: y / n,
            z: z / n,
        }
        .canonical())
    }

    pub fn from_axis_angle(axis: &Vec3, angle: f64) -> Self {
        exp_so3(&(axis.normalize() * angle))
    }

    /// Rotation taking the standard basis onto the columns of `m`.
    /// `m` must be a proper rotation matrix.
    pub fn from_rotation_matrix(m: &Matrix3<f64>) -> Self {
        // Shepperd's method: pivot on the largest diagonal combination.
        let trace = m[(0, 0)] + m[(1, 1)] + m[(2, 2)];
        let (w, x, y, z) = if trace > m[(0, 0)].max(m[(1, 1)]).max(m[(2, 2)]) {
            let s = (1.0 + trace).sqrt() * 2.0;
            (
                0.25 * s,
                (m[(2, 1)] - m[(1, 2)]) / s,
                (m[(0, 2)] - m[(2, 0)]) / s,
                (m[(1, 0)] - m[(0, 1)]) / s,
            )
        } else if m[(0, 0)] >= m[(1, 1)] && m[(0, 0)] >= m[(2, 2)] {
            let s = (1.0 + m[(0, 0)] - m[(1, 1)] - m[(2, 2)]).sqrt() * 2.0;
            (
                (m[(2, 1)] - m[(1, 2)]) / s,
                0.25 * s,
                (m[(0, 1)] + m[(1, 0)]) / s,
                (m[(0, 2)] + m[(2, 0)]) / s,
            )
        } else if m[(1, 1)] >= m[(2, 2)] {
            let s = (1.0 - m[(0, 0)] + m[(1, 1)] - m[(2, 2)]).sqrt() * 2.0;
            (
                (m[(0, 2)] - m[(2, 0)]) / s,
                (m[(0, 1)] + m[(1, 0)]) / s,
                0.25 * s,
                (m[(1, 2)] + m[(2, 1)]) / s,
            )
        } else {
            let s = (1.0 - m[(0, 0)] - m[(1, 1)] + m[(2, 2)]).sqrt() * 2.0;
            (
                (m[(1, 0)] - m[(0, 1)]) / s,
                (m[(0, 2)] + m[(2, 0)]) / s,
                (m[(1, 2)] + m[(2, 1)]) / s,
                0.25 * s,
            )
        };
        Self::new(w, x, y, z).unwrap_or(Self::IDENTITY)
    }

    /// Same rotation with `w >= 0`. At `w == 0` the first non-zero vector
    /// component is made positive so the form stays unique.
    pub fn canonical(self) -> Self {
        let flip = if self.w != 0.0 {
            self.w < 0.0
        } else if self.x != 0.0 {
            self.x < 0.0
        } else if self.y != 0.0 {
            self.y < 0.0
        } else {
            self.z < 0.0
        };
        if flip {
            Self {
                w: -self.w,
                x: -self.x,
                y: -self.y,
                z: -self.z,
            }
        } else {
            self
        }
    }

    pub fn conjugate(&self) -> Self {
        Self {
            w: self.w,
            x: -self.x,
            y: -self.y,
            z: -self.z,
        }
    }

    pub fn inverse(&self) -> Self {
        self.conjugate().canonical()
    }

    pub fn vector(&self) -> Vec3 {
        Vec3::new(self.x, self.y, self.z)
    }

    pub fn as_array(&self) -> [f64; 4] {
        [self.w, self.x, self.y, self.z]
    }

    pub fn norm(&self) -> f64 {
        (self.w * self.w + self.x * self.x + self.y * self.y + self.z * self.z).sqrt()
    }

    pub fn dot(&self, other: &Self) -> f64 {
        self.w * other.w + self.x * other.x + self.y * other.y + self.z * other.z
    }

    /// Raw Hamilton product, without canonicalization.
    pub fn hamilton(&self, o: &Self) -> Self {
        Self {
            w: self.w * o.w - self.x * o.x - self.y * o.y - self.z * o.z,
            x: self.w * o.x + self.x * o.w + self.y * o.z - self.z * o.y,
            y: self.w * o.y - self.x * o.z + self.y * o.w + self.z * o.x,
            z: self.w * o.z + self.x * o.y - self.y * o.x + self.z * o.w,
        }
    }

    pub fn rotate(&self, v: &Vec3) -> Vec3 {
        let u = self.vector();
        let t = 2.0 * u.cross(v);
        v + self.w * t + u.cross(&t)
    }

    pub fn to_rotation_matrix(&self) -> Matrix3<f64> {
        let (w, x, y, z) = (self.w, self.x, self.y, self.z);
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

    /// Rotation angle in `[0, pi]`.
    pub fn angle(&self) -> f64 {
        2.0 * self.vector().norm().atan2(self.w.abs())
    }

    fn renormalized(self) -> Self {
        let n = self.norm();
        // Products of unit quaternions are left alone until rounding drift
        // becomes measurable, so exact products (e.g. with the identity)
        // stay exact.
        if (n - 1.0).abs() <= RENORM_TOL {
            return self;
        }
        Self {
            w: self.w / n,
            x: self.x / n,
            y: self.y / n,
            z: self.z / n,
        }
    }
}

impl Mul for UnitQuaternion {
    type Output = UnitQuaternion;

    fn mul(self, rhs: Self) -> Self {
        self.hamilton(&rhs).renormalized().canonical()
    }
}

/// Lie-algebra element of SE(3): rotational part `omega` (radians) and
/// translational part `v`.
#[derive(Clone, Copy, Debug, PartialEq, Default, Serialize, Deserialize)]
pub struct Twist {
    pub omega: Vec3,
    pub v: Vec3,
}

impl Twist {
    pub fn new(omega: Vec3, v: Vec3) -> Self {
        Self { omega, v }
    }

    pub fn zero() -> Self {
        Self::default()
    }

    pub fn is_finite(&self) -> bool {
        self.omega.iter().chain(self.v.iter()).all(|c| c.is_finite())
    }

    pub fn scale(&self, s: f64) -> Self {
        Self {
            omega: self.omega * s,
            v: self.v * s,
        }
    }

    pub fn as_array(&self) -> [f64; 6] {
        [self.omega.x, self.omega.y, self.omega.z, self.v.x, self.v.y, self.v.z]
    }
}

impl std::ops::Add for Twist {
    type Output = Twist;
    fn add(self, rhs: Self) -> Self {
        Self {
            omega: self.omega + rhs.omega,
            v: self.v + rhs.v,
        }
    }
}

/// Rigid transform `p -> R p + t`.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(into = "PoseRepr", try_from = "PoseRepr")]
pub struct Pose {
    pub rotation: UnitQuaternion,
    pub translation: Vec3,
}

/// JSON layout `{"q": [w,x,y,z], "t": [x,y,z]}`.
#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct PoseRepr {
    q: [f64; 4],
    t: [f64; 3],
}

impl From<Pose> for PoseRepr {
    fn from(p: Pose) -> Self {
        let q = p.rotation.canonical();
        Self {
            q: q.as_array(),
            t: [p.translation.x, p.translation.y, p.translation.z],
        }
    }
}

impl TryFrom<PoseRepr> for Pose {
    type Error = GeometryError;
    fn try_from(r: PoseRepr) -> Result<Self, Self::Error> {
        let q = UnitQuaternion::new(r.q[0], r.q[1], r.q[2], r.q[3])?;
        Ok(Pose::new(q, Vec3::new(r.t[0], r.t[1], r.t[2])))
    }
}

impl Default for Pose {
    fn default() -> Self {
        Self::identity()
    }
}

impl fmt::Display for Pose {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let q = self.rotation;
        let t = self.translation;
        write!(
            f,
            "Pose(q: [{:.4}, {:.4}, {:.4}, {:.4}], t: [{:.4}, {:.4}, {:.4}])",
            q.w, q.x, q.y, q.z, t.x, t.y, t.z
        )
    }
}

impl Pose {
    pub fn new(rotation: UnitQuaternion, translation: Vec3) -> Self {
        Self {
            rotation: rotation.canonical(),
            translation,
        }
    }

    pub fn identity() -> Self {
        Self {
            rotation: UnitQuaternion::IDENTITY,
            translation: Vec3::zeros(),
        }
    }

    pub fn from_translation(t: Vec3) -> Self {
        Self::new(UnitQuaternion::IDENTITY, t)
    }

    pub fn from_rotation(q: UnitQuaternion) -> Self {
        Self::new(q, Vec3::zeros())
    }

    pub fn inverse(&self) -> Self {
        let q_inv = self.rotation.inverse();
        Self::new(q_inv, -q_inv.rotate(&self.translation))
    }

    pub fn transform_point(&self, p: &Vec3) -> Vec3 {
        self.rotation.rotate(p) + self.translation
    }

    pub fn transform_vector(&self, v: &Vec3) -> Vec3 {
        self.rotation.rotate(v)
    }

    pub fn rotation_matrix(&self) -> Matrix3<f64> {
        self.rotation.to_rotation_matrix()
    }
}

impl Mul for Pose {
    type Output = Pose;
    fn mul(self, rhs: Pose) -> Pose {
        compose(&self, &rhs)
    }
}

impl Mul for &Pose {
    type Output = Pose;
    fn mul(self, rhs: &Pose) -> Pose {
        compose(self, rhs)
    }
}

/// Group product `g1 * g2`.
pub fn compose(g1: &Pose, g2: &Pose) -> Pose {
    Pose::new(
        g1.rotation * g2.rotation,
        g1.rotation.rotate(&g2.translation) + g1.translation,
    )
}

pub fn hat(w: &Vec3) -> Matrix3<f64> {
    Matrix3::new(0.0, -w.z, w.y, w.z, 0.0, -w.x, -w.y, w.x, 0.0)
}

pub fn exp_so3(omega: &Vec3) -> UnitQuaternion {
    let theta = omega.norm();
    let half = 0.5 * theta;
    let (w, k) = if theta < QUAT_SERIES_ANGLE {
        let t2 = theta * theta;
        (1.0 - t2 / 8.0 + t2 * t2 / 384.0, 0.5 - t2 / 48.0 + t2 * t2 / 3840.0)
    } else {
        (half.cos(), half.sin() / theta)
    };
    UnitQuaternion {
        w,
        x: k * omega.x,
        y: k * omega.y,
        z: k * omega.z,
    }
    .renormalized()
    .canonical()
}

/// Rotation vector of a quaternion on the principal branch.
pub fn log_so3(q: &UnitQuaternion) -> Result<Vec3, GeometryError> {
    let q = q.canonical();
    let u = q.vector();
    let n = u.norm();
    let theta = 2.0 * n.atan2(q.w);
    if PI - theta < NEAR_PI_MARGIN {
        return Err(GeometryError::NearPiRotation { angle: theta });
    }
    // theta / sin(theta / 2), written against n = sin(theta / 2).
    let k = if theta < QUAT_SERIES_ANGLE {
        let r = n / q.w;
        (2.0 / q.w) * (1.0 - r * r / 3.0)
    } else {
        theta / n
    };
    Ok(u * k)
}

/// Coefficients `(1 - cos t)/t^2` and `(t - sin t)/t^3` of the SO(3) left Jacobian.
fn left_jacobian_coeffs(theta: f64) -> (f64, f64) {
    if theta < JACOBIAN_SERIES_ANGLE {
        let t2 = theta * theta;
        (
            0.5 - t2 / 24.0 + t2 * t2 / 720.0,
            1.0 / 6.0 - t2 / 120.0 + t2 * t2 / 5040.0,
        )
    } else {
        let s = (0.5 * theta).sin();
        (
            2.0 * s * s / (theta * theta),
            (theta - theta.sin()) / (theta * theta * theta),
        )
    }
}

pub fn left_jacobian_so3(omega: &Vec3) -> Matrix3<f64> {
    let theta = omega.norm();
    let (a, b) = left_jacobian_coeffs(theta);
    let w = hat(omega);
    Matrix3::identity() + a * w + b * w * w
}

fn left_jacobian_inv_so3(omega: &Vec3) -> Matrix3<f64> {
    let theta = omega.norm();
    let c = if theta < JACOBIAN_SERIES_ANGLE {
        let t2 = theta * theta;
        1.0 / 12.0 + t2 / 720.0 + t2 * t2 / 30240.0
    } else {
        let half = 0.5 * theta;
        (1.0 - half / half.tan()) / (theta * theta)
    };
    let w = hat(omega);
    Matrix3::identity() - 0.5 * w + c * w * w
}

/// Group exponential of a body-frame twist.
pub fn exp_se3(xi: &Twist) -> Pose {
    let q = exp_so3(&xi.omega);
    let t = left_jacobian_so3(&xi.omega) * xi.v;
    Pose::new(q, t)
}

/// Principal-branch logarithm; fails within [`NEAR_PI_MARGIN`] of a half turn.
pub fn log_se3(g: &Pose) -> Result<Twist, GeometryError> {
    let omega = log_so3(&g.rotation)?;
    let v = left_jacobian_inv_so3(&omega) * g.translation;
    Ok(Twist { omega, v })
}

/// Geodesic angle between two rotations, in `[0, pi]`, identifying `q` and `-q`.
///
/// Equal to `2 acos(|real(q1 * conj(q2))|)`; evaluated through `atan2` so that
/// nearly equal rotations do not lose half their digits to `acos` near 1.
pub fn angular_distance(q1: &UnitQuaternion, q2: &UnitQuaternion) -> f64 {
    if q1.canonical() == q2.canonical() {
        return 0.0;
    }
    let r = q1.hamilton(&q2.conjugate());
    let real = r.w.abs().min(1.0);
    2.0 * r.vector().norm().atan2(real)
}

pub fn translational_distance(p1: &Vec3, p2: &Vec3) -> f64 {
    (p1 - p2).norm()
}

/// Weighting of the combined pose distance.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PoseMetric {
    pub gamma: f64,
    /// Use the squared translation norm instead of the plain norm.
    pub squared_translation: bool,
}

impl Default for PoseMetric {
    fn default() -> Self {
        Self {
            gamma: 1.0,
            squared_translation: false,
        }
    }
}

impl PoseMetric {
    pub fn new(gamma: f64) -> Result<Self, GeometryError> {
        if gamma.is_nan() || gamma < 0.0 {
            return Err(GeometryError::NegativeGamma(gamma));
        }
        Ok(Self {
            gamma,
            squared_translation: false,
        })
    }

    pub fn distance(&self, g1: &Pose, g2: &Pose) -> f64 {
        let d = translational_distance(&g1.translation, &g2.translation);
        let d = if self.squared_translation { d * d } else { d };
        d + self.gamma * angular_distance(&g1.rotation, &g2.rotation)
    }
}

/// `D_g = |p1 - p2| + gamma * theta(q1, q2)`.
pub fn pose_distance(g1: &Pose, g2: &Pose, gamma: f64) -> Result<f64, GeometryError> {
    Ok(PoseMetric::new(gamma)?.distance(g1, g2))
}

/// Wiener increment on se(3): `omega ~ N(0, sigma_rot^2 dt I)`,
/// `v ~ N(0, sigma_trans^2 dt I)`.
pub fn sample_wiener<R: Rng + ?Sized>(
    dt: f64,
    sigma_rot: f64,
    sigma_trans: f64,
    rng: &mut R,
) -> Result<Twist, GeometryError> {
    if dt.is_nan() || dt <= 0.0 {
        return Err(GeometryError::NonPositiveDt(dt));
    }
    if !(sigma_rot >= 0.0 && sigma_trans >= 0.0) {
        return Err(GeometryError::NegativeSigma);
    }
    let sd = dt.sqrt();
    // Draws are always taken so the stream position does not depend on sigma.
    let normal = Normal::new(0.0, 1.0).expect("unit normal");
    let mut draw = |s: f64| {
        let z: f64 = normal.sample(rng);
        z * s * sd
    };
    let omega = Vec3::new(draw(sigma_rot), draw(sigma_rot), draw(sigma_rot));
    let v = Vec3::new(draw(sigma_trans), draw(sigma_trans), draw(sigma_trans));
    Ok(Twist { omega, v })
}

/// Rotation whose columns are the given right-handed orthonormal axes.
pub fn rotation_from_axes(x: &Vec3, y: &Vec3, z: &Vec3) -> UnitQuaternion {
    let m = Matrix3::from_columns(&[*x, *y, *z]);
    UnitQuaternion::from_rotation_matrix(&m)
}
