//! Rigid transforms in SE(3) and their tangent-space machinery.
//!
//! Tangent vectors are ordered `(rho, phi)`: translational part first, then
//! rotational. Perturbations used by the optimizers are applied on the right,
//! `T ⊕ exp(δ)`.

use std::ops::Mul;

use nalgebra::{Matrix3, Matrix4, Matrix6, Rotation3, Unit, UnitQuaternion, Vector3, Vector6};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Largest rotation angle accepted by [`Pose3::log`].
pub const LOG_ANGLE_LIMIT: f64 = std::f64::consts::PI - 1e-6;

const SMALL_ANGLE: f64 = 0.02;

/// A rigid transform: rotation followed by translation.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Pose3 {
    rotation: UnitQuaternion<f64>,
    translation: Vector3<f64>,
}

/// Element of the SE(3) Lie algebra.
#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct Twist6 {
    /// Translational part, meters.
    pub rho: Vector3<f64>,
    /// Rotational part, radians.
    pub phi: Vector3<f64>,
}

impl Twist6 {
    pub fn new(rho: Vector3<f64>, phi: Vector3<f64>) -> Self {
        Self { rho, phi }
    }

    pub fn zero() -> Self {
        Self::default()
    }

    pub fn from_vector(v: &Vector6<f64>) -> Self {
        Self {
            rho: Vector3::new(v[0], v[1], v[2]),
            phi: Vector3::new(v[3], v[4], v[5]),
        }
    }

    pub fn to_vector(&self) -> Vector6<f64> {
        Vector6::new(
            self.rho.x, self.rho.y, self.rho.z, self.phi.x, self.phi.y, self.phi.z,
        )
    }
}

impl Default for Pose3 {
    fn default() -> Self {
        Self::identity()
    }
}

impl Pose3 {
    pub fn identity() -> Self {
        Self {
            rotation: UnitQuaternion::identity(),
            translation: Vector3::zeros(),
        }
    }

    pub fn new(rotation: UnitQuaternion<f64>, translation: Vector3<f64>) -> Self {
        Self {
            rotation: renormalize(rotation),
            translation,
        }
    }

    pub fn from_translation(translation: Vector3<f64>) -> Self {
        Self::new(UnitQuaternion::identity(), translation)
    }

    /// Pure rotation of `yaw` radians about +z, followed by `translation`.
    pub fn from_yaw(yaw: f64, translation: Vector3<f64>) -> Self {
        // Built component-wise so that the x/y quaternion parts are exactly zero.
        let half = 0.5 * yaw;
        let q = nalgebra::Quaternion::new(half.cos(), 0.0, 0.0, half.sin());
        Self {
            rotation: UnitQuaternion::new_unchecked(q),
            translation,
        }
    }

    /// Builds a pose from a 3×3 rotation matrix; the matrix is re-orthonormalized.
    pub fn from_rotation_matrix(rotation: &Matrix3<f64>, translation: Vector3<f64>) -> Self {
        let rot = Rotation3::from_matrix(rotation);
        Self::new(UnitQuaternion::from_rotation_matrix(&rot), translation)
    }

    pub fn rotation(&self) -> &UnitQuaternion<f64> {
        &self.rotation
    }

    pub fn translation(&self) -> &Vector3<f64> {
        &self.translation
    }

    pub fn rotation_matrix(&self) -> Matrix3<f64> {
        *self.rotation.to_rotation_matrix().matrix()
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
        Self::from_rotation_matrix(&r, t)
    }

    /// `self ⊕ other`.
    pub fn compose(&self, other: &Pose3) -> Pose3 {
        Pose3 {
            rotation: renormalize(self.rotation * other.rotation),
            translation: self.translation + self.rotation * other.translation,
        }
    }

    pub fn inverse(&self) -> Pose3 {
        let inv = self.rotation.inverse();
        Pose3 {
            rotation: inv,
            translation: -(inv * self.translation),
        }
    }

    /// `self ⊖ base = base⁻¹ ⊕ self`: the transform taking frame `base` to frame `self`.
    ///
    /// `base.compose(&self.relative(base)) == self`.
    pub fn relative(&self, base: &Pose3) -> Pose3 {
        base.inverse().compose(self)
    }

    pub fn transform_point(&self, p: &Vector3<f64>) -> Vector3<f64> {
        self.rotation * p + self.translation
    }

    pub fn rotate_vector(&self, v: &Vector3<f64>) -> Vector3<f64> {
        self.rotation * v
    }

    /// Rotation angle in radians, in `[0, π]`.
    pub fn angle(&self) -> f64 {
        self.rotation.angle()
    }

    /// Heading about +z extracted from the rotation matrix.
    pub fn yaw(&self) -> f64 {
        let r = self.rotation_matrix();
        r[(1, 0)].atan2(r[(0, 0)])
    }

    pub fn exp(t: &Twist6) -> Pose3 {
        let rotation = so3_exp(&t.phi);
        let translation = so3_left_jacobian(&t.phi) * t.rho;
        Pose3 {
            rotation,
            translation,
        }
    }

    pub fn log(&self) -> Result<Twist6> {
        let phi = so3_log(&self.rotation)?;
        let rho = so3_left_jacobian_inv(&phi) * self.translation;
        Ok(Twist6 { rho, phi })
    }

    /// Adjoint in `(rho, phi)` ordering: `T ⊕ exp(ξ) = exp(Ad_T ξ) ⊕ T`.
    pub fn adjoint(&self) -> Matrix6<f64> {
        let r = self.rotation_matrix();
        let mut ad = Matrix6::zeros();
        ad.fixed_view_mut::<3, 3>(0, 0).copy_from(&r);
        ad.fixed_view_mut::<3, 3>(3, 3).copy_from(&r);
        ad.fixed_view_mut::<3, 3>(0, 3)
            .copy_from(&(hat(&self.translation) * r));
        ad
    }

    /// Returns `self ⊕ exp(delta)`.
    pub fn retract(&self, delta: &Vector6<f64>) -> Pose3 {
        self.compose(&Pose3::exp(&Twist6::from_vector(delta)))
    }

    /// Largest absolute deviation between corresponding 4×4 matrix entries.
    pub fn max_abs_diff(&self, other: &Pose3) -> f64 {
        (self.to_matrix() - other.to_matrix()).abs().max()
    }
}

impl Mul for Pose3 {
    type Output = Pose3;

    fn mul(self, rhs: Pose3) -> Pose3 {
        self.compose(&rhs)
    }
}

impl<'a> Mul<&'a Pose3> for &'a Pose3 {
    type Output = Pose3;

    fn mul(self, rhs: &Pose3) -> Pose3 {
        self.compose(rhs)
    }
}

fn renormalize(q: UnitQuaternion<f64>) -> UnitQuaternion<f64> {
    let mut raw = q.into_inner();
    // canonical hemisphere keeps serialized output stable
    if raw.w < 0.0 {
        raw = -raw;
    }
    UnitQuaternion::new_normalize(raw)
}

pub fn hat(v: &Vector3<f64>) -> Matrix3<f64> {
    Matrix3::new(0.0, -v.z, v.y, v.z, 0.0, -v.x, -v.y, v.x, 0.0)
}

pub fn so3_exp(phi: &Vector3<f64>) -> UnitQuaternion<f64> {
    let theta = phi.norm();
    if theta < 1e-12 {
        return UnitQuaternion::new_normalize(nalgebra::Quaternion::new(
            1.0,
            0.5 * phi.x,
            0.5 * phi.y,
            0.5 * phi.z,
        ));
    }
    UnitQuaternion::from_axis_angle(&Unit::new_unchecked(phi / theta), theta)
}

pub fn so3_log(q: &UnitQuaternion<f64>) -> Result<Vector3<f64>> {
    let mut raw = *q.quaternion();
    if raw.w < 0.0 {
        raw = -raw;
    }
    let v = raw.imag();
    let n = v.norm();
    let w = raw.w;
    let theta = 2.0 * n.atan2(w);
    if theta > LOG_ANGLE_LIMIT {
        return Err(Error::AngleNearPi);
    }
    let scale = if n < 1e-10 {
        2.0 / w * (1.0 - n * n / (3.0 * w * w))
    } else {
        theta / n
    };
    Ok(v * scale)
}

/// Left Jacobian of SO(3).
pub fn so3_left_jacobian(phi: &Vector3<f64>) -> Matrix3<f64> {
    let theta2 = phi.norm_squared();
    let theta = theta2.sqrt();
    let k = hat(phi);
    let (a, b) = if theta < SMALL_ANGLE {
        (
            0.5 - theta2 / 24.0 + theta2 * theta2 / 720.0,
            1.0 / 6.0 - theta2 / 120.0 + theta2 * theta2 / 5040.0,
        )
    } else {
        (
            (1.0 - theta.cos()) / theta2,
            (theta - theta.sin()) / (theta2 * theta),
        )
    };
    Matrix3::identity() + k * a + k * k * b
}

pub fn so3_left_jacobian_inv(phi: &Vector3<f64>) -> Matrix3<f64> {
    let theta2 = phi.norm_squared();
    let theta = theta2.sqrt();
    let k = hat(phi);
    let c = if theta < SMALL_ANGLE {
        1.0 / 12.0 + theta2 / 720.0 + theta2 * theta2 / 30240.0
    } else {
        1.0 / theta2 - (1.0 + theta.cos()) / (2.0 * theta * theta.sin())
    };
    Matrix3::identity() - k * 0.5 + k * k * c
}

/// The coupling block of the SE(3) left Jacobian.
fn se3_q(rho: &Vector3<f64>, phi: &Vector3<f64>) -> Matrix3<f64> {
    let theta2 = phi.norm_squared();
    let theta = theta2.sqrt();
    let p = hat(phi);
    let r = hat(rho);
    let (c1, c2, c3) = if theta < SMALL_ANGLE {
        (
            1.0 / 6.0 - theta2 / 120.0 + theta2 * theta2 / 5040.0,
            1.0 / 24.0 - theta2 / 720.0 + theta2 * theta2 / 40320.0,
            1.0 / 120.0 - theta2 / 2520.0 + theta2 * theta2 / 181440.0,
        )
    } else {
        let (s, c) = theta.sin_cos();
        let t3 = theta2 * theta;
        let t4 = theta2 * theta2;
        let t5 = t4 * theta;
        let c1 = (theta - s) / t3;
        let c2 = -(1.0 - theta2 / 2.0 - c) / t4;
        let c3 = -0.5 * ((1.0 - theta2 / 2.0 - c) / t4 - 3.0 * (theta - s - t3 / 6.0) / t5);
        (c1, c2, c3)
    };
    let pr = p * r;
    let rp = r * p;
    let prp = pr * p;
    let pp = p * p;
    r * 0.5 + (pr + rp + prp) * c1 + (pp * r + rp * p - prp * 3.0) * c2 + (prp * p + pp * rp) * c3
}

/// Inverse of the SE(3) left Jacobian.
pub fn se3_left_jacobian_inv(xi: &Twist6) -> Matrix6<f64> {
    let jinv = so3_left_jacobian_inv(&xi.phi);
    let q = se3_q(&xi.rho, &xi.phi);
    let mut out = Matrix6::zeros();
    out.fixed_view_mut::<3, 3>(0, 0).copy_from(&jinv);
    out.fixed_view_mut::<3, 3>(3, 3).copy_from(&jinv);
    out.fixed_view_mut::<3, 3>(0, 3)
        .copy_from(&(-jinv * q * jinv));
    out
}

/// Inverse of the SE(3) right Jacobian, `J_r⁻¹(ξ) = J_l⁻¹(−ξ)`.
pub fn se3_right_jacobian_inv(xi: &Twist6) -> Matrix6<f64> {
    se3_left_jacobian_inv(&Twist6::new(-xi.rho, -xi.phi))
}
