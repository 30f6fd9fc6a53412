//! SE(3) rigid transforms and their tangent-space twists.
//!
//! Poses are stored as a rotation matrix plus a translation vector, which
//! keeps the registration Jacobians direct. All pose updates follow the right
//! perturbation convention: an update twist `v` is applied as
//! `T * exp(v)`, and prediction noise lives in the tangent space of the
//! composed motion.

use nalgebra::{Matrix3, Vector3, Vector6};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::cloud::GaussianPoint;

/// Squared rotation angle below which Taylor expansions replace the
/// closed-form trigonometric coefficients.
const SMALL_ANGLE_SQ: f64 = 1e-8;

#[derive(Debug, Error, PartialEq)]
pub enum GeometryError {
    #[error("non-finite component in twist")]
    NonFinite,
    #[error("rotation angle {angle} too close to pi for a well-conditioned log")]
    LogNearPi { angle: f64 },
}

/// Element of se(3): translational part `rho`, rotational part `phi`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Twist {
    pub rho: Vector3<f64>,
    pub phi: Vector3<f64>,
}

impl Twist {
    pub fn zero() -> Self {
        Twist {
            rho: Vector3::zeros(),
            phi: Vector3::zeros(),
        }
    }

    pub fn new(rho: Vector3<f64>, phi: Vector3<f64>) -> Self {
        Twist { rho, phi }
    }

    /// Layout: `[rho, phi]`.
    pub fn from_vector(v: &Vector6<f64>) -> Self {
        Twist {
            rho: Vector3::new(v[0], v[1], v[2]),
            phi: Vector3::new(v[3], v[4], v[5]),
        }
    }

    pub fn as_vector(&self) -> Vector6<f64> {
        Vector6::new(
            self.rho[0], self.rho[1], self.rho[2], self.phi[0], self.phi[1], self.phi[2],
        )
    }

    /// Mixed m/rad Euclidean norm of the 6-vector.
    pub fn norm(&self) -> f64 {
        (self.rho.norm_squared() + self.phi.norm_squared()).sqrt()
    }

    pub fn scale(&self, factor: f64) -> Twist {
        Twist {
            rho: self.rho * factor,
            phi: self.phi * factor,
        }
    }

    pub fn is_finite(&self) -> bool {
        self.rho.iter().chain(self.phi.iter()).all(|x| x.is_finite())
    }

    /// Closed-form exponential map onto SE(3).
    pub fn exp(&self) -> Result<Pose, GeometryError> {
        if !self.is_finite() {
            return Err(GeometryError::NonFinite);
        }
        let theta_sq = self.phi.norm_squared();
        let omega = skew(&self.phi);
        let omega_sq = omega * omega;
        // R = I + a*W + b*W^2,  V = I + c*W + d*W^2
        let (a, b, c, d) = if theta_sq < SMALL_ANGLE_SQ {
            (
                1.0 - theta_sq / 6.0,
                0.5 - theta_sq / 24.0,
                0.5 - theta_sq / 24.0,
                1.0 / 6.0 - theta_sq / 120.0,
            )
        } else {
            let theta = theta_sq.sqrt();
            (
                theta.sin() / theta,
                (1.0 - theta.cos()) / theta_sq,
                (1.0 - theta.cos()) / theta_sq,
                (theta - theta.sin()) / (theta * theta_sq),
            )
        };
        let rotation = Matrix3::identity() + omega * a + omega_sq * b;
        let v = Matrix3::identity() + omega * c + omega_sq * d;
        Ok(Pose {
            rotation,
            translation: v * self.rho,
        })
    }
}

/// Rigid transform in SE(3).
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Pose {
    rotation: Matrix3<f64>,
    translation: Vector3<f64>,
}

impl Default for Pose {
    fn default() -> Self {
        Pose::identity()
    }
}

impl Pose {
    pub fn identity() -> Self {
        Pose {
            rotation: Matrix3::identity(),
            translation: Vector3::zeros(),
        }
    }

    /// Build from parts. The rotation is taken as-is; callers are expected to
    /// provide an orthonormal matrix.
    pub fn from_parts(rotation: Matrix3<f64>, translation: Vector3<f64>) -> Self {
        Pose {
            rotation,
            translation,
        }
    }

    pub fn from_translation(translation: Vector3<f64>) -> Self {
        Pose {
            rotation: Matrix3::identity(),
            translation,
        }
    }

    /// Rotation about +z by `yaw` with the given translation.
    pub fn from_xyz_yaw(x: f64, y: f64, z: f64, yaw: f64) -> Self {
        let (s, c) = yaw.sin_cos();
        let rotation = Matrix3::new(c, -s, 0.0, s, c, 0.0, 0.0, 0.0, 1.0);
        Pose {
            rotation,
            translation: Vector3::new(x, y, z),
        }
    }

    pub fn rotation(&self) -> &Matrix3<f64> {
        &self.rotation
    }

    pub fn translation(&self) -> &Vector3<f64> {
        &self.translation
    }

    #[inline]
    pub fn compose(&self, other: &Pose) -> Pose {
        Pose {
            rotation: self.rotation * other.rotation,
            translation: self.rotation * other.translation + self.translation,
        }
    }

    #[inline]
    pub fn inverse(&self) -> Pose {
        let rot_t = self.rotation.transpose();
        Pose {
            rotation: rot_t,
            translation: -(rot_t * self.translation),
        }
    }

    #[inline]
    pub fn transform_point(&self, point: &Vector3<f64>) -> Vector3<f64> {
        self.rotation * point + self.translation
    }

    /// Transform a Gaussian point: the mean moves rigidly, the covariance is
    /// rotated as `R Sigma R^T`.
    pub fn transform_gaussian(&self, g: &GaussianPoint) -> GaussianPoint {
        GaussianPoint {
            mean: self.transform_point(&g.mean),
            covariance: self.rotation * g.covariance * self.rotation.transpose(),
        }
    }

    /// Rotation angle in [0, pi].
    pub fn rotation_angle(&self) -> f64 {
        let s = 0.5
            * Vector3::new(
                self.rotation[(2, 1)] - self.rotation[(1, 2)],
                self.rotation[(0, 2)] - self.rotation[(2, 0)],
                self.rotation[(1, 0)] - self.rotation[(0, 1)],
            )
            .norm();
        let c = 0.5 * (self.rotation.trace() - 1.0);
        s.atan2(c)
    }

    /// Logarithm map. Fails within 1e-6 of a half-turn, where the axis is
    /// ill-conditioned; the filter never takes single steps that large.
    pub fn log(&self) -> Result<Twist, GeometryError> {
        let axis_sin = 0.5
            * Vector3::new(
                self.rotation[(2, 1)] - self.rotation[(1, 2)],
                self.rotation[(0, 2)] - self.rotation[(2, 0)],
                self.rotation[(1, 0)] - self.rotation[(0, 1)],
            );
        let cos = 0.5 * (self.rotation.trace() - 1.0);
        let theta = axis_sin.norm().atan2(cos);
        if theta > std::f64::consts::PI - 1e-6 {
            return Err(GeometryError::LogNearPi { angle: theta });
        }
        let theta_sq = theta * theta;
        let phi = if theta_sq < SMALL_ANGLE_SQ {
            axis_sin * (1.0 + theta_sq / 6.0)
        } else {
            axis_sin * (theta / theta.sin())
        };
        let omega = skew(&phi);
        let omega_sq = omega * omega;
        // V^{-1} = I - W/2 + e*W^2 with e = (1 - (theta/2) cot(theta/2)) / theta^2
        let e = if theta_sq < SMALL_ANGLE_SQ {
            1.0 / 12.0 + theta_sq / 720.0
        } else {
            let half = 0.5 * theta;
            (1.0 - half * half.cos() / half.sin()) / theta_sq
        };
        let v_inv = Matrix3::identity() - omega * 0.5 + omega_sq * e;
        Ok(Twist {
            rho: v_inv * self.translation,
            phi,
        })
    }

    /// Project the rotation back onto SO(3) via polar decomposition. Called
    /// periodically after long composition chains.
    pub fn orthonormalize(&mut self) {
        let svd = self.rotation.svd(true, true);
        let u = svd.u.expect("svd requested u");
        let v_t = svd.v_t.expect("svd requested v_t");
        let mut r = u * v_t;
        if r.determinant() < 0.0 {
            let mut u_fixed = u;
            u_fixed.column_mut(2).neg_mut();
            r = u_fixed * v_t;
        }
        self.rotation = r;
    }

    /// Unit quaternion `[x, y, z, w]`, the order used by TUM trajectory files.
    pub fn quaternion_xyzw(&self) -> [f64; 4] {
        let r = &self.rotation;
        let trace = r.trace();
        let (x, y, z, w);
        if trace > 0.0 {
            let s = (trace + 1.0).sqrt() * 2.0;
            w = 0.25 * s;
            x = (r[(2, 1)] - r[(1, 2)]) / s;
            y = (r[(0, 2)] - r[(2, 0)]) / s;
            z = (r[(1, 0)] - r[(0, 1)]) / s;
        } else if r[(0, 0)] > r[(1, 1)] && r[(0, 0)] > r[(2, 2)] {
            let s = (1.0 + r[(0, 0)] - r[(1, 1)] - r[(2, 2)]).sqrt() * 2.0;
            w = (r[(2, 1)] - r[(1, 2)]) / s;
            x = 0.25 * s;
            y = (r[(0, 1)] + r[(1, 0)]) / s;
            z = (r[(0, 2)] + r[(2, 0)]) / s;
        } else if r[(1, 1)] > r[(2, 2)] {
            let s = (1.0 + r[(1, 1)] - r[(0, 0)] - r[(2, 2)]).sqrt() * 2.0;
            w = (r[(0, 2)] - r[(2, 0)]) / s;
            x = (r[(0, 1)] + r[(1, 0)]) / s;
            y = 0.25 * s;
            z = (r[(1, 2)] + r[(2, 1)]) / s;
        } else {
            let s = (1.0 + r[(2, 2)] - r[(0, 0)] - r[(1, 1)]).sqrt() * 2.0;
            w = (r[(1, 0)] - r[(0, 1)]) / s;
            x = (r[(0, 2)] + r[(2, 0)]) / s;
            y = (r[(1, 2)] + r[(2, 1)]) / s;
            z = 0.25 * s;
        }
        [x, y, z, w]
    }

    pub fn from_quaternion_xyzw(q: [f64; 4], translation: Vector3<f64>) -> Self {
        let [x, y, z, w] = q;
        let n = (x * x + y * y + z * z + w * w).sqrt();
        let (x, y, z, w) = (x / n, y / n, z / n, w / n);
        let rotation = Matrix3::new(
            1.0 - 2.0 * (y * y + z * z),
            2.0 * (x * y - w * z),
            2.0 * (x * z + w * y),
            2.0 * (x * y + w * z),
            1.0 - 2.0 * (x * x + z * z),
            2.0 * (y * z - w * x),
            2.0 * (x * z - w * y),
            2.0 * (y * z + w * x),
            1.0 - 2.0 * (x * x + y * y),
        );
        Pose {
            rotation,
            translation,
        }
    }
}

/// Serde-friendly pose encoding used in JSON reports and snapshots.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct PoseRecord {
    pub translation: [f64; 3],
    /// Unit quaternion `[x, y, z, w]`.
    pub quaternion: [f64; 4],
}

impl From<&Pose> for PoseRecord {
    fn from(pose: &Pose) -> Self {
        let t = pose.translation();
        PoseRecord {
            translation: [t[0], t[1], t[2]],
            quaternion: pose.quaternion_xyzw(),
        }
    }
}

impl From<&PoseRecord> for Pose {
    fn from(rec: &PoseRecord) -> Self {
        Pose::from_quaternion_xyzw(rec.quaternion, Vector3::from(rec.translation))
    }
}

/// Skew-symmetric matrix of `v`, i.e. `skew(v) * x = v.cross(x)`.
#[inline]
pub fn skew(v: &Vector3<f64>) -> Matrix3<f64> {
    Matrix3::new(0.0, -v[2], v[1], v[2], 0.0, -v[0], -v[1], v[0], 0.0)
}
