//! Distribution-to-distribution registration likelihood, its Gauss-Newton
//! linearization, and the damped solve that yields particle update twists.
//!
//! For a scan point with mean `mu` and covariance `Sigma`, matched against a
//! map aggregate `(mu', Sigma')` under the relative pose `T`, the residual
//! and information are
//!
//! ```text
//! e = mu' - T mu,   Omega = (Sigma' + R Sigma R^T)^-1
//! ```
//!
//! and the log-likelihood is `-sum e^T Omega e` over matched points.
//! Unmatched points are skipped: they contribute nothing to the sum nor to
//! the normal equations. The Jacobian is taken with respect to a right
//! perturbation of `T`, and the right-hand side is oriented so that solving
//! `(H + lambda I) psi = b` and applying `T * exp(psi)` increases the
//! log-likelihood.

use nalgebra::{Matrix3x6, Matrix6, Vector3, Vector6};
use thiserror::Error;

use crate::cloud::{Scan, VoxelMap};
use crate::particle::{KeyframeStore, Particle};
use crate::se3::{Pose, Twist};

#[derive(Debug, Error, PartialEq)]
pub enum GicpError {
    #[error("fused covariance at point {point_index} is not invertible")]
    CovarianceInversion { point_index: usize },
    #[error("normal equations are singular even after damping")]
    SingularSystem,
}

/// Accumulated registration objective: log-likelihood, normal equations and
/// the matched-point count.
#[derive(Debug, Clone, PartialEq)]
pub struct LinearizedObjective {
    /// `-sum e^T Omega e`; zero when nothing matched.
    pub log_likelihood: f64,
    /// Gauss-Newton Hessian `sum J^T Omega J`, symmetric PSD.
    pub h: Matrix6<f64>,
    /// Right-hand side oriented for ascent: `(H + lambda I) psi = b` yields a
    /// twist that locally increases the log-likelihood.
    pub b: Vector6<f64>,
    pub matched_count: usize,
}

impl LinearizedObjective {
    pub fn zero() -> Self {
        LinearizedObjective {
            log_likelihood: 0.0,
            h: Matrix6::zeros(),
            b: Vector6::zeros(),
            matched_count: 0,
        }
    }

    pub fn merge(&mut self, other: &LinearizedObjective) {
        self.log_likelihood += other.log_likelihood;
        self.h += other.h;
        self.b += other.b;
        self.matched_count += other.matched_count;
    }
}

/// Jacobian of the residual `e = mu' - T exp(eps) mu` with respect to the
/// right-perturbation twist `eps = [rho, phi]`, evaluated at `eps = 0`:
/// `[-R | R [mu]_x]`.
pub fn residual_jacobian(rel_pose: &Pose, mean: &Vector3<f64>) -> Matrix3x6<f64> {
    let r = rel_pose.rotation();
    let rm = r * crate::se3::skew(mean);
    let mut j = Matrix3x6::zeros();
    j.fixed_view_mut::<3, 3>(0, 0).copy_from(&(-r));
    j.fixed_view_mut::<3, 3>(0, 3).copy_from(&rm);
    j
}

/// Registration of a scan against one keyframe voxel map at the relative
/// pose `rel_pose`. Points without a correspondence are skipped. The normal
/// equations are accumulated in scan order, so the result is bitwise
/// reproducible regardless of threading outside this call.
///
/// The per-point algebra is written out in scalars: this loop runs once per
/// particle per neighbor keyframe per frame and dominates the filter's cost.
pub fn pairwise_log_likelihood(
    scan: &Scan,
    keyframe_map: &VoxelMap,
    rel_pose: &Pose,
    with_linearization: bool,
) -> Result<LinearizedObjective, GicpError> {
    let r = rel_pose.rotation();
    let (r00, r01, r02) = (r[(0, 0)], r[(0, 1)], r[(0, 2)]);
    let (r10, r11, r12) = (r[(1, 0)], r[(1, 1)], r[(1, 2)]);
    let (r20, r21, r22) = (r[(2, 0)], r[(2, 1)], r[(2, 2)]);
    let t = rel_pose.translation();
    let (t0, t1, t2) = (t[0], t[1], t[2]);

    let mut log_likelihood = 0.0;
    let mut matched_count = 0usize;
    // Hessian blocks: translation-translation (upper triangle), full
    // translation-rotation, rotation-rotation (upper triangle).
    let mut htt = [0.0f64; 6];
    let mut htr = [0.0f64; 9];
    let mut hrr = [0.0f64; 6];
    let mut bv = [0.0f64; 6];

    for (index, point) in scan.points.iter().enumerate() {
        let m = &point.mean;
        let (mx, my, mz) = (m[0], m[1], m[2]);
        let qx = r00 * mx + r01 * my + r02 * mz + t0;
        let qy = r10 * mx + r11 * my + r12 * mz + t1;
        let qz = r20 * mx + r21 * my + r22 * mz + t2;
        let Some(corr) = keyframe_map.find_correspondence(&Vector3::new(qx, qy, qz)) else {
            continue;
        };

        // Fused covariance Sigma' + R Sigma R^T, upper triangle.
        let s = &point.covariance;
        let (s00, s01, s02) = (s[(0, 0)], s[(0, 1)], s[(0, 2)]);
        let (s11, s12, s22) = (s[(1, 1)], s[(1, 2)], s[(2, 2)]);
        let a00 = r00 * s00 + r01 * s01 + r02 * s02;
        let a01 = r00 * s01 + r01 * s11 + r02 * s12;
        let a02 = r00 * s02 + r01 * s12 + r02 * s22;
        let a10 = r10 * s00 + r11 * s01 + r12 * s02;
        let a11 = r10 * s01 + r11 * s11 + r12 * s12;
        let a12 = r10 * s02 + r11 * s12 + r12 * s22;
        let a20 = r20 * s00 + r21 * s01 + r22 * s02;
        let a21 = r20 * s01 + r21 * s11 + r22 * s12;
        let a22 = r20 * s02 + r21 * s12 + r22 * s22;
        let p = &corr.covariance;
        let f00 = p[(0, 0)] + (a00 * r00 + a01 * r01 + a02 * r02);
        let f01 = p[(0, 1)] + (a00 * r10 + a01 * r11 + a02 * r12);
        let f02 = p[(0, 2)] + (a00 * r20 + a01 * r21 + a02 * r22);
        let f11 = p[(1, 1)] + (a10 * r10 + a11 * r11 + a12 * r12);
        let f12 = p[(1, 2)] + (a10 * r20 + a11 * r21 + a12 * r22);
        let f22 = p[(2, 2)] + (a20 * r20 + a21 * r21 + a22 * r22);

        // Information matrix by symmetric adjugate inversion.
        let co00 = f11 * f22 - f12 * f12;
        let co01 = f02 * f12 - f01 * f22;
        let co02 = f01 * f12 - f02 * f11;
        let det = f00 * co00 + f01 * co01 + f02 * co02;
        if !(det > 1e-300) {
            return Err(GicpError::CovarianceInversion { point_index: index });
        }
        let inv_det = 1.0 / det;
        let o00 = co00 * inv_det;
        let o01 = co01 * inv_det;
        let o02 = co02 * inv_det;
        let o11 = (f00 * f22 - f02 * f02) * inv_det;
        let o12 = (f01 * f02 - f00 * f12) * inv_det;
        let o22 = (f00 * f11 - f01 * f01) * inv_det;

        let ex = corr.mean[0] - qx;
        let ey = corr.mean[1] - qy;
        let ez = corr.mean[2] - qz;
        let we0 = o00 * ex + o01 * ey + o02 * ez;
        let we1 = o01 * ex + o11 * ey + o12 * ez;
        let we2 = o02 * ex + o12 * ey + o22 * ez;
        log_likelihood -= ex * we0 + ey * we1 + ez * we2;
        matched_count += 1;

        if with_linearization {
            // J = [-R | B] with B = R [m]_x; accumulate H += J^T O J and
            // b += [R^T (O e); -B^T (O e)].
            let b00 = r01 * mz - r02 * my;
            let b10 = r11 * mz - r12 * my;
            let b20 = r21 * mz - r22 * my;
            let b01 = r02 * mx - r00 * mz;
            let b11 = r12 * mx - r10 * mz;
            let b21 = r22 * mx - r20 * mz;
            let b02 = r00 * my - r01 * mx;
            let b12 = r10 * my - r11 * mx;
            let b22 = r20 * my - r21 * mx;

            // G = O R, K = O B.
            let g00 = o00 * r00 + o01 * r10 + o02 * r20;
            let g01 = o00 * r01 + o01 * r11 + o02 * r21;
            let g02 = o00 * r02 + o01 * r12 + o02 * r22;
            let g10 = o01 * r00 + o11 * r10 + o12 * r20;
            let g11 = o01 * r01 + o11 * r11 + o12 * r21;
            let g12 = o01 * r02 + o11 * r12 + o12 * r22;
            let g20 = o02 * r00 + o12 * r10 + o22 * r20;
            let g21 = o02 * r01 + o12 * r11 + o22 * r21;
            let g22 = o02 * r02 + o12 * r12 + o22 * r22;
            let k00 = o00 * b00 + o01 * b10 + o02 * b20;
            let k01 = o00 * b01 + o01 * b11 + o02 * b21;
            let k02 = o00 * b02 + o01 * b12 + o02 * b22;
            let k10 = o01 * b00 + o11 * b10 + o12 * b20;
            let k11 = o01 * b01 + o11 * b11 + o12 * b21;
            let k12 = o01 * b02 + o11 * b12 + o12 * b22;
            let k20 = o02 * b00 + o12 * b10 + o22 * b20;
            let k21 = o02 * b01 + o12 * b11 + o22 * b21;
            let k22 = o02 * b02 + o12 * b12 + o22 * b22;

            // Translation-translation block R^T G (symmetric).
            htt[0] += r00 * g00 + r10 * g10 + r20 * g20;
            htt[1] += r00 * g01 + r10 * g11 + r20 * g21;
            htt[2] += r00 * g02 + r10 * g12 + r20 * g22;
            htt[3] += r01 * g01 + r11 * g11 + r21 * g21;
            htt[4] += r01 * g02 + r11 * g12 + r21 * g22;
            htt[5] += r02 * g02 + r12 * g12 + r22 * g22;
            // Translation-rotation block -(R^T K), full.
            htr[0] -= r00 * k00 + r10 * k10 + r20 * k20;
            htr[1] -= r00 * k01 + r10 * k11 + r20 * k21;
            htr[2] -= r00 * k02 + r10 * k12 + r20 * k22;
            htr[3] -= r01 * k00 + r11 * k10 + r21 * k20;
            htr[4] -= r01 * k01 + r11 * k11 + r21 * k21;
            htr[5] -= r01 * k02 + r11 * k12 + r21 * k22;
            htr[6] -= r02 * k00 + r12 * k10 + r22 * k20;
            htr[7] -= r02 * k01 + r12 * k11 + r22 * k21;
            htr[8] -= r02 * k02 + r12 * k12 + r22 * k22;
            // Rotation-rotation block B^T K (symmetric).
            hrr[0] += b00 * k00 + b10 * k10 + b20 * k20;
            hrr[1] += b00 * k01 + b10 * k11 + b20 * k21;
            hrr[2] += b00 * k02 + b10 * k12 + b20 * k22;
            hrr[3] += b01 * k01 + b11 * k11 + b21 * k21;
            hrr[4] += b01 * k02 + b11 * k12 + b21 * k22;
            hrr[5] += b02 * k02 + b12 * k12 + b22 * k22;

            bv[0] += r00 * we0 + r10 * we1 + r20 * we2;
            bv[1] += r01 * we0 + r11 * we1 + r21 * we2;
            bv[2] += r02 * we0 + r12 * we1 + r22 * we2;
            bv[3] -= b00 * we0 + b10 * we1 + b20 * we2;
            bv[4] -= b01 * we0 + b11 * we1 + b21 * we2;
            bv[5] -= b02 * we0 + b12 * we1 + b22 * we2;
        }
    }

    let mut h = Matrix6::zeros();
    if with_linearization {
        let tt = [
            [htt[0], htt[1], htt[2]],
            [htt[1], htt[3], htt[4]],
            [htt[2], htt[4], htt[5]],
        ];
        let rr = [
            [hrr[0], hrr[1], hrr[2]],
            [hrr[1], hrr[3], hrr[4]],
            [hrr[2], hrr[4], hrr[5]],
        ];
        for i in 0..3 {
            for j in 0..3 {
                h[(i, j)] = tt[i][j];
                h[(i + 3, j + 3)] = rr[i][j];
                h[(i, j + 3)] = htr[3 * i + j];
                h[(j + 3, i)] = htr[3 * i + j];
            }
        }
    }
    Ok(LinearizedObjective {
        log_likelihood,
        h,
        b: Vector6::from_column_slice(&bv),
        matched_count,
    })
}

/// Likelihood of a scan under a particle's state: the sum over its neighbor
/// keyframes of the pairwise registration log-likelihood at the relative
/// pose `T_k^-1 T_t`.
pub fn particle_log_likelihood(
    scan: &Scan,
    particle: &Particle,
    store: &KeyframeStore,
    neighbors: &[usize],
) -> Result<f64, GicpError> {
    let mut total = 0.0;
    for &k in neighbors {
        let rel = particle.keyframe_poses[k]
            .inverse()
            .compose(&particle.current_pose);
        let obj = pairwise_log_likelihood(scan, &store.get(k).voxel_map, &rel, false)?;
        total += obj.log_likelihood;
    }
    Ok(total)
}

/// Solve the damped normal equations `(H + damping I) psi = b`.
pub fn gauss_newton_step(
    obj: &LinearizedObjective,
    damping: f64,
) -> Result<Twist, GicpError> {
    if obj.b == Vector6::zeros() {
        return Ok(Twist::zero());
    }
    let damped = obj.h + Matrix6::identity() * damping;
    let chol = damped.cholesky().ok_or(GicpError::SingularSystem)?;
    let psi = chol.solve(&obj.b);
    let twist = Twist::from_vector(&psi);
    if !twist.is_finite() {
        return Err(GicpError::SingularSystem);
    }
    Ok(twist)
}

/// Cap the mixed m/rad norm of an update twist to guard against divergent
/// jumps from poor linearizations.
pub fn clamp_step(psi: Twist, max_norm: f64) -> Twist {
    let n = psi.norm();
    if n > max_norm && n > 0.0 {
        psi.scale(max_norm / n)
    } else {
        psi
    }
}
