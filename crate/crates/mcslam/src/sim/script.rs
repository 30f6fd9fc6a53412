//! Trajectory scripts: per-frame ground-truth waypoints, elevator segments
//! and the noisy odometry provider.

use nalgebra::{Matrix6, Vector6};
use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use super::SimError;
use crate::filter::MotionDelta;
use crate::rng::{stream, StreamPurpose};
use crate::se3::{Pose, PoseRecord, Twist};

/// One ground-truth sample. Waypoints are dense: one per frame.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ScriptWaypoint {
    pub timestamp: f64,
    pub pose: PoseRecord,
}

/// Time window during which the sensor rides the elevator: ground truth
/// moves vertically by `floor_delta` while odometry emits identity deltas
/// with inflated covariance.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ElevatorSegment {
    pub start_time: f64,
    pub end_time: f64,
    pub floor_delta: f64,
}

impl ElevatorSegment {
    /// Whether the odometry step ending at time `t` lies inside the ride.
    /// Boundaries carry a small slack so frame-rate arithmetic stays stable.
    pub fn contains(&self, t: f64) -> bool {
        t > self.start_time + 1e-9 && t <= self.end_time + 1e-9
    }
}

/// Ground truth plus the odometry noise model.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct TrajectoryScript {
    pub waypoints: Vec<ScriptWaypoint>,
    /// Per-step 6x6 covariance of the odometry noise twist.
    pub odom_noise: Matrix6<f64>,
    pub elevator_segments: Vec<ElevatorSegment>,
    /// Covariance inflation applied during elevator segments, where the
    /// odometry cannot observe the motion.
    pub elevator_cov_scale: f64,
}

impl TrajectoryScript {
    pub fn validate(&self) -> Result<(), SimError> {
        if self.waypoints.len() < 2 {
            return Err(SimError::InvalidParams("script needs at least 2 waypoints".into()));
        }
        for pair in self.waypoints.windows(2) {
            if pair[1].timestamp <= pair[0].timestamp {
                return Err(SimError::InvalidParams(format!(
                    "timestamps must be strictly increasing ({} then {})",
                    pair[0].timestamp, pair[1].timestamp
                )));
            }
        }
        Ok(())
    }

    pub fn poses(&self) -> Vec<(f64, Pose)> {
        self.waypoints
            .iter()
            .map(|w| (w.timestamp, Pose::from(&w.pose)))
            .collect()
    }
}

/// Script building blocks compiled into dense waypoints.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(tag = "leg", rename_all = "snake_case")]
pub enum ScriptLeg {
    /// Straight-line walk to a target at fixed height, yaw facing the
    /// motion direction.
    MoveTo { x: f64, y: f64, frames: usize },
    /// Stand still.
    Dwell { frames: usize },
    /// Vertical ride by `delta_z`; becomes an elevator segment.
    Elevator { delta_z: f64, frames: usize },
}

/// Compile legs into per-frame waypoints at `dt` seconds per frame, starting
/// from `(x, y, eye_height)` with yaw 0.
pub fn compile_legs(
    start: (f64, f64, f64),
    legs: &[ScriptLeg],
    dt: f64,
) -> (Vec<ScriptWaypoint>, Vec<ElevatorSegment>) {
    let mut waypoints: Vec<ScriptWaypoint> = Vec::new();
    let mut segments = Vec::new();
    let (mut x, mut y, mut z) = start;
    let mut yaw = 0.0;
    let mut frame = 0usize;
    let push = |frame: usize, x: f64, y: f64, z: f64, yaw: f64| ScriptWaypoint {
        timestamp: frame as f64 * dt,
        pose: PoseRecord::from(&Pose::from_xyz_yaw(x, y, z, yaw)),
    };
    waypoints.push(push(frame, x, y, z, yaw));
    for leg in legs {
        match leg {
            ScriptLeg::MoveTo { x: tx, y: ty, frames } => {
                let frames = (*frames).max(1);
                let (dx, dy) = (tx - x, ty - y);
                if dx.abs() > 1e-12 || dy.abs() > 1e-12 {
                    yaw = dy.atan2(dx);
                }
                let (sx, sy) = (x, y);
                for i in 1..=frames {
                    let f = i as f64 / frames as f64;
                    frame += 1;
                    waypoints.push(push(frame, sx + dx * f, sy + dy * f, z, yaw));
                }
                x = *tx;
                y = *ty;
            }
            ScriptLeg::Dwell { frames } => {
                for _ in 0..*frames {
                    frame += 1;
                    waypoints.push(push(frame, x, y, z, yaw));
                }
            }
            ScriptLeg::Elevator { delta_z, frames } => {
                let frames = (*frames).max(1);
                let start_time = frame as f64 * dt;
                let z0 = z;
                for i in 1..=frames {
                    let f = i as f64 / frames as f64;
                    frame += 1;
                    waypoints.push(push(frame, x, y, z0 + delta_z * f, yaw));
                }
                z = z0 + delta_z;
                segments.push(ElevatorSegment {
                    start_time,
                    end_time: frame as f64 * dt,
                    floor_delta: *delta_z,
                });
            }
        }
    }
    (waypoints, segments)
}

/// Per-step noisy relative motions. Outside elevator segments the delta is
/// the ground-truth relative pose right-composed with a sampled noise twist;
/// inside them the odometry fails and emits identity with inflated
/// covariance.
pub fn simulate_odometry(script: &TrajectoryScript, seed: u64) -> Result<Vec<MotionDelta>, SimError> {
    script.validate()?;
    let poses = script.poses();
    let noisy = script.odom_noise != Matrix6::zeros();
    let factor = if noisy {
        Some(
            script
                .odom_noise
                .cholesky()
                .map(|c| c.l())
                .ok_or_else(|| SimError::InvalidParams("odometry covariance must be PSD".into()))
                .or_else(|_| psd_sqrt6(&script.odom_noise))?,
        )
    } else {
        None
    };
    let mut deltas = Vec::with_capacity(poses.len() - 1);
    for step in 1..poses.len() {
        let (t, pose) = poses[step];
        let in_elevator = script.elevator_segments.iter().any(|seg| seg.contains(t));
        if in_elevator {
            deltas.push(MotionDelta {
                delta: Pose::identity(),
                covariance: script.odom_noise * script.elevator_cov_scale,
            });
            continue;
        }
        let truth = poses[step - 1].1.inverse().compose(&pose);
        let delta = if let Some(l) = &factor {
            let mut rng = stream(seed, StreamPurpose::OdomNoise, step as u64, 0);
            let z = Vector6::from_fn(|_, _| rng.sample::<f64, _>(StandardNormal));
            let noise = Twist::from_vector(&(l * z));
            truth.compose(&noise.exp().expect("finite odometry noise"))
        } else {
            truth
        };
        deltas.push(MotionDelta {
            delta,
            covariance: script.odom_noise,
        });
    }
    Ok(deltas)
}

fn psd_sqrt6(cov: &Matrix6<f64>) -> Result<Matrix6<f64>, SimError> {
    let eig = cov.symmetric_eigen();
    let mut factor = eig.eigenvectors;
    for i in 0..6 {
        let lambda = eig.eigenvalues[i];
        if lambda < -1e-9 {
            return Err(SimError::InvalidParams("odometry covariance must be PSD".into()));
        }
        factor.column_mut(i).scale_mut(lambda.max(0.0).sqrt());
    }
    Ok(factor)
}

/// Diagonal odometry covariance from translation and rotation sigmas.
pub fn diagonal_noise(sigma_translation: f64, sigma_rotation: f64) -> Matrix6<f64> {
    let mut m = Matrix6::zeros();
    for i in 0..3 {
        m[(i, i)] = sigma_translation * sigma_translation;
        m[(i + 3, i + 3)] = sigma_rotation * sigma_rotation;
    }
    m
}
