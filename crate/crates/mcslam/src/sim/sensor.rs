//! Scan simulation over analytic worlds and the confined-space heuristic.

use nalgebra::Vector3;
use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use super::{SimError, World};
use crate::rng::{stream, StreamPurpose};
use crate::se3::Pose;

/// Range sensor description. Rays are laid out on a fixed azimuth/elevation
/// grid covering the field of view; `backward_crop` drops rays pointing into
/// the sensor-frame -x half space, imitating a restricted field of view.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default)]
pub struct SensorModel {
    pub ray_count: usize,
    pub max_range: f64,
    /// Horizontal field of view in radians, centered on +x.
    pub fov_horizontal: f64,
    /// Vertical field of view in radians, centered on the horizon.
    pub fov_vertical: f64,
    pub range_noise_sigma: f64,
    pub backward_crop: bool,
}

impl Default for SensorModel {
    fn default() -> Self {
        SensorModel {
            ray_count: 2000,
            max_range: 30.0,
            fov_horizontal: std::f64::consts::TAU,
            fov_vertical: 70.0_f64.to_radians(),
            range_noise_sigma: 0.01,
            backward_crop: false,
        }
    }
}

impl SensorModel {
    pub fn validate(&self) -> Result<(), SimError> {
        if self.ray_count == 0 {
            return Err(SimError::InvalidParams("ray_count must be at least 1".into()));
        }
        if !(self.max_range > 0.0) {
            return Err(SimError::InvalidParams("max_range must be positive".into()));
        }
        if !(self.fov_horizontal > 0.0 && self.fov_vertical > 0.0) {
            return Err(SimError::InvalidParams("fields of view must be positive".into()));
        }
        if !(self.range_noise_sigma >= 0.0) {
            return Err(SimError::InvalidParams("range noise must be non-negative".into()));
        }
        Ok(())
    }
}

/// Sensor-frame unit ray directions on a deterministic grid. The grid holds
/// roughly `ray_count` rays with matching azimuth/elevation density.
pub fn ray_directions(model: &SensorModel) -> Vec<Vector3<f64>> {
    let aspect = model.fov_vertical / model.fov_horizontal;
    let rows = ((model.ray_count as f64 * aspect).sqrt().round() as usize).max(1);
    let cols = (model.ray_count + rows - 1) / rows;
    let mut dirs = Vec::with_capacity(rows * cols);
    for row in 0..rows {
        let el = -0.5 * model.fov_vertical
            + (row as f64 + 0.5) / rows as f64 * model.fov_vertical;
        let (sin_el, cos_el) = el.sin_cos();
        for col in 0..cols {
            let az = -0.5 * model.fov_horizontal
                + (col as f64 + 0.5) / cols as f64 * model.fov_horizontal;
            let (sin_az, cos_az) = az.sin_cos();
            dirs.push(Vector3::new(cos_el * cos_az, cos_el * sin_az, sin_el));
        }
    }
    dirs
}

/// Cast the sensor's rays from `true_pose` and return first-hit points in the
/// sensor frame with Gaussian range noise. Fails with `EmptyScan` when no ray
/// hits anything; callers skip such frames.
pub fn simulate_scan(
    world: &World,
    true_pose: &Pose,
    model: &SensorModel,
    seed: u64,
    frame: u64,
) -> Result<Vec<Vector3<f64>>, SimError> {
    let mut rng = stream(seed, StreamPurpose::ScanNoise, frame, 0);
    let origin = *true_pose.translation();
    let rotation = true_pose.rotation();
    let mut points = Vec::with_capacity(model.ray_count);
    for dir in ray_directions(model) {
        if model.backward_crop && dir[0] < 0.0 {
            continue;
        }
        let world_dir = rotation * dir;
        if let Some(range) = world.ray_cast(&origin, &world_dir, model.max_range) {
            let noisy = if model.range_noise_sigma > 0.0 {
                range + model.range_noise_sigma * rng.sample::<f64, _>(StandardNormal)
            } else {
                range
            };
            if noisy > 1e-3 {
                points.push(dir * noisy);
            }
        }
    }
    if points.is_empty() {
        return Err(SimError::EmptyScan);
    }
    Ok(points)
}

/// Confined-space signature: true when the median distance of the scan
/// points from the sensor origin falls below the threshold. Drives the
/// vertical-dispersion mode of the filter's prediction step.
pub fn detect_elevator(points: &[Vector3<f64>], threshold: f64) -> Result<bool, SimError> {
    if points.is_empty() {
        return Err(SimError::InvalidParams("empty scan has no median distance".into()));
    }
    let mut ranges: Vec<f64> = points.iter().map(|p| p.norm()).collect();
    let mid = ranges.len() / 2;
    let (_, median, _) = ranges.select_nth_unstable_by(mid, |a, b| a.partial_cmp(b).unwrap());
    Ok(*median < threshold)
}
