//! Trajectory alignment and absolute trajectory error.

use nalgebra::{Matrix3, Vector3};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::se3::{Pose, PoseRecord};

/// Maximum timestamp gap for nearest-neighbor association, in seconds.
pub const ASSOCIATION_GAP: f64 = 0.05;

#[derive(Debug, Error, PartialEq)]
pub enum EvalError {
    #[error("need at least 3 associated pairs, found {0}")]
    TooFewPairs(usize),
    #[error("trajectory timestamps must be strictly increasing")]
    NonMonotonic,
}

/// Timestamped pose sequence.
#[derive(Debug, Clone, Default)]
pub struct Trajectory {
    pub samples: Vec<(f64, Pose)>,
}

impl Trajectory {
    pub fn new(samples: Vec<(f64, Pose)>) -> Result<Self, EvalError> {
        if samples.windows(2).any(|w| w[1].0 <= w[0].0) {
            return Err(EvalError::NonMonotonic);
        }
        Ok(Trajectory { samples })
    }

    pub fn push(&mut self, timestamp: f64, pose: Pose) {
        self.samples.push((timestamp, pose));
    }

    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }
}

/// Nearest-timestamp association with a hard gap, returning translation
/// pairs (est, gt).
fn associate(est: &Trajectory, gt: &Trajectory) -> Vec<(Vector3<f64>, Vector3<f64>)> {
    let mut pairs = Vec::new();
    for &(t, est_pose) in &est.samples {
        let idx = gt.samples.partition_point(|(ts, _)| *ts < t);
        let mut best: Option<(f64, usize)> = None;
        for candidate in [idx.wrapping_sub(1), idx] {
            if let Some((ts, _)) = gt.samples.get(candidate) {
                let gap = (ts - t).abs();
                if best.map_or(true, |(g, _)| gap < g) {
                    best = Some((gap, candidate));
                }
            }
        }
        if let Some((gap, i)) = best {
            if gap <= ASSOCIATION_GAP {
                pairs.push((*est_pose.translation(), *gt.samples[i].1.translation()));
            }
        }
    }
    pairs
}

/// Rigid SE(3) alignment (no scale) of the estimated trajectory onto the
/// ground truth, minimizing the sum of squared translation residuals with
/// the closed-form orthogonal-Procrustes solution.
pub fn align(est: &Trajectory, gt: &Trajectory) -> Result<Pose, EvalError> {
    let pairs = associate(est, gt);
    if pairs.len() < 3 {
        return Err(EvalError::TooFewPairs(pairs.len()));
    }
    let n = pairs.len() as f64;
    let centroid_est: Vector3<f64> = pairs.iter().map(|(e, _)| e).sum::<Vector3<f64>>() / n;
    let centroid_gt: Vector3<f64> = pairs.iter().map(|(_, g)| g).sum::<Vector3<f64>>() / n;
    let mut cross = Matrix3::zeros();
    for (e, g) in &pairs {
        cross += (e - centroid_est) * (g - centroid_gt).transpose();
    }
    let svd = cross.svd(true, true);
    let u = svd.u.expect("svd with u");
    let v_t = svd.v_t.expect("svd with v_t");
    let mut rotation = v_t.transpose() * u.transpose();
    if rotation.determinant() < 0.0 {
        let mut v = v_t.transpose();
        v.column_mut(2).neg_mut();
        rotation = v * u.transpose();
    }
    let translation = centroid_gt - rotation * centroid_est;
    Ok(Pose::from_parts(rotation, translation))
}

/// RMSE of translation residuals after rigid alignment.
pub fn ate_rmse(est: &Trajectory, gt: &Trajectory) -> Result<f64, EvalError> {
    let alignment = align(est, gt)?;
    let pairs = associate(est, gt);
    let sum_sq: f64 = pairs
        .iter()
        .map(|(e, g)| (alignment.transform_point(e) - g).norm_squared())
        .sum();
    Ok((sum_sq / pairs.len() as f64).sqrt())
}

/// JSON evaluation report.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct AteReport {
    pub ate_rmse: f64,
    pub pair_count: usize,
    pub alignment: PoseRecord,
}

pub fn evaluate(est: &Trajectory, gt: &Trajectory) -> Result<AteReport, EvalError> {
    let alignment = align(est, gt)?;
    let pairs = associate(est, gt);
    let sum_sq: f64 = pairs
        .iter()
        .map(|(e, g)| (alignment.transform_point(e) - g).norm_squared())
        .sum();
    Ok(AteReport {
        ate_rmse: (sum_sq / pairs.len() as f64).sqrt(),
        pair_count: pairs.len(),
        alignment: PoseRecord::from(&alignment),
    })
}
