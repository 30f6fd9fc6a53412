//! Particles and shared keyframe storage.
//!
//! Keyframe point clouds and voxel maps live once in a global, append-only
//! store. Each particle carries only its current pose, one pose per keyframe,
//! and a log-weight, so the particle side of memory scales with the keyframe
//! count and not with cloud sizes.

use nalgebra::Vector3;
use serde::{Deserialize, Serialize};

use crate::cloud::{GaussianPoint, Scan, VoxelMap};
use crate::se3::{Pose, PoseRecord};

/// A past sensor frame promoted to the map: its cloud, a voxel map over the
/// cloud, and the odometry pose at insertion. Immutable once stored.
#[derive(Debug, Clone)]
pub struct Keyframe {
    pub id: usize,
    pub cloud: Scan,
    pub voxel_map: VoxelMap,
    pub odom_pose: Pose,
    pub timestamp: f64,
}

/// Append-only keyframe list plus the full odometry trajectory, kept with a
/// running arc length for path-length queries.
#[derive(Debug, Clone, Default)]
pub struct KeyframeStore {
    keyframes: Vec<Keyframe>,
    odom_trajectory: Vec<(f64, Pose)>,
    cumulative_distance: Vec<f64>,
}

impl KeyframeStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.keyframes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.keyframes.is_empty()
    }

    pub fn get(&self, id: usize) -> &Keyframe {
        &self.keyframes[id]
    }

    pub fn keyframes(&self) -> &[Keyframe] {
        &self.keyframes
    }

    pub fn last(&self) -> Option<&Keyframe> {
        self.keyframes.last()
    }

    /// Append a keyframe; ids stay dense and ascending.
    pub fn push(&mut self, cloud: Scan, voxel_map: VoxelMap, odom_pose: Pose, timestamp: f64) -> usize {
        let id = self.keyframes.len();
        self.keyframes.push(Keyframe {
            id,
            cloud,
            voxel_map,
            odom_pose,
            timestamp,
        });
        id
    }

    /// Record one odometry sample. Timestamps must arrive in order.
    pub fn record_odometry(&mut self, timestamp: f64, pose: Pose) {
        let dist = match self.odom_trajectory.last() {
            Some((_, prev)) => {
                self.cumulative_distance.last().unwrap()
                    + (pose.translation() - prev.translation()).norm()
            }
            None => 0.0,
        };
        self.odom_trajectory.push((timestamp, pose));
        self.cumulative_distance.push(dist);
    }

    pub fn odom_trajectory(&self) -> &[(f64, Pose)] {
        &self.odom_trajectory
    }

    /// Cumulative odometry arc length at the last sample with timestamp <= t,
    /// or at the first sample if t precedes the trajectory.
    pub(crate) fn arc_length_at(&self, t: f64) -> Option<f64> {
        if self.odom_trajectory.is_empty() {
            return None;
        }
        let idx = self
            .odom_trajectory
            .partition_point(|(ts, _)| *ts <= t);
        if idx == 0 {
            None
        } else {
            Some(self.cumulative_distance[idx - 1])
        }
    }

    pub(crate) fn time_range(&self) -> Option<(f64, f64)> {
        match (self.odom_trajectory.first(), self.odom_trajectory.last()) {
            (Some((a, _)), Some((b, _))) => Some((*a, *b)),
            _ => None,
        }
    }
}

/// One hypothesis: the current sensor pose, a pose per keyframe, and the
/// weight bookkeeping. Weights live in log space; the cumulative
/// log-likelihood realizes the recursive likelihood product without
/// underflow.
#[derive(Debug, Clone)]
pub struct Particle {
    pub current_pose: Pose,
    pub keyframe_poses: Vec<Pose>,
    pub log_weight: f64,
    pub cum_log_likelihood: f64,
}

impl Particle {
    pub fn new(pose: Pose, log_weight: f64) -> Self {
        Particle {
            current_pose: pose,
            keyframe_poses: Vec::new(),
            log_weight,
            cum_log_likelihood: 0.0,
        }
    }

    /// Dead particles are flagged with a -inf log-weight until respawned.
    pub fn is_dead(&self) -> bool {
        self.log_weight == f64::NEG_INFINITY
    }

    /// Bytes attributable to this particle: the struct itself plus its pose
    /// vector. Keyframe clouds are shared and deliberately not counted.
    pub fn footprint_bytes(&self) -> usize {
        std::mem::size_of::<Particle>()
            + self.keyframe_poses.len() * std::mem::size_of::<Pose>()
    }
}

/// Fixed-capacity particle population.
#[derive(Debug, Clone)]
pub struct ParticleSet {
    particles: Vec<Particle>,
    pub rng_seed: u64,
}

impl ParticleSet {
    /// All particles start at `initial_pose` with uniform weights.
    pub fn new(count: usize, initial_pose: Pose, rng_seed: u64) -> Self {
        let log_w = -(count as f64).ln();
        ParticleSet {
            particles: (0..count)
                .map(|_| Particle::new(initial_pose, log_w))
                .collect(),
            rng_seed,
        }
    }

    pub fn len(&self) -> usize {
        self.particles.len()
    }

    pub fn is_empty(&self) -> bool {
        self.particles.is_empty()
    }

    pub fn particles(&self) -> &[Particle] {
        &self.particles
    }

    pub fn particles_mut(&mut self) -> &mut [Particle] {
        &mut self.particles
    }

    pub fn live_count(&self) -> usize {
        self.particles.iter().filter(|p| !p.is_dead()).count()
    }

    /// Sum of normalized weights over live particles (should be 1 after any
    /// weight update).
    pub fn weight_sum(&self) -> f64 {
        self.particles
            .iter()
            .filter(|p| !p.is_dead())
            .map(|p| p.log_weight.exp())
            .sum()
    }

    /// Replace particle `slot` with a full deep copy of particle `donor`.
    pub(crate) fn clone_into(&mut self, slot: usize, donor: usize) {
        let copy = self.particles[donor].clone();
        self.particles[slot] = copy;
    }
}

/// The map hypothesized by one particle: every keyframe cloud transformed by
/// that particle's pose for it, concatenated in keyframe order.
pub fn map_of(particle: &Particle, store: &KeyframeStore) -> Scan {
    let mut points: Vec<GaussianPoint> = Vec::new();
    for kf in store.keyframes() {
        let pose = &particle.keyframe_poses[kf.id];
        points.extend(kf.cloud.points.iter().map(|p| pose.transform_gaussian(p)));
    }
    Scan {
        points,
        timestamp: store
            .keyframes()
            .last()
            .map(|kf| kf.timestamp)
            .unwrap_or(0.0),
    }
}

/// After a keyframe insertion every particle appends its own current pose as
/// its initial estimate for the new keyframe, preserving the lockstep
/// between store length and per-particle pose vectors.
pub fn extend_all(set: &mut ParticleSet, store: &KeyframeStore) {
    let expected = store.len();
    for p in set.particles_mut() {
        debug_assert_eq!(p.keyframe_poses.len() + 1, expected);
        let pose = p.current_pose;
        p.keyframe_poses.push(pose);
    }
}

/// Serializable dump of particle poses and weights for snapshots and the
/// cluster report.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ParticleSnapshot {
    pub frame: u64,
    pub timestamp: f64,
    pub particles: Vec<ParticleRecord>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ParticleRecord {
    pub pose: PoseRecord,
    pub log_weight: f64,
    pub weight: f64,
}

impl ParticleSnapshot {
    pub fn capture(set: &ParticleSet, frame: u64, timestamp: f64) -> Self {
        ParticleSnapshot {
            frame,
            timestamp,
            particles: set
                .particles()
                .iter()
                .map(|p| ParticleRecord {
                    pose: PoseRecord::from(&p.current_pose),
                    log_weight: p.log_weight,
                    weight: p.log_weight.exp(),
                })
                .collect(),
        }
    }

    pub fn translations(&self) -> Vec<Vector3<f64>> {
        self.particles
            .iter()
            .map(|p| Vector3::from(p.pose.translation))
            .collect()
    }
}
