//! The SLAM filter loop: prediction, loop-aware correction, importance
//! weighting, dead-particle pruning, keyframe insertion and representative
//! extraction.
//!
//! Per-frame phasing: prediction and correction run in parallel over
//! particles with counter-based RNG streams keyed by `(seed, frame,
//! particle)`, so results never depend on the worker count. Weighting,
//! pruning and keyframe insertion run in a single-threaded barrier phase.

use nalgebra::{Matrix6, Vector6};
use rand::Rng;
use rand_distr::StandardNormal;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::cloud::{overlap_rate, Scan, VoxelMap};
use crate::gicp::{
    clamp_step, gauss_newton_step, pairwise_log_likelihood, particle_log_likelihood, GicpError,
    LinearizedObjective,
};
use crate::particle::{extend_all, KeyframeStore, Particle, ParticleSet};
use crate::rng::{stream, StreamPurpose};
use crate::se3::{Pose, PoseRecord, Twist};

/// Hard cap on scan size fed to the filter.
pub const MAX_SCAN_POINTS: usize = 10_000;

/// Poses are re-orthonormalized after this many frames of composition.
const ORTHONORMALIZE_INTERVAL: u64 = 1000;

#[derive(Debug, Error)]
pub enum FilterError {
    #[error("config field {field}: {message}")]
    InvalidConfig { field: &'static str, message: String },
    #[error("scan rejected at frame {frame}: {reason}")]
    BadScan { frame: u64, reason: String },
    #[error("motion covariance is not positive semidefinite")]
    NonPsdCovariance,
    #[error("all particles dead at frame {frame}: filter degenerated")]
    Degenerate { frame: u64 },
    #[error("path-length query [{from}, {to}] outside odometry range")]
    TimeOutOfRange { from: f64, to: f64 },
    #[error(transparent)]
    Gicp(#[from] GicpError),
}

/// Relative motion between consecutive frames with its tangent-space
/// covariance.
#[derive(Debug, Clone)]
pub struct MotionDelta {
    pub delta: Pose,
    pub covariance: Matrix6<f64>,
}

impl MotionDelta {
    pub fn identity() -> Self {
        MotionDelta {
            delta: Pose::identity(),
            covariance: Matrix6::zeros(),
        }
    }
}

/// Filter parameters. Defaults follow the reference configuration: three
/// neighbor keyframes, 70% keyframe-overlap threshold, and pruning floors of
/// 1e-16 on the frame likelihood and 1e-8 on the normalized posterior.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default)]
pub struct FilterConfig {
    pub particle_count: usize,
    pub neighbor_count: usize,
    /// A neighbor keyframe at least this many indices older than the newest
    /// keyframe counts as a loop (boundary inclusive).
    pub loop_recency_gap: usize,
    pub overlap_threshold: f64,
    /// A particle whose frame likelihood carries no evidence is dead. The
    /// comparison is `|frame log-likelihood| < likelihood_floor`: a particle
    /// that matched nothing anywhere scores exactly zero and is unusable for
    /// state estimation.
    pub likelihood_floor: f64,
    /// A particle whose normalized posterior weight falls below this floor is
    /// dead.
    pub posterior_floor: f64,
    /// Relative Levenberg damping: the solve uses `lambda = gn_damping *
    /// trace(H) / 6`.
    pub gn_damping: f64,
    /// Cap on the mixed m/rad norm of one correction twist.
    pub step_clamp: f64,
    pub voxel_resolution: f64,
    /// Neighbors for per-point covariance estimation when ingesting raw
    /// points.
    pub covariance_k: usize,
    pub rng_seed: u64,
}

impl Default for FilterConfig {
    fn default() -> Self {
        FilterConfig {
            particle_count: 100,
            neighbor_count: 3,
            loop_recency_gap: 10,
            overlap_threshold: 0.70,
            likelihood_floor: 1e-16,
            posterior_floor: 1e-8,
            gn_damping: 1e-6,
            step_clamp: 1.0,
            voxel_resolution: 0.5,
            covariance_k: crate::cloud::DEFAULT_COVARIANCE_K,
            rng_seed: 0,
        }
    }
}

impl FilterConfig {
    pub fn validate(&self) -> Result<(), FilterError> {
        fn fail(field: &'static str, message: String) -> Result<(), FilterError> {
            Err(FilterError::InvalidConfig { field, message })
        }
        if self.particle_count == 0 {
            return fail("particle_count", "must be at least 1".into());
        }
        if self.neighbor_count == 0 {
            return fail("neighbor_count", "must be at least 1".into());
        }
        if !(self.overlap_threshold > 0.0 && self.overlap_threshold <= 1.0) {
            return fail(
                "overlap_threshold",
                format!("must be in (0, 1], got {}", self.overlap_threshold),
            );
        }
        if !(self.likelihood_floor >= 0.0) {
            return fail("likelihood_floor", "must be non-negative".into());
        }
        if !(self.posterior_floor >= 0.0 && self.posterior_floor < 1.0) {
            return fail(
                "posterior_floor",
                format!("must be in [0, 1), got {}", self.posterior_floor),
            );
        }
        if !(self.gn_damping >= 0.0) {
            return fail("gn_damping", "must be non-negative".into());
        }
        if !(self.step_clamp > 0.0) {
            return fail("step_clamp", format!("must be positive, got {}", self.step_clamp));
        }
        if !(self.voxel_resolution > 0.0) {
            return fail(
                "voxel_resolution",
                format!("must be positive, got {}", self.voxel_resolution),
            );
        }
        if self.covariance_k < 4 {
            return fail("covariance_k", "must be at least 4".into());
        }
        Ok(())
    }
}

/// Square root of a PSD matrix for noise sampling: Cholesky when positive
/// definite, eigenvalue square root otherwise (covers zero and
/// rank-deficient motion noise).
fn psd_sqrt(cov: &Matrix6<f64>) -> Result<Matrix6<f64>, FilterError> {
    if let Some(chol) = cov.cholesky() {
        return Ok(chol.l());
    }
    let eig = cov.symmetric_eigen();
    let mut factor = eig.eigenvectors;
    for i in 0..6 {
        let lambda = eig.eigenvalues[i];
        if lambda < -1e-9 {
            return Err(FilterError::NonPsdCovariance);
        }
        let s = lambda.max(0.0).sqrt();
        factor.column_mut(i).scale_mut(s);
    }
    Ok(factor)
}

/// Prediction: right-compose every particle's pose with the odometry delta
/// and a sampled tangent-space noise twist. In elevator mode an extra
/// world-frame vertical random-walk step with the given standard deviation is
/// added.
pub fn predict(
    set: &mut ParticleSet,
    motion: &MotionDelta,
    vertical_dispersion: Option<f64>,
    frame: u64,
) -> Result<(), FilterError> {
    let noisy = motion.covariance != Matrix6::zeros();
    let factor = if noisy {
        Some(psd_sqrt(&motion.covariance)?)
    } else {
        None
    };
    let seed = set.rng_seed;
    let delta = motion.delta;
    set.particles_mut()
        .par_iter_mut()
        .enumerate()
        .for_each(|(i, particle)| {
            let mut rng = stream(seed, StreamPurpose::Predict, frame, i as u64);
            let mut pose = particle.current_pose.compose(&delta);
            if let Some(l) = &factor {
                let z = Vector6::from_fn(|_, _| rng.sample::<f64, _>(StandardNormal));
                let noise = Twist::from_vector(&(l * z));
                // Finite by construction: factor and normals are finite.
                pose = pose.compose(&noise.exp().expect("finite noise twist"));
            }
            if let Some(sigma_z) = vertical_dispersion {
                let dz: f64 = rng.sample::<f64, _>(StandardNormal);
                let mut t = *pose.translation();
                t[2] += sigma_z * dz;
                pose = Pose::from_parts(*pose.rotation(), t);
            }
            particle.current_pose = pose;
        });
    Ok(())
}

/// Indices of the `count` keyframes whose particle-estimated translations are
/// nearest to the particle's current translation. Ties break toward the
/// lower index; fewer are returned when the store is smaller.
pub fn select_neighbor_keyframes(
    particle: &Particle,
    store: &KeyframeStore,
    count: usize,
) -> Vec<usize> {
    let current = particle.current_pose.translation();
    let mut scored: Vec<(f64, usize)> = particle
        .keyframe_poses
        .iter()
        .take(store.len())
        .enumerate()
        .map(|(k, pose)| ((pose.translation() - current).norm_squared(), k))
        .collect();
    let take = count.min(scored.len());
    if take < scored.len() {
        scored.select_nth_unstable_by(take - 1, |a, b| a.partial_cmp(b).unwrap());
        scored.truncate(take);
    }
    scored.sort_by(|a, b| a.partial_cmp(b).unwrap());
    scored.into_iter().map(|(_, k)| k).collect()
}

/// A loop is detected when any neighbor keyframe is at least
/// `recency_gap` indices older than the newest keyframe.
pub fn detect_loop(neighbors: &[usize], latest_keyframe_id: usize, recency_gap: usize) -> bool {
    neighbors
        .iter()
        .any(|&idx| idx + recency_gap <= latest_keyframe_id)
}

/// Odometry travel distance between two times: the sum of consecutive
/// translation increments over samples within `[from_time, to_time]`.
pub fn path_length(store: &KeyframeStore, from_time: f64, to_time: f64) -> Result<f64, FilterError> {
    let out_of_range = || FilterError::TimeOutOfRange {
        from: from_time,
        to: to_time,
    };
    if from_time > to_time {
        return Err(out_of_range());
    }
    let (t_min, t_max) = store.time_range().ok_or_else(out_of_range)?;
    if from_time < t_min - 1e-9 || to_time > t_max + 1e-9 {
        return Err(out_of_range());
    }
    let a = store.arc_length_at(from_time).ok_or_else(out_of_range)?;
    let b = store.arc_length_at(to_time).ok_or_else(out_of_range)?;
    Ok((b - a).max(0.0))
}

/// Outcome of one particle correction.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum CorrectionOutcome {
    /// Step applied; carries the current-pose update twist.
    Applied(Twist),
    /// Normal equations were singular; the particle is left unchanged this
    /// frame.
    Skipped,
}

/// Two-step state update for one particle: a Gauss-Newton twist on the
/// current pose from the linearization summed over the non-recent (loop)
/// neighbor keyframes, then the same twist propagated to every keyframe
/// between the oldest loop neighbor and the current frame, discounted by
/// relative path length. Recent neighbors are excluded from the gradient:
/// they ride along with the propagated update, so including them would leave
/// their residuals unchanged and give the solve a self-cancelling target.
/// Keyframes older than the oldest loop neighbor are never touched.
pub fn correct(
    particle: &mut Particle,
    scan: &Scan,
    store: &KeyframeStore,
    config: &FilterConfig,
    neighbors: &[usize],
) -> Result<CorrectionOutcome, FilterError> {
    let latest = store.len() - 1;
    let old_neighbors: Vec<usize> = neighbors
        .iter()
        .copied()
        .filter(|&k| k + config.loop_recency_gap <= latest)
        .collect();
    if old_neighbors.is_empty() {
        return Ok(CorrectionOutcome::Skipped);
    }
    let mut obj = LinearizedObjective::zero();
    for &k in &old_neighbors {
        let rel = particle.keyframe_poses[k]
            .inverse()
            .compose(&particle.current_pose);
        let pairwise = pairwise_log_likelihood(scan, &store.get(k).voxel_map, &rel, true)?;
        obj.merge(&pairwise);
    }
    if obj.matched_count == 0 {
        return Ok(CorrectionOutcome::Skipped);
    }
    let damping = config.gn_damping * obj.h.trace() / 6.0;
    let psi = match gauss_newton_step(&obj, damping) {
        Ok(psi) => clamp_step(psi, config.step_clamp),
        Err(GicpError::SingularSystem) => return Ok(CorrectionOutcome::Skipped),
        Err(e) => return Err(e.into()),
    };
    let step = psi.exp().expect("solver output is finite");
    particle.current_pose = particle.current_pose.compose(&step);

    let oldest = *old_neighbors.iter().min().expect("non-empty");
    let t_o = store.get(oldest).timestamp;
    let t_now = scan.timestamp;
    let total = path_length(store, t_o, t_now)?;
    if total > 1e-12 {
        for k in oldest..store.len() {
            let t_k = store.get(k).timestamp;
            let weight = (path_length(store, t_o, t_k)? / total).clamp(0.0, 1.0);
            if weight > 0.0 {
                let kf_step = psi.scale(weight).exp().expect("finite scaled twist");
                particle.keyframe_poses[k] = particle.keyframe_poses[k].compose(&kf_step);
            }
        }
    }
    Ok(CorrectionOutcome::Applied(psi))
}

/// Fold the per-frame log-likelihoods into the cumulative products and
/// renormalize the log-weights over live particles with log-sum-exp.
pub fn update_weights(
    set: &mut ParticleSet,
    per_particle_log_likelihood: &[f64],
    frame: u64,
) -> Result<(), FilterError> {
    assert_eq!(per_particle_log_likelihood.len(), set.len());
    for (particle, ll) in set.particles_mut().iter_mut().zip(per_particle_log_likelihood) {
        if !particle.is_dead() {
            particle.cum_log_likelihood += ll;
        }
    }
    let max = set
        .particles()
        .iter()
        .filter(|p| !p.is_dead())
        .map(|p| p.cum_log_likelihood)
        .fold(f64::NEG_INFINITY, f64::max);
    if max == f64::NEG_INFINITY {
        return Err(FilterError::Degenerate { frame });
    }
    let log_norm = max
        + set
            .particles()
            .iter()
            .filter(|p| !p.is_dead())
            .map(|p| (p.cum_log_likelihood - max).exp())
            .sum::<f64>()
            .ln();
    for particle in set.particles_mut() {
        if !particle.is_dead() {
            particle.log_weight = particle.cum_log_likelihood - log_norm;
        }
    }
    Ok(())
}

/// Prune unusable particles and respawn them as deep copies of survivors
/// drawn categorically by survivor weight. A particle is unusable when its
/// frame likelihood carries no evidence (|log-likelihood| below the floor) or
/// its normalized posterior has collapsed. If every particle is below the
/// floors the set is left unchanged: with no usable survivors there is
/// nothing to respawn from, and an uninformative frame should not erase the
/// population.
pub fn prune_and_respawn(
    set: &mut ParticleSet,
    config: &FilterConfig,
    frame: u64,
    frame_log_likelihoods: &[f64],
) -> usize {
    assert_eq!(frame_log_likelihoods.len(), set.len());
    let log_posterior_floor = config.posterior_floor.ln();
    let dead: Vec<usize> = (0..set.len())
        .filter(|&i| {
            let p = &set.particles()[i];
            p.is_dead()
                || frame_log_likelihoods[i].abs() < config.likelihood_floor
                || p.log_weight < log_posterior_floor
        })
        .collect();
    if dead.is_empty() || dead.len() == set.len() {
        return 0;
    }
    let dead_count = dead.len();
    let is_dead: Vec<bool> = {
        let mut flags = vec![false; set.len()];
        for &i in &dead {
            flags[i] = true;
        }
        flags
    };
    // Cumulative weights over survivors, in index order.
    let mut survivors: Vec<usize> = Vec::with_capacity(set.len() - dead_count);
    let mut cumulative: Vec<f64> = Vec::with_capacity(set.len() - dead_count);
    let mut total = 0.0;
    for i in 0..set.len() {
        if !is_dead[i] {
            total += set.particles()[i].log_weight.exp();
            survivors.push(i);
            cumulative.push(total);
        }
    }
    for &slot in &dead {
        let mut rng = stream(set.rng_seed, StreamPurpose::Respawn, frame, slot as u64);
        let u: f64 = rng.gen::<f64>() * total;
        let pick = cumulative.partition_point(|&c| c < u).min(survivors.len() - 1);
        set.clone_into(slot, survivors[pick]);
    }
    // Renormalize after cloning duplicated the donors' cumulative scores.
    let lls = vec![0.0; set.len()];
    update_weights(set, &lls, frame).expect("survivors exist");
    dead_count
}

/// Index of the largest-weight particle; ties break toward the lower index.
pub fn representative(set: &ParticleSet) -> usize {
    let mut best = 0;
    let mut best_weight = f64::NEG_INFINITY;
    for (i, p) in set.particles().iter().enumerate() {
        if p.log_weight > best_weight {
            best_weight = p.log_weight;
            best = i;
        }
    }
    best
}

/// Keyframe-list update: the scan is transformed into the last keyframe's
/// frame with the odometry-relative motion, and inserted as a new keyframe
/// when the voxel overlap falls below the threshold. The first frame always
/// inserts. Returns whether an insertion happened.
pub fn maybe_insert_keyframe(
    scan: &Scan,
    odom_pose: &Pose,
    store: &mut KeyframeStore,
    set: &mut ParticleSet,
    config: &FilterConfig,
) -> Result<bool, FilterError> {
    if let Some(last) = store.last() {
        let rel = last.odom_pose.inverse().compose(odom_pose);
        if overlap_rate(scan, &rel, &last.voxel_map) >= config.overlap_threshold {
            return Ok(false);
        }
    }
    let voxel_map = VoxelMap::build(scan, config.voxel_resolution)
        .map_err(|e| FilterError::BadScan {
            frame: 0,
            reason: e.to_string(),
        })?;
    store.push(scan.clone(), voxel_map, *odom_pose, scan.timestamp);
    extend_all(set, store);
    Ok(true)
}

/// Per-frame summary streamed as JSON lines by the harness.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct FrameReport {
    pub frame: u64,
    pub timestamp: f64,
    pub representative_index: usize,
    pub representative_pose: PoseRecord,
    /// Particles above the pruning floors this frame (before respawn).
    pub live_count: usize,
    /// Particles for which a loop was detected this frame.
    pub loop_count: usize,
    /// Corrections skipped due to singular normal equations.
    pub correction_failures: usize,
    pub inserted_keyframe: bool,
    pub keyframe_count: usize,
    pub elapsed_ms: f64,
}

/// Filter state: the particle population, the shared keyframe store, the
/// dead-reckoning pose and the frame counter.
pub struct Filter {
    config: FilterConfig,
    set: ParticleSet,
    store: KeyframeStore,
    dead_reckoning: Pose,
    frame: u64,
}

impl Filter {
    pub fn new(config: FilterConfig, initial_pose: Pose) -> Result<Self, FilterError> {
        config.validate()?;
        let set = ParticleSet::new(config.particle_count, initial_pose, config.rng_seed);
        Ok(Filter {
            config,
            set,
            store: KeyframeStore::new(),
            dead_reckoning: initial_pose,
            frame: 0,
        })
    }

    pub fn config(&self) -> &FilterConfig {
        &self.config
    }

    pub fn set(&self) -> &ParticleSet {
        &self.set
    }

    pub fn store(&self) -> &KeyframeStore {
        &self.store
    }

    pub fn frame(&self) -> u64 {
        self.frame
    }

    pub fn dead_reckoning(&self) -> &Pose {
        &self.dead_reckoning
    }

    pub fn representative_particle(&self) -> &Particle {
        &self.set.particles()[representative(&self.set)]
    }

    /// One full filter step: predict, per-particle loop detection and
    /// correction, likelihood evaluation, weighting, pruning, keyframe
    /// insertion and representative extraction.
    pub fn step(
        &mut self,
        scan: &Scan,
        motion: &MotionDelta,
        vertical_dispersion: Option<f64>,
    ) -> Result<FrameReport, FilterError> {
        let started = std::time::Instant::now();
        let frame = self.frame;
        if scan.is_empty() {
            return Err(FilterError::BadScan {
                frame,
                reason: "empty scan".into(),
            });
        }
        if scan.len() > MAX_SCAN_POINTS {
            return Err(FilterError::BadScan {
                frame,
                reason: format!("{} points exceeds cap {}", scan.len(), MAX_SCAN_POINTS),
            });
        }

        self.dead_reckoning = self.dead_reckoning.compose(&motion.delta);
        self.store.record_odometry(scan.timestamp, self.dead_reckoning);

        predict(&mut self.set, motion, vertical_dispersion, frame)?;

        let n = self.set.len();
        let mut log_likelihoods = vec![0.0; n];
        let mut loop_count = 0;
        let mut correction_failures = 0;
        if !self.store.is_empty() {
            let store = &self.store;
            let config = &self.config;
            let latest = store.len() - 1;
            let results: Result<Vec<(f64, bool, bool)>, FilterError> = self
                .set
                .particles_mut()
                .par_iter_mut()
                .map(|particle| {
                    let neighbors =
                        select_neighbor_keyframes(particle, store, config.neighbor_count);
                    let looped = detect_loop(&neighbors, latest, config.loop_recency_gap);
                    let mut failed = false;
                    if looped {
                        match correct(particle, scan, store, config, &neighbors)? {
                            CorrectionOutcome::Applied(_) => {}
                            CorrectionOutcome::Skipped => failed = true,
                        }
                    }
                    let ll = particle_log_likelihood(scan, particle, store, &neighbors)?;
                    Ok((ll, looped, failed))
                })
                .collect();
            for (i, (ll, looped, failed)) in results?.into_iter().enumerate() {
                log_likelihoods[i] = ll;
                loop_count += looped as usize;
                correction_failures += failed as usize;
            }
        }

        update_weights(&mut self.set, &log_likelihoods, frame)?;
        let pruned = prune_and_respawn(&mut self.set, &self.config, frame, &log_likelihoods);
        let inserted = maybe_insert_keyframe(
            scan,
            &self.dead_reckoning.clone(),
            &mut self.store,
            &mut self.set,
            &self.config,
        )?;
        let rep = representative(&self.set);

        if frame > 0 && frame % ORTHONORMALIZE_INTERVAL == 0 {
            for particle in self.set.particles_mut() {
                particle.current_pose.orthonormalize();
                for pose in particle.keyframe_poses.iter_mut() {
                    pose.orthonormalize();
                }
            }
        }

        self.frame += 1;
        let rep_pose = self.set.particles()[rep].current_pose;
        Ok(FrameReport {
            frame,
            timestamp: scan.timestamp,
            representative_index: rep,
            representative_pose: PoseRecord::from(&rep_pose),
            live_count: n - pruned,
            loop_count,
            correction_failures,
            inserted_keyframe: inserted,
            keyframe_count: self.store.len(),
            elapsed_ms: started.elapsed().as_secs_f64() * 1e3,
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::cloud::{estimate_covariances, GaussianPoint};
    use crate::rng::{stream as rng_stream, StreamPurpose as P};
    use approx::assert_abs_diff_eq;
    use nalgebra::{Matrix3, Vector3};
    use rand::Rng;

    fn uniform_set(n: usize, seed: u64) -> ParticleSet {
        ParticleSet::new(n, Pose::identity(), seed)
    }

    fn sparse_scan(n: usize, seed: u64, timestamp: f64) -> Scan {
        let mut rng = rng_stream(seed, P::WorldGen, 0, 0);
        let mut points = Vec::with_capacity(n);
        while points.len() < n {
            let p = Vector3::new(
                rng.gen::<f64>() * 20.0,
                rng.gen::<f64>() * 20.0,
                rng.gen::<f64>() * 20.0,
            );
            if points.iter().all(|q: &Vector3<f64>| (p - q).norm() > 2.0) {
                points.push(p);
            }
        }
        estimate_covariances(&points, 4, timestamp).unwrap()
    }

    fn keyframe_at(store: &mut KeyframeStore, x: f64, t: f64) {
        let scan = Scan {
            points: vec![GaussianPoint {
                mean: Vector3::new(0.0, 0.0, 0.0),
                covariance: Matrix3::identity(),
            }],
            timestamp: t,
        };
        let map = VoxelMap::build(&scan, 0.5).unwrap();
        store.push(scan, map, Pose::from_translation(Vector3::new(x, 0.0, 0.0)), t);
    }

    #[test]
    fn noiseless_predict_translates_exactly() {
        let mut set = uniform_set(5, 1);
        let motion = MotionDelta {
            delta: Pose::from_translation(Vector3::new(1.0, 0.0, 0.0)),
            covariance: Matrix6::zeros(),
        };
        predict(&mut set, &motion, None, 0).unwrap();
        for p in set.particles() {
            assert_eq!(*p.current_pose.translation(), Vector3::new(1.0, 0.0, 0.0));
        }
    }

    #[test]
    fn predict_noise_matches_requested_covariance() {
        let n = 10_000;
        let mut set = uniform_set(n, 2);
        let sigma_sq = 1e-4;
        let motion = MotionDelta {
            delta: Pose::identity(),
            covariance: Matrix6::identity() * sigma_sq,
        };
        predict(&mut set, &motion, None, 0).unwrap();
        let twists: Vec<Vector6<f64>> = set
            .particles()
            .iter()
            .map(|p| p.current_pose.log().unwrap().as_vector())
            .collect();
        let mean: Vector6<f64> = twists.iter().sum::<Vector6<f64>>() / n as f64;
        // Standard error of the mean is sigma/sqrt(n); allow 3-sigma.
        let tol_mean = 3.0 * (sigma_sq / n as f64).sqrt();
        for i in 0..6 {
            assert!(mean[i].abs() < tol_mean, "mean[{i}] = {}", mean[i]);
        }
        for i in 0..6 {
            let var: f64 =
                twists.iter().map(|t| (t[i] - mean[i]).powi(2)).sum::<f64>() / n as f64;
            // Var of the sample variance of a Gaussian is 2 sigma^4 / n.
            let tol_var = 3.0 * (2.0 / n as f64).sqrt() * sigma_sq;
            assert!(
                (var - sigma_sq).abs() < tol_var,
                "var[{i}] = {var} vs {sigma_sq}"
            );
        }
    }

    #[test]
    fn elevator_mode_spreads_z_as_random_walk() {
        let n = 10_000;
        let steps = 10;
        let sigma = 0.5;
        let mut set = uniform_set(n, 3);
        let motion = MotionDelta::identity();
        for frame in 0..steps {
            predict(&mut set, &motion, Some(sigma), frame).unwrap();
        }
        let zs: Vec<f64> = set
            .particles()
            .iter()
            .map(|p| p.current_pose.translation()[2])
            .collect();
        let mean = zs.iter().sum::<f64>() / n as f64;
        let var = zs.iter().map(|z| (z - mean).powi(2)).sum::<f64>() / n as f64;
        let expected = sigma * sigma * steps as f64;
        let tol = 3.0 * (2.0 / n as f64).sqrt() * expected;
        assert!((var - expected).abs() < tol, "var {var} vs {expected}");
    }

    #[test]
    fn predict_rejects_indefinite_covariance() {
        let mut set = uniform_set(2, 4);
        let mut cov = Matrix6::identity();
        cov[(0, 0)] = -1.0;
        let motion = MotionDelta {
            delta: Pose::identity(),
            covariance: cov,
        };
        assert!(matches!(
            predict(&mut set, &motion, None, 0),
            Err(FilterError::NonPsdCovariance)
        ));
    }

    #[test]
    fn neighbor_selection_sorted_distance_oracle() {
        let mut store = KeyframeStore::new();
        keyframe_at(&mut store, 0.0, 0.0);
        keyframe_at(&mut store, 10.0, 1.0);
        keyframe_at(&mut store, 20.0, 2.0);
        let mut particle = Particle::new(
            Pose::from_translation(Vector3::new(1.0, 0.0, 0.0)),
            0.0,
        );
        particle.keyframe_poses = vec![
            Pose::from_translation(Vector3::new(0.0, 0.0, 0.0)),
            Pose::from_translation(Vector3::new(10.0, 0.0, 0.0)),
            Pose::from_translation(Vector3::new(20.0, 0.0, 0.0)),
        ];
        assert_eq!(select_neighbor_keyframes(&particle, &store, 2), vec![0, 1]);
        assert_eq!(select_neighbor_keyframes(&particle, &store, 5), vec![0, 1, 2]);
    }

    #[test]
    fn neighbor_selection_tie_breaks_low_index() {
        let mut store = KeyframeStore::new();
        keyframe_at(&mut store, -1.0, 0.0);
        keyframe_at(&mut store, 1.0, 1.0);
        let mut particle = Particle::new(Pose::identity(), 0.0);
        particle.keyframe_poses = vec![
            Pose::from_translation(Vector3::new(-1.0, 0.0, 0.0)),
            Pose::from_translation(Vector3::new(1.0, 0.0, 0.0)),
        ];
        assert_eq!(select_neighbor_keyframes(&particle, &store, 1), vec![0]);
    }

    #[test]
    fn loop_detection_boundary_is_inclusive() {
        assert!(!detect_loop(&[50, 49], 50, 10));
        assert!(detect_loop(&[0, 49, 50], 50, 10));
        assert!(detect_loop(&[40], 50, 10));
        assert!(!detect_loop(&[41], 50, 10));
    }

    #[test]
    fn path_length_zigzag_matches_direct_sum() {
        let mut store = KeyframeStore::new();
        let points = [
            Vector3::new(0.0, 0.0, 0.0),
            Vector3::new(1.0, 1.0, 0.0),
            Vector3::new(2.0, -0.5, 0.0),
            Vector3::new(2.5, 2.0, 1.0),
        ];
        for (i, p) in points.iter().enumerate() {
            store.record_odometry(i as f64, Pose::from_translation(*p));
        }
        let direct: f64 = points.windows(2).map(|w| (w[1] - w[0]).norm()).sum();
        assert_abs_diff_eq!(path_length(&store, 0.0, 3.0).unwrap(), direct, epsilon = 1e-12);
        assert_eq!(path_length(&store, 1.0, 1.0).unwrap(), 0.0);
        assert!(matches!(
            path_length(&store, -1.0, 2.0),
            Err(FilterError::TimeOutOfRange { .. })
        ));
    }

    #[test]
    fn path_length_straight_line() {
        let mut store = KeyframeStore::new();
        for i in 0..6 {
            store.record_odometry(
                i as f64,
                Pose::from_translation(Vector3::new(i as f64, 0.0, 0.0)),
            );
        }
        assert_abs_diff_eq!(path_length(&store, 0.0, 5.0).unwrap(), 5.0, epsilon = 1e-12);
    }

    /// Build a store with real clouds so correction can run end to end:
    /// keyframes at x = 0, 2, 4, ..., odometry recorded every 1 m.
    fn corridor_store(kf_count: usize, seed: u64) -> (KeyframeStore, Scan) {
        let mut store = KeyframeStore::new();
        let base = sparse_scan(40, seed, 0.0);
        for k in 0..kf_count {
            let t = 2.0 * k as f64;
            let mut scan = base.clone();
            scan.timestamp = t;
            let map = VoxelMap::build(&scan, 0.5).unwrap();
            store.push(
                scan,
                map,
                Pose::from_translation(Vector3::new(2.0 * k as f64, 0.0, 0.0)),
                t,
            );
        }
        for step in 0..=(2 * (kf_count - 1)) {
            store.record_odometry(
                step as f64,
                Pose::from_translation(Vector3::new(step as f64, 0.0, 0.0)),
            );
        }
        (store, base)
    }

    #[test]
    fn correction_with_zero_residual_changes_nothing() {
        let (store, base) = corridor_store(3, 301);
        let mut scan = base.clone();
        scan.timestamp = 4.0;
        let mut particle = Particle::new(Pose::identity(), 0.0);
        particle.keyframe_poses = vec![Pose::identity(); 3];
        let before = particle.clone();
        let config = FilterConfig {
            loop_recency_gap: 1,
            ..FilterConfig::default()
        };
        // Scan equals every keyframe cloud at identity: residuals are zero.
        let outcome = correct(&mut particle, &scan, &store, &config, &[0, 1, 2]).unwrap();
        match outcome {
            CorrectionOutcome::Applied(psi) => assert!(psi.norm() < 1e-12),
            CorrectionOutcome::Skipped => panic!("expected applied"),
        }
        assert!((particle.current_pose.translation()
            - before.current_pose.translation())
        .norm()
            < 1e-12);
    }

    #[test]
    fn correction_discounts_keyframes_by_path_length() {
        // Keyframes at t = 0, 2, 4 with odometry at 1 m/s: the middle
        // keyframe sits exactly halfway by path length and must receive
        // exp(psi/2); the oldest neighbor receives nothing.
        let (store, base) = corridor_store(3, 307);
        let mut scan = base.clone();
        scan.timestamp = 4.0;
        let displaced = Twist::new(
            Vector3::new(0.05, -0.02, 0.01),
            Vector3::new(0.0, 0.0, 0.03),
        );
        let mut particle = Particle::new(displaced.exp().unwrap(), 0.0);
        particle.keyframe_poses = vec![Pose::identity(); 3];
        let before = particle.clone();
        let config = FilterConfig {
            loop_recency_gap: 1,
            ..FilterConfig::default()
        };
        let outcome = correct(&mut particle, &scan, &store, &config, &[0, 1, 2]).unwrap();
        let psi = match outcome {
            CorrectionOutcome::Applied(psi) => psi,
            CorrectionOutcome::Skipped => panic!("expected applied"),
        };
        // Oldest neighbor keyframe: weight 0, bit-identical pose.
        assert_eq!(particle.keyframe_poses[0], before.keyframe_poses[0]);
        // Halfway keyframe: right-applied exp(psi/2), twist scaling.
        let expected_mid = before.keyframe_poses[1]
            .compose(&psi.scale(0.5).exp().unwrap());
        assert!(
            (particle.keyframe_poses[1].translation() - expected_mid.translation()).norm()
                < 1e-12
        );
        assert!(
            (particle.keyframe_poses[1].rotation() - expected_mid.rotation()).norm() < 1e-12
        );
        // Newest keyframe: full weight.
        let expected_new = before.keyframe_poses[2].compose(&psi.exp().unwrap());
        assert!(
            (particle.keyframe_poses[2].translation() - expected_new.translation()).norm()
                < 1e-12
        );
    }

    #[test]
    fn keyframes_older_than_oldest_neighbor_stay_bit_identical() {
        let (store, base) = corridor_store(5, 311);
        let mut scan = base.clone();
        scan.timestamp = 8.0;
        let mut particle = Particle::new(
            Twist::new(Vector3::new(0.05, 0.0, 0.0), Vector3::zeros())
                .exp()
                .unwrap(),
            0.0,
        );
        particle.keyframe_poses = vec![Pose::identity(); 5];
        let before = particle.clone();
        let config = FilterConfig {
            loop_recency_gap: 2,
            ..FilterConfig::default()
        };
        // Neighbors exclude keyframes 0 and 1; the oldest loop neighbor is 2.
        correct(&mut particle, &scan, &store, &config, &[2, 3, 4]).unwrap();
        for k in 0..2 {
            assert_eq!(particle.keyframe_poses[k], before.keyframe_poses[k]);
        }
    }

    #[test]
    fn weights_for_hand_computed_softmax() {
        let mut set = uniform_set(2, 5);
        update_weights(&mut set, &[0.0, -(3.0f64.ln())], 0).unwrap();
        let w0 = set.particles()[0].log_weight.exp();
        let w1 = set.particles()[1].log_weight.exp();
        assert_abs_diff_eq!(w0, 0.75, epsilon = 1e-12);
        assert_abs_diff_eq!(w1, 0.25, epsilon = 1e-12);
    }

    #[test]
    fn equal_likelihoods_stay_uniform_over_repeated_frames() {
        let mut set = uniform_set(4, 6);
        for frame in 0..10 {
            update_weights(&mut set, &[-7.5; 4], frame).unwrap();
            for p in set.particles() {
                assert_abs_diff_eq!(p.log_weight.exp(), 0.25, epsilon = 1e-12);
            }
        }
        assert_abs_diff_eq!(set.weight_sum(), 1.0, epsilon = 1e-9);
    }

    #[test]
    fn all_dead_is_fatal() {
        let mut set = uniform_set(2, 7);
        for p in set.particles_mut() {
            p.log_weight = f64::NEG_INFINITY;
        }
        assert!(matches!(
            update_weights(&mut set, &[0.0, 0.0], 3),
            Err(FilterError::Degenerate { frame: 3 })
        ));
    }

    #[test]
    fn prune_leaves_healthy_sets_alone() {
        let mut set = uniform_set(4, 8);
        update_weights(&mut set, &[-1.0, -1.1, -0.9, -1.05], 0).unwrap();
        let before: Vec<f64> = set.particles().iter().map(|p| p.log_weight).collect();
        let pruned = prune_and_respawn(&mut set, &FilterConfig::default(), 0, &[-1.0, -1.1, -0.9, -1.05]);
        assert_eq!(pruned, 0);
        let after: Vec<f64> = set.particles().iter().map(|p| p.log_weight).collect();
        assert_eq!(before, after);
    }

    #[test]
    fn prune_replaces_only_subthreshold_particles() {
        let mut set = uniform_set(4, 9);
        // Particle 3 collapses below the posterior floor.
        let lls = [-1.0, -1.0, -1.0, -60.0];
        update_weights(&mut set, &lls, 0).unwrap();
        assert!(set.particles()[3].log_weight < (1e-8f64).ln());
        let marker = Pose::from_translation(Vector3::new(9.0, 9.0, 9.0));
        for (i, p) in set.particles_mut().iter_mut().enumerate() {
            if i < 3 {
                p.keyframe_poses = vec![Pose::from_translation(Vector3::new(i as f64, 0.0, 0.0))];
            } else {
                p.keyframe_poses = vec![marker];
            }
        }
        let pruned = prune_and_respawn(&mut set, &FilterConfig::default(), 0, &lls);
        assert_eq!(pruned, 1);
        // The dead slot became a deep copy of one survivor.
        let clone = &set.particles()[3];
        let donor_x = clone.keyframe_poses[0].translation()[0];
        assert!(donor_x < 3.0, "keyframe poses copied wholesale from a donor");
        assert_abs_diff_eq!(set.weight_sum(), 1.0, epsilon = 1e-9);
        // Survivors untouched.
        for (i, p) in set.particles().iter().take(3).enumerate() {
            assert_eq!(p.keyframe_poses[0].translation()[0], i as f64);
        }
    }

    #[test]
    fn vacuous_evidence_counts_as_dead() {
        let mut set = uniform_set(3, 10);
        let lls = [-2.0, 0.0, -2.0];
        update_weights(&mut set, &lls, 0).unwrap();
        let pruned = prune_and_respawn(&mut set, &FilterConfig::default(), 0, &lls);
        assert_eq!(pruned, 1);
    }

    #[test]
    fn prune_skips_when_everything_is_below_threshold() {
        let mut set = uniform_set(3, 11);
        let lls = [0.0, 0.0, 0.0];
        update_weights(&mut set, &lls, 0).unwrap();
        let pruned = prune_and_respawn(&mut set, &FilterConfig::default(), 0, &lls);
        assert_eq!(pruned, 0);
        assert_eq!(set.live_count(), 3);
    }

    #[test]
    fn respawn_distribution_matches_survivor_weights() {
        // One dead among N = 4 with uniform survivors: each survivor donates
        // with probability 1/3; checked over 10,000 trials at 3 sigma.
        let trials = 10_000;
        let mut counts = [0usize; 3];
        for trial in 0..trials {
            let mut set = uniform_set(4, 12);
            set.rng_seed = trial as u64;
            let lls = [-1.0, -1.0, -1.0, -80.0];
            update_weights(&mut set, &lls, 0).unwrap();
            for (i, p) in set.particles_mut().iter_mut().enumerate() {
                p.cum_log_likelihood = i as f64; // fingerprint donors
            }
            // Recompute weights uniform over survivors for the draw.
            let survivor_lw = (1.0f64 / 3.0).ln();
            for (i, p) in set.particles_mut().iter_mut().enumerate() {
                p.log_weight = if i < 3 { survivor_lw } else { (1e-12f64).ln() };
            }
            prune_and_respawn(&mut set, &FilterConfig::default(), trial as u64, &lls);
            let donor = set.particles()[3].cum_log_likelihood as usize;
            assert!(donor < 3);
            counts[donor] += 1;
        }
        let expected = trials as f64 / 3.0;
        let sigma = (trials as f64 * (1.0 / 3.0) * (2.0 / 3.0)).sqrt();
        for (i, &c) in counts.iter().enumerate() {
            assert!(
                (c as f64 - expected).abs() < 3.0 * sigma,
                "donor {i} count {c} vs {expected} +/- {sigma}"
            );
        }
    }

    #[test]
    fn representative_is_argmax_with_low_index_ties() {
        let mut set = uniform_set(3, 13);
        assert_eq!(representative(&set), 0);
        set.particles_mut()[0].log_weight = (0.1f64).ln();
        set.particles_mut()[1].log_weight = (0.7f64).ln();
        set.particles_mut()[2].log_weight = (0.2f64).ln();
        assert_eq!(representative(&set), 1);
    }

    #[test]
    fn representative_matches_linear_scan_after_update() {
        let mut set = uniform_set(50, 14);
        let mut rng = rng_stream(15, P::WorldGen, 0, 0);
        let lls: Vec<f64> = (0..50).map(|_| -rng.gen::<f64>() * 10.0).collect();
        update_weights(&mut set, &lls, 0).unwrap();
        let naive = set
            .particles()
            .iter()
            .enumerate()
            .max_by(|a, b| a.1.log_weight.partial_cmp(&b.1.log_weight).unwrap())
            .unwrap()
            .0;
        assert_eq!(representative(&set), naive);
    }

    #[test]
    fn first_frame_always_inserts_keyframe() {
        let scan = sparse_scan(20, 401, 0.0);
        let mut store = KeyframeStore::new();
        let mut set = uniform_set(3, 16);
        let config = FilterConfig::default();
        let inserted =
            maybe_insert_keyframe(&scan, &Pose::identity(), &mut store, &mut set, &config)
                .unwrap();
        assert!(inserted);
        assert_eq!(store.len(), 1);
        for p in set.particles() {
            assert_eq!(p.keyframe_poses.len(), 1);
        }
    }

    #[test]
    fn identical_scan_with_identity_motion_does_not_insert() {
        let scan = sparse_scan(20, 403, 0.0);
        let mut store = KeyframeStore::new();
        let mut set = uniform_set(2, 17);
        let config = FilterConfig::default();
        maybe_insert_keyframe(&scan, &Pose::identity(), &mut store, &mut set, &config).unwrap();
        let mut next = scan.clone();
        next.timestamp = 1.0;
        let inserted =
            maybe_insert_keyframe(&next, &Pose::identity(), &mut store, &mut set, &config)
                .unwrap();
        assert!(!inserted);
        assert_eq!(store.len(), 1);
    }

    #[test]
    fn half_overlap_triggers_insertion() {
        // Two well-separated clusters; shifting by a large offset moves
        // exactly the far cluster out of every occupied voxel.
        let mut points = Vec::new();
        for i in 0..10 {
            points.push(Vector3::new(i as f64 * 0.3, 0.0, 0.0));
            points.push(Vector3::new(i as f64 * 0.3, 100.0, 0.0));
        }
        let scan = Scan {
            points: points
                .iter()
                .map(|p| GaussianPoint {
                    mean: *p,
                    covariance: Matrix3::identity(),
                })
                .collect(),
            timestamp: 0.0,
        };
        let mut store = KeyframeStore::new();
        let mut set = uniform_set(2, 18);
        let config = FilterConfig::default();
        maybe_insert_keyframe(&scan, &Pose::identity(), &mut store, &mut set, &config).unwrap();
        // Odometry says we moved 50 m in y: the y=0 block lands in empty
        // space while the y=100 block still misses; membership drops to 0.5
        // only if one block still overlaps, so shift y by exactly 100.
        let moved = Pose::from_translation(Vector3::new(0.0, -100.0, 0.0));
        let rel = store.last().unwrap().odom_pose.inverse().compose(&moved);
        let rate = overlap_rate(&scan, &rel, &store.last().unwrap().voxel_map);
        assert_abs_diff_eq!(rate, 0.5, epsilon = 1e-12);
        let mut next = scan.clone();
        next.timestamp = 1.0;
        let inserted = maybe_insert_keyframe(&next, &moved, &mut store, &mut set, &config).unwrap();
        assert!(inserted, "overlap 0.5 < 0.70 inserts");
    }

    #[test]
    fn degenerate_single_particle_tracks_odometry_exactly() {
        // One particle, zero noise, few keyframes: no loop can be detected,
        // so the trajectory is exactly the composed odometry.
        let scan0 = sparse_scan(25, 405, 0.0);
        let config = FilterConfig {
            particle_count: 1,
            rng_seed: 7,
            ..FilterConfig::default()
        };
        let mut filter = Filter::new(config, Pose::identity()).unwrap();
        let mut expected = Pose::identity();
        for frame in 0..20 {
            let mut scan = scan0.clone();
            scan.timestamp = frame as f64 * 0.1;
            let delta = Pose::from_translation(Vector3::new(0.05, 0.01, 0.0));
            expected = expected.compose(&delta);
            let motion = MotionDelta {
                delta,
                covariance: Matrix6::zeros(),
            };
            filter.step(&scan, &motion, None).unwrap();
            let pose = filter.representative_particle().current_pose;
            assert!((pose.translation() - expected.translation()).norm() < 1e-12);
        }
    }

    #[test]
    fn step_is_deterministic_for_fixed_seed() {
        let run = || {
            let config = FilterConfig {
                particle_count: 64,
                rng_seed: 99,
                ..FilterConfig::default()
            };
            let mut filter = Filter::new(config, Pose::identity()).unwrap();
            let base = sparse_scan(30, 407, 0.0);
            let mut reports = Vec::new();
            for frame in 0..15 {
                let mut scan = base.clone();
                scan.timestamp = frame as f64 * 0.1;
                let motion = MotionDelta {
                    delta: Pose::from_translation(Vector3::new(0.1, 0.0, 0.0)),
                    covariance: Matrix6::identity() * 1e-4,
                };
                let report = filter.step(&scan, &motion, None).unwrap();
                reports.push((
                    report.representative_index,
                    report.representative_pose.translation,
                    report.live_count,
                    report.keyframe_count,
                ));
            }
            reports
        };
        assert_eq!(run(), run());
    }

    #[test]
    fn config_validation_names_fields() {
        let bad = FilterConfig {
            overlap_threshold: 1.5,
            ..FilterConfig::default()
        };
        match bad.validate() {
            Err(FilterError::InvalidConfig { field, .. }) => {
                assert_eq!(field, "overlap_threshold")
            }
            other => panic!("expected invalid config, got {other:?}"),
        }
    }
}
