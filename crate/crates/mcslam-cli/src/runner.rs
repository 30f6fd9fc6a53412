//! Experiment pipeline: dataset synthesis, the filter loop, and evaluation.

use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::Path;

use anyhow::{anyhow, bail, Context, Result};
use serde::{Deserialize, Serialize};

use mcslam::cloud::estimate_covariances;
use mcslam::eval::{evaluate, AteReport, Trajectory};
use mcslam::filter::{Filter, FrameReport, MotionDelta};
use mcslam::io::{write_dataset, write_json, write_jsonl_line, write_ply, write_tum, Dataset};
use mcslam::particle::{map_of, ParticleSnapshot};
use mcslam::se3::{Pose, PoseRecord};
use mcslam::sim::{
    compile_legs, detect_elevator, diagonal_noise, generate_world, simulate_odometry,
    simulate_scan, TrajectoryScript, World,
};

use crate::config::ExperimentConfig;

/// Normalize a pose through its serialized record so in-memory runs and
/// datasets reloaded from disk operate on bit-identical values.
fn canonical(pose: &Pose) -> Pose {
    Pose::from(&PoseRecord::from(pose))
}

/// Synthesize the dataset described by the config: world, ground truth,
/// noisy odometry, and per-frame scans.
pub fn generate_dataset(config: &ExperimentConfig) -> Result<(Dataset, World)> {
    let world = generate_world(&config.world, config.seed)?;
    let (waypoints, segments) = compile_legs(
        (
            config.trajectory.start[0],
            config.trajectory.start[1],
            config.trajectory.start[2],
        ),
        &config.trajectory.legs,
        config.trajectory.dt,
    );
    let script = TrajectoryScript {
        waypoints,
        odom_noise: diagonal_noise(
            config.trajectory.odom_sigma_translation,
            config.trajectory.odom_sigma_rotation,
        ),
        elevator_segments: segments,
        elevator_cov_scale: config.trajectory.elevator_cov_scale,
    };
    script.validate()?;
    let poses = script.poses();
    let odometry: Vec<MotionDelta> = simulate_odometry(&script, config.seed)?
        .into_iter()
        .map(|m| MotionDelta {
            delta: canonical(&m.delta),
            covariance: m.covariance,
        })
        .collect();
    let mut scans = Vec::with_capacity(poses.len());
    for (frame, (_, pose)) in poses.iter().enumerate() {
        let points = simulate_scan(&world, pose, &config.sensor, config.seed, frame as u64)
            .with_context(|| format!("simulating frame {frame}"))?;
        scans.push(points);
    }
    let timestamps: Vec<f64> = poses.iter().map(|(t, _)| *t).collect();
    let ground_truth = Trajectory::new(
        poses
            .iter()
            .map(|(t, pose)| (*t, canonical(pose)))
            .collect(),
    )?;
    let initial_pose = canonical(&poses[0].1);
    Ok((
        Dataset {
            timestamps,
            scans,
            ground_truth,
            odometry,
            initial_pose,
        },
        world,
    ))
}

/// Whole-run summary written as `report.json`.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ExperimentReport {
    pub name: String,
    pub seed: u64,
    pub frames: usize,
    pub keyframes: usize,
    pub ate_representative: AteReport,
    pub ate_deadreckoning: AteReport,
    pub total_wall_ms: f64,
    pub mean_frame_ms: f64,
}

/// Run the filter over a dataset inside a worker pool of the requested size
/// and write all outputs under `out_dir`:
/// `frames.jsonl`, `representative.tum`, `deadreckoning.tum`,
/// `map_representative.ply`, `snapshot_NNNNNN.json` and `report.json`.
pub fn run_slam(
    dataset: &Dataset,
    config: &ExperimentConfig,
    out_dir: &Path,
) -> Result<ExperimentReport> {
    std::fs::create_dir_all(out_dir)
        .with_context(|| format!("creating {}", out_dir.display()))?;
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(config.workers)
        .build()
        .context("building worker pool")?;

    let mut filter_config = config.filter.clone();
    filter_config.rng_seed = config.seed;
    let mut filter = Filter::new(filter_config, dataset.initial_pose)?;

    let frames_path = out_dir.join("frames.jsonl");
    let mut frames_log = BufWriter::new(
        File::create(&frames_path).with_context(|| format!("creating {}", frames_path.display()))?,
    );

    let started = std::time::Instant::now();
    let mut dead_reckoning = Trajectory::default();
    let mut frame_ms_sum = 0.0;
    let frame_count = dataset.scans.len();
    for frame in 0..frame_count {
        let timestamp = dataset.timestamps[frame];
        let points = &dataset.scans[frame];
        let scan = estimate_covariances(points, config.filter.covariance_k, timestamp)?;
        let vertical = if config.elevator.enabled && detect_elevator(points, config.elevator.detection_threshold)? {
            Some(config.elevator.vertical_sigma)
        } else {
            None
        };
        let motion = if frame == 0 {
            MotionDelta::identity()
        } else {
            dataset.odometry[frame - 1].clone()
        };
        let report: FrameReport = pool.install(|| filter.step(&scan, &motion, vertical))?;
        frame_ms_sum += report.elapsed_ms;
        write_jsonl_line(&mut frames_log, &report)?;
        dead_reckoning.push(timestamp, *filter.dead_reckoning());
        if config.snapshot_frames.contains(&(frame as u64)) {
            let snapshot = ParticleSnapshot::capture(filter.set(), frame as u64, timestamp);
            write_json(
                &out_dir.join(format!("snapshot_{frame:06}.json")),
                &snapshot,
            )?;
        }
    }
    frames_log.flush()?;
    let total_wall_ms = started.elapsed().as_secs_f64() * 1e3;

    let representative = filter.representative_particle().clone();
    let mut rep_samples: Vec<(f64, Pose)> = filter
        .store()
        .keyframes()
        .iter()
        .map(|kf| (kf.timestamp, representative.keyframe_poses[kf.id]))
        .collect();
    let last_t = *dataset.timestamps.last().ok_or_else(|| anyhow!("empty dataset"))?;
    if rep_samples.last().map_or(true, |(t, _)| *t < last_t) {
        rep_samples.push((last_t, representative.current_pose));
    }
    let rep_trajectory = Trajectory::new(rep_samples)?;
    write_tum(&out_dir.join("representative.tum"), &rep_trajectory)?;
    write_tum(&out_dir.join("deadreckoning.tum"), &dead_reckoning)?;
    write_tum(&out_dir.join("groundtruth.tum"), &dataset.ground_truth)?;

    let rep_map = map_of(&representative, filter.store());
    let rep_points: Vec<nalgebra::Vector3<f64>> =
        rep_map.points.iter().map(|p| p.mean).collect();
    write_ply(&out_dir.join("map_representative.ply"), &rep_points)?;

    let ate_representative = evaluate(&rep_trajectory, &dataset.ground_truth)?;
    let ate_deadreckoning = evaluate(&dead_reckoning, &dataset.ground_truth)?;
    let report = ExperimentReport {
        name: config.name.clone(),
        seed: config.seed,
        frames: frame_count,
        keyframes: filter.store().len(),
        ate_representative,
        ate_deadreckoning,
        total_wall_ms,
        mean_frame_ms: frame_ms_sum / frame_count as f64,
    };
    write_json(&out_dir.join("report.json"), &report)?;
    Ok(report)
}

/// Full pipeline: synthesize the dataset in memory and run the filter.
pub fn run_experiment(config: &ExperimentConfig, out_dir: &Path) -> Result<ExperimentReport> {
    config.validate()?;
    let (dataset, _world) = generate_dataset(config)?;
    if dataset.scans.len() < 2 {
        bail!("experiment needs at least 2 frames");
    }
    run_slam(&dataset, config, out_dir)
}

/// Synthesize and export a dataset directory.
pub fn generate_to_dir(config: &ExperimentConfig, out_dir: &Path) -> Result<usize> {
    config.validate()?;
    let (dataset, world) = generate_dataset(config)?;
    write_dataset(out_dir, &dataset, Some(&world))?;
    Ok(dataset.scans.len())
}
