//! File formats: ASCII PLY point clouds, TUM trajectories, dataset
//! directories and particle snapshots.
//!
//! Floats are written with Rust's shortest-round-trip formatting, so a file
//! parsed back yields bit-identical values and regenerated outputs are
//! byte-identical for a fixed seed.

use std::fs::{self, File};
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};

use nalgebra::Vector3;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::eval::Trajectory;
use crate::filter::MotionDelta;
use crate::particle::ParticleSnapshot;
use crate::se3::{Pose, PoseRecord};
use crate::sim::World;

#[derive(Debug, Error)]
pub enum IoError {
    #[error("{path}: {source}")]
    File {
        path: PathBuf,
        source: std::io::Error,
    },
    #[error("{path}: parse error at line {line}: {message}")]
    Parse {
        path: PathBuf,
        line: usize,
        message: String,
    },
    #[error("{path}: {source}")]
    Json {
        path: PathBuf,
        source: serde_json::Error,
    },
}

fn file_err(path: &Path) -> impl FnOnce(std::io::Error) -> IoError + '_ {
    move |source| IoError::File {
        path: path.to_path_buf(),
        source,
    }
}

/// Write points as ASCII PLY (element vertex, float x/y/z properties).
pub fn write_ply(path: &Path, points: &[Vector3<f64>]) -> Result<(), IoError> {
    let file = File::create(path).map_err(file_err(path))?;
    let mut w = BufWriter::new(file);
    let mut emit = || -> std::io::Result<()> {
        writeln!(w, "ply")?;
        writeln!(w, "format ascii 1.0")?;
        writeln!(w, "element vertex {}", points.len())?;
        writeln!(w, "property float x")?;
        writeln!(w, "property float y")?;
        writeln!(w, "property float z")?;
        writeln!(w, "end_header")?;
        for p in points {
            writeln!(w, "{} {} {}", p[0], p[1], p[2])?;
        }
        w.flush()
    };
    emit().map_err(file_err(path))
}

/// Read an ASCII PLY vertex cloud. Only x/y/z properties are consumed;
/// extra per-vertex columns are ignored.
pub fn read_ply(path: &Path) -> Result<Vec<Vector3<f64>>, IoError> {
    let file = File::open(path).map_err(file_err(path))?;
    let reader = BufReader::new(file);
    let parse_err = |line: usize, message: String| IoError::Parse {
        path: path.to_path_buf(),
        line,
        message,
    };
    let mut lines = reader.lines().enumerate();
    let mut vertex_count: Option<usize> = None;
    for (idx, line) in &mut lines {
        let line = line.map_err(file_err(path))?;
        let line = line.trim();
        if idx == 0 && line != "ply" {
            return Err(parse_err(1, "missing ply magic".into()));
        }
        if let Some(rest) = line.strip_prefix("element vertex ") {
            vertex_count = Some(
                rest.trim()
                    .parse()
                    .map_err(|e| parse_err(idx + 1, format!("bad vertex count: {e}")))?,
            );
        }
        if line == "end_header" {
            break;
        }
    }
    let count = vertex_count.ok_or_else(|| parse_err(0, "no element vertex declared".into()))?;
    let mut points = Vec::with_capacity(count);
    for (idx, line) in lines.take(count) {
        let line = line.map_err(file_err(path))?;
        let mut it = line.split_ascii_whitespace();
        let mut next = |name: &str| -> Result<f64, IoError> {
            it.next()
                .ok_or_else(|| parse_err(idx + 1, format!("missing {name}")))?
                .parse()
                .map_err(|e| parse_err(idx + 1, format!("bad {name}: {e}")))
        };
        points.push(Vector3::new(next("x")?, next("y")?, next("z")?));
    }
    if points.len() != count {
        return Err(parse_err(0, format!("expected {count} vertices, got {}", points.len())));
    }
    Ok(points)
}

/// Write a trajectory in TUM format: `timestamp tx ty tz qx qy qz qw`.
pub fn write_tum(path: &Path, trajectory: &Trajectory) -> Result<(), IoError> {
    let file = File::create(path).map_err(file_err(path))?;
    let mut w = BufWriter::new(file);
    let mut emit = || -> std::io::Result<()> {
        for (t, pose) in &trajectory.samples {
            let tr = pose.translation();
            let [qx, qy, qz, qw] = pose.quaternion_xyzw();
            writeln!(w, "{} {} {} {} {} {} {} {}", t, tr[0], tr[1], tr[2], qx, qy, qz, qw)?;
        }
        w.flush()
    };
    emit().map_err(file_err(path))
}

pub fn read_tum(path: &Path) -> Result<Trajectory, IoError> {
    let file = File::open(path).map_err(file_err(path))?;
    let reader = BufReader::new(file);
    let mut samples = Vec::new();
    for (idx, line) in reader.lines().enumerate() {
        let line = line.map_err(file_err(path))?;
        let line = line.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let fields: Vec<f64> = line
            .split_ascii_whitespace()
            .map(|f| f.parse::<f64>())
            .collect::<Result<_, _>>()
            .map_err(|e| IoError::Parse {
                path: path.to_path_buf(),
                line: idx + 1,
                message: e.to_string(),
            })?;
        if fields.len() != 8 {
            return Err(IoError::Parse {
                path: path.to_path_buf(),
                line: idx + 1,
                message: format!("expected 8 fields, got {}", fields.len()),
            });
        }
        let pose = Pose::from_quaternion_xyzw(
            [fields[4], fields[5], fields[6], fields[7]],
            Vector3::new(fields[1], fields[2], fields[3]),
        );
        samples.push((fields[0], pose));
    }
    Ok(Trajectory { samples })
}

pub fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<(), IoError> {
    let json = serde_json::to_string_pretty(value).map_err(|source| IoError::Json {
        path: path.to_path_buf(),
        source,
    })?;
    fs::write(path, json + "\n").map_err(file_err(path))
}

pub fn read_json<T: for<'de> Deserialize<'de>>(path: &Path) -> Result<T, IoError> {
    let text = fs::read_to_string(path).map_err(file_err(path))?;
    serde_json::from_str(&text).map_err(|source| IoError::Json {
        path: path.to_path_buf(),
        source,
    })
}

/// One odometry record in `odometry.jsonl`.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct OdometryRecord {
    pub timestamp: f64,
    pub delta: PoseRecord,
    /// Row-major 6x6 covariance.
    pub covariance: Vec<f64>,
}

/// An experiment dataset: raw scan points per frame, ground truth, odometry
/// deltas, and the initial pose.
#[derive(Debug, Clone)]
pub struct Dataset {
    pub timestamps: Vec<f64>,
    pub scans: Vec<Vec<Vector3<f64>>>,
    pub ground_truth: Trajectory,
    pub odometry: Vec<MotionDelta>,
    pub initial_pose: Pose,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
struct DatasetMeta {
    frame_count: usize,
    timestamps: Vec<f64>,
    initial_pose: PoseRecord,
}

fn scan_file(dir: &Path, index: usize) -> PathBuf {
    dir.join("scans").join(format!("scan_{index:06}.ply"))
}

/// Write a dataset directory: `dataset.json`, `scans/scan_NNNNNN.ply`,
/// `groundtruth.tum`, `odometry.jsonl` and optionally `world.json`.
pub fn write_dataset(dir: &Path, dataset: &Dataset, world: Option<&World>) -> Result<(), IoError> {
    fs::create_dir_all(dir.join("scans")).map_err(file_err(dir))?;
    write_json(
        &dir.join("dataset.json"),
        &DatasetMeta {
            frame_count: dataset.scans.len(),
            timestamps: dataset.timestamps.clone(),
            initial_pose: PoseRecord::from(&dataset.initial_pose),
        },
    )?;
    for (i, scan) in dataset.scans.iter().enumerate() {
        write_ply(&scan_file(dir, i), scan)?;
    }
    write_tum(&dir.join("groundtruth.tum"), &dataset.ground_truth)?;
    let odom_path = dir.join("odometry.jsonl");
    let file = File::create(&odom_path).map_err(file_err(&odom_path))?;
    let mut w = BufWriter::new(file);
    for (i, motion) in dataset.odometry.iter().enumerate() {
        let record = OdometryRecord {
            timestamp: dataset.timestamps[i + 1],
            delta: PoseRecord::from(&motion.delta),
            covariance: motion.covariance.iter().copied().collect(),
        };
        let line = serde_json::to_string(&record).map_err(|source| IoError::Json {
            path: odom_path.clone(),
            source,
        })?;
        writeln!(w, "{line}").map_err(file_err(&odom_path))?;
    }
    w.flush().map_err(file_err(&odom_path))?;
    if let Some(world) = world {
        write_json(&dir.join("world.json"), world)?;
    }
    Ok(())
}

pub fn load_dataset(dir: &Path) -> Result<Dataset, IoError> {
    let meta: DatasetMeta = read_json(&dir.join("dataset.json"))?;
    let mut scans = Vec::with_capacity(meta.frame_count);
    for i in 0..meta.frame_count {
        scans.push(read_ply(&scan_file(dir, i))?);
    }
    let ground_truth = read_tum(&dir.join("groundtruth.tum"))?;
    let odom_path = dir.join("odometry.jsonl");
    let file = File::open(&odom_path).map_err(file_err(&odom_path))?;
    let mut odometry = Vec::new();
    for (idx, line) in BufReader::new(file).lines().enumerate() {
        let line = line.map_err(file_err(&odom_path))?;
        if line.trim().is_empty() {
            continue;
        }
        let record: OdometryRecord =
            serde_json::from_str(&line).map_err(|source| IoError::Json {
                path: odom_path.clone(),
                source,
            })?;
        if record.covariance.len() != 36 {
            return Err(IoError::Parse {
                path: odom_path.clone(),
                line: idx + 1,
                message: format!("covariance needs 36 entries, got {}", record.covariance.len()),
            });
        }
        let covariance = nalgebra::Matrix6::from_iterator(record.covariance.iter().copied())
            .transpose();
        odometry.push(MotionDelta {
            delta: Pose::from(&record.delta),
            covariance,
        });
    }
    Ok(Dataset {
        timestamps: meta.timestamps,
        scans,
        ground_truth,
        odometry,
        initial_pose: Pose::from(&meta.initial_pose),
    })
}

/// Append one JSON line to an open writer.
pub fn write_jsonl_line<T: Serialize, W: Write>(w: &mut W, value: &T) -> std::io::Result<()> {
    let line = serde_json::to_string(value).expect("serializable record");
    writeln!(w, "{line}")
}

pub fn read_snapshot(path: &Path) -> Result<ParticleSnapshot, IoError> {
    read_json(path)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::{stream, StreamPurpose};
    use nalgebra::Matrix6;
    use rand::Rng;

    #[test]
    fn ply_round_trip_is_exact() {
        let mut rng = stream(91, StreamPurpose::WorldGen, 0, 0);
        let points: Vec<Vector3<f64>> = (0..200)
            .map(|_| {
                Vector3::new(
                    rng.gen::<f64>() * 100.0 - 50.0,
                    rng.gen::<f64>() * 1e-3,
                    rng.gen::<f64>(),
                )
            })
            .collect();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("cloud.ply");
        write_ply(&path, &points).unwrap();
        let back = read_ply(&path).unwrap();
        assert_eq!(points, back);
    }

    #[test]
    fn tum_round_trip_preserves_poses() {
        let traj = Trajectory::new(
            (0..50)
                .map(|i| {
                    let t = i as f64 * 0.1;
                    (t, Pose::from_xyz_yaw(t, -t * 0.5, t * 0.1, t * 0.3))
                })
                .collect(),
        )
        .unwrap();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("traj.tum");
        write_tum(&path, &traj).unwrap();
        let back = read_tum(&path).unwrap();
        assert_eq!(back.len(), traj.len());
        for ((t0, p0), (t1, p1)) in traj.samples.iter().zip(back.samples.iter()) {
            assert_eq!(t0, t1);
            assert!((p0.translation() - p1.translation()).norm() < 1e-12);
            assert!((p0.rotation() - p1.rotation()).norm() < 1e-9);
        }
        // Writing the same trajectory twice is byte-identical.
        let path2 = dir.path().join("traj2.tum");
        write_tum(&path2, &traj).unwrap();
        assert_eq!(fs::read(&path).unwrap(), fs::read(&path2).unwrap());
    }

    #[test]
    fn dataset_round_trip() {
        let mut rng = stream(93, StreamPurpose::WorldGen, 0, 0);
        let frames = 4;
        let timestamps: Vec<f64> = (0..frames).map(|i| i as f64 * 0.1).collect();
        let scans: Vec<Vec<Vector3<f64>>> = (0..frames)
            .map(|_| {
                (0..30)
                    .map(|_| Vector3::new(rng.gen(), rng.gen(), rng.gen()))
                    .collect()
            })
            .collect();
        let ground_truth = Trajectory::new(
            timestamps
                .iter()
                .map(|&t| (t, Pose::from_xyz_yaw(t, 0.0, 0.0, 0.1 * t)))
                .collect(),
        )
        .unwrap();
        let odometry: Vec<MotionDelta> = (1..frames)
            .map(|_| MotionDelta {
                delta: Pose::from_xyz_yaw(0.1, 0.0, 0.0, 0.01),
                covariance: Matrix6::identity() * 1e-4,
            })
            .collect();
        let dataset = Dataset {
            timestamps,
            scans,
            ground_truth,
            odometry,
            initial_pose: Pose::from_xyz_yaw(0.0, 0.0, 0.0, 0.0),
        };
        let dir = tempfile::tempdir().unwrap();
        write_dataset(dir.path(), &dataset, None).unwrap();
        let back = load_dataset(dir.path()).unwrap();
        assert_eq!(back.timestamps, dataset.timestamps);
        assert_eq!(back.scans, dataset.scans);
        assert_eq!(back.odometry.len(), dataset.odometry.len());
        for (a, b) in back.odometry.iter().zip(dataset.odometry.iter()) {
            assert_eq!(a.covariance, b.covariance);
            assert!((a.delta.translation() - b.delta.translation()).norm() < 1e-12);
        }
    }
}
