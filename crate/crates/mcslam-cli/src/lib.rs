//! Experiment harness: reproducible simulation-filter-evaluation runs driven
//! by JSON configs.

pub mod cluster;
pub mod config;
pub mod runner;

pub use cluster::{cluster_snapshot, Cluster, ClusterReport};
pub use config::{ElevatorConfig, ExperimentConfig, TrajectoryConfig};
pub use runner::{generate_dataset, run_experiment, run_slam, ExperimentReport};
