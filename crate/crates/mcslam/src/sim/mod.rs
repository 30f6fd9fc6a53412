//! Synthetic environments, scan simulation and noisy odometry.
//!
//! Worlds are built from analytic primitives (axis-aligned boxes, vertical
//! cylinders, planes) so ray casting is exact and test oracles stay closed
//! form. The simulated odometry provider emits relative motions with
//! covariances and fails deliberately inside elevator segments, standing in
//! for a LiDAR-inertial front end.

mod script;
mod sensor;
mod world;

pub use script::{
    compile_legs, diagonal_noise, simulate_odometry, ElevatorSegment, ScriptLeg, ScriptWaypoint,
    TrajectoryScript,
};
pub use sensor::{detect_elevator, ray_directions, simulate_scan, SensorModel};
pub use world::{
    generate_world, multi_floor_feature_viewpoint, multi_floor_shaft_center, Aabb,
    ForestGridParams, LoopCorridorParams, MultiFloorParams, Primitive, World, WorldKind,
};

use thiserror::Error;

#[derive(Debug, Error, PartialEq)]
pub enum SimError {
    #[error("scan produced no returns")]
    EmptyScan,
    #[error("invalid parameter: {0}")]
    InvalidParams(String),
}
