//! 6-DoF Monte Carlo SLAM with gradient-guided particle updates.
//!
//! The filter maintains a set of particles, each hypothesizing the current
//! sensor pose together with the poses of all keyframes. Keyframe point
//! clouds are stored once in a shared store; particles only carry pose
//! vectors, which keeps memory independent of the particle count. Particle
//! states are corrected with Gauss-Newton steps on a GICP-style
//! distribution-to-distribution registration likelihood, and the current-pose
//! update is propagated backward along the trajectory with path-length
//! discounted weights.
//!
//! The crate also ships a synthetic world simulator (analytic ray casting
//! against boxes, cylinders and planes) and a trajectory evaluation module
//! (rigid alignment + ATE), so full experiments run without sensor data.

pub mod cloud;
pub mod eval;
pub mod filter;
pub mod gicp;
pub mod io;
pub mod particle;
pub mod rng;
pub mod se3;
pub mod sim;

pub use cloud::{GaussianPoint, Scan, VoxelMap};
pub use filter::{Filter, FilterConfig, FrameReport, MotionDelta};
pub use particle::{Keyframe, KeyframeStore, Particle, ParticleSet};
pub use se3::{Pose, Twist};
