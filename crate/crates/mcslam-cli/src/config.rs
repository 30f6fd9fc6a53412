//! Experiment configuration: a config plus a seed determines an entire run.

use std::path::Path;

use anyhow::{bail, Context, Result};
use serde::{Deserialize, Serialize};

use mcslam::filter::FilterConfig;
use mcslam::sim::{ScriptLeg, SensorModel, WorldKind};

/// Environment variable prefix for config overrides. A variable like
/// `MCSLAM_FILTER__PARTICLE_COUNT=500` overrides `filter.particle_count`;
/// `__` separates path segments.
pub const ENV_PREFIX: &str = "MCSLAM_";

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default)]
pub struct TrajectoryConfig {
    /// Seconds per frame.
    pub dt: f64,
    /// Starting position (x, y, eye height).
    pub start: [f64; 3],
    pub legs: Vec<ScriptLeg>,
    /// Per-step odometry noise sigmas.
    pub odom_sigma_translation: f64,
    pub odom_sigma_rotation: f64,
    /// Covariance inflation while the odometry is blind in the elevator.
    pub elevator_cov_scale: f64,
}

impl Default for TrajectoryConfig {
    fn default() -> Self {
        TrajectoryConfig {
            dt: 0.1,
            start: [0.0, 0.0, 1.2],
            legs: Vec::new(),
            odom_sigma_translation: 0.02,
            odom_sigma_rotation: 0.003,
            elevator_cov_scale: 10.0,
        }
    }
}

/// Elevator heuristic wiring: when enabled, frames whose median point
/// distance falls below the threshold run the prediction step with vertical
/// dispersion.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default)]
pub struct ElevatorConfig {
    pub enabled: bool,
    pub detection_threshold: f64,
    pub vertical_sigma: f64,
}

impl Default for ElevatorConfig {
    fn default() -> Self {
        ElevatorConfig {
            enabled: false,
            detection_threshold: 1.5,
            vertical_sigma: 0.45,
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ExperimentConfig {
    pub name: String,
    pub seed: u64,
    /// Worker threads; results never depend on this.
    #[serde(default = "default_workers")]
    pub workers: usize,
    pub world: WorldKind,
    pub trajectory: TrajectoryConfig,
    #[serde(default)]
    pub sensor: SensorModel,
    #[serde(default)]
    pub filter: FilterConfig,
    #[serde(default)]
    pub elevator: ElevatorConfig,
    /// Frames at which to dump particle snapshots.
    #[serde(default)]
    pub snapshot_frames: Vec<u64>,
}

fn default_workers() -> usize {
    1
}

impl ExperimentConfig {
    pub fn validate(&self) -> Result<()> {
        if self.trajectory.legs.is_empty() {
            bail!("trajectory.legs: at least one leg is required");
        }
        if !(self.trajectory.dt > 0.0) {
            bail!("trajectory.dt: must be positive, got {}", self.trajectory.dt);
        }
        if self.trajectory.odom_sigma_translation < 0.0 || self.trajectory.odom_sigma_rotation < 0.0
        {
            bail!("trajectory.odom_sigma_*: sigmas must be non-negative");
        }
        if self.workers == 0 {
            bail!("workers: must be at least 1");
        }
        self.sensor
            .validate()
            .map_err(|e| anyhow::anyhow!("sensor: {e}"))?;
        self.filter
            .validate()
            .map_err(|e| match e {
                mcslam::filter::FilterError::InvalidConfig { field, message } => {
                    anyhow::anyhow!("filter.{field}: {message}")
                }
                other => anyhow::anyhow!("filter: {other}"),
            })?;
        if self.elevator.enabled && !(self.elevator.detection_threshold > 0.0) {
            bail!(
                "elevator.detection_threshold: must be positive, got {}",
                self.elevator.detection_threshold
            );
        }
        if self.elevator.enabled && !(self.elevator.vertical_sigma > 0.0) {
            bail!(
                "elevator.vertical_sigma: must be positive, got {}",
                self.elevator.vertical_sigma
            );
        }
        Ok(())
    }

    /// Load a config from JSON, apply `MCSLAM_*` environment overrides, and
    /// validate.
    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)
            .with_context(|| format!("reading config {}", path.display()))?;
        let mut value: serde_json::Value = serde_json::from_str(&text)
            .with_context(|| format!("parsing config {}", path.display()))?;
        apply_env_overrides(&mut value, std::env::vars())?;
        let config: ExperimentConfig = serde_json::from_value(value)
            .with_context(|| format!("interpreting config {}", path.display()))?;
        config.validate()?;
        Ok(config)
    }
}

/// Apply `MCSLAM_A__B=value` overrides onto the raw JSON document. Values
/// parse as JSON when possible and fall back to strings.
pub fn apply_env_overrides(
    value: &mut serde_json::Value,
    vars: impl Iterator<Item = (String, String)>,
) -> Result<()> {
    for (key, raw) in vars {
        let Some(path) = key.strip_prefix(ENV_PREFIX) else {
            continue;
        };
        let segments: Vec<String> = path.split("__").map(|s| s.to_lowercase()).collect();
        if segments.iter().any(|s| s.is_empty()) {
            bail!("malformed override variable {key}");
        }
        let mut cursor = &mut *value;
        for segment in &segments[..segments.len() - 1] {
            cursor = cursor
                .as_object_mut()
                .with_context(|| format!("override {key}: {segment} is not an object"))?
                .entry(segment.clone())
                .or_insert(serde_json::Value::Object(Default::default()));
        }
        let leaf: serde_json::Value = serde_json::from_str(&raw)
            .unwrap_or_else(|_| serde_json::Value::String(raw.clone()));
        cursor
            .as_object_mut()
            .with_context(|| format!("override {key}: parent is not an object"))?
            .insert(segments.last().unwrap().clone(), leaf);
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use mcslam::sim::LoopCorridorParams;

    fn minimal() -> ExperimentConfig {
        ExperimentConfig {
            name: "test".into(),
            seed: 1,
            workers: 1,
            world: WorldKind::LoopCorridor(LoopCorridorParams::default()),
            trajectory: TrajectoryConfig {
                legs: vec![ScriptLeg::MoveTo {
                    x: 5.0,
                    y: 1.5,
                    frames: 10,
                }],
                ..TrajectoryConfig::default()
            },
            sensor: SensorModel::default(),
            filter: FilterConfig::default(),
            elevator: ElevatorConfig::default(),
            snapshot_frames: vec![],
        }
    }

    #[test]
    fn validation_names_offending_field() {
        let mut config = minimal();
        config.filter.overlap_threshold = 1.5;
        let err = config.validate().unwrap_err().to_string();
        assert!(err.contains("filter.overlap_threshold"), "{err}");
        assert!(err.contains("1.5"), "{err}");
    }

    #[test]
    fn env_overrides_descend_paths() {
        let config = minimal();
        let mut value = serde_json::to_value(&config).unwrap();
        apply_env_overrides(
            &mut value,
            vec![
                ("MCSLAM_FILTER__PARTICLE_COUNT".to_string(), "42".to_string()),
                ("MCSLAM_NAME".to_string(), "renamed".to_string()),
                ("UNRELATED".to_string(), "ignored".to_string()),
            ]
            .into_iter(),
        )
        .unwrap();
        let patched: ExperimentConfig = serde_json::from_value(value).unwrap();
        assert_eq!(patched.filter.particle_count, 42);
        assert_eq!(patched.name, "renamed");
    }

    #[test]
    fn config_round_trips_through_json() {
        let config = minimal();
        let text = serde_json::to_string_pretty(&config).unwrap();
        let back: ExperimentConfig = serde_json::from_str(&text).unwrap();
        assert_eq!(back.name, config.name);
        assert_eq!(back.filter.particle_count, config.filter.particle_count);
    }
}
