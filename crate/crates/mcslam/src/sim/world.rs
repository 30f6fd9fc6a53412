//! Analytic world primitives, ray casting and world generators.

use nalgebra::Vector3;
use rand::Rng;
use serde::{Deserialize, Serialize};

use super::SimError;
use crate::rng::{stream, StreamPurpose};

/// Geometric primitive with an exact ray intersection.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "snake_case")]
pub enum Primitive {
    /// Axis-aligned box.
    Box {
        min: Vector3<f64>,
        max: Vector3<f64>,
    },
    /// Vertical cylinder (side surface only).
    Cylinder {
        center_x: f64,
        center_y: f64,
        z_min: f64,
        z_max: f64,
        radius: f64,
    },
    /// Infinite plane through `anchor` with unit `normal`.
    Plane {
        anchor: Vector3<f64>,
        normal: Vector3<f64>,
    },
}

impl Primitive {
    /// Smallest positive ray parameter of the intersection, if any.
    pub fn ray_hit(&self, origin: &Vector3<f64>, dir: &Vector3<f64>) -> Option<f64> {
        match self {
            Primitive::Box { min, max } => ray_box(origin, dir, min, max),
            Primitive::Cylinder {
                center_x,
                center_y,
                z_min,
                z_max,
                radius,
            } => ray_cylinder(origin, dir, *center_x, *center_y, *z_min, *z_max, *radius),
            Primitive::Plane { anchor, normal } => ray_plane(origin, dir, anchor, normal),
        }
    }
}

fn ray_box(
    origin: &Vector3<f64>,
    dir: &Vector3<f64>,
    min: &Vector3<f64>,
    max: &Vector3<f64>,
) -> Option<f64> {
    let mut t_near = f64::NEG_INFINITY;
    let mut t_far = f64::INFINITY;
    for axis in 0..3 {
        if dir[axis].abs() < 1e-15 {
            if origin[axis] < min[axis] || origin[axis] > max[axis] {
                return None;
            }
            continue;
        }
        let inv = 1.0 / dir[axis];
        let mut t0 = (min[axis] - origin[axis]) * inv;
        let mut t1 = (max[axis] - origin[axis]) * inv;
        if t0 > t1 {
            std::mem::swap(&mut t0, &mut t1);
        }
        t_near = t_near.max(t0);
        t_far = t_far.min(t1);
        if t_near > t_far {
            return None;
        }
    }
    if t_far < 0.0 {
        None
    } else if t_near > 1e-9 {
        Some(t_near)
    } else if t_far > 1e-9 {
        Some(t_far)
    } else {
        None
    }
}

fn ray_cylinder(
    origin: &Vector3<f64>,
    dir: &Vector3<f64>,
    cx: f64,
    cy: f64,
    z_min: f64,
    z_max: f64,
    radius: f64,
) -> Option<f64> {
    let ox = origin[0] - cx;
    let oy = origin[1] - cy;
    let a = dir[0] * dir[0] + dir[1] * dir[1];
    if a < 1e-15 {
        return None;
    }
    let b = 2.0 * (ox * dir[0] + oy * dir[1]);
    let c = ox * ox + oy * oy - radius * radius;
    let disc = b * b - 4.0 * a * c;
    if disc < 0.0 {
        return None;
    }
    let sqrt_disc = disc.sqrt();
    for t in [(-b - sqrt_disc) / (2.0 * a), (-b + sqrt_disc) / (2.0 * a)] {
        if t > 1e-9 {
            let z = origin[2] + t * dir[2];
            if z >= z_min && z <= z_max {
                return Some(t);
            }
        }
    }
    None
}

fn ray_plane(
    origin: &Vector3<f64>,
    dir: &Vector3<f64>,
    anchor: &Vector3<f64>,
    normal: &Vector3<f64>,
) -> Option<f64> {
    let denom = dir.dot(normal);
    if denom.abs() < 1e-12 {
        return None;
    }
    let t = (anchor - origin).dot(normal) / denom;
    if t > 1e-9 {
        Some(t)
    } else {
        None
    }
}

/// Axis-aligned bounding box.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Aabb {
    pub min: Vector3<f64>,
    pub max: Vector3<f64>,
}

impl Aabb {
    pub fn contains(&self, p: &Vector3<f64>) -> bool {
        (0..3).all(|i| p[i] >= self.min[i] && p[i] <= self.max[i])
    }
}

/// Synthetic environment: a list of primitives plus world bounds.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct World {
    pub surfaces: Vec<Primitive>,
    pub bounds: Aabb,
}

impl World {
    /// First-hit distance along the ray, capped at `max_range`.
    pub fn ray_cast(
        &self,
        origin: &Vector3<f64>,
        dir: &Vector3<f64>,
        max_range: f64,
    ) -> Option<f64> {
        let mut best = max_range;
        let mut hit = false;
        for surface in &self.surfaces {
            if let Some(t) = surface.ray_hit(origin, dir) {
                if t < best {
                    best = t;
                    hit = true;
                }
            }
        }
        hit.then_some(best)
    }
}

/// World generator selector with its parameters.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum WorldKind {
    ForestGrid(ForestGridParams),
    MultiFloor(MultiFloorParams),
    LoopCorridor(LoopCorridorParams),
}

/// Regular cylinder grid with per-tree jitter over a ground plane. The
/// repeated lattice makes registration deliberately ambiguous under
/// one-pitch shifts.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ForestGridParams {
    pub nx: usize,
    pub ny: usize,
    pub pitch: f64,
    pub trunk_radius: f64,
    /// Uniform radius jitter amplitude (+/-).
    pub radius_jitter: f64,
    /// Uniform position jitter amplitude (+/-) per axis.
    pub position_jitter: f64,
    pub trunk_height: f64,
}

impl Default for ForestGridParams {
    fn default() -> Self {
        ForestGridParams {
            nx: 10,
            ny: 10,
            pitch: 4.0,
            trunk_radius: 0.3,
            radius_jitter: 0.003,
            position_jitter: 0.0,
            trunk_height: 5.0,
        }
    }
}

/// Stacked near-identical floor plans connected by a full-height elevator
/// shaft. Each floor carries one distinguishing feature: a box in the
/// south-west room whose height depends on the floor index.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct MultiFloorParams {
    pub floors: usize,
    pub floor_height: f64,
    /// Feature box height on floor f: `feature_base_height + f * feature_height_step`.
    pub feature_base_height: f64,
    pub feature_height_step: f64,
}

impl Default for MultiFloorParams {
    fn default() -> Self {
        MultiFloorParams {
            floors: 3,
            floor_height: 3.5,
            feature_base_height: 0.8,
            feature_height_step: 0.6,
        }
    }
}

/// Rectangular loop of walls around an inner block, over a ground plane.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct LoopCorridorParams {
    pub width: f64,
    pub depth: f64,
    pub corridor_width: f64,
    pub wall_height: f64,
}

impl Default for LoopCorridorParams {
    fn default() -> Self {
        LoopCorridorParams {
            width: 20.0,
            depth: 14.0,
            corridor_width: 3.0,
            wall_height: 3.0,
        }
    }
}

pub fn generate_world(kind: &WorldKind, seed: u64) -> Result<World, SimError> {
    match kind {
        WorldKind::ForestGrid(p) => forest_grid(p, seed),
        WorldKind::MultiFloor(p) => multi_floor(p),
        WorldKind::LoopCorridor(p) => loop_corridor(p),
    }
}

fn forest_grid(p: &ForestGridParams, seed: u64) -> Result<World, SimError> {
    if p.nx == 0 || p.ny == 0 {
        return Err(SimError::InvalidParams("forest grid needs nx, ny >= 1".into()));
    }
    if p.pitch <= 0.0 || p.trunk_radius <= 0.0 || p.trunk_height <= 0.0 {
        return Err(SimError::InvalidParams(
            "forest pitch, radius and height must be positive".into(),
        ));
    }
    if p.radius_jitter >= p.trunk_radius {
        return Err(SimError::InvalidParams(
            "radius jitter must stay below the trunk radius".into(),
        ));
    }
    let mut rng = stream(seed, StreamPurpose::WorldGen, 0, 0);
    let mut surfaces = vec![Primitive::Plane {
        anchor: Vector3::zeros(),
        normal: Vector3::new(0.0, 0.0, 1.0),
    }];
    for i in 0..p.nx {
        for j in 0..p.ny {
            let jitter = |rng: &mut rand_chacha::ChaCha8Rng, amp: f64| {
                (rng.gen::<f64>() * 2.0 - 1.0) * amp
            };
            surfaces.push(Primitive::Cylinder {
                center_x: i as f64 * p.pitch + jitter(&mut rng, p.position_jitter),
                center_y: j as f64 * p.pitch + jitter(&mut rng, p.position_jitter),
                z_min: 0.0,
                z_max: p.trunk_height,
                radius: p.trunk_radius + jitter(&mut rng, p.radius_jitter),
            });
        }
    }
    let margin = p.pitch;
    Ok(World {
        surfaces,
        bounds: Aabb {
            min: Vector3::new(-margin, -margin, -1.0),
            max: Vector3::new(
                (p.nx - 1) as f64 * p.pitch + margin,
                (p.ny - 1) as f64 * p.pitch + margin,
                p.trunk_height + 1.0,
            ),
        },
    })
}

// Fixed multi-floor footprint, in meters. The plan repeats identically on
// every floor; only the feature box height differs. Walls and slabs are
// deliberately thicker than the voxel correspondence reach used indoors, so
// the unmapped back face of a wall can never alias as a correspondence for
// its front face.
const MF_X: f64 = 17.0;
const MF_Y: f64 = 11.0;
const MF_WALL: f64 = 0.8;
const MF_SLAB: f64 = 0.8;
const MF_CLEAR: f64 = 2.7;
// Corridor band.
const MF_CORRIDOR_Y0: f64 = 4.3;
const MF_CORRIDOR_Y1: f64 = 6.9;
// Feature room door gap in the corridor-south wall.
const MF_DOOR_X0: f64 = 4.0;
const MF_DOOR_X1: f64 = 5.3;
const MF_DOOR_H: f64 = 2.2;
// Elevator shaft interior.
const MF_SHAFT_X0: f64 = 14.6;
const MF_SHAFT_X1: f64 = 16.2;
const MF_SHAFT_Y0: f64 = 4.5;
const MF_SHAFT_Y1: f64 = 6.1;
// Shaft door gap in its west wall.
const MF_SHAFT_DOOR_Y0: f64 = 4.9;
const MF_SHAFT_DOOR_Y1: f64 = 5.7;
// Feature box footprint.
const MF_FEAT_X0: f64 = 2.0;
const MF_FEAT_X1: f64 = 3.2;
const MF_FEAT_Y0: f64 = 1.3;
const MF_FEAT_Y1: f64 = 2.5;

/// Interior center of the elevator shaft, used by trajectory scripts.
pub fn multi_floor_shaft_center() -> (f64, f64) {
    (
        0.5 * (MF_SHAFT_X0 + MF_SHAFT_X1),
        0.5 * (MF_SHAFT_Y0 + MF_SHAFT_Y1),
    )
}

/// Center of the feature room in front of the feature box.
pub fn multi_floor_feature_viewpoint() -> (f64, f64) {
    (4.65, 2.4)
}

fn boxp(x0: f64, x1: f64, y0: f64, y1: f64, z0: f64, z1: f64) -> Primitive {
    Primitive::Box {
        min: Vector3::new(x0, y0, z0),
        max: Vector3::new(x1, y1, z1),
    }
}

fn multi_floor(p: &MultiFloorParams) -> Result<World, SimError> {
    if p.floors < 2 {
        return Err(SimError::InvalidParams("multi_floor needs at least 2 floors".into()));
    }
    if p.floor_height <= MF_CLEAR {
        return Err(SimError::InvalidParams(format!(
            "floor height must exceed the {MF_CLEAR} m clearance"
        )));
    }
    let h = p.floor_height;
    let mut s = Vec::new();
    let shaft_top = p.floors as f64 * h - MF_SLAB;

    // Slabs with a hole at the shaft footprint; level 0 is the ground slab
    // and level `floors` is the roof (which seals the shaft).
    for level in 0..=p.floors {
        let z1 = level as f64 * h;
        let z0 = z1 - MF_SLAB;
        if level == p.floors {
            s.push(boxp(0.0, MF_X, 0.0, MF_Y, z0, z1));
            continue;
        }
        s.push(boxp(0.0, MF_SHAFT_X0, 0.0, MF_Y, z0, z1));
        s.push(boxp(MF_SHAFT_X0, MF_X, 0.0, MF_SHAFT_Y0, z0, z1));
        s.push(boxp(MF_SHAFT_X0, MF_X, MF_SHAFT_Y1, MF_Y, z0, z1));
        s.push(boxp(MF_SHAFT_X1, MF_X, MF_SHAFT_Y0, MF_SHAFT_Y1, z0, z1));
    }

    // Per-floor plan.
    for f in 0..p.floors {
        let z0 = f as f64 * h;
        let z1 = z0 + MF_CLEAR;
        // Outer walls.
        s.push(boxp(0.0, MF_X, 0.0, MF_WALL, z0, z1));
        s.push(boxp(0.0, MF_X, MF_Y - MF_WALL, MF_Y, z0, z1));
        s.push(boxp(0.0, MF_WALL, MF_WALL, MF_Y - MF_WALL, z0, z1));
        s.push(boxp(MF_X - MF_WALL, MF_X, MF_WALL, MF_Y - MF_WALL, z0, z1));
        // Corridor-south wall with the feature-room door.
        let ys0 = MF_CORRIDOR_Y0 - MF_WALL;
        let ys1 = MF_CORRIDOR_Y0;
        s.push(boxp(MF_WALL, MF_DOOR_X0, ys0, ys1, z0, z1));
        s.push(boxp(MF_DOOR_X1, MF_X - MF_WALL, ys0, ys1, z0, z1));
        s.push(boxp(MF_DOOR_X0, MF_DOOR_X1, ys0, ys1, z0 + MF_DOOR_H, z1));
        // Corridor-north wall, solid.
        s.push(boxp(
            MF_WALL,
            MF_X - MF_WALL,
            MF_CORRIDOR_Y1,
            MF_CORRIDOR_Y1 + MF_WALL,
            z0,
            z1,
        ));
        // Shaft door header above the per-floor opening.
        s.push(boxp(
            MF_SHAFT_X0 - MF_WALL,
            MF_SHAFT_X0,
            MF_SHAFT_DOOR_Y0,
            MF_SHAFT_DOOR_Y1,
            z0 + MF_DOOR_H,
            z1,
        ));
        // Sill ring inside the shaft at each floor: door sills and guide-rail
        // ledges give the otherwise z-invariant tube a per-floor signature,
        // exactly repeated every floor.
        let (sz0, sz1) = (z0 + 1.0, z0 + 1.2);
        let d = 0.25;
        s.push(boxp(MF_SHAFT_X0, MF_SHAFT_X1, MF_SHAFT_Y1 - d, MF_SHAFT_Y1, sz0, sz1));
        s.push(boxp(MF_SHAFT_X0, MF_SHAFT_X1, MF_SHAFT_Y0, MF_SHAFT_Y0 + d, sz0, sz1));
        s.push(boxp(MF_SHAFT_X1 - d, MF_SHAFT_X1, MF_SHAFT_Y0, MF_SHAFT_Y1, sz0, sz1));
        // Distinguishing feature: same footprint, floor-dependent height.
        let feat_h = p.feature_base_height + f as f64 * p.feature_height_step;
        if feat_h > 0.0 {
            s.push(boxp(MF_FEAT_X0, MF_FEAT_X1, MF_FEAT_Y0, MF_FEAT_Y1, z0, z0 + feat_h));
        }
    }

    // Full-height shaft walls.
    let zb = -MF_SLAB;
    s.push(boxp(MF_SHAFT_X0, MF_SHAFT_X1, MF_SHAFT_Y1, MF_SHAFT_Y1 + MF_WALL, zb, shaft_top));
    s.push(boxp(MF_SHAFT_X0, MF_SHAFT_X1, MF_SHAFT_Y0 - MF_WALL, MF_SHAFT_Y0, zb, shaft_top));
    s.push(boxp(MF_SHAFT_X1, MF_X, MF_SHAFT_Y0 - MF_WALL, MF_SHAFT_Y1 + MF_WALL, zb, shaft_top));
    // West shaft wall flanks around the per-floor door column.
    s.push(boxp(
        MF_SHAFT_X0 - MF_WALL,
        MF_SHAFT_X0,
        MF_SHAFT_Y0 - MF_WALL,
        MF_SHAFT_DOOR_Y0,
        zb,
        shaft_top,
    ));
    s.push(boxp(
        MF_SHAFT_X0 - MF_WALL,
        MF_SHAFT_X0,
        MF_SHAFT_DOOR_Y1,
        MF_SHAFT_Y1 + MF_WALL,
        zb,
        shaft_top,
    ));

    Ok(World {
        surfaces: s,
        bounds: Aabb {
            min: Vector3::new(-1.0, -1.0, -1.0),
            max: Vector3::new(MF_X + 1.0, MF_Y + 1.0, p.floors as f64 * h + 1.0),
        },
    })
}

fn loop_corridor(p: &LoopCorridorParams) -> Result<World, SimError> {
    if p.width <= 2.0 * p.corridor_width || p.depth <= 2.0 * p.corridor_width {
        return Err(SimError::InvalidParams(
            "loop corridor needs width and depth above twice the corridor width".into(),
        ));
    }
    if p.wall_height <= 0.0 || p.corridor_width <= 0.0 {
        return Err(SimError::InvalidParams(
            "wall height and corridor width must be positive".into(),
        ));
    }
    let t = 0.3;
    let c = p.corridor_width;
    let mut s = vec![Primitive::Plane {
        anchor: Vector3::zeros(),
        normal: Vector3::new(0.0, 0.0, 1.0),
    }];
    // Outer walls: a closed rectangular circuit.
    s.push(boxp(-t, p.width + t, -t, 0.0, 0.0, p.wall_height));
    s.push(boxp(-t, p.width + t, p.depth, p.depth + t, 0.0, p.wall_height));
    s.push(boxp(-t, 0.0, 0.0, p.depth, 0.0, p.wall_height));
    s.push(boxp(p.width, p.width + t, 0.0, p.depth, 0.0, p.wall_height));
    // Inner block.
    s.push(boxp(c, p.width - c, c, p.depth - c, 0.0, p.wall_height));
    Ok(World {
        surfaces: s,
        bounds: Aabb {
            min: Vector3::new(-1.0, -1.0, -1.0),
            max: Vector3::new(p.width + 1.0, p.depth + 1.0, p.wall_height + 1.0),
        },
    })
}
