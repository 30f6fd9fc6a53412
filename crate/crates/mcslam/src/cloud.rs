//! Point clouds with per-point surface covariances and the voxel hash map
//! used for correspondence search and the keyframe-overlap metric.

use nalgebra::{Matrix3, Vector3};
use thiserror::Error;

use crate::se3::Pose;

/// Smallest regularized covariance eigenvalue. Every point covariance is
/// flattened to eigenvalues (1, 1, EPSILON_PLANE), which keeps the fused
/// information matrices invertible even for perfectly planar neighborhoods.
pub const EPSILON_PLANE: f64 = 1e-3;

/// Default neighbor count for surface covariance estimation.
pub const DEFAULT_COVARIANCE_K: usize = 10;

#[derive(Debug, Error, PartialEq)]
pub enum CloudError {
    #[error("covariance estimation needs at least {needed} points, got {got}")]
    TooFewPoints { needed: usize, got: usize },
    #[error("neighbor count k must be at least 4, got {0}")]
    KTooSmall(usize),
    #[error("voxel resolution must be positive, got {0}")]
    BadResolution(f64),
}

/// A point modeled as a Gaussian over the local surface.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GaussianPoint {
    pub mean: Vector3<f64>,
    pub covariance: Matrix3<f64>,
}

/// One sensor frame: Gaussian points in the sensor coordinate frame.
#[derive(Debug, Clone, PartialEq)]
pub struct Scan {
    pub points: Vec<GaussianPoint>,
    pub timestamp: f64,
}

impl Scan {
    pub fn len(&self) -> usize {
        self.points.len()
    }

    pub fn is_empty(&self) -> bool {
        self.points.is_empty()
    }
}

/// Replace the eigenvalues of a symmetric PSD matrix with (1, 1, eps),
/// keeping the eigenvectors. The smallest eigenvalue direction (the surface
/// normal for locally planar neighborhoods) receives eps.
fn plane_regularize(cov: &Matrix3<f64>) -> Matrix3<f64> {
    let eig = cov.symmetric_eigen();
    let mut order = [0usize, 1, 2];
    order.sort_by(|&a, &b| eig.eigenvalues[b].partial_cmp(&eig.eigenvalues[a]).unwrap());
    let v1 = eig.eigenvectors.column(order[0]);
    let v2 = eig.eigenvectors.column(order[1]);
    let v3 = eig.eigenvectors.column(order[2]);
    v1 * v1.transpose() + v2 * v2.transpose() + v3 * v3.transpose() * EPSILON_PLANE
}

/// Estimate a plane-regularized covariance for every point from the sample
/// covariance of its k nearest neighbors (exact search).
pub fn estimate_covariances(
    points: &[Vector3<f64>],
    k: usize,
    timestamp: f64,
) -> Result<Scan, CloudError> {
    if k < 4 {
        return Err(CloudError::KTooSmall(k));
    }
    if points.len() < k + 1 {
        return Err(CloudError::TooFewPoints {
            needed: k + 1,
            got: points.len(),
        });
    }
    let mut out = Vec::with_capacity(points.len());
    let mut dist: Vec<(f64, usize)> = Vec::with_capacity(points.len() - 1);
    for (i, p) in points.iter().enumerate() {
        dist.clear();
        for (j, q) in points.iter().enumerate() {
            if i != j {
                dist.push(((p - q).norm_squared(), j));
            }
        }
        dist.select_nth_unstable_by(k - 1, |a, b| a.partial_cmp(b).unwrap());
        let neighbors = &dist[..k];
        let mut mean = Vector3::zeros();
        for &(_, j) in neighbors {
            mean += points[j];
        }
        mean /= k as f64;
        let mut cov = Matrix3::zeros();
        for &(_, j) in neighbors {
            let d = points[j] - mean;
            cov += d * d.transpose();
        }
        cov /= k as f64;
        out.push(GaussianPoint {
            mean: *p,
            covariance: plane_regularize(&cov),
        });
    }
    Ok(Scan {
        points: out,
        timestamp,
    })
}

/// Integer cell index of a point at the given inverse resolution.
#[inline]
pub fn voxel_key(p: &Vector3<f64>, inv_resolution: f64) -> [i32; 3] {
    [
        (p[0] * inv_resolution).floor() as i32,
        (p[1] * inv_resolution).floor() as i32,
        (p[2] * inv_resolution).floor() as i32,
    ]
}

/// Sentinel for empty hash slots; packed keys never collide with it.
const EMPTY_KEY: u64 = u64::MAX;
/// Per-axis offset packing signed cell indices into 21-bit fields.
const PACK_BIAS: i64 = 1 << 20;

#[inline]
fn pack_key(key: [i32; 3]) -> u64 {
    let x = (key[0] as i64 + PACK_BIAS) as u64 & 0x1F_FFFF;
    let y = (key[1] as i64 + PACK_BIAS) as u64 & 0x1F_FFFF;
    let z = (key[2] as i64 + PACK_BIAS) as u64 & 0x1F_FFFF;
    (x << 42) | (y << 21) | z
}

#[inline]
fn unpack_key(packed: u64) -> [i32; 3] {
    let x = ((packed >> 42) & 0x1F_FFFF) as i64 - PACK_BIAS;
    let y = ((packed >> 21) & 0x1F_FFFF) as i64 - PACK_BIAS;
    let z = (packed & 0x1F_FFFF) as i64 - PACK_BIAS;
    [x as i32, y as i32, z as i32]
}

#[inline]
fn hash_packed(packed: u64) -> u64 {
    let h = packed.wrapping_mul(0x9E37_79B9_7F4A_7C15);
    h ^ (h >> 32)
}

/// Aggregate of all points that fell into one voxel: mean of means, mean of
/// covariances, member count.
#[derive(Debug, Clone)]
pub struct VoxelCell {
    pub aggregate: GaussianPoint,
    pub count: u32,
}

/// Voxel hash map over a scan. Immutable after construction. Lookups go
/// through a flat open-addressing table with packed 8-byte keys and a dense
/// payload array. A second "shell" table covers the one-voxel dilation of
/// the occupied set and holds, per cell, the ordered list of occupied
/// neighbors, so near-miss correspondence queries cost one probe plus a few
/// distance checks instead of 26 hash probes.
#[derive(Debug, Clone)]
pub struct VoxelMap {
    resolution: f64,
    inv_resolution: f64,
    /// Open-addressing key table; EMPTY_KEY marks free slots.
    keys: Vec<u64>,
    /// Payload index per slot, parallel to `keys`.
    payload_index: Vec<u32>,
    cells: Vec<VoxelCell>,
    mask: usize,
    /// Dilated neighborhood table: cell -> slice of `shell_candidates`.
    shell_keys: Vec<u64>,
    shell_span: Vec<(u32, u16)>,
    shell_mask: usize,
    /// Occupied-neighbor payload indices, ordered by relative cell offset in
    /// the same lexicographic (dx, dy, dz) order a direct 27-cell sweep uses,
    /// which pins down tie-breaking.
    shell_candidates: Vec<u32>,
}

impl VoxelMap {
    pub fn build(scan: &Scan, resolution: f64) -> Result<VoxelMap, CloudError> {
        if !(resolution > 0.0) {
            return Err(CloudError::BadResolution(resolution));
        }
        let inv_resolution = 1.0 / resolution;
        let mut accum: std::collections::HashMap<u64, (Vector3<f64>, Matrix3<f64>, u32)> =
            std::collections::HashMap::new();
        for p in &scan.points {
            let key = pack_key(voxel_key(&p.mean, inv_resolution));
            let entry = accum
                .entry(key)
                .or_insert((Vector3::zeros(), Matrix3::zeros(), 0));
            entry.0 += p.mean;
            entry.1 += p.covariance;
            entry.2 += 1;
        }
        let capacity = (accum.len() * 2).next_power_of_two().max(16);
        let mask = capacity - 1;
        let mut keys = vec![EMPTY_KEY; capacity];
        let mut payload_index = vec![0u32; capacity];
        let mut cells = Vec::with_capacity(accum.len());
        let mut cell_keys = Vec::with_capacity(accum.len());
        for (key, (mean_sum, cov_sum, count)) in accum {
            let n = count as f64;
            let mut idx = hash_packed(key) as usize & mask;
            while keys[idx] != EMPTY_KEY {
                idx = (idx + 1) & mask;
            }
            keys[idx] = key;
            payload_index[idx] = cells.len() as u32;
            cell_keys.push(key);
            cells.push(VoxelCell {
                aggregate: GaussianPoint {
                    mean: mean_sum / n,
                    covariance: cov_sum / n,
                },
                count,
            });
        }

        // Dilated shell: for every cell within one voxel of an occupied one,
        // record the occupied neighbors ordered by relative offset.
        let mut shell: std::collections::HashMap<u64, Vec<(u8, u32)>> =
            std::collections::HashMap::new();
        for (payload, &packed) in cell_keys.iter().enumerate() {
            let key = unpack_key(packed);
            let mut order = 0u8;
            for dx in -1..=1i32 {
                for dy in -1..=1i32 {
                    for dz in -1..=1i32 {
                        if dx == 0 && dy == 0 && dz == 0 {
                            continue;
                        }
                        // The occupied cell `key` sits at offset (dx,dy,dz)
                        // from the shell cell it is a candidate for.
                        let shell_cell =
                            pack_key([key[0] - dx, key[1] - dy, key[2] - dz]);
                        shell
                            .entry(shell_cell)
                            .or_default()
                            .push((order, payload as u32));
                        order += 1;
                    }
                }
            }
        }
        let shell_capacity = (shell.len() * 2).next_power_of_two().max(16);
        let shell_mask = shell_capacity - 1;
        let mut shell_keys = vec![EMPTY_KEY; shell_capacity];
        let mut shell_span = vec![(0u32, 0u16); shell_capacity];
        let mut shell_candidates = Vec::new();
        for (cell, mut entries) in shell {
            entries.sort_unstable();
            let start = shell_candidates.len() as u32;
            shell_candidates.extend(entries.iter().map(|(_, payload)| *payload));
            let mut idx = hash_packed(cell) as usize & shell_mask;
            while shell_keys[idx] != EMPTY_KEY {
                idx = (idx + 1) & shell_mask;
            }
            shell_keys[idx] = cell;
            shell_span[idx] = (start, entries.len() as u16);
        }

        Ok(VoxelMap {
            resolution,
            inv_resolution,
            keys,
            payload_index,
            cells,
            mask,
            shell_keys,
            shell_span,
            shell_mask,
            shell_candidates,
        })
    }

    pub fn resolution(&self) -> f64 {
        self.resolution
    }

    /// Number of occupied voxels.
    pub fn len(&self) -> usize {
        self.cells.len()
    }

    pub fn is_empty(&self) -> bool {
        self.cells.is_empty()
    }

    #[inline]
    fn get_packed(&self, packed: u64) -> Option<&VoxelCell> {
        let mut idx = hash_packed(packed) as usize & self.mask;
        loop {
            let k = self.keys[idx];
            if k == packed {
                return Some(&self.cells[self.payload_index[idx] as usize]);
            }
            if k == EMPTY_KEY {
                return None;
            }
            idx = (idx + 1) & self.mask;
        }
    }

    #[inline]
    pub fn get(&self, key: [i32; 3]) -> Option<&VoxelCell> {
        self.get_packed(pack_key(key))
    }

    pub fn iter(&self) -> impl Iterator<Item = ([i32; 3], &VoxelCell)> {
        self.keys
            .iter()
            .zip(self.payload_index.iter())
            .filter(|(k, _)| **k != EMPTY_KEY)
            .map(|(k, i)| (unpack_key(*k), &self.cells[*i as usize]))
    }

    /// Correspondence for a query point: the aggregate of the voxel containing
    /// the query if occupied, otherwise the aggregate of the occupied cell in
    /// the 27-cell neighborhood whose mean is nearest to the query. `None`
    /// when the whole neighborhood is empty; unmatched points simply drop out
    /// of the registration sums.
    #[inline]
    pub fn find_correspondence(&self, query: &Vector3<f64>) -> Option<&GaussianPoint> {
        let packed = pack_key(voxel_key(query, self.inv_resolution));
        if let Some(cell) = self.get_packed(packed) {
            return Some(&cell.aggregate);
        }
        // Shell lookup: candidates are pre-ordered by relative offset, and
        // strict less-than keeps the first of any tied pair, matching a
        // direct sweep over the 27-cell neighborhood.
        let mut idx = hash_packed(packed) as usize & self.shell_mask;
        let (start, len) = loop {
            let k = self.shell_keys[idx];
            if k == packed {
                break self.shell_span[idx];
            }
            if k == EMPTY_KEY {
                return None;
            }
            idx = (idx + 1) & self.shell_mask;
        };
        let mut best: Option<&GaussianPoint> = None;
        let mut best_dist = f64::INFINITY;
        for &payload in &self.shell_candidates[start as usize..start as usize + len as usize] {
            let aggregate = &self.cells[payload as usize].aggregate;
            let d = (aggregate.mean - query).norm_squared();
            if d < best_dist {
                best_dist = d;
                best = Some(aggregate);
            }
        }
        best
    }

    /// Whether the voxel containing the query is occupied.
    #[inline]
    pub fn contains(&self, query: &Vector3<f64>) -> bool {
        self.get_packed(pack_key(voxel_key(query, self.inv_resolution)))
            .is_some()
    }
}

/// Fraction of scan points that, after transformation by `rel_pose`, land in
/// an occupied voxel of `map`.
pub fn overlap_rate(scan: &Scan, rel_pose: &Pose, map: &VoxelMap) -> f64 {
    if scan.is_empty() {
        return 0.0;
    }
    let hits = scan
        .points
        .iter()
        .filter(|p| map.contains(&rel_pose.transform_point(&p.mean)))
        .count();
    hits as f64 / scan.len() as f64
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::{stream, StreamPurpose};
    use approx::assert_abs_diff_eq;
    use rand::Rng;

    fn scan_from_points(points: &[Vector3<f64>]) -> Scan {
        Scan {
            points: points
                .iter()
                .map(|p| GaussianPoint {
                    mean: *p,
                    covariance: Matrix3::identity(),
                })
                .collect(),
            timestamp: 0.0,
        }
    }

    fn random_cube(n: usize, side: f64, seed: u64) -> Vec<Vector3<f64>> {
        let mut rng = stream(seed, StreamPurpose::WorldGen, 0, 0);
        (0..n)
            .map(|_| {
                Vector3::new(
                    rng.gen::<f64>() * side,
                    rng.gen::<f64>() * side,
                    rng.gen::<f64>() * side,
                )
            })
            .collect()
    }

    fn sorted_eigenvalues(m: &Matrix3<f64>) -> [f64; 3] {
        let mut e: Vec<f64> = m.symmetric_eigen().eigenvalues.iter().copied().collect();
        e.sort_by(|a, b| a.partial_cmp(b).unwrap());
        [e[0], e[1], e[2]]
    }

    #[test]
    fn planar_points_get_z_normal() {
        let mut rng = stream(31, StreamPurpose::WorldGen, 0, 0);
        let points: Vec<Vector3<f64>> = (0..50)
            .map(|_| Vector3::new(rng.gen::<f64>() * 4.0, rng.gen::<f64>() * 4.0, 0.0))
            .collect();
        let scan = estimate_covariances(&points, 10, 0.0).unwrap();
        for p in &scan.points {
            let eig = p.covariance.symmetric_eigen();
            let mut min_idx = 0;
            for i in 1..3 {
                if eig.eigenvalues[i] < eig.eigenvalues[min_idx] {
                    min_idx = i;
                }
            }
            let normal = eig.eigenvectors.column(min_idx);
            assert!(normal[2].abs() > 1.0 - 1e-9, "normal {normal:?}");
        }
    }

    #[test]
    fn collinear_points_regularize_to_plane_spectrum() {
        let points: Vec<Vector3<f64>> =
            (0..5).map(|i| Vector3::new(i as f64, 0.0, 0.0)).collect();
        // Raw sample covariance of the 4 neighbors of point 0 is rank 1.
        let neighbors = &points[1..5];
        let mean: Vector3<f64> = neighbors.iter().sum::<Vector3<f64>>() / 4.0;
        let mut raw = Matrix3::zeros();
        for p in neighbors {
            let d = p - mean;
            raw += d * d.transpose();
        }
        raw /= 4.0;
        let raw_eigs = sorted_eigenvalues(&raw);
        assert!(raw_eigs[0].abs() < 1e-12 && raw_eigs[1].abs() < 1e-12 && raw_eigs[2] > 0.0);

        let scan = estimate_covariances(&points, 4, 0.0).unwrap();
        for p in &scan.points {
            let eigs = sorted_eigenvalues(&p.covariance);
            assert_abs_diff_eq!(eigs[0], EPSILON_PLANE, epsilon = 1e-9);
            assert_abs_diff_eq!(eigs[1], 1.0, epsilon = 1e-9);
            assert_abs_diff_eq!(eigs[2], 1.0, epsilon = 1e-9);
        }
    }

    #[test]
    fn random_cube_covariances_are_psd_and_symmetric() {
        let points = random_cube(1000, 3.0, 37);
        let scan = estimate_covariances(&points, 10, 0.0).unwrap();
        for p in &scan.points {
            assert!((p.covariance - p.covariance.transpose()).norm() < 1e-12);
            let eigs = sorted_eigenvalues(&p.covariance);
            assert!(eigs[0] >= 0.0);
        }
    }

    #[test]
    fn estimation_is_rotation_equivariant() {
        let points = random_cube(200, 2.0, 41);
        let pose = Pose::from_xyz_yaw(0.0, 0.0, 0.0, 0.83);
        let rotated: Vec<Vector3<f64>> =
            points.iter().map(|p| pose.transform_point(p)).collect();
        let base = estimate_covariances(&points, 8, 0.0).unwrap();
        let rot = estimate_covariances(&rotated, 8, 0.0).unwrap();
        let r = pose.rotation();
        for (a, b) in base.points.iter().zip(rot.points.iter()) {
            let expected = r * a.covariance * r.transpose();
            assert!((expected - b.covariance).norm() < 1e-6);
        }
    }

    #[test]
    fn too_few_points_is_an_error() {
        let points = random_cube(5, 1.0, 43);
        assert_eq!(
            estimate_covariances(&points, 10, 0.0).unwrap_err(),
            CloudError::TooFewPoints { needed: 11, got: 5 }
        );
        assert_eq!(
            estimate_covariances(&points, 3, 0.0).unwrap_err(),
            CloudError::KTooSmall(3)
        );
    }

    #[test]
    fn single_point_occupies_origin_cell() {
        let scan = scan_from_points(&[Vector3::new(0.1, 0.1, 0.1)]);
        let map = VoxelMap::build(&scan, 1.0).unwrap();
        assert_eq!(map.len(), 1);
        assert!(map.get([0, 0, 0]).is_some());
    }

    #[test]
    fn two_points_in_one_cell_average_to_midpoint() {
        let a = Vector3::new(0.2, 0.2, 0.2);
        let b = Vector3::new(0.6, 0.4, 0.8);
        let scan = scan_from_points(&[a, b]);
        let map = VoxelMap::build(&scan, 1.0).unwrap();
        let cell = map.get([0, 0, 0]).unwrap();
        assert_eq!(cell.count, 2);
        assert_abs_diff_eq!(cell.aggregate.mean, (a + b) / 2.0, epsilon = 1e-15);
    }

    #[test]
    fn cell_count_matches_naive_binning() {
        let points = random_cube(1000, 5.0, 47);
        let scan = scan_from_points(&points);
        let resolution = 0.5;
        let map = VoxelMap::build(&scan, resolution).unwrap();
        let naive: std::collections::HashSet<[i32; 3]> = points
            .iter()
            .map(|p| voxel_key(p, 1.0 / resolution))
            .collect();
        assert_eq!(map.len(), naive.len());
        // Every inserted mean lies inside its cell's bounds.
        for (key, cell) in map.iter() {
            for axis in 0..3 {
                let lo = key[axis] as f64 * resolution;
                assert!(cell.aggregate.mean[axis] >= lo - 1e-12);
                assert!(cell.aggregate.mean[axis] < lo + resolution + 1e-12);
            }
        }
    }

    /// Brute-force reference with the same rule: the containing cell if
    /// occupied, otherwise the nearest occupied neighbor by aggregate mean.
    fn brute_force_correspondence<'a>(
        map: &'a VoxelMap,
        query: &Vector3<f64>,
    ) -> Option<&'a GaussianPoint> {
        let key = voxel_key(query, 1.0 / map.resolution());
        if let Some(cell) = map.get(key) {
            return Some(&cell.aggregate);
        }
        let mut best = None;
        let mut best_dist = f64::INFINITY;
        for dx in -1..=1i32 {
            for dy in -1..=1i32 {
                for dz in -1..=1i32 {
                    if dx == 0 && dy == 0 && dz == 0 {
                        continue;
                    }
                    if let Some(cell) = map.get([key[0] + dx, key[1] + dy, key[2] + dz]) {
                        let d = (cell.aggregate.mean - query).norm_squared();
                        if d < best_dist {
                            best_dist = d;
                            best = Some(&cell.aggregate);
                        }
                    }
                }
            }
        }
        best
    }

    #[test]
    fn correspondence_matches_brute_force_on_random_queries() {
        let points = random_cube(400, 4.0, 53);
        let scan = scan_from_points(&points);
        let map = VoxelMap::build(&scan, 0.5).unwrap();
        let mut rng = stream(59, StreamPurpose::WorldGen, 0, 0);
        for _ in 0..200 {
            let q = Vector3::new(
                rng.gen::<f64>() * 6.0 - 1.0,
                rng.gen::<f64>() * 6.0 - 1.0,
                rng.gen::<f64>() * 6.0 - 1.0,
            );
            let fast = map.find_correspondence(&q);
            let slow = brute_force_correspondence(&map, &q);
            match (fast, slow) {
                (None, None) => {}
                (Some(a), Some(b)) => assert_eq!(a.mean, b.mean),
                other => panic!("mismatch: {other:?}"),
            }
        }
    }

    #[test]
    fn empty_neighborhood_returns_none() {
        let scan = scan_from_points(&[Vector3::new(0.0, 0.0, 0.0)]);
        let map = VoxelMap::build(&scan, 0.5).unwrap();
        assert!(map.find_correspondence(&Vector3::new(10.0, 10.0, 10.0)).is_none());
    }

    #[test]
    fn query_in_occupied_voxel_returns_its_aggregate() {
        let scan = scan_from_points(&[Vector3::new(0.25, 0.25, 0.25)]);
        let map = VoxelMap::build(&scan, 1.0).unwrap();
        let hit = map.find_correspondence(&Vector3::new(0.9, 0.9, 0.9)).unwrap();
        assert_eq!(hit.mean, Vector3::new(0.25, 0.25, 0.25));
    }

    #[test]
    fn overlap_of_scan_with_own_map_is_one() {
        let points = random_cube(500, 4.0, 61);
        let scan = scan_from_points(&points);
        let map = VoxelMap::build(&scan, 0.5).unwrap();
        assert_eq!(overlap_rate(&scan, &Pose::identity(), &map), 1.0);
    }

    #[test]
    fn overlap_far_away_is_zero() {
        let points = random_cube(200, 4.0, 67);
        let scan = scan_from_points(&points);
        let map = VoxelMap::build(&scan, 0.5).unwrap();
        let far = Pose::from_translation(Vector3::new(100.0, 100.0, 100.0));
        assert_eq!(overlap_rate(&scan, &far, &map), 0.0);
    }

    #[test]
    fn overlap_matches_per_point_membership_count() {
        let points = random_cube(600, 4.0, 71);
        let scan = scan_from_points(&points);
        let resolution = 0.5;
        let map = VoxelMap::build(&scan, resolution).unwrap();
        let shift = Pose::from_translation(Vector3::new(2.0, 0.0, 0.0));
        let keys: std::collections::HashSet<[i32; 3]> = points
            .iter()
            .map(|p| voxel_key(p, 1.0 / resolution))
            .collect();
        let naive = points
            .iter()
            .filter(|p| keys.contains(&voxel_key(&shift.transform_point(p), 1.0 / resolution)))
            .count() as f64
            / points.len() as f64;
        assert_eq!(overlap_rate(&scan, &shift, &map), naive);
        assert!(overlap_rate(&scan, &shift, &map) > 0.0);
        assert!(overlap_rate(&scan, &shift, &map) < 1.0);
    }
}
