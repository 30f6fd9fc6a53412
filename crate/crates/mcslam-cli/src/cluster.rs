//! Deterministic k-means over particle translations, for multi-modality
//! reports.

use nalgebra::Vector3;
use serde::{Deserialize, Serialize};

use mcslam::particle::ParticleSnapshot;

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Cluster {
    pub center: [f64; 3],
    pub members: usize,
    /// Normalized weight mass held by this cluster's members.
    pub weight_mass: f64,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ClusterReport {
    pub frame: u64,
    pub k: usize,
    /// Sorted by weight mass, heaviest first.
    pub clusters: Vec<Cluster>,
}

/// Lloyd's algorithm with deterministic farthest-point initialization: the
/// first center is the highest-weight particle, each further center the
/// particle farthest from the chosen set. Ties break toward lower indices,
/// so the report depends only on the snapshot.
pub fn cluster_snapshot(snapshot: &ParticleSnapshot, k: usize) -> ClusterReport {
    let positions = snapshot.translations();
    let weights: Vec<f64> = snapshot.particles.iter().map(|p| p.weight).collect();
    let n = positions.len();
    let k = k.max(1).min(n.max(1));
    if n == 0 {
        return ClusterReport {
            frame: snapshot.frame,
            k,
            clusters: vec![],
        };
    }

    let mut centers: Vec<Vector3<f64>> = Vec::with_capacity(k);
    let heaviest = (0..n)
        .max_by(|&a, &b| weights[a].partial_cmp(&weights[b]).unwrap().then(b.cmp(&a)))
        .unwrap();
    centers.push(positions[heaviest]);
    while centers.len() < k {
        let farthest = (0..n)
            .max_by(|&a, &b| {
                let da = nearest_distance(&positions[a], &centers);
                let db = nearest_distance(&positions[b], &centers);
                da.partial_cmp(&db).unwrap().then(b.cmp(&a))
            })
            .unwrap();
        centers.push(positions[farthest]);
    }

    let mut assignment = vec![0usize; n];
    for _ in 0..100 {
        let mut changed = false;
        for (i, p) in positions.iter().enumerate() {
            let nearest = (0..centers.len())
                .min_by(|&a, &b| {
                    let da = (p - centers[a]).norm_squared();
                    let db = (p - centers[b]).norm_squared();
                    da.partial_cmp(&db).unwrap().then(a.cmp(&b))
                })
                .unwrap();
            if assignment[i] != nearest {
                assignment[i] = nearest;
                changed = true;
            }
        }
        let mut sums = vec![Vector3::zeros(); centers.len()];
        let mut counts = vec![0usize; centers.len()];
        for (i, p) in positions.iter().enumerate() {
            sums[assignment[i]] += p;
            counts[assignment[i]] += 1;
        }
        for c in 0..centers.len() {
            if counts[c] > 0 {
                centers[c] = sums[c] / counts[c] as f64;
            } else {
                // Reseed an empty cluster at the farthest point.
                let farthest = (0..n)
                    .max_by(|&a, &b| {
                        let da = nearest_distance(&positions[a], &centers);
                        let db = nearest_distance(&positions[b], &centers);
                        da.partial_cmp(&db).unwrap().then(b.cmp(&a))
                    })
                    .unwrap();
                centers[c] = positions[farthest];
                changed = true;
            }
        }
        if !changed {
            break;
        }
    }

    let total_weight: f64 = weights.iter().sum();
    let mut clusters: Vec<Cluster> = (0..centers.len())
        .map(|c| {
            let members = assignment.iter().filter(|&&a| a == c).count();
            let mass: f64 = (0..n)
                .filter(|&i| assignment[i] == c)
                .map(|i| weights[i])
                .sum();
            Cluster {
                center: [centers[c][0], centers[c][1], centers[c][2]],
                members,
                weight_mass: if total_weight > 0.0 {
                    mass / total_weight
                } else {
                    0.0
                },
            }
        })
        .collect();
    clusters.sort_by(|a, b| {
        b.weight_mass
            .partial_cmp(&a.weight_mass)
            .unwrap()
            .then(b.members.cmp(&a.members))
    });
    ClusterReport {
        frame: snapshot.frame,
        k,
        clusters,
    }
}

fn nearest_distance(p: &Vector3<f64>, centers: &[Vector3<f64>]) -> f64 {
    centers
        .iter()
        .map(|c| (p - c).norm_squared())
        .fold(f64::INFINITY, f64::min)
}

#[cfg(test)]
mod tests {
    use super::*;
    use mcslam::particle::{ParticleRecord, ParticleSnapshot};
    use mcslam::se3::{Pose, PoseRecord};
    use nalgebra::Vector3 as V3;

    fn snapshot_at(positions: &[(f64, f64, f64)], weights: &[f64]) -> ParticleSnapshot {
        ParticleSnapshot {
            frame: 7,
            timestamp: 0.7,
            particles: positions
                .iter()
                .zip(weights)
                .map(|(&(x, y, z), &w)| ParticleRecord {
                    pose: PoseRecord::from(&Pose::from_translation(V3::new(x, y, z))),
                    log_weight: w.ln(),
                    weight: w,
                })
                .collect(),
        }
    }

    #[test]
    fn two_floors_split_into_two_clusters() {
        let mut positions = Vec::new();
        let mut weights = Vec::new();
        for i in 0..40 {
            let dx = (i % 5) as f64 * 0.05;
            positions.push((5.0 + dx, 5.0, 0.0));
            weights.push(1.0 / 80.0);
        }
        for i in 0..40 {
            let dx = (i % 5) as f64 * 0.05;
            positions.push((5.0 + dx, 5.0, 3.5));
            weights.push(1.0 / 80.0);
        }
        let report = cluster_snapshot(&snapshot_at(&positions, &weights), 2);
        assert_eq!(report.clusters.len(), 2);
        let dz = (report.clusters[0].center[2] - report.clusters[1].center[2]).abs();
        assert!((dz - 3.5).abs() < 0.01, "cluster z separation {dz}");
        for c in &report.clusters {
            assert!((c.weight_mass - 0.5).abs() < 1e-9);
            assert_eq!(c.members, 40);
        }
    }

    #[test]
    fn weight_mass_follows_weights_not_counts() {
        let positions = vec![(0.0, 0.0, 0.0), (0.0, 0.0, 0.1), (10.0, 0.0, 0.0)];
        let weights = vec![0.05, 0.05, 0.9];
        let report = cluster_snapshot(&snapshot_at(&positions, &weights), 2);
        assert!((report.clusters[0].weight_mass - 0.9).abs() < 1e-9);
        assert_eq!(report.clusters[0].members, 1);
        assert!((report.clusters[1].weight_mass - 0.1).abs() < 1e-9);
    }

    #[test]
    fn clustering_is_deterministic() {
        let positions: Vec<(f64, f64, f64)> = (0..60)
            .map(|i| ((i % 7) as f64, (i % 11) as f64 * 0.3, (i % 3) as f64 * 2.0))
            .collect();
        let weights = vec![1.0 / 60.0; 60];
        let snap = snapshot_at(&positions, &weights);
        let a = cluster_snapshot(&snap, 3);
        let b = cluster_snapshot(&snap, 3);
        assert_eq!(
            serde_json::to_string(&a).unwrap(),
            serde_json::to_string(&b).unwrap()
        );
    }
}
