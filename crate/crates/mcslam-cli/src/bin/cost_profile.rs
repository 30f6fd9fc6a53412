use mcslam::cloud::{estimate_covariances, VoxelMap};
use mcslam::gicp::pairwise_log_likelihood;
use mcslam::se3::Pose;
use mcslam::sim::{generate_world, simulate_scan, MultiFloorParams, SensorModel, WorldKind};

fn main() {
    let world = generate_world(&WorldKind::MultiFloor(MultiFloorParams::default()), 0).unwrap();
    let model = SensorModel {
        ray_count: 700,
        max_range: 25.0,
        fov_vertical: 1.2217,
        range_noise_sigma: 0.003,
        ..SensorModel::default()
    };
    let pose1 = Pose::from_xyz_yaw(8.5, 5.6, 1.4, 0.0);
    let pose2 = Pose::from_xyz_yaw(8.1, 5.6, 1.4, 0.0);
    let pts1 = simulate_scan(&world, &pose1, &model, 3, 0).unwrap();
    let pts2 = simulate_scan(&world, &pose2, &model, 3, 1).unwrap();
    let scan1 = estimate_covariances(&pts1, 10, 0.0).unwrap();
    let scan2 = estimate_covariances(&pts2, 10, 0.1).unwrap();
    let map = VoxelMap::build(&scan1, 0.3).unwrap();
    let rel = pose1.inverse().compose(&pose2);
    // per-point costs
    let mut costs: Vec<(f64, usize)> = Vec::new();
    let mut total = 0.0;
    for (i, p) in scan2.points.iter().enumerate() {
        let single = mcslam::cloud::Scan { points: vec![*p], timestamp: 0.0 };
        let obj = pairwise_log_likelihood(&single, &map, &rel, false).unwrap();
        if obj.matched_count > 0 {
            costs.push((-obj.log_likelihood, i));
            total -= obj.log_likelihood;
        }
    }
    costs.sort_by(|a, b| b.0.partial_cmp(&a.0).unwrap());
    println!("matched {} / {}, total cost {:.1}", costs.len(), scan2.len(), total);
    let sum_top20: f64 = costs.iter().take(20).map(|c| c.0).sum();
    println!("top-20 points carry {:.1} ({:.0}%)", sum_top20, 100.0*sum_top20/total);
    for (c, i) in costs.iter().take(12) {
        let m = scan2.points[*i].mean;
        let w = pose2.transform_point(&m);
        println!("cost {c:8.2}  world ({:5.2},{:5.2},{:5.2})", w[0], w[1], w[2]);
    }
    let median = costs[costs.len()/2].0;
    println!("median per-point cost {median:.4}");
}
