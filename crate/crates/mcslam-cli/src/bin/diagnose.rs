//! Development diagnostic: run a preset and print per-frame population
//! statistics (pose scatter, weight spread, correction activity).

use anyhow::Result;
use mcslam::cloud::estimate_covariances;
use mcslam::filter::{Filter, MotionDelta};
use mcslam::sim::detect_elevator;
use mcslam_cli::config::ExperimentConfig;
use mcslam_cli::runner::generate_dataset;

fn quantiles(mut v: Vec<f64>) -> (f64, f64, f64) {
    v.sort_by(|a, b| a.partial_cmp(b).unwrap());
    let n = v.len();
    (v[n / 20], v[n / 2], v[n - 1 - n / 20])
}

fn main() -> Result<()> {
    let args: Vec<String> = std::env::args().collect();
    let config = ExperimentConfig::load(std::path::Path::new(&args[1]))?;
    let every: usize = args.get(2).map(|s| s.parse().unwrap()).unwrap_or(10);
    let (dataset, _world) = generate_dataset(&config)?;
    let mut filter_config = config.filter.clone();
    filter_config.rng_seed = config.seed;
    let mut filter = Filter::new(filter_config, dataset.initial_pose)?;
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(config.workers)
        .build()?;
    let mut prev_cum: Vec<f64> = vec![0.0; config.filter.particle_count];
    for frame in 0..dataset.scans.len() {
        let points = &dataset.scans[frame];
        let scan = estimate_covariances(points, config.filter.covariance_k, dataset.timestamps[frame])?;
        let vertical = (config.elevator.enabled
            && detect_elevator(points, config.elevator.detection_threshold)?)
        .then_some(config.elevator.vertical_sigma);
        let motion = if frame == 0 {
            MotionDelta::identity()
        } else {
            dataset.odometry[frame - 1].clone()
        };
        let report = pool.install(|| filter.step(&scan, &motion, vertical))?;
        if frame % every == 0 {
            let set = filter.set();
            let lls: Vec<f64> = set
                .particles()
                .iter()
                .zip(&prev_cum)
                .map(|(p, prev)| p.cum_log_likelihood - prev)
                .collect();
            let (ll_lo, ll_med, ll_hi) = quantiles(lls);
            let xs: Vec<f64> = set.particles().iter().map(|p| p.current_pose.translation()[0]).collect();
            let zs: Vec<f64> = set.particles().iter().map(|p| p.current_pose.translation()[2]).collect();
            let (x_lo, x_med, x_hi) = quantiles(xs);
            let (z_lo, z_med, z_hi) = quantiles(zs);
            let gt = dataset.ground_truth.samples[frame].1;
            println!(
                "f{frame:3} live={:4} loops={:4} ll[{ll_lo:9.1},{ll_med:9.1},{ll_hi:9.1}] x[{x_lo:6.2},{x_med:6.2},{x_hi:6.2}] z[{z_lo:5.2},{z_med:5.2},{z_hi:5.2}] gt=({:.2},{:.2},{:.2})",
                report.live_count,
                report.loop_count,
                gt.translation()[0], gt.translation()[1], gt.translation()[2],
            );
        }
        prev_cum = filter
            .set()
            .particles()
            .iter()
            .map(|p| p.cum_log_likelihood)
            .collect();
    }
    Ok(())
}
