use std::path::PathBuf;

use anyhow::{Context, Result};
use clap::{Parser, Subcommand};

use mcslam::eval::evaluate;
use mcslam::io::{load_dataset, read_snapshot, read_tum, write_json};
use mcslam_cli::config::ExperimentConfig;
use mcslam_cli::{cluster_snapshot, run_slam};

#[derive(Parser)]
#[command(name = "mcslam", about = "Monte Carlo SLAM experiments on synthetic worlds")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(clap::Args)]
struct ConfigArgs {
    /// Experiment config (JSON). MCSLAM_* environment variables override
    /// fields, e.g. MCSLAM_FILTER__PARTICLE_COUNT=500.
    #[arg(long)]
    config: PathBuf,
    /// Override the config seed.
    #[arg(long)]
    seed: Option<u64>,
    /// Override the particle count.
    #[arg(long)]
    particles: Option<usize>,
    /// Override the worker thread count (results do not depend on it).
    #[arg(long)]
    workers: Option<usize>,
}

impl ConfigArgs {
    fn load(&self) -> Result<ExperimentConfig> {
        let mut config = ExperimentConfig::load(&self.config)?;
        if let Some(seed) = self.seed {
            config.seed = seed;
        }
        if let Some(particles) = self.particles {
            config.filter.particle_count = particles;
        }
        if let Some(workers) = self.workers {
            config.workers = workers;
        }
        config.validate()?;
        Ok(config)
    }
}

#[derive(Subcommand)]
enum Command {
    /// Generate the dataset and run the filter end to end.
    Run {
        #[command(flatten)]
        config: ConfigArgs,
        /// Output directory.
        #[arg(long)]
        out: PathBuf,
    },
    /// Synthesize a dataset directory (PLY scans, TUM ground truth,
    /// odometry JSON lines).
    Generate {
        #[command(flatten)]
        config: ConfigArgs,
        #[arg(long)]
        out: PathBuf,
    },
    /// Run the filter on a previously generated dataset directory.
    Slam {
        #[command(flatten)]
        config: ConfigArgs,
        /// Dataset directory from `generate`.
        #[arg(long)]
        dataset: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Absolute trajectory error between two TUM files.
    Eval {
        #[arg(long)]
        est: PathBuf,
        #[arg(long)]
        gt: PathBuf,
        /// Write the JSON report here instead of stdout only.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// K-means cluster report over a particle snapshot.
    ClusterReport {
        #[arg(long)]
        snapshot: PathBuf,
        #[arg(long, default_value_t = 3)]
        k: usize,
        #[arg(long)]
        out: Option<PathBuf>,
    },
}

fn main() -> Result<()> {
    let cli = Cli::parse();
    match cli.command {
        Command::Run { config, out } => {
            let config = config.load()?;
            let report = mcslam_cli::run_experiment(&config, &out)?;
            println!(
                "{} seed {}: {} frames, {} keyframes, ATE rep {:.3} m vs dead-reckoning {:.3} m",
                report.name,
                report.seed,
                report.frames,
                report.keyframes,
                report.ate_representative.ate_rmse,
                report.ate_deadreckoning.ate_rmse
            );
        }
        Command::Generate { config, out } => {
            let config = config.load()?;
            let frames = mcslam_cli::runner::generate_to_dir(&config, &out)?;
            println!("wrote {frames} frames to {}", out.display());
        }
        Command::Slam { config, dataset, out } => {
            let config = config.load()?;
            let data = load_dataset(&dataset)
                .with_context(|| format!("loading dataset {}", dataset.display()))?;
            let report = run_slam(&data, &config, &out)?;
            println!(
                "{} frames, {} keyframes, ATE rep {:.3} m vs dead-reckoning {:.3} m",
                report.frames,
                report.keyframes,
                report.ate_representative.ate_rmse,
                report.ate_deadreckoning.ate_rmse
            );
        }
        Command::Eval { est, gt, out } => {
            let est_traj = read_tum(&est)?;
            let gt_traj = read_tum(&gt)?;
            let report = evaluate(&est_traj, &gt_traj)?;
            println!("{}", serde_json::to_string_pretty(&report)?);
            if let Some(path) = out {
                write_json(&path, &report)?;
            }
        }
        Command::ClusterReport { snapshot, k, out } => {
            let snap = read_snapshot(&snapshot)?;
            let report = cluster_snapshot(&snap, k);
            println!("{}", serde_json::to_string_pretty(&report)?);
            if let Some(path) = out {
                write_json(&path, &report)?;
            }
        }
    }
    Ok(())
}
