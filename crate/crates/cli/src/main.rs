use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use twobody::ba::BaOptions;
use twobody::grouping::GroupingOptions;
use twobody::pipeline::{self, PipelineConfig, StageError};
use twobody::registration::RansacParams;
use twobody::segmentation::DEFAULT_KNN;

/// Two-body structure from motion over multi-take sparse reconstructions.
#[derive(Parser, Debug)]
#[command(name = "twobody", version)]
struct Cli {
    /// Seed for all randomness.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Worker threads; defaults to the available parallelism.
    #[arg(long, global = true)]
    threads: Option<usize>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Debug, Clone)]
struct RegisterFlags {
    /// RANSAC inlier threshold in pixels.
    #[arg(long, default_value_t = 4.0)]
    tau: f64,
    #[arg(long, default_value_t = 10_000)]
    ransac_iters: usize,
    #[arg(long, default_value_t = 15)]
    min_inliers: usize,
    /// Sequential poses per image and take.
    #[arg(long, default_value_t = 4)]
    max_models: usize,
}

#[derive(Args, Debug, Clone)]
struct BaFlags {
    /// Huber loss at twice the BA tau.
    #[arg(long)]
    robust: bool,
    #[arg(long, default_value_t = 100)]
    max_iters: usize,
    #[arg(long = "ba-tau", default_value_t = 4.0)]
    ba_tau: f64,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Write a synthetic multi-take scene and its ground truth.
    Simulate {
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Sequential PnP registration of every image into every other take.
    Register {
        #[arg(long)]
        scene: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[command(flatten)]
        flags: RegisterFlags,
    },
    /// Per-take grouping and track building.
    Group {
        #[arg(long)]
        scene: PathBuf,
        #[arg(long)]
        registrations: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        motion_criterion: bool,
    },
    /// Global groups, point labels and nearest-neighbor propagation.
    Segment {
        #[arg(long)]
        scene: PathBuf,
        #[arg(long)]
        groups: PathBuf,
        #[arg(long)]
        tracks: PathBuf,
        #[arg(long)]
        registrations: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = DEFAULT_KNN)]
        knn: usize,
        /// Exchange the background and foreground labels.
        #[arg(long)]
        swap: bool,
    },
    /// Merge all takes into one labeled model.
    Merge {
        #[arg(long)]
        scene: PathBuf,
        /// Segmentation dump.
        #[arg(long)]
        labels: PathBuf,
        #[arg(long)]
        tracks: PathBuf,
        #[arg(long)]
        registrations: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Two-body bundle adjustment of a merged model.
    Ba {
        #[arg(long)]
        merged: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[command(flatten)]
        flags: BaFlags,
    },
    /// Every stage in order, keeping all intermediate dumps.
    Pipeline {
        #[arg(long)]
        scene: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[command(flatten)]
        register: RegisterFlags,
        #[arg(long)]
        motion_criterion: bool,
        #[arg(long, default_value_t = DEFAULT_KNN)]
        knn: usize,
        #[arg(long)]
        swap: bool,
        #[command(flatten)]
        ba: BaFlags,
    },
    /// Report for a result directory, scored against ground truth when given.
    Evaluate {
        #[arg(long)]
        result: PathBuf,
        #[arg(long)]
        ground_truth: Option<PathBuf>,
        /// Input scene, for the merged position error.
        #[arg(long)]
        scene: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
    },
    /// ASCII PLY of a merged model: foreground green, background red, unknown gray.
    ExportPly {
        #[arg(long)]
        result: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
}

fn ransac(flags: &RegisterFlags, seed: u64) -> RansacParams {
    RansacParams {
        tau: flags.tau,
        max_iterations: flags.ransac_iters,
        min_inliers: flags.min_inliers,
        max_models: flags.max_models,
        seed,
        ..RansacParams::default()
    }
}

fn ba_options(flags: &BaFlags) -> BaOptions {
    BaOptions { max_iterations: flags.max_iters, robust: flags.robust, tau: flags.ba_tau }
}

fn grouping(motion_criterion: bool) -> GroupingOptions {
    GroupingOptions { motion_criterion, ..GroupingOptions::default() }
}

fn run(cli: Cli) -> Result<(), StageError> {
    let seed = cli.seed.unwrap_or(0);
    match cli.command {
        Command::Simulate { config, out } => {
            let sim = pipeline::simulate(config.as_deref(), cli.seed, &out)?;
            log::info!("simulated {} takes into {}", sim.scene.takes.len(), out.display());
        }
        Command::Register { scene, out, flags } => {
            let params = ransac(&flags, seed);
            log::info!("register: {params:?}");
            pipeline::register(&scene, &out, &params)?;
        }
        Command::Group { scene, registrations, out, motion_criterion } => {
            let opts = grouping(motion_criterion);
            log::info!("group: {opts:?}");
            pipeline::group(&scene, &registrations, &out, &opts)?;
        }
        Command::Segment { scene, groups, tracks, registrations, out, knn, swap } => {
            log::info!("segment: knn {knn}, swap {swap}");
            pipeline::segment(&scene, &groups, &tracks, registrations.as_deref(), &out, knn, swap)?;
        }
        Command::Merge { scene, labels, tracks, registrations, out } => {
            pipeline::merge(&scene, &labels, &tracks, registrations.as_deref(), &out)?;
        }
        Command::Ba { merged, out, flags } => {
            let opts = ba_options(&flags);
            log::info!("ba: {opts:?}");
            let (_, rep) = pipeline::bundle_adjust(&merged, &out, &opts)?;
            print!("{}", rep.to_text());
        }
        Command::Pipeline { scene, out, register, motion_criterion, knn, swap, ba } => {
            let cfg = PipelineConfig {
                ransac: ransac(&register, seed),
                grouping: grouping(motion_criterion),
                knn,
                swap,
                ba: ba_options(&ba),
            };
            log::info!("pipeline: {cfg:?}");
            let rep = pipeline::run(&scene, &out, &cfg)?;
            print!("{}", rep.to_text());
        }
        Command::Evaluate { result, ground_truth, scene, out } => {
            let rep = pipeline::evaluate(&result, ground_truth.as_deref(), scene.as_deref(), &out)?;
            print!("{}", rep.to_text());
        }
        Command::ExportPly { result, out } => pipeline::export_ply(&result, &out)?,
    }
    Ok(())
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    if let Some(n) = cli.threads {
        if n == 0 {
            eprintln!("error: --threads must be at least 1");
            return ExitCode::from(1);
        }
        if let Err(e) = rayon::ThreadPoolBuilder::new().num_threads(n).build_global() {
            eprintln!("error: thread pool: {e}");
            return ExitCode::from(1);
        }
    }
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error in stage {}: {e}", e.stage());
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
