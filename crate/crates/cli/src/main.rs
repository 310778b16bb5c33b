//! `splatpose` command-line front end.

mod commands;
mod dataset;
mod rundir;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use splatpose::pipeline::OptimizerConfig;

/// Commands that read an optimizer configuration.
const CONFIG_COMMANDS: [&str; 4] = ["run", "estimate-poses", "train-scene", "eval"];

#[derive(Parser, Debug)]
#[command(
    name = "splatpose",
    version,
    about = "Pose-free Gaussian splatting with correspondence-guided pose estimation",
    after_help = "Any configuration key can be overridden with --key=value, e.g. --cache_H=10 --lambda1=0."
)]
struct Cli {
    /// More log output (repeat for debug).
    #[arg(short, long, global = true, action = clap::ArgAction::Count)]
    verbose: u8,
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Debug, Clone)]
struct ConfigArgs {
    /// Flat key=value configuration file.
    #[arg(long)]
    config: Option<PathBuf>,
}

#[derive(Args, Debug, Clone)]
struct DatasetArgs {
    /// Dataset directory.
    #[arg(long)]
    dataset: PathBuf,
    /// Frame file pattern inside the dataset directory.
    #[arg(long, default_value = dataset::DEFAULT_FRAME_PATTERN)]
    frames: String,
    /// Intrinsics file (defaults to DATASET/intrinsics.txt).
    #[arg(long)]
    intrinsics: Option<PathBuf>,
    /// Directory holding depth maps (defaults to the dataset directory).
    #[arg(long)]
    depth_dir: Option<PathBuf>,
    /// Ground-truth trajectory (defaults to DATASET/groundtruth.txt if present).
    #[arg(long)]
    groundtruth: Option<PathBuf>,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Generate a synthetic dataset with exact depth and poses.
    Synth(SynthArgs),
    /// Pose stage, scene stage and held-out evaluation.
    Run {
        #[command(flatten)]
        data: DatasetArgs,
        #[command(flatten)]
        cfg: ConfigArgs,
        /// Output run directory.
        #[arg(long)]
        out: PathBuf,
        /// Drop the correspondence terms (weights 0, 1, 0) and tag the outputs.
        #[arg(long)]
        ablate_correspondence: bool,
    },
    /// Pose stage only: per-frame fits chained with relative poses.
    EstimatePoses {
        #[command(flatten)]
        data: DatasetArgs,
        #[command(flatten)]
        cfg: ConfigArgs,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        ablate_correspondence: bool,
    },
    /// Scene stage with fixed poses read from a trajectory file.
    TrainScene {
        #[command(flatten)]
        data: DatasetArgs,
        #[command(flatten)]
        cfg: ConfigArgs,
        /// Camera-to-world trajectory; frames without a pose are skipped.
        #[arg(long)]
        poses: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Render a scene from every pose of a trajectory.
    Render {
        #[arg(long)]
        scene: PathBuf,
        #[arg(long)]
        poses: PathBuf,
        #[arg(long)]
        intrinsics: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// Background colour as `r,g,b` in [0, 1].
        #[arg(long, default_value = "0,0,0")]
        background: String,
    },
    /// Trajectory and image metrics from files.
    Eval {
        #[command(flatten)]
        cfg: ConfigArgs,
        /// Estimated camera-to-world trajectory.
        #[arg(long)]
        est: PathBuf,
        /// Ground-truth trajectory.
        #[arg(long)]
        gt: PathBuf,
        /// Directory of `render_NNN.png` files.
        #[arg(long, requires = "gts")]
        renders: Option<PathBuf>,
        /// Directory of ground-truth frames, indexed by sorted order.
        #[arg(long, requires = "renders")]
        gts: Option<PathBuf>,
        #[arg(long, default_value = dataset::DEFAULT_FRAME_PATTERN)]
        frames: String,
        /// Write the metrics CSV here as well as printing the table.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Compare analytic gradients with central finite differences.
    Gradcheck {
        #[arg(long, default_value_t = 10)]
        fixtures: u64,
        #[arg(long, default_value_t = 50)]
        gaussians: usize,
        #[arg(long, default_value_t = 64)]
        size: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// Write the report here as well as printing it.
        #[arg(long)]
        out: Option<PathBuf>,
    },
}

#[derive(Args, Debug, Clone)]
pub struct SynthArgs {
    #[arg(long)]
    out: PathBuf,
    #[arg(long, default_value_t = 32)]
    gaussians: usize,
    #[arg(long, default_value_t = 8)]
    frames: usize,
    #[arg(long, default_value_t = 64)]
    width: usize,
    #[arg(long, default_value_t = 64)]
    height: usize,
    /// orbit, line, arc or static.
    #[arg(long, default_value = "orbit")]
    trajectory: String,
    /// Camera travel per frame as a fraction of the scene extent.
    #[arg(long, default_value_t = 0.02)]
    step: f64,
    #[arg(long, default_value_t = 0)]
    seed: u64,
}

/// Result of a command that got past argument and input validation.
pub enum Outcome {
    Success,
    /// A stage failed after partial outputs were written.
    StageFailed,
}

/// Splits `--key=value` config overrides from the arguments clap parses.
fn split_overrides(args: Vec<String>) -> (Vec<String>, Vec<(String, String)>) {
    let command = args.iter().skip(1).find(|a| !a.starts_with('-')).cloned();
    if !command.as_deref().is_some_and(|c| CONFIG_COMMANDS.contains(&c)) {
        return (args, Vec::new());
    }
    let keys: Vec<&str> = OptimizerConfig::default().entries().into_keys().collect();
    let mut rest = Vec::with_capacity(args.len());
    let mut overrides = Vec::new();
    for a in args {
        if let Some((k, v)) = a.strip_prefix("--").and_then(|s| s.split_once('=')) {
            let key = k.replace('-', "_");
            if let Some(canonical) = keys.iter().find(|c| c.eq_ignore_ascii_case(&key)) {
                overrides.push((canonical.to_string(), v.to_string()));
                continue;
            }
        }
        rest.push(a);
    }
    (rest, overrides)
}

fn main() -> ExitCode {
    let (args, overrides) = split_overrides(std::env::args().collect());
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    let level = match cli.verbose {
        0 => "info",
        1 => "debug",
        _ => "trace",
    };
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or(level))
        .format_timestamp(None)
        .init();
    match commands::dispatch(cli.command, &overrides) {
        Ok(Outcome::Success) => ExitCode::SUCCESS,
        Ok(Outcome::StageFailed) => ExitCode::from(2),
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(1)
        }
    }
}
