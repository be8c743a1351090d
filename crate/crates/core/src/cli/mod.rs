//! `viewforge` command-line interface.
//!
//! Each command reads an optional JSON config (`--config`), applies flag
//! overrides on top, logs the resolved config to stderr and then delegates to
//! the library. `--seed` determines every random draw a command makes.

mod checks;
mod commands;
mod config;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

pub use checks::{
    denoiser_loss_check, gradcheck_suite, voxel_loss_check, CheckLine, LOSS_TOLERANCE, OP_TOLERANCE,
};
pub use commands::{
    evaluate_report, DatasetConfig, EvaluateConfig, EvaluationManifest, ManifestObject,
    OracleReconConfig, PoseConfig, ReconstructConfig, SynthesizeConfig,
};
pub use config::load_config;

use crate::error::Result;
use crate::parallel;

#[derive(Debug, Parser)]
#[command(
    name = "viewforge",
    version,
    about = "Novel view synthesis and single-image 3D reconstruction on toy scenes"
)]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Clone, Args)]
pub struct Common {
    /// JSON file with command settings; flags take precedence.
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[arg(long)]
    pub seed: Option<u64>,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Render a multi-view dataset of generated objects.
    Dataset(DatasetArgs),
    /// Train the conditional denoiser on a dataset.
    Train(TrainArgs),
    /// Synthesize a novel view from one image and a relative camera transform.
    Synthesize(SynthesizeArgs),
    /// Distill a trained denoiser into a voxel grid.
    Reconstruct(ReconstructArgs),
    /// Extract a triangle mesh from a voxel grid.
    ExtractMesh(ExtractMeshArgs),
    /// Score predicted views and meshes against ground truth.
    Evaluate(EvaluateArgs),
    /// Finite-difference check of every differentiable component.
    Gradcheck(GradcheckArgs),
    /// Distill a ground-truth renderer into a voxel grid.
    OracleRecon(OracleReconArgs),
}

#[derive(Debug, Args)]
pub struct DatasetArgs {
    #[command(flatten)]
    pub common: Common,
    #[arg(long)]
    pub objects: Option<usize>,
    #[arg(long)]
    pub views: Option<usize>,
    #[arg(long)]
    pub res: Option<usize>,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Args)]
pub struct TrainArgs {
    #[command(flatten)]
    pub common: Common,
    /// Dataset directory written by `dataset`.
    #[arg(long)]
    pub data: PathBuf,
    /// Output checkpoint.
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long)]
    pub steps: Option<usize>,
    #[arg(long)]
    pub batch: Option<usize>,
    #[arg(long)]
    pub lr: Option<f32>,
    /// Channel widths of the three U-Net levels, e.g. `16,32,64`.
    #[arg(long, value_delimiter = ',')]
    pub widths: Option<Vec<usize>>,
    #[arg(long)]
    pub groups: Option<usize>,
    #[arg(long)]
    pub log_every: Option<usize>,
    /// Writes `step, loss` for every step.
    #[arg(long)]
    pub loss_log: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct SynthesizeArgs {
    #[command(flatten)]
    pub common: Common,
    #[arg(long)]
    pub input: PathBuf,
    #[arg(long)]
    pub ckpt: PathBuf,
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long, allow_negative_numbers = true)]
    pub dtheta: Option<f64>,
    #[arg(long, allow_negative_numbers = true)]
    pub dphi: Option<f64>,
    #[arg(long, allow_negative_numbers = true)]
    pub dr: Option<f64>,
    #[arg(long)]
    pub guidance: Option<f64>,
    /// Strided sampler length; the default runs every diffusion step.
    #[arg(long)]
    pub sample_steps: Option<usize>,
}

#[derive(Debug, Args)]
pub struct PoseArgs {
    /// Polar angle of the input camera.
    #[arg(long)]
    pub theta: Option<f64>,
    /// Azimuth of the input camera.
    #[arg(long, allow_negative_numbers = true)]
    pub phi: Option<f64>,
    #[arg(long)]
    pub radius: Option<f64>,
}

#[derive(Debug, Args)]
pub struct DistillArgs {
    #[arg(long)]
    pub iterations: Option<usize>,
    #[arg(long)]
    pub grid_res: Option<usize>,
    #[arg(long)]
    pub samples_per_ray: Option<usize>,
    #[arg(long)]
    pub grid_lr: Option<f32>,
    /// Per-iteration progress lines.
    #[arg(long)]
    pub log: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct ReconstructArgs {
    #[command(flatten)]
    pub common: Common,
    #[arg(long)]
    pub input: PathBuf,
    #[arg(long)]
    pub ckpt: PathBuf,
    /// Output grid checkpoint.
    #[arg(long)]
    pub out: PathBuf,
    #[command(flatten)]
    pub pose: PoseArgs,
    #[command(flatten)]
    pub distill: DistillArgs,
    #[arg(long)]
    pub guidance: Option<f64>,
}

#[derive(Debug, Args)]
pub struct ExtractMeshArgs {
    #[command(flatten)]
    pub common: Common,
    #[arg(long)]
    pub grid: PathBuf,
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long)]
    pub res: Option<usize>,
    /// Iso level as a multiple of the mean eroded density.
    #[arg(long)]
    pub threshold_multiple: Option<f64>,
}

#[derive(Debug, Args)]
pub struct EvaluateArgs {
    #[command(flatten)]
    pub common: Common,
    /// JSON listing objects with image and mesh pairs.
    #[arg(long)]
    pub manifest: Option<PathBuf>,
    #[arg(long)]
    pub pred_image: Option<PathBuf>,
    #[arg(long)]
    pub gt_image: Option<PathBuf>,
    #[arg(long)]
    pub pred_mesh: Option<PathBuf>,
    #[arg(long)]
    pub gt_mesh: Option<PathBuf>,
    /// Report file; the report is also printed to stdout.
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct GradcheckArgs {
    #[arg(long)]
    pub seed: Option<u64>,
}

#[derive(Debug, Args)]
pub struct OracleReconArgs {
    #[command(flatten)]
    pub common: Common,
    /// Directory for `grid.vfck`, `input.ppm`, `gt.obj` and `progress.csv`.
    #[arg(long)]
    pub out_dir: PathBuf,
    /// Use a generated object instead of the configured single shape.
    #[arg(long)]
    pub object_seed: Option<u64>,
    /// Radius of the single-sphere object.
    #[arg(long)]
    pub sphere_radius: Option<f64>,
    #[arg(long)]
    pub res: Option<usize>,
    #[command(flatten)]
    pub pose: PoseArgs,
    #[command(flatten)]
    pub distill: DistillArgs,
}

pub fn execute(cli: Cli) -> Result<()> {
    parallel::init_from_env();
    match cli.command {
        Command::Dataset(a) => commands::dataset(a),
        Command::Train(a) => commands::train(a),
        Command::Synthesize(a) => commands::synthesize(a),
        Command::Reconstruct(a) => commands::reconstruct(a),
        Command::ExtractMesh(a) => commands::extract_mesh(a),
        Command::Evaluate(a) => commands::evaluate(a),
        Command::Gradcheck(a) => commands::gradcheck(a),
        Command::OracleRecon(a) => commands::oracle_recon(a),
    }
}

/// Parses the process arguments and runs the command.
pub fn run() -> ExitCode {
    let cli = Cli::parse();
    match execute(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {}", e.to_string().replace('\n', " "));
            ExitCode::FAILURE
        }
    }
}
