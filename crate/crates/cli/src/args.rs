use std::path::PathBuf;

use clap::{Args, Parser, Subcommand};
use voxelfill_core::augment::Interpolation;
use voxelfill_core::config::parse_triple;
use voxelfill_core::Dims;

#[derive(Debug, Parser)]
#[command(
    name = "voxelfill",
    version,
    about = "Healthy-tissue inpainting for 3D brain MRI",
    arg_required_else_help = true
)]
pub struct Cli {
    /// Master seed for every random stream.
    #[arg(long, global = true)]
    pub seed: Option<u64>,
    /// Worker threads (results do not depend on this).
    #[arg(long, global = true)]
    pub threads: Option<usize>,
    /// Only print warnings and errors.
    #[arg(long, global = true)]
    pub quiet: bool,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Write synthetic phantom scans (`<id>_t1n.vol`, `_brain.vol`, `_unhealthy.vol`).
    SynthData(SynthArgs),
    /// Generate healthy masks for one scan.
    GenMasks(GenMasksArgs),
    /// Mirror and rotate a volume or mask file.
    Augment(AugmentArgs),
    /// Train a U-Net on a data directory.
    Train(TrainArgs),
    /// Inpaint a voided scan with a checkpoint.
    Infer(InferArgs),
    /// Score an inpainted scan against ground truth.
    Eval(EvalArgs),
    /// Aggregate a directory of per-scan metric files.
    Report(ReportArgs),
}

fn dims_arg(s: &str) -> Result<Dims, String> {
    parse_triple(s).map(Dims::from).map_err(|e| e.to_string())
}

fn interp_arg(s: &str) -> Result<Interpolation, String> {
    s.parse().map_err(|e: voxelfill_core::Error| e.to_string())
}

#[derive(Debug, Args)]
pub struct SynthArgs {
    #[arg(long)]
    pub out_dir: PathBuf,
    #[arg(long, default_value_t = 1)]
    pub count: usize,
    /// Grid size as X,Y,Z.
    #[arg(long, default_value = "32,32,32", value_parser = dims_arg)]
    pub dims: Dims,
    #[arg(long, default_value_t = 3)]
    pub shells: usize,
    #[arg(long, default_value_t = 0.02)]
    pub noise: f64,
    #[arg(long)]
    pub no_tumor: bool,
    #[arg(long, default_value = "scan")]
    pub prefix: String,
}

#[derive(Debug, Args)]
pub struct GenMasksArgs {
    #[arg(long)]
    pub brain: PathBuf,
    #[arg(long)]
    pub unhealthy: PathBuf,
    #[arg(long)]
    pub out_dir: PathBuf,
    /// Scan id used in output names; defaults to the brain file name minus `_brain`.
    #[arg(long)]
    pub scan: Option<String>,
    #[arg(long, default_value_t = 5)]
    pub count: usize,
    /// Also write `<scan>_voided_<k>.vol` and `<scan>_mask_<k>.vol` from this image.
    #[arg(long)]
    pub t1n: Option<PathBuf>,
    #[arg(long)]
    pub frac_min: Option<f64>,
    #[arg(long)]
    pub frac_max: Option<f64>,
    #[arg(long)]
    pub blobs_min: Option<usize>,
    #[arg(long)]
    pub blobs_max: Option<usize>,
    #[arg(long)]
    pub safety_radius: Option<f64>,
    #[arg(long)]
    pub max_attempts: Option<usize>,
}

#[derive(Debug, Args)]
pub struct AugmentArgs {
    #[arg(long)]
    pub input: PathBuf,
    #[arg(long)]
    pub out: PathBuf,
    /// Stream index of the sampled transform.
    #[arg(long, default_value_t = 0)]
    pub index: u64,
    /// Axes to mirror, e.g. `xz`; overrides the sampled flags.
    #[arg(long)]
    pub mirror: Option<String>,
    #[arg(long)]
    pub theta_xy: Option<f64>,
    #[arg(long)]
    pub theta_yz: Option<f64>,
    #[arg(long, value_parser = interp_arg)]
    pub interp: Option<Interpolation>,
}

#[derive(Debug, Args)]
pub struct TrainArgs {
    #[arg(long)]
    pub data_dir: PathBuf,
    /// `key = value` settings; unset keys keep their defaults.
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Cross-validation fold to hold out; all scans train when absent.
    #[arg(long)]
    pub fold: Option<usize>,
    #[arg(long)]
    pub out_dir: PathBuf,
}

#[derive(Debug, Args)]
pub struct InferArgs {
    #[arg(long)]
    pub checkpoint: PathBuf,
    #[arg(long)]
    pub voided: PathBuf,
    /// Inpainting region (healthy and unhealthy labels).
    #[arg(long)]
    pub mask: PathBuf,
    #[arg(long)]
    pub out: PathBuf,
    /// Patch size as X,Y,Z; defaults to the checkpoint's training patch.
    #[arg(long, value_parser = dims_arg)]
    pub patch_dims: Option<Dims>,
}

#[derive(Debug, Args)]
pub struct EvalArgs {
    #[arg(long)]
    pub pred: PathBuf,
    #[arg(long)]
    pub gt: PathBuf,
    /// Healthy-label region to score.
    #[arg(long)]
    pub mask: PathBuf,
    /// Scan id; defaults to the prediction file stem.
    #[arg(long)]
    pub id: Option<String>,
    /// Per-scan metrics file to write.
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct ReportArgs {
    #[arg(long)]
    pub dir: PathBuf,
    #[arg(long)]
    pub out: Option<PathBuf>,
}
