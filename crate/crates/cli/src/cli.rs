use std::path::PathBuf;

use clap::{Args, Parser, Subcommand, ValueEnum};

#[derive(Debug, Parser)]
#[command(name = "protoreg", version, about = "Mask-assisted deformable 3D registration")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Register a moving image onto a fixed one.
    Register(RegisterArgs),
    /// Score a warped segmentation against the fixed one.
    Eval(EvalArgs),
    /// Write a synthetic image pair with labels and the true displacement.
    Phantom(PhantomArgs),
    /// Compare analytic and finite-difference gradients of every loss term.
    CheckGrad(CheckGradArgs),
    /// Print a small worked example of the attention kernels.
    DemoAttention,
    /// Render one slice with label outlines as a PPM image.
    Slices(SlicesArgs),
    /// Run the three-row loss ablation on a phantom.
    Ablate(AblateArgs),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum Preset {
    Default,
    Phantom,
}

/// Settings on top of the config file (or preset). Every config field has a flag.
#[derive(Debug, Clone, Default, Args)]
pub struct ConfigArgs {
    /// JSON config file.
    #[arg(long, conflicts_with = "preset")]
    pub config: Option<PathBuf>,
    /// Built-in starting point when no config file is given.
    #[arg(long, value_enum)]
    pub preset: Option<Preset>,
    #[arg(long)]
    pub levels: Option<usize>,
    /// Iterations per level, coarsest first, comma separated.
    #[arg(long, value_delimiter = ',')]
    pub iterations: Option<Vec<usize>>,
    #[arg(long)]
    pub learning_rate: Option<f64>,
    #[arg(long)]
    pub beta1: Option<f64>,
    #[arg(long)]
    pub beta2: Option<f64>,
    #[arg(long)]
    pub adam_epsilon: Option<f64>,
    #[arg(long)]
    pub w_sim: Option<f64>,
    #[arg(long)]
    pub w_smooth: Option<f64>,
    #[arg(long)]
    pub w_seg: Option<f64>,
    #[arg(long)]
    pub w_prototype: Option<f64>,
    #[arg(long)]
    pub w_contour: Option<f64>,
    #[arg(long)]
    pub lncc_window: Option<usize>,
    #[arg(long)]
    pub contour_max_points: Option<usize>,
    #[arg(long)]
    pub temperature: Option<f64>,
    #[arg(long)]
    pub seed: Option<u64>,
}

#[derive(Debug, Clone, Args)]
pub struct RegisterArgs {
    #[arg(long)]
    pub fixed: PathBuf,
    #[arg(long)]
    pub moving: PathBuf,
    #[arg(long)]
    pub fixed_mask: Option<PathBuf>,
    #[arg(long)]
    pub moving_mask: Option<PathBuf>,
    #[arg(long)]
    pub out_dir: PathBuf,
    #[command(flatten)]
    pub config: ConfigArgs,
}

#[derive(Debug, Clone, Args)]
pub struct EvalArgs {
    #[arg(long)]
    pub fixed_mask: PathBuf,
    #[arg(long)]
    pub warped_mask: PathBuf,
    #[arg(long)]
    pub field: PathBuf,
    /// CSV path; the JSON report goes next to it with a `.json` extension.
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Clone, Args)]
pub struct PhantomArgs {
    /// JSON phantom spec; defaults apply when omitted.
    #[arg(long)]
    pub spec: Option<PathBuf>,
    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(long)]
    pub out_dir: PathBuf,
}

#[derive(Debug, Clone, Args)]
pub struct CheckGradArgs {
    /// Edge length of the random test volume.
    #[arg(long, default_value_t = 6)]
    pub size: usize,
    #[arg(long, default_value_t = 64)]
    pub probes: usize,
    #[arg(long, default_value_t = 1e-3)]
    pub eps: f64,
    #[arg(long, default_value_t = 1e-3)]
    pub tolerance: f64,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
}

#[derive(Debug, Clone, Args)]
pub struct SlicesArgs {
    #[arg(long)]
    pub volume: PathBuf,
    #[arg(long)]
    pub labels: Option<PathBuf>,
    /// x, y or z.
    #[arg(long)]
    pub axis: String,
    #[arg(long)]
    pub index: usize,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Clone, Args)]
pub struct AblateArgs {
    #[arg(long)]
    pub phantom_spec: Option<PathBuf>,
    #[arg(long)]
    pub out: PathBuf,
    #[command(flatten)]
    pub config: ConfigArgs,
}
