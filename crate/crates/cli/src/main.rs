mod commands;
mod visualize;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};

/// Static/transient segmentation of multi-view image collections.
#[derive(Debug, Parser)]
#[command(name = "hugs", version)]
pub struct Cli {
    /// Seed for every random choice made by the command.
    #[arg(long, global = true, default_value_t = 0)]
    pub seed: u64,

    /// Worker threads; defaults to the number of logical cores.
    #[arg(long, global = true)]
    pub jobs: Option<usize>,

    /// Log progress to stderr (repeat for more detail).
    #[arg(short, long, global = true, action = clap::ArgAction::Count)]
    pub verbose: u8,

    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Generate a synthetic dataset with ground-truth transient masks.
    Synth(SynthArgs),
    /// Read, convert, inspect and analyze COLMAP sparse models.
    #[command(subcommand)]
    Sfm(SfmCommand),
    /// Compute a single heuristic map.
    #[command(subcommand)]
    Heuristic(HeuristicCommand),
    /// Run the full static-map pipeline over a dataset.
    Mask(MaskArgs),
    /// Train a voxel radiance field, optionally masked by static maps.
    Train(TrainArgs),
    /// Render dataset views from a trained field.
    Render(RenderArgs),
    /// Score predicted masks or renders against references.
    #[command(subcommand)]
    Eval(EvalCommand),
    /// Write overlay images and plot data.
    #[command(subcommand)]
    Visualize(VisualizeCommand),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum SceneKind {
    /// Static scene plus a moving distractor sphere.
    Default,
    /// Static scene only.
    Clean,
}

#[derive(Debug, Args)]
pub struct SynthArgs {
    #[arg(long, value_enum, default_value_t = SceneKind::Default)]
    pub preset: SceneKind,
    /// Output dataset directory.
    #[arg(long)]
    pub out: PathBuf,
    /// Image width and height in pixels.
    #[arg(long, default_value_t = 64)]
    pub resolution: u32,
    /// Sampled 3D points per scene primitive.
    #[arg(long, default_value_t = hugs_core::synth::DEFAULT_POINTS_PER_PRIMITIVE)]
    pub points: usize,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum FormatArg {
    Auto,
    Binary,
    Text,
}

impl From<FormatArg> for hugs_core::sfm::ModelFormat {
    fn from(f: FormatArg) -> Self {
        match f {
            FormatArg::Auto => Self::Auto,
            FormatArg::Binary => Self::Binary,
            FormatArg::Text => Self::Text,
        }
    }
}

#[derive(Debug, Subcommand)]
pub enum SfmCommand {
    /// Parse a model and write it back out, optionally in the other format.
    Parse {
        /// Model directory holding cameras, images and points3D files.
        #[arg(long)]
        input: PathBuf,
        #[arg(long, value_enum, default_value_t = FormatArg::Auto)]
        format: FormatArg,
        /// Directory to write the parsed model to.
        #[arg(long)]
        out: Option<PathBuf>,
        #[arg(long, value_enum, default_value_t = FormatArg::Binary)]
        out_format: FormatArg,
    },
    /// Print model statistics and per-image feature counts.
    Inspect {
        #[arg(long)]
        input: PathBuf,
        #[arg(long, value_enum, default_value_t = FormatArg::Auto)]
        format: FormatArg,
        /// Occurrence-ratio threshold for counting static features.
        #[arg(long, default_value_t = 0.2)]
        t_sfm: f64,
    },
    /// Feature survival of static and transient pixels across thresholds.
    Sweep(SweepArgs),
}

#[derive(Debug, Args)]
pub struct SweepArgs {
    #[arg(long)]
    pub input: PathBuf,
    /// Directory of ground-truth static masks named like the images.
    #[arg(long)]
    pub gt: PathBuf,
    /// Number of evenly spaced thresholds in [0, 1].
    #[arg(long, default_value_t = 21)]
    pub steps: usize,
    /// CSV destination; printed to stdout when omitted.
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum SegmenterArg {
    Builtin,
    Remote,
}

#[derive(Debug, Args)]
pub struct SegmenterArgs {
    #[arg(long, value_enum, default_value_t = SegmenterArg::Builtin)]
    pub segmenter: SegmenterArg,
    /// Base URL of the remote segmentation service.
    #[arg(long, env = "HUGS_REMOTE_ENDPOINT")]
    pub endpoint: Option<String>,
}

#[derive(Debug, Subcommand)]
pub enum HeuristicCommand {
    /// Segmentation-prompted map from features with high match ratios.
    Sfm {
        #[arg(long)]
        image: PathBuf,
        #[arg(long)]
        recon: PathBuf,
        /// Image name in the model; defaults to the file name.
        #[arg(long)]
        name: Option<String>,
        #[arg(long, default_value_t = 0.2)]
        t_sfm: f64,
        /// Points per segmentation prompt.
        #[arg(long, default_value_t = 1)]
        group_size: usize,
        #[command(flatten)]
        segmenter: SegmenterArgs,
        #[arg(long)]
        out: PathBuf,
    },
    /// Mean-threshold and quantile-bound maps from a residual.
    Residual {
        /// Stored residual map; otherwise computed from the two images.
        #[arg(long, conflicts_with_all = ["rendered", "reference"])]
        residual: Option<PathBuf>,
        #[arg(long, requires = "reference")]
        rendered: Option<PathBuf>,
        #[arg(long, requires = "rendered")]
        reference: Option<PathBuf>,
        #[arg(long, default_value_t = 0.9)]
        t_cr: f64,
        /// Output directory for residual.png, bound.png and residual.hugr.
        #[arg(long)]
        out: PathBuf,
    },
    /// Combine heuristic maps as (sfm OR residual) AND bound.
    Combine {
        #[arg(long)]
        sfm: PathBuf,
        #[arg(long)]
        residual: PathBuf,
        #[arg(long)]
        bound: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum PresetArg {
    Kubric,
    Distractor,
    Phototourism,
}

impl From<PresetArg> for hugs_core::heuristics::Preset {
    fn from(p: PresetArg) -> Self {
        match p {
            PresetArg::Kubric => Self::Kubric,
            PresetArg::Distractor => Self::Distractor,
            PresetArg::Phototourism => Self::Phototourism,
        }
    }
}

#[derive(Debug, Args)]
pub struct MaskArgs {
    /// Dataset directory (images/, poses.json).
    #[arg(long)]
    pub dataset: PathBuf,
    /// Sparse model directory; defaults to <dataset>/sparse.
    #[arg(long)]
    pub recon: Option<PathBuf>,
    /// Output directory; overrides the config file.
    #[arg(long)]
    pub out: Option<PathBuf>,
    /// Pipeline config file.
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Threshold preset; overrides the config file.
    #[arg(long, value_enum)]
    pub preset: Option<PresetArg>,
    /// Segmentation backend; overrides the config file.
    #[arg(long, value_enum)]
    pub segmenter: Option<SegmenterArg>,
    #[arg(long, env = "HUGS_REMOTE_ENDPOINT")]
    pub endpoint: Option<String>,
    /// Skip writing heuristic maps and residuals.
    #[arg(long)]
    pub no_intermediates: bool,
    /// Stop after the static maps; no final training or rendering.
    #[arg(long)]
    pub no_train: bool,
}

#[derive(Debug, Args)]
pub struct TrainArgs {
    #[arg(long)]
    pub dataset: PathBuf,
    /// Directory of static maps named <image stem>.png.
    #[arg(long)]
    pub masks: Option<PathBuf>,
    /// Checkpoint destination.
    #[arg(long)]
    pub out: PathBuf,
    /// Loss curve CSV destination.
    #[arg(long)]
    pub loss_csv: Option<PathBuf>,
    #[arg(long, default_value_t = 32)]
    pub resolution: usize,
    #[arg(long)]
    pub iterations: Option<usize>,
    #[arg(long)]
    pub batch_rays: Option<usize>,
    #[arg(long)]
    pub lr_initial: Option<f64>,
    #[arg(long)]
    pub lr_final: Option<f64>,
    #[arg(long)]
    pub samples: Option<usize>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum SplitArg {
    Train,
    Test,
    All,
}

#[derive(Debug, Args)]
pub struct RenderArgs {
    #[arg(long)]
    pub field: PathBuf,
    #[arg(long)]
    pub dataset: PathBuf,
    #[arg(long, value_enum, default_value_t = SplitArg::Test)]
    pub split: SplitArg,
    #[arg(long, default_value_t = 64)]
    pub samples: usize,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Subcommand)]
pub enum EvalCommand {
    /// mIoU and F1 of predicted static maps against ground truth.
    Masks {
        #[arg(long)]
        pred: PathBuf,
        #[arg(long)]
        gt: PathBuf,
        /// JSON report destination.
        #[arg(long)]
        json: Option<PathBuf>,
    },
    /// PSNR and SSIM of rendered images against references.
    Images {
        #[arg(long)]
        pred: PathBuf,
        #[arg(long)]
        gt: PathBuf,
        #[arg(long)]
        json: Option<PathBuf>,
    },
}

#[derive(Debug, Subcommand)]
pub enum VisualizeCommand {
    /// Tint static pixels green and transient pixels red.
    Mask {
        #[arg(long)]
        image: PathBuf,
        #[arg(long)]
        mask: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Mark feature locations with high match ratios.
    Points {
        #[arg(long)]
        image: PathBuf,
        #[arg(long)]
        recon: PathBuf,
        #[arg(long)]
        name: Option<String>,
        #[arg(long, default_value_t = 0.0)]
        t_sfm: f64,
        #[arg(long)]
        out: PathBuf,
    },
    /// Survival-curve data as CSV.
    Sweep(SweepArgs),
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let level = match cli.verbose {
        0 => log::LevelFilter::Warn,
        1 => log::LevelFilter::Info,
        _ => log::LevelFilter::Debug,
    };
    env_logger::Builder::new().filter_level(level).format_timestamp(None).init();
    if let Some(jobs) = cli.jobs {
        if let Err(e) = rayon::ThreadPoolBuilder::new().num_threads(jobs).build_global() {
            eprintln!("error: worker pool: {e}");
            return ExitCode::FAILURE;
        }
    }
    match commands::run(&cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::FAILURE
        }
    }
}
