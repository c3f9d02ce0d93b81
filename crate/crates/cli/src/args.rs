use std::net::IpAddr;
use std::path::PathBuf;

use clap::{Args, Parser, Subcommand};
use lowlight::networks::Stage;

#[derive(Debug, Parser)]
#[command(name = "lowlight", version, about = "Retinex low-light enhancement: train, enhance, evaluate, serve")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Train one stage; writes OUT/<stage>/ with weights and loss.csv.
    Train(TrainArgs),
    /// Enhance an image, or every image in a directory.
    Enhance(EnhanceArgs),
    /// Write the reflectance and illumination of an image.
    Decompose(DecomposeArgs),
    /// Score enhanced images against references.
    Eval(EvalArgs),
    /// Write a synthetic paired corpus with known reflectance and illumination.
    Synth(SynthArgs),
    /// Write a freshly initialized bundle.
    Init(InitArgs),
    /// Run the HTTP service.
    Serve(ServeArgs),
}

#[derive(Debug, Args)]
pub struct TrainArgs {
    /// decom, restore or adjust.
    #[arg(long)]
    pub stage: Stage,
    /// Dataset root (train/ or our485/) or a directory with low/ and high/.
    #[arg(long)]
    pub data: PathBuf,
    /// Bundle directory; the stage is written to OUT/<stage>/.
    #[arg(long)]
    pub out: PathBuf,
    /// TOML training config; flags override its values.
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(long)]
    pub iterations: Option<u64>,
    #[arg(long)]
    pub batch: Option<usize>,
    #[arg(long)]
    pub patch: Option<usize>,
    #[arg(long = "lr")]
    pub learning_rate: Option<f64>,
    #[arg(long)]
    pub threads: Option<usize>,
    #[arg(long)]
    pub checkpoint_every: Option<u64>,
    #[arg(long)]
    pub log_every: Option<u64>,
    /// Continue from an existing checkpoint of this stage.
    #[arg(long)]
    pub resume: bool,
    /// Decomposition checkpoint for restore/adjust; defaults to OUT/decomposition.
    #[arg(long)]
    pub decomposition: Option<PathBuf>,
    /// Suppress per-iteration progress on stderr.
    #[arg(long, short)]
    pub quiet: bool,
}

#[derive(Debug, Args)]
pub struct EnhanceArgs {
    /// Image file or directory of images.
    #[arg(long)]
    pub input: PathBuf,
    /// Illumination ratio in (0, 10].
    #[arg(long, allow_negative_numbers = true)]
    pub alpha: f64,
    #[arg(long)]
    pub bundle: PathBuf,
    /// PNG file, or a directory when the input is one.
    #[arg(long)]
    pub output: PathBuf,
    /// Also write <stem>_reflectance.png and <stem>_illumination.png here.
    #[arg(long)]
    pub layers: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct DecomposeArgs {
    #[arg(long)]
    pub input: PathBuf,
    #[arg(long)]
    pub bundle: PathBuf,
    /// Receives <stem>_reflectance.png and <stem>_illumination.png.
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Args)]
pub struct EvalArgs {
    #[arg(long)]
    pub enhanced: PathBuf,
    #[arg(long)]
    pub reference: PathBuf,
    /// CSV report with one row per image and a final mean row.
    #[arg(long)]
    pub out: PathBuf,
    /// Low-light inputs; adds LOE against the input.
    #[arg(long)]
    pub input: Option<PathBuf>,
    #[arg(long, default_value_t = lowlight::metrics::DEFAULT_LOE_GRID)]
    pub loe_grid: usize,
    /// External no-reference scorer, invoked as `CMD <image>`; prints a number.
    #[arg(long)]
    pub niqe: Option<String>,
}

#[derive(Debug, Args)]
pub struct SynthArgs {
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long, default_value_t = 4)]
    pub pairs: usize,
    #[arg(long, default_value_t = 64)]
    pub height: usize,
    #[arg(long, default_value_t = 64)]
    pub width: usize,
    /// Standard deviation of the additive noise on the low image.
    #[arg(long, default_value_t = 0.02)]
    pub sigma: f64,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
}

#[derive(Debug, Args)]
pub struct InitArgs {
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
}

#[derive(Debug, Args)]
pub struct ServeArgs {
    /// 0 picks a free port.
    #[arg(long, default_value_t = 8080)]
    pub port: u16,
    #[arg(long, default_value = "127.0.0.1")]
    pub host: IpAddr,
    /// Without a bundle the service runs degraded and enhancement returns 503.
    #[arg(long)]
    pub bundle: Option<PathBuf>,
    /// Static UI assets served at /.
    #[arg(long = "static")]
    pub static_dir: Option<PathBuf>,
    #[arg(long, default_value_t = lowlight_service::DEFAULT_MAX_PIXELS)]
    pub max_pixels: u64,
}
