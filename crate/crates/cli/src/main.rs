//! `radar`: train, sample, edit and benchmark radial grid generators.
//!
//! Exit codes: 0 on success, 1 on usage errors, 2 on runtime failures.

mod commands;
mod render;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{ArgGroup, Args, Parser, Subcommand, ValueEnum};

#[derive(Parser, Debug)]
#[command(name = "radar", version, about = "Radial-parallel generation over token grids")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Subcommand, Debug)]
pub enum Command {
    /// Train a model on a synthetic source and write a checkpoint.
    Train(TrainArgs),
    /// Generate one grid.
    Gen(GenArgs),
    /// Keep one rectangle of a base grid and generate everything around it.
    Outpaint(OutpaintArgs),
    /// Regenerate rectangles of a base grid, keeping the rest.
    Edit(EditArgs),
    /// Run a benchmark suite and write TSV tables plus a manifest.
    Bench(BenchArgs),
    /// Print the attention mask of a schedule.
    Mask(MaskArgs),
    /// Print a schedule file.
    Schedule(ScheduleArgs),
    /// Train the toy VQ tokenizer on procedural images.
    TokenizerTrain(TokenizerTrainArgs),
    /// Render a token grid to a PPM image.
    Render(RenderArgs),
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
pub enum Preset {
    /// Small settings sized for one CPU core.
    Desk,
    /// The full default configuration.
    Full,
}

#[derive(Args, Debug)]
pub struct TrainArgs {
    /// `key = value` config file applied on top of the preset.
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[arg(long, value_enum, default_value_t = Preset::Desk)]
    pub preset: Preset,
    /// Overrides the configured number of epochs.
    #[arg(long)]
    pub epochs: Option<usize>,
    /// Overrides the configured grids per epoch.
    #[arg(long)]
    pub grids_per_epoch: Option<usize>,
    /// Tokenizer checkpoint; switches the source to tokenized procedural images.
    #[arg(long)]
    pub tokenizer: Option<PathBuf>,
    #[arg(long)]
    pub seed: Option<u64>,
    /// Per-epoch metrics as TSV.
    #[arg(long)]
    pub log: Option<PathBuf>,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
pub enum Attention {
    Unrestricted,
    Nested,
}

#[derive(Args, Debug, Clone)]
pub struct SampleArgs {
    #[arg(long)]
    pub ckpt: PathBuf,
    #[arg(long, default_value_t = 0)]
    pub class: usize,
    /// Schedule file or preset name; defaults to the checkpoint's schedule.
    #[arg(long)]
    pub schedule: Option<String>,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[arg(long, default_value_t = 1.0)]
    pub temperature: f64,
    #[arg(long)]
    pub top_k: Option<usize>,
    /// Classifier-free guidance scale (>= 1).
    #[arg(long)]
    pub cfg_scale: Option<f64>,
    /// `off`, `greedy`, or a probability threshold in [0, 1].
    #[arg(long, default_value = "greedy")]
    pub correction: String,
    #[arg(long, value_enum, default_value_t = Attention::Unrestricted)]
    pub attention: Attention,
    /// Write interior revisions as `step row col old new` lines.
    #[arg(long)]
    pub log_revisions: Option<PathBuf>,
    /// Also render the grid with the palette.
    #[arg(long)]
    pub render: Option<PathBuf>,
    /// Token grid output (rows of space-separated ids).
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Args, Debug)]
pub struct GenArgs {
    #[command(flatten)]
    pub sample: SampleArgs,
    /// Decode at a larger resolution by growing extra rings.
    #[arg(long, num_args = 2, value_names = ["H", "W"])]
    pub size: Option<Vec<usize>>,
}

#[derive(Args, Debug)]
pub struct OutpaintArgs {
    #[command(flatten)]
    pub sample: SampleArgs,
    #[arg(long)]
    pub base: PathBuf,
    /// Rectangle `r0,c0,r1,c1` (half-open) of the base to keep.
    #[arg(long)]
    pub keep: String,
}

#[derive(Args, Debug)]
pub struct EditArgs {
    #[command(flatten)]
    pub sample: SampleArgs,
    #[arg(long)]
    pub base: PathBuf,
    /// Rectangle `r0,c0,r1,c1` (half-open) to regenerate; repeatable.
    #[arg(long, required = true)]
    pub region: Vec<String>,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
pub enum Suite {
    /// Forwards and wallclock of radial schedules against raster decoding.
    Speed,
    /// Technique and anchor ablations trained from scratch.
    Ablate,
    /// Planted-corruption recovery under each correction mode.
    Correction,
}

#[derive(Args, Debug)]
pub struct BenchArgs {
    #[arg(long, value_enum)]
    pub suite: Suite,
    /// Output directory.
    #[arg(long)]
    pub out: PathBuf,
    /// Model checkpoint; `speed` builds a fresh default-size model without one.
    #[arg(long)]
    pub ckpt: Option<PathBuf>,
    /// Grid for a fresh `speed` model.
    #[arg(long, num_args = 2, value_names = ["H", "W"], default_values_t = [16, 16])]
    pub grid: Vec<usize>,
    #[arg(long, default_value_t = 100)]
    pub runs: usize,
    #[arg(long, default_value_t = 10)]
    pub warmup: usize,
    /// Source for `correction`: constant, quantized_field or potts_gibbs.
    #[arg(long, default_value = "constant")]
    pub source: String,
    #[arg(long, default_value_t = 500)]
    pub trials: usize,
    /// Seeds for `ablate`.
    #[arg(long, default_value_t = 3)]
    pub seeds: u64,
    /// Epochs per `ablate` run (desk preset otherwise).
    #[arg(long)]
    pub epochs: Option<usize>,
    #[arg(long, default_value_t = 256)]
    pub eval_grids: usize,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
pub enum MaskMode {
    Nested,
    BlockCausal,
}

#[derive(Args, Debug)]
pub struct MaskArgs {
    /// Schedule file or preset name.
    #[arg(long, default_value = "center")]
    pub schedule: String,
    /// Grid for preset schedules.
    #[arg(long, num_args = 2, value_names = ["H", "W"], default_values_t = [4, 4])]
    pub grid: Vec<usize>,
    #[arg(long, value_enum, default_value_t = MaskMode::Nested)]
    pub kind: MaskMode,
    /// Print the full 0/1 matrix instead of a summary.
    #[arg(long)]
    pub dump: bool,
}

#[derive(Args, Debug)]
#[command(group(ArgGroup::new("shape").args(["preset", "anchor"])))]
pub struct ScheduleArgs {
    #[arg(long, num_args = 2, value_names = ["H", "W"], required = true)]
    pub grid: Vec<usize>,
    /// Named schedule (center, edge, corner, center13, single).
    #[arg(long, conflicts_with_all = ["anchor", "thickness", "balanced"])]
    pub preset: Option<String>,
    /// center, edge-top, corner-top-left, ...
    #[arg(long)]
    pub anchor: Option<String>,
    #[arg(long, default_value_t = 1)]
    pub thickness: usize,
    /// Grow each axis by twice the thickness whichever sides can grow.
    #[arg(long)]
    pub balanced: bool,
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Args, Debug)]
pub struct TokenizerTrainArgs {
    /// Training images (PPM/PGM); procedural images are used when absent.
    #[arg(long, num_args = 1..)]
    pub images: Vec<PathBuf>,
    /// Number of procedural images.
    #[arg(long, default_value_t = 64, conflicts_with = "images")]
    pub count: usize,
    /// Side of procedural images in pixels.
    #[arg(long, default_value_t = 32)]
    pub size: usize,
    #[arg(long, default_value_t = 64)]
    pub vocab: usize,
    #[arg(long, default_value_t = 4)]
    pub patch: usize,
    #[arg(long, default_value_t = 10)]
    pub epochs: usize,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
pub enum RenderMode {
    Palette,
    VqDecode,
}

#[derive(Args, Debug)]
pub struct RenderArgs {
    /// Token grid file.
    #[arg(long)]
    pub grid: PathBuf,
    #[arg(long, value_enum, default_value_t = RenderMode::Palette)]
    pub mode: RenderMode,
    #[arg(long, required_if_eq("mode", "vq-decode"))]
    pub tokenizer: Option<PathBuf>,
    /// Pixels per cell side in palette mode.
    #[arg(long, default_value_t = 8)]
    pub scale: usize,
    #[arg(long)]
    pub out: PathBuf,
}

/// A failure and the exit code it maps to.
#[derive(Debug)]
pub enum Failure {
    Usage(String),
    Runtime(String),
}

impl From<radar_core::error::Error> for Failure {
    fn from(e: radar_core::error::Error) -> Self {
        Failure::Runtime(e.to_string())
    }
}

impl From<std::io::Error> for Failure {
    fn from(e: std::io::Error) -> Self {
        Failure::Runtime(e.to_string())
    }
}

fn configure_threads() -> Result<(), Failure> {
    let Ok(v) = std::env::var("RADAR_THREADS") else { return Ok(()) };
    let n: usize = v
        .parse()
        .ok()
        .filter(|&n| n > 0)
        .ok_or_else(|| Failure::Usage(format!("RADAR_THREADS must be a positive integer, got {v:?}")))?;
    rayon::ThreadPoolBuilder::new()
        .num_threads(n)
        .build_global()
        .map_err(|e| Failure::Runtime(format!("thread pool: {e}")))
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    match configure_threads().and_then(|_| commands::run(cli.command)) {
        Ok(()) => ExitCode::SUCCESS,
        Err(Failure::Usage(msg)) => {
            eprintln!("error: {msg}");
            ExitCode::from(1)
        }
        Err(Failure::Runtime(msg)) => {
            eprintln!("error: {msg}");
            ExitCode::from(2)
        }
    }
}
