//! Command-line driver: dataset synthesis, training, enhancement, evaluation
//! and architecture info.
//!
//! Exit codes: 0 on success, 2 for usage or input errors, 1 for internal
//! failures.

pub mod commands;
pub mod settings;

use std::path::PathBuf;

use clap::{Args, Parser, Subcommand};
use thiserror::Error;

pub use settings::Settings;

#[derive(Debug, Error)]
pub enum CliError {
    /// Bad flags, bad config or unusable input files.
    #[error("{0}")]
    Input(String),
    #[error("internal error: {0}")]
    Internal(String),
}

impl CliError {
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Input(_) => 2,
            CliError::Internal(_) => 1,
        }
    }
}

#[derive(Debug, Parser)]
#[command(
    name = "unir",
    version,
    about = "Underwater image restoration under non-uniform illumination"
)]
pub struct Cli {
    #[command(flatten)]
    pub global: GlobalArgs,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Args)]
pub struct GlobalArgs {
    /// Seed for synthesis choices, weight init and batch order.
    #[arg(long, global = true)]
    pub seed: Option<u64>,
    /// Worker threads for per-image work (default 1).
    #[arg(long, global = true)]
    pub threads: Option<usize>,
    /// Flat `key = value` file overriding the built-in defaults.
    #[arg(long = "config", global = true, value_name = "FILE")]
    pub config_file: Option<PathBuf>,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Build low/ground-truth pairs from raw images and masks.
    Synth(SynthArgs),
    /// Train on a dataset manifest.
    Train(TrainArgs),
    /// Enhance an image or a directory of images.
    Enhance(EnhanceArgs),
    /// Compute quality metrics into a CSV report.
    Eval(EvalArgs),
    /// Print the layer table and parameter count.
    Info(InfoArgs),
}

/// Pushes `(key, value)` for every flag that was given.
macro_rules! overrides {
    ($out:ident, $self:ident, $($field:ident),* $(,)?) => {{
        $(if let Some(v) = &$self.$field {
            $out.push((stringify!($field).to_string(), v.to_string()));
        })*
    }};
}

#[derive(Debug, Args, Default)]
pub struct NetFlags {
    #[arg(long)]
    pub base_width: Option<usize>,
    /// Comma-separated output widths of the four enhancement blocks.
    #[arg(long, value_delimiter = ',')]
    pub width_schedule: Option<Vec<usize>>,
    #[arg(long)]
    pub n_heads: Option<usize>,
    #[arg(long)]
    pub ffn_expansion: Option<usize>,
    #[arg(long)]
    pub attn_window: Option<usize>,
    #[arg(long)]
    pub global_attn_tokens: Option<usize>,
    #[arg(long)]
    pub gamma_ccm: Option<f64>,
}

impl NetFlags {
    pub fn overrides(&self, out: &mut Vec<(String, String)>) {
        overrides!(
            out,
            self,
            base_width,
            n_heads,
            ffn_expansion,
            attn_window,
            global_attn_tokens,
            gamma_ccm
        );
        if let Some(ws) = &self.width_schedule {
            out.push(("width_schedule".into(), format!("{ws:?}")));
        }
    }
}

#[derive(Debug, Args)]
pub struct SynthArgs {
    #[arg(long)]
    pub raw_dir: PathBuf,
    #[arg(long)]
    pub mask_dir: PathBuf,
    #[arg(long)]
    pub out_dir: PathBuf,
    /// Brightness threshold below which the masked area is always deepened.
    #[arg(long)]
    pub alpha: Option<f64>,
    #[arg(long)]
    pub kernel_g: Option<usize>,
    #[arg(long)]
    pub gamma_d: Option<f64>,
    #[arg(long)]
    pub gamma_s: Option<f64>,
    #[arg(long)]
    pub beta: Option<f64>,
    #[arg(long)]
    pub epsilon_gf: Option<f64>,
    /// Guided-filter guide: `luminance` or `value`.
    #[arg(long)]
    pub guide: Option<String>,
}

#[derive(Debug, Args)]
pub struct TrainArgs {
    #[arg(long)]
    pub manifest: PathBuf,
    /// Output directory for checkpoints, final weights and the loss log.
    #[arg(long)]
    pub out: PathBuf,
    /// Checkpoint to continue from.
    #[arg(long)]
    pub resume: Option<PathBuf>,
    #[arg(long)]
    pub epochs: Option<usize>,
    #[arg(long)]
    pub batch_size: Option<usize>,
    #[arg(long)]
    pub patch_size: Option<usize>,
    #[arg(long)]
    pub lr: Option<f64>,
    #[arg(long)]
    pub checkpoint_every: Option<usize>,
    #[arg(long)]
    pub lambda_c: Option<f32>,
    #[arg(long)]
    pub lambda_s: Option<f32>,
    #[command(flatten)]
    pub net: NetFlags,
}

#[derive(Debug, Args)]
pub struct EnhanceArgs {
    /// Weight file or training checkpoint.
    #[arg(long)]
    pub weights: PathBuf,
    /// Input image or directory.
    #[arg(long = "in")]
    pub input: PathBuf,
    /// Output image, or directory when the input is one.
    #[arg(long)]
    pub out: PathBuf,
    /// Skip the colour correction stage.
    #[arg(long)]
    pub no_ccm: bool,
    #[command(flatten)]
    pub net: NetFlags,
}

#[derive(Debug, Args)]
#[command(group(clap::ArgGroup::new("source").required(true).args(["pairs", "dir"])))]
pub struct EvalArgs {
    /// Manifest whose `low_path` images are scored against `gt_path`.
    #[arg(long)]
    pub pairs: Option<PathBuf>,
    /// Directory of images scored without a reference (UCIQE only).
    #[arg(long)]
    pub dir: Option<PathBuf>,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Args)]
pub struct InfoArgs {
    /// Report the width whose parameter count is closest to this target.
    #[arg(long)]
    pub find_width: Option<usize>,
    #[command(flatten)]
    pub net: NetFlags,
}

impl Cli {
    /// Flag overrides in the order they take effect.
    pub fn overrides(&self) -> Vec<(String, String)> {
        let mut out = Vec::new();
        match &self.command {
            Command::Synth(a) => {
                overrides!(out, a, alpha, kernel_g, gamma_d, gamma_s, beta, epsilon_gf, guide)
            }
            Command::Train(a) => {
                overrides!(
                    out,
                    a,
                    epochs,
                    batch_size,
                    patch_size,
                    lr,
                    checkpoint_every,
                    lambda_c,
                    lambda_s
                );
                a.net.overrides(&mut out);
            }
            Command::Enhance(a) => a.net.overrides(&mut out),
            Command::Info(a) => a.net.overrides(&mut out),
            Command::Eval(_) => {}
        }
        let g = &self.global;
        overrides!(out, g, seed, threads);
        out
    }

    pub fn settings(&self) -> Result<Settings, CliError> {
        Settings::build(self.global.config_file.as_deref(), &self.overrides())
    }
}

/// Runs a parsed command line.
pub fn run(cli: &Cli) -> Result<(), CliError> {
    let settings = cli.settings()?;
    match &cli.command {
        Command::Synth(a) => commands::synth(a, &settings).map(|_| ()),
        Command::Train(a) => commands::train(a, &settings).map(|_| ()),
        Command::Enhance(a) => commands::enhance(a, &settings).map(|_| ()),
        Command::Eval(a) => commands::eval(a, &settings).map(|_| ()),
        Command::Info(a) => {
            print!("{}", commands::info(a, &settings)?);
            Ok(())
        }
    }
}
