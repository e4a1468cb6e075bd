//! `mftryon` command-line entry point.

mod commands;
mod config;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use serde::Serialize;

/// Flag, config or argument combination the command cannot run with.
#[derive(Debug)]
pub struct Usage(pub String);

/// Input that parsed but does not make sense.
#[derive(Debug)]
pub struct Validation(pub String);

/// Check that ran but did not meet its tolerance.
#[derive(Debug)]
pub struct Numerical(pub String);

impl std::fmt::Display for Numerical {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(&self.0)
    }
}

impl std::fmt::Display for Usage {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(&self.0)
    }
}

impl std::fmt::Display for Validation {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(&self.0)
    }
}

impl std::error::Error for Usage {}
impl std::error::Error for Validation {}
impl std::error::Error for Numerical {}

#[derive(Debug, Parser)]
#[command(name = "mftryon", version, about = "Mask-free person-to-person virtual try-on toolkit")]
struct Cli {
    /// TOML file with one table per subcommand ([train], [eval], ...); flags override it.
    #[arg(long, global = true, value_name = "PATH")]
    config_file: Option<PathBuf>,

    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Procedural people and garments.
    #[command(subcommand)]
    Synth(SynthCommand),
    /// Build training triplets from a synthetic dataset.
    Dataprep(DataprepArgs),
    /// Train the try-on model.
    Train(TrainArgs),
    /// Dress the target person in the reference person's garment.
    Infer(InferArgs),
    /// SSIM, FID and KID between two image directories.
    Eval(EvalArgs),
    /// Attention heatmaps.
    #[command(subcommand)]
    Attn(AttnCommand),
    /// Compare analytic and finite-difference gradients.
    Gradcheck(GradcheckArgs),
}

#[derive(Debug, Subcommand)]
enum SynthCommand {
    /// Render a dataset of people with garment masks.
    Gen(SynthGenArgs),
}

#[derive(Debug, Subcommand)]
enum AttnCommand {
    /// Write per-head fit→reference and fit→target maps of one layer.
    Dump(AttnDumpArgs),
}

#[derive(Debug, Args, Serialize)]
pub struct SynthGenArgs {
    /// Number of people.
    #[arg(long)]
    #[serde(skip_serializing_if = "Option::is_none")]
    pub n: Option<usize>,
    #[arg(long)]
    #[serde(skip_serializing_if = "Option::is_none")]
    pub seed: Option<u64>,
    #[arg(long)]
    #[serde(skip_serializing_if = "Option::is_none")]
    pub out: Option<PathBuf>,
    /// png or ppm.
    #[arg(long)]
    #[serde(skip_serializing_if = "Option::is_none")]
    pub format: Option<String>,
    #[arg(long)]
    #[serde(skip_serializing_if = "Option::is_none")]
    pub height: Option<usize>,
    #[arg(long)]
    #[serde(skip_serializing_if = "Option::is_none")]
    pub width: Option<usize>,
}

#[derive(Debug, Args, Serialize)]
pub struct DataprepArgs {
    /// Synthetic dataset manifest (manifest.jsonl).
    #[arg(long)]
    #[serde(skip_serializing_if = "Option::is_none")]
    pub manifest: Option<PathBuf>,
    /// `compositor` or `checkpoint:PATH`.
    #[arg(long)]
    #[serde(skip_serializing_if = "Option::is_none")]
    pub oracle: Option<String>,
    /// Sampling steps when the oracle is a checkpoint.
    #[arg(long)]
    #[serde(skip_serializing_if = "Option::is_none")]
    pub oracle_steps: Option<usize>,
    /// `none`, `cycle` or `cycle:THRESH`.
    #[arg(long)]
    #[serde(skip_serializing_if = "Option::is_none")]
    pub filter: Option<String>,
    #[arg(long)]
    #[serde(skip_serializing_if = "Option::is_none")]
    pub seed: Option<u64>,
    #[arg(long)]
    #[serde(skip_serializing_if = "Option::is_none")]
    pub format: Option<String>,
    #[arg(long)]
    #[serde(skip_serializing_if = "Option::is_none")]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Args, Serialize)]
pub struct TrainArgs {
    /// Triplet manifest written by `dataprep`.
    #[arg(long)]
    #[serde(skip_serializing_if = "Option::is_none")]
    pub triplets: Option<PathBuf>,
    #[arg(long)]
    #[serde(skip_serializing_if = "Option::is_none")]
    pub steps: Option<usize>,
    #[arg(long)]
    #[serde(skip_serializing_if = "Option::is_none")]
    pub batch: Option<usize>,
    #[arg(long)]
    #[serde(skip_serializing_if = "Option::is_none")]
    pub lr: Option<f64>,
    /// Weight of the focus attention loss; 0 disables it.
    #[arg(long)]
    #[serde(rename = "lambda_fa", skip_serializing_if = "Option::is_none")]
    pub fa_weight: Option<f64>,
    #[arg(long)]
    #[serde(skip_serializing_if = "Option::is_none")]
    pub seed: Option<u64>,
    #[arg(long)]
    #[serde(skip_serializing_if = "Option::is_none")]
    pub ckpt_dir: Option<PathBuf>,
    /// Continue from this checkpoint.
    #[arg(long)]
    #[serde(skip_serializing_if = "Option::is_none")]
    pub resume: Option<PathBuf>,
    /// Steps between intermediate checkpoints; 0 keeps only the final one.
    #[arg(long)]
    #[serde(skip_serializing_if = "Option::is_none")]
    pub checkpoint_interval: Option<usize>,
    /// Apply the flow loss to the fit panel only.
    #[arg(long)]
    #[serde(skip_serializing_if = "std::ops::Not::not")]
    pub fit_panel_only: bool,
    #[command(flatten)]
    pub model: ModelArgs,
}

#[derive(Debug, Args, Serialize)]
pub struct ModelArgs {
    #[arg(long)]
    #[serde(skip_serializing_if = "Option::is_none")]
    pub d_model: Option<usize>,
    #[arg(long)]
    #[serde(skip_serializing_if = "Option::is_none")]
    pub heads: Option<usize>,
    #[arg(long)]
    #[serde(skip_serializing_if = "Option::is_none")]
    pub layers: Option<usize>,
    #[arg(long)]
    #[serde(skip_serializing_if = "Option::is_none")]
    pub time_dim: Option<usize>,
}

#[derive(Debug, Args, Serialize)]
pub struct InferArgs {
    #[arg(long)]
    #[serde(skip_serializing_if = "Option::is_none")]
    pub ckpt: Option<PathBuf>,
    /// Image of the person wearing the garment to transfer.
    #[arg(long = "ref")]
    #[serde(skip_serializing_if = "Option::is_none")]
    pub reference: Option<PathBuf>,
    /// Image of the person to dress.
    #[arg(long)]
    #[serde(skip_serializing_if = "Option::is_none")]
    pub target: Option<PathBuf>,
    #[arg(long)]
    #[serde(skip_serializing_if = "Option::is_none")]
    pub steps: Option<usize>,
    #[arg(long)]
    #[serde(skip_serializing_if = "Option::is_none")]
    pub seed: Option<u64>,
    /// Output image path; the extension picks the format.
    #[arg(long)]
    #[serde(skip_serializing_if = "Option::is_none")]
    pub out: Option<PathBuf>,
    /// Also write the full three-panel canvas next to the output.
    #[arg(long)]
    #[serde(skip_serializing_if = "std::ops::Not::not")]
    pub save_canvas: bool,
}

#[derive(Debug, Args, Serialize)]
pub struct EvalArgs {
    /// Directory of generated images.
    #[arg(long)]
    #[serde(skip_serializing_if = "Option::is_none")]
    pub pred: Option<PathBuf>,
    /// Directory of ground-truth images, matched by file stem when paired.
    #[arg(long)]
    #[serde(skip_serializing_if = "Option::is_none")]
    pub gt: Option<PathBuf>,
    /// Comma-separated subset of ssim,fid,kid.
    #[arg(long)]
    #[serde(skip_serializing_if = "Option::is_none")]
    pub metrics: Option<String>,
    #[arg(long, conflicts_with = "unpaired")]
    #[serde(skip)]
    pub paired: bool,
    #[arg(long)]
    #[serde(skip)]
    pub unpaired: bool,
    #[arg(long)]
    #[serde(skip_serializing_if = "Option::is_none")]
    pub kid_subset_size: Option<usize>,
    #[arg(long)]
    #[serde(skip_serializing_if = "Option::is_none")]
    pub kid_subsets: Option<usize>,
    #[arg(long)]
    #[serde(skip_serializing_if = "Option::is_none")]
    pub seed: Option<u64>,
    #[arg(long)]
    #[serde(skip_serializing_if = "Option::is_none")]
    pub out: Option<PathBuf>,
}

impl EvalArgs {
    fn paired_flag(&self) -> Option<bool> {
        match (self.paired, self.unpaired) {
            (true, _) => Some(true),
            (_, true) => Some(false),
            _ => None,
        }
    }
}

#[derive(Debug, Args, Serialize)]
pub struct AttnDumpArgs {
    #[arg(long)]
    #[serde(skip_serializing_if = "Option::is_none")]
    pub ckpt: Option<PathBuf>,
    #[arg(long = "ref")]
    #[serde(skip_serializing_if = "Option::is_none")]
    pub reference: Option<PathBuf>,
    #[arg(long)]
    #[serde(skip_serializing_if = "Option::is_none")]
    pub target: Option<PathBuf>,
    #[arg(long)]
    #[serde(skip_serializing_if = "Option::is_none")]
    pub layer: Option<usize>,
    /// Noise seed for the first sampling step.
    #[arg(long)]
    #[serde(skip_serializing_if = "Option::is_none")]
    pub seed: Option<u64>,
    #[arg(long)]
    #[serde(skip_serializing_if = "Option::is_none")]
    pub format: Option<String>,
    #[arg(long)]
    #[serde(skip_serializing_if = "Option::is_none")]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Args, Serialize)]
pub struct GradcheckArgs {
    /// Model preset: tiny or default.
    #[arg(long)]
    #[serde(skip_serializing_if = "Option::is_none")]
    pub config: Option<String>,
    /// Number of randomly chosen parameters to check.
    #[arg(long)]
    #[serde(skip_serializing_if = "Option::is_none")]
    pub samples: Option<usize>,
    #[arg(long)]
    #[serde(rename = "lambda_fa", skip_serializing_if = "Option::is_none")]
    pub fa_weight: Option<f64>,
    /// Central-difference step.
    #[arg(long)]
    #[serde(skip_serializing_if = "Option::is_none")]
    pub h: Option<f64>,
    /// Largest acceptable relative error.
    #[arg(long)]
    #[serde(skip_serializing_if = "Option::is_none")]
    pub tolerance: Option<f64>,
    #[arg(long)]
    #[serde(skip_serializing_if = "Option::is_none")]
    pub seed: Option<u64>,
    /// Write the full report as JSON here.
    #[arg(long)]
    #[serde(skip_serializing_if = "Option::is_none")]
    pub out: Option<PathBuf>,
}

/// Exit status and label for a failure.
fn classify(err: &anyhow::Error) -> (u8, &'static str) {
    use mftryon::ErrorCategory;
    for cause in err.chain() {
        if cause.downcast_ref::<Usage>().is_some() {
            return (2, "usage");
        }
        if cause.downcast_ref::<Validation>().is_some() {
            return (3, "validation");
        }
        if cause.downcast_ref::<Numerical>().is_some() {
            return (5, "numerical");
        }
        if let Some(e) = cause.downcast_ref::<mftryon::Error>() {
            return match e.category() {
                ErrorCategory::Validation => (3, "validation"),
                ErrorCategory::Io => (4, "io"),
                ErrorCategory::Numerical => (5, "numerical"),
            };
        }
        if cause.downcast_ref::<std::io::Error>().is_some() {
            return (4, "io");
        }
    }
    (3, "validation")
}

fn error_line(category: &str, code: u8, message: &str) -> String {
    serde_json::json!({ "error": message, "category": category, "exit_code": code }).to_string()
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            if !e.use_stderr() {
                let _ = e.print();
                return ExitCode::SUCCESS;
            }
            let _ = e.print();
            let message = e.kind().to_string();
            eprintln!("{}", error_line("usage", 2, &message));
            return ExitCode::from(2);
        }
    };
    match commands::run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(err) => {
            let (code, category) = classify(&err);
            eprintln!("error: {err:#}");
            eprintln!("{}", error_line(category, code, &format!("{err:#}")));
            ExitCode::from(code)
        }
    }
}
