//! `lva`: pretrain, adapt, verify, and benchmark small networks whose last
//! layers are corrected in closed form.
//!
//! Exit codes: 0 success, 1 a verification or benchmark assertion failed,
//! 2 usage error, 3 data or model error. Every command writes a manifest
//! echoing its fully resolved configuration next to its primary output, and
//! reruns with identical arguments and seed reproduce every output
//! byte-for-byte except the `runtime_ms` fields. Diagnostics go to stderr;
//! stdout carries data only.
//!
//! The environment variable `LVA_THREADS` caps worker parallelism. It must
//! be a positive integer when set; every routine in this build runs on a
//! single thread, so any valid cap is honored as-is.

mod commands;
mod report;

use clap::{Parser, Subcommand, ValueEnum};
use std::path::PathBuf;
use std::process::ExitCode;

/// How a command failed, mapped to the documented exit codes.
#[derive(Debug)]
pub enum Failure {
    /// A bad flag combination or malformed flag value (exit 2).
    Usage(String),
    /// A dataset, model file, or computation problem (exit 3).
    Data(String),
}

impl From<lva_core::Error> for Failure {
    fn from(err: lva_core::Error) -> Failure {
        Failure::Data(err.to_string())
    }
}

#[derive(Parser)]
#[command(
    name = "lva",
    version,
    about = "Closed-form last-layer transfer learning for small networks",
    long_about = "Pretrain a model on a source domain, adapt its last layer (or last two) \
                  to a shifted target domain in closed form, check the accompanying loss \
                  bounds, and reproduce the built-in benchmarks.\n\n\
                  Exit codes: 0 success, 1 verification or benchmark assertion failure, \
                  2 usage error, 3 data or model error. Every command writes a \
                  `<output stem>.manifest.json` echoing its fully resolved configuration, \
                  and reruns with identical arguments are byte-identical except for \
                  runtime_ms fields. LVA_THREADS (a positive integer) caps parallelism."
)]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Subcommand)]
pub enum Command {
    /// Train a fresh model on a generated or CSV dataset.
    Pretrain(PretrainArgs),
    /// Adapt a pretrained model to a target dataset.
    Adapt(AdaptArgs),
    /// Check the transfer (and optionally generalization) loss bounds.
    Verify(VerifyArgs),
    /// Run a built-in benchmark and write its results as CSV.
    Bench(BenchArgs),
}

#[derive(Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum Generator {
    /// 1-D waveform, clean amplitude.
    SignalSource,
    /// 1-D waveform with drifted amplitude, jittered inputs, label noise.
    SignalTarget,
    /// Lightly blurred random planes paired with their sharp originals.
    BlurSource,
    /// Strongly blurred planes paired with the same sharp originals.
    BlurTarget,
}

impl Generator {
    pub fn label(self) -> &'static str {
        match self {
            Generator::SignalSource => "signal-source",
            Generator::SignalTarget => "signal-target",
            Generator::BlurSource => "blur-source",
            Generator::BlurTarget => "blur-target",
        }
    }
}

#[derive(Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum AdaptMethod {
    /// Gradient finetuning of the last `--layers` layers.
    Gd,
    /// Closed-form correction of the last layer.
    Lva1,
    /// Closed-form correction of the last two layers.
    Lva2,
    /// Closed-form correction of the last convolution kernel.
    LvaConv,
}

impl AdaptMethod {
    pub fn label(self) -> &'static str {
        match self {
            AdaptMethod::Gd => "gd",
            AdaptMethod::Lva1 => "lva1",
            AdaptMethod::Lva2 => "lva2",
            AdaptMethod::LvaConv => "lva-conv",
        }
    }
}

#[derive(Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum AlignmentKind {
    /// Greedy nearest neighbour in the joint input/label space.
    Nn,
    /// Entropic optimal transport, hardened to one source row per target.
    Sinkhorn,
}

impl AlignmentKind {
    pub fn label(self) -> &'static str {
        match self {
            AlignmentKind::Nn => "nn",
            AlignmentKind::Sinkhorn => "sinkhorn",
        }
    }
}

#[derive(Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum VariantKind {
    /// Linearize the last layer around the penultimate features.
    Latent,
    /// Linearize the whole network around the input.
    Input,
}

impl VariantKind {
    pub fn label(self) -> &'static str {
        match self {
            VariantKind::Latent => "latent",
            VariantKind::Input => "input",
        }
    }
}

#[derive(clap::Args)]
pub struct PretrainArgs {
    /// Built-in dataset generator (alternative to --data).
    #[arg(long = "gen", value_enum, conflicts_with = "data")]
    pub generator: Option<Generator>,
    /// CSV dataset to train on; an `# images HxWxC -> HxWxC` first line
    /// selects the convolutional trainer.
    #[arg(long)]
    pub data: Option<PathBuf>,
    /// Grid points for the signal generators.
    #[arg(long, default_value_t = 2000)]
    pub n: usize,
    /// Image count for the blur generators.
    #[arg(long, default_value_t = 256)]
    pub num_images: usize,
    /// Image edge length for the blur generators.
    #[arg(long, default_value_t = 16)]
    pub image_size: usize,
    /// Source blur width for the blur generators.
    #[arg(long, default_value_t = 1.0)]
    pub sigma_source: f64,
    /// Target blur width for the blur generators.
    #[arg(long, default_value_t = 2.0)]
    pub sigma_target: f64,
    /// Hidden widths of a dense model, comma separated.
    #[arg(long, default_value = "64,64")]
    pub hidden: String,
    /// Kernel size of each convolutional layer, comma separated.
    #[arg(long, default_value = "9,5,5")]
    pub kernels: String,
    /// Hidden channel counts between convolutional layers, comma separated
    /// (one fewer than --kernels entries).
    #[arg(long, default_value = "8,8")]
    pub channels: String,
    /// Training epochs; the deblurring examples use 150.
    #[arg(long, default_value_t = 8000)]
    pub epochs: usize,
    #[arg(long, default_value_t = 1e-3)]
    pub lr: f64,
    /// Mini-batch size for dense training; full-batch when omitted.
    #[arg(long)]
    pub batch_size: Option<usize>,
    /// Plain SGD instead of Adam.
    #[arg(long)]
    pub sgd: bool,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    /// Model output path; `<stem>.report.json` and `<stem>.manifest.json`
    /// land next to it.
    #[arg(long)]
    pub out: PathBuf,
    /// Also write the training dataset as CSV.
    #[arg(long)]
    pub dump_data: Option<PathBuf>,
}

#[derive(clap::Args)]
pub struct AdaptArgs {
    /// Pretrained model JSON.
    #[arg(long)]
    pub model: PathBuf,
    /// Source-domain dataset CSV.
    #[arg(long)]
    pub source: PathBuf,
    /// Target-domain dataset CSV.
    #[arg(long)]
    pub target: PathBuf,
    #[arg(long, value_enum)]
    pub method: AdaptMethod,
    /// How target rows are matched to source rows.
    #[arg(long, value_enum, default_value_t = AlignmentKind::Nn)]
    pub alignment: AlignmentKind,
    /// Linearization point for lva1 (defaults to latent).
    #[arg(long, value_enum)]
    pub variant: Option<VariantKind>,
    /// Ridge weight of the closed-form solve.
    #[arg(long, default_value_t = 0.0)]
    pub ridge: f64,
    /// Solve the lva1 correction without a constant column.
    #[arg(long)]
    pub no_bias: bool,
    /// Alternating sweeps of the two-layer solver.
    #[arg(long, default_value_t = 3)]
    pub sweeps: usize,
    /// Layers finetuned by the gradient method.
    #[arg(long, default_value_t = 1)]
    pub layers: usize,
    /// Epochs for the gradient method.
    #[arg(long, default_value_t = 12000)]
    pub epochs: usize,
    #[arg(long, default_value_t = 1e-3)]
    pub lr: f64,
    /// Mini-batch size for the gradient method; full-batch when omitted.
    #[arg(long)]
    pub batch_size: Option<usize>,
    /// Plain SGD instead of Adam for the gradient method.
    #[arg(long)]
    pub sgd: bool,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    /// Entropic regularization; defaults to 0.05 x the median squared
    /// joint-space cost.
    #[arg(long)]
    pub sinkhorn_reg: Option<f64>,
    #[arg(long, default_value_t = 2000)]
    pub sinkhorn_max_iter: usize,
    #[arg(long, default_value_t = 1e-7)]
    pub sinkhorn_tol: f64,
    /// Adapted model output path; `<stem>.result.json`,
    /// `<stem>.theory.json` (dense models), and `<stem>.manifest.json`
    /// land next to it.
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(clap::Args)]
pub struct VerifyArgs {
    /// Pretrained model JSON.
    #[arg(long)]
    pub pretrained: PathBuf,
    /// Adapted model JSON (same architecture).
    #[arg(long)]
    pub adapted: PathBuf,
    /// Source-domain dataset CSV.
    #[arg(long)]
    pub source: PathBuf,
    /// Target-domain dataset CSV.
    #[arg(long)]
    pub target: PathBuf,
    /// Number of adapted layers the bound accounts for.
    #[arg(long, default_value_t = 1)]
    pub layers: usize,
    /// Held-out dataset; adds the generalization bound to the report.
    #[arg(long)]
    pub test: Option<PathBuf>,
    #[arg(long, value_enum, default_value_t = AlignmentKind::Nn)]
    pub alignment: AlignmentKind,
    #[arg(long)]
    pub sinkhorn_reg: Option<f64>,
    #[arg(long, default_value_t = 2000)]
    pub sinkhorn_max_iter: usize,
    #[arg(long, default_value_t = 1e-7)]
    pub sinkhorn_tol: f64,
    /// Print the report as JSON instead of the human summary.
    #[arg(long)]
    pub json: bool,
    /// Also write the JSON report here.
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(clap::Args)]
pub struct BenchArgs {
    #[command(subcommand)]
    pub which: BenchKind,
}

#[derive(Subcommand)]
pub enum BenchKind {
    /// 1-D signal shift: pretrained, gd, lva1, lva2, and lva-ot rows.
    #[command(name = "1d")]
    OneD(Bench1dArgs),
    /// Image deblurring: gd and lva rows per target-image budget.
    Deblur(DeblurArgs),
}

#[derive(clap::Args)]
pub struct Bench1dArgs {
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    /// Results CSV path; the bound reports and manifest land next to it.
    #[arg(long, default_value = "lva-bench-1d.csv")]
    pub out: PathBuf,
    #[arg(long, default_value_t = 2000)]
    pub n: usize,
    #[arg(long, default_value_t = 8000)]
    pub pretrain_epochs: usize,
    #[arg(long, default_value_t = 12000)]
    pub gd_epochs: usize,
    #[arg(long, default_value_t = 1e-3)]
    pub lr: f64,
    #[arg(long, default_value_t = 0.0)]
    pub ridge: f64,
    #[arg(long, default_value_t = 3)]
    pub sweeps: usize,
    /// Skip the two-layer gradient baseline.
    #[arg(long)]
    pub no_gd_two_layer: bool,
    /// Skip the optimal-transport-aligned adapter.
    #[arg(long)]
    pub no_sinkhorn: bool,
    #[arg(long, default_value_t = 2000)]
    pub sinkhorn_max_iter: usize,
    #[arg(long, default_value_t = 1e-7)]
    pub sinkhorn_tol: f64,
}

#[derive(clap::Args)]
pub struct DeblurArgs {
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    /// Results CSV path; the summary and manifest land next to it.
    #[arg(long, default_value = "lva-bench-deblur.csv")]
    pub out: PathBuf,
    /// Target-image counts, comma separated; two rows per budget.
    #[arg(long, default_value = "16,64,256")]
    pub budgets: String,
    #[arg(long, default_value_t = 16)]
    pub image_size: usize,
    #[arg(long, default_value_t = 256)]
    pub num_images: usize,
    #[arg(long, default_value_t = 1.0)]
    pub sigma_source: f64,
    #[arg(long, default_value_t = 2.0)]
    pub sigma_target: f64,
    /// Held-out target images used for PSNR.
    #[arg(long, default_value_t = 64)]
    pub test_images: usize,
    #[arg(long, default_value_t = 150)]
    pub pretrain_epochs: usize,
    #[arg(long, default_value_t = 600)]
    pub gd_epochs: usize,
    #[arg(long, default_value_t = 1e-3)]
    pub lr: f64,
    #[arg(long, default_value_t = 0.0)]
    pub ridge: f64,
}

fn main() -> ExitCode {
    if let Some(raw) = std::env::var_os("LVA_THREADS") {
        let parsed = raw.to_str().and_then(|s| s.trim().parse::<usize>().ok());
        if !matches!(parsed, Some(n) if n >= 1) {
            eprintln!("error: LVA_THREADS must be a positive integer, got {raw:?}");
            return ExitCode::from(2);
        }
    }
    let cli = Cli::parse();
    match commands::run(cli.command) {
        Ok(code) => ExitCode::from(code),
        Err(Failure::Usage(msg)) => {
            eprintln!("error: {msg}");
            ExitCode::from(2)
        }
        Err(Failure::Data(msg)) => {
            eprintln!("error: {msg}");
            ExitCode::from(3)
        }
    }
}
