//! The `olab` command line: data preparation, training, analysis,
//! compression and report emission.

pub mod commands;
pub mod report;

use std::ffi::OsString;
use std::path::PathBuf;

use clap::{Args, Parser, Subcommand, ValueEnum};
use olab_core::compress::{PruneMode, QuantGranularity};
use olab_core::{Error, VariantKind};

pub const EXIT_OK: u8 = 0;
pub const EXIT_FAILURE: u8 = 1;
pub const EXIT_DIVERGENCE: u8 = 2;
pub const EXIT_USAGE: u8 = 64;
pub const EXIT_IO: u8 = 74;

/// Exit status for an error.
pub fn exit_code(e: &Error) -> u8 {
    match e {
        Error::Divergence { .. } => EXIT_DIVERGENCE,
        Error::Config(_) => EXIT_USAGE,
        Error::Io { .. } => EXIT_IO,
        _ => EXIT_FAILURE,
    }
}

#[derive(Debug, Parser)]
#[command(name = "olab", version, about = "Systematic outlier laboratory for toy transformers")]
#[command(after_help = "Exit codes: 0 success, 2 training divergence, 64 usage or configuration error, 74 I/O error.\n\
Set OLAB_THREADS to cap the number of concurrent sub-runs of compare-variants.")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Generate the bundled synthetic text corpus.
    MakeCorpus(MakeCorpusArgs),
    /// Tokenize a UTF-8 text file into a token file and vocabulary sidecar.
    PrepareData(PrepareDataArgs),
    /// Train one model.
    Train(TrainArgs),
    /// Detect outliers on probe sequences and emit positional analyses.
    Analyze(AnalyzeArgs),
    /// Per-head overlap between activation and attention outlier positions.
    Overlap(AnalyzeArgs),
    /// Perplexity under absmax W8 quantization and magnitude pruning.
    CompressEval(CompressArgs),
    /// Train several variants and seeds and compare them.
    CompareVariants(CompareArgs),
    /// Sweep softmax saturation over logit gaps and key counts.
    Dynrange(DynrangeArgs),
    /// Export per-layer lifecycle data for one probe sequence.
    Lifecycle(LifecycleArgs),
}

#[derive(Debug, Args)]
pub struct MakeCorpusArgs {
    #[arg(long)]
    pub out: PathBuf,
    /// Minimum size in bytes.
    #[arg(long, default_value_t = 2_000_000)]
    pub bytes: usize,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
}

#[derive(Debug, Args)]
pub struct PrepareDataArgs {
    #[arg(long)]
    pub input: PathBuf,
    #[arg(long)]
    pub out: PathBuf,
    /// Use a character vocabulary capped at this many ids instead of bytes.
    #[arg(long)]
    pub char_vocab: Option<usize>,
}

#[derive(Debug, Args)]
pub struct TrainArgs {
    /// JSON run configuration; omitted keys take their defaults.
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// default, fixed_bias, ctx_bias, attn_bias, ctx_scaling, sigmoid, or a letter a-e.
    #[arg(long, value_parser = parse_variant)]
    pub variant: Option<VariantKind>,
    /// Overrides the configured seed for initialization and sampling.
    #[arg(long)]
    pub seed: Option<u64>,
    /// Token file; overrides `train.dataset`.
    #[arg(long)]
    pub data: Option<PathBuf>,
    /// Output root; overrides `train.out_dir`. Artifacts go to `<out>/<variant>/`.
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct ProbeArgs {
    /// Number of probe sequences (default from the checkpoint's config, 100).
    #[arg(long)]
    pub probes: Option<usize>,
    /// Activation and weight threshold (default 1000).
    #[arg(long)]
    pub tau: Option<f64>,
    /// Attention threshold as a fraction of sequence length (default 0.3).
    #[arg(long)]
    pub tau_attn_frac: Option<f64>,
    #[arg(long)]
    pub topk: Option<usize>,
    #[arg(long)]
    pub probe_seed: Option<u64>,
}

#[derive(Debug, Args)]
pub struct AnalyzeArgs {
    #[arg(long)]
    pub ckpt: PathBuf,
    #[arg(long)]
    pub data: PathBuf,
    /// Report directory (default: `analysis/` next to the checkpoint).
    #[arg(long)]
    pub out: Option<PathBuf>,
    #[command(flatten)]
    pub probe: ProbeArgs,
}

#[derive(Clone, Copy, Debug, ValueEnum)]
pub enum PruneModeArg {
    PerMatrix,
    Global,
}

impl From<PruneModeArg> for PruneMode {
    fn from(m: PruneModeArg) -> Self {
        match m {
            PruneModeArg::PerMatrix => PruneMode::PerMatrix,
            PruneModeArg::Global => PruneMode::Global,
        }
    }
}

#[derive(Clone, Copy, Debug, ValueEnum)]
pub enum GranularityArg {
    PerTensor,
    PerRow,
}

impl From<GranularityArg> for QuantGranularity {
    fn from(g: GranularityArg) -> Self {
        match g {
            GranularityArg::PerTensor => QuantGranularity::PerTensor,
            GranularityArg::PerRow => QuantGranularity::PerRow,
        }
    }
}

#[derive(Debug, Args)]
pub struct CompressArgs {
    #[arg(long)]
    pub ckpt: PathBuf,
    #[arg(long)]
    pub data: PathBuf,
    /// Report directory (default: the checkpoint's directory).
    #[arg(long)]
    pub out: Option<PathBuf>,
    /// Pruned fraction per matrix (default 0.5).
    #[arg(long)]
    pub prune: Option<f64>,
    /// Skip quantization; the W8 column then repeats full precision.
    #[arg(long)]
    pub no_quant: bool,
    #[arg(long, value_enum)]
    pub prune_mode: Option<PruneModeArg>,
    #[arg(long, value_enum)]
    pub granularity: Option<GranularityArg>,
    /// Validation windows per evaluation (default 64).
    #[arg(long)]
    pub windows: Option<usize>,
}

#[derive(Debug, Args)]
pub struct CompareArgs {
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Comma-separated variants, at least two.
    #[arg(long, value_delimiter = ',', value_parser = parse_variant, required = true)]
    pub variants: Vec<VariantKind>,
    /// Comma-separated seeds.
    #[arg(long, value_delimiter = ',', default_value = "1,2,3")]
    pub seeds: Vec<u64>,
    #[arg(long)]
    pub data: Option<PathBuf>,
    #[arg(long)]
    pub out: Option<PathBuf>,
    /// First and last step of the early-training loss window.
    #[arg(long, value_delimiter = ',', default_value = "200,1000")]
    pub early_window: Vec<usize>,
}

#[derive(Debug, Args)]
pub struct DynrangeArgs {
    /// Gap grid as `start:stop:step` or a comma list.
    #[arg(long, default_value = "0:30:1")]
    pub m_grid: String,
    /// Comma-separated key counts.
    #[arg(long, value_delimiter = ',', default_value = "16,256,2048")]
    pub n_grid: Vec<usize>,
    /// CSV path; a JSON mirror is written next to it.
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Args)]
pub struct LifecycleArgs {
    #[arg(long)]
    pub ckpt: PathBuf,
    #[arg(long)]
    pub data: PathBuf,
    #[arg(long)]
    pub out: PathBuf,
    /// Which probe sequence to export.
    #[arg(long, default_value_t = 0)]
    pub sample: usize,
    #[command(flatten)]
    pub probe: ProbeArgs,
}

fn parse_variant(s: &str) -> Result<VariantKind, String> {
    s.parse().map_err(|e: Error| e.to_string())
}

/// Parses `args` (including the program name) and runs the command.
/// Returns the process exit status.
pub fn main_with_args<I, S>(args: I) -> u8
where
    I: IntoIterator<Item = S>,
    S: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { EXIT_USAGE } else { EXIT_OK };
        }
    };
    match commands::run(cli.command) {
        Ok(()) => EXIT_OK,
        Err(e) => {
            eprintln!("olab: {e}");
            exit_code(&e)
        }
    }
}
