//! Batch driver for docre-core: corpus validation and synthesis, silver
//! evidence, training, threshold tuning, inference and evaluation.

mod commands;
pub mod config;

use std::ffi::OsString;
use std::io::Write;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};

pub use config::{Preset, RunConfig};

#[derive(Debug, thiserror::Error)]
pub enum CliError {
    #[error(transparent)]
    Core(#[from] docre_core::Error),
    #[error("{}: {source}", path.display())]
    Io { path: PathBuf, source: std::io::Error },
    #[error("{0}")]
    Usage(String),
}

impl CliError {
    pub fn kind(&self) -> &'static str {
        match self {
            CliError::Core(e) => e.kind(),
            CliError::Io { .. } => "io",
            CliError::Usage(_) => "usage",
        }
    }

    /// `error[kind]: message`, on a single line.
    pub fn line(&self) -> String {
        let msg = self.to_string().split_whitespace().collect::<Vec<_>>().join(" ");
        format!("error[{}]: {msg}", self.kind())
    }

    pub fn exit_code(&self) -> u8 {
        match self {
            CliError::Usage(_) => 2,
            _ => 1,
        }
    }
}

pub(crate) fn read(path: &Path) -> Result<Vec<u8>, CliError> {
    std::fs::read(path).map_err(|source| CliError::Io { path: path.to_path_buf(), source })
}

pub(crate) fn write(path: &Path, bytes: impl AsRef<[u8]>) -> Result<(), CliError> {
    std::fs::write(path, bytes).map_err(|source| CliError::Io { path: path.to_path_buf(), source })
}

/// Fails early when `path` cannot be created because its directory is missing.
pub(crate) fn check_output(path: &Path) -> Result<(), CliError> {
    let dir = path.parent().filter(|d| !d.as_os_str().is_empty()).unwrap_or(Path::new("."));
    if dir.is_dir() {
        Ok(())
    } else {
        Err(CliError::Io {
            path: path.to_path_buf(),
            source: std::io::Error::new(std::io::ErrorKind::NotFound, "output directory does not exist"),
        })
    }
}

#[derive(Debug, Parser)]
#[command(name = "docre", version, about = "Document-level relation extraction with evidence-fused inference")]
pub struct Cli {
    /// JSON run configuration; flags take precedence.
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,
    /// Seed for every random choice.
    #[arg(long, global = true)]
    pub seed: Option<u64>,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Check a corpus file against the schema.
    Validate(ValidateArgs),
    /// Generate a synthetic corpus and its alias lexicon.
    Synth(SynthArgs),
    /// Categorize facts with the evidence rules and write silver evidence.
    Rules(RulesArgs),
    /// Train a model and write a checkpoint.
    Train(TrainArgs),
    /// Score predictions against a gold corpus.
    Eval(EvalArgs),
    /// Predict relations and evidence for a corpus.
    Infer(InferArgs),
    /// Fit the blending threshold on a dev corpus.
    TuneTau(TuneTauArgs),
    /// Corpus statistics and rule-category histogram.
    Report(ReportArgs),
}

#[derive(Debug, Args)]
pub struct ValidateArgs {
    #[arg(long)]
    pub input: PathBuf,
    /// Also reject documents whose marked length exceeds this.
    #[arg(long)]
    pub max_len: Option<usize>,
}

#[derive(Debug, Args)]
pub struct SynthArgs {
    #[arg(long)]
    pub output: PathBuf,
    /// Where to write the alias lexicon [default: OUTPUT with extension .lexicon.json]
    #[arg(long)]
    pub lexicon: Option<PathBuf>,
    #[arg(long, default_value_t = 300)]
    pub n_docs: usize,
    #[arg(long)]
    pub vocab_size: Option<usize>,
    #[arg(long)]
    pub n_relations: Option<usize>,
    /// Category mix as intra,coref,bridge,distractor.
    #[arg(long, value_delimiter = ',', num_args = 4)]
    pub mix: Option<Vec<f64>>,
}

#[derive(Debug, Args)]
pub struct CorefArg {
    /// `identity` or `lexicon:PATH`.
    #[arg(long)]
    pub coref: Option<String>,
}

#[derive(Debug, Args)]
pub struct RulesArgs {
    #[arg(long)]
    pub input: PathBuf,
    /// Corpus copy whose evidence is replaced by silver evidence.
    #[arg(long)]
    pub output: Option<PathBuf>,
    #[command(flatten)]
    pub coref: CorefArg,
}

#[derive(Debug, Args)]
pub struct TrainArgs {
    #[arg(long)]
    pub input: PathBuf,
    #[arg(long)]
    pub dev: PathBuf,
    /// Output checkpoint.
    #[arg(long)]
    pub checkpoint: PathBuf,
    /// Per-epoch log as line-delimited JSON.
    #[arg(long)]
    pub log: Option<PathBuf>,
    /// Train on rule-derived evidence instead of the annotated one.
    #[arg(long)]
    pub silver: bool,
    #[command(flatten)]
    pub coref: CorefArg,
    #[arg(long, value_enum)]
    pub preset: Option<Preset>,
    #[arg(long)]
    pub lr_encoder: Option<f64>,
    #[arg(long)]
    pub lr_heads: Option<f64>,
    #[arg(long)]
    pub warmup_fraction: Option<f64>,
    #[arg(long)]
    pub batch_docs: Option<usize>,
    #[arg(long)]
    pub max_epochs: Option<usize>,
    #[arg(long)]
    pub evi_loss_weight: Option<f64>,
    #[arg(long)]
    pub patience: Option<usize>,
    #[arg(long)]
    pub weight_decay: Option<f64>,
    /// Drop the evidence loss.
    #[arg(long)]
    pub no_joint: bool,
    #[arg(long)]
    pub layers: Option<usize>,
    #[arg(long)]
    pub heads: Option<usize>,
    #[arg(long)]
    pub d_model: Option<usize>,
    #[arg(long)]
    pub d_ff: Option<usize>,
    #[arg(long)]
    pub max_len: Option<usize>,
}

#[derive(Debug, Args)]
pub struct EvidenceArgs {
    /// `model` or `rules` [default: model, or rules for models trained without evidence]
    #[arg(long)]
    pub evidence_source: Option<String>,
    #[command(flatten)]
    pub coref: CorefArg,
    /// Evidence-head selection threshold [default: 0.5]
    #[arg(long)]
    pub evi_threshold: Option<f64>,
}

#[derive(Debug, Args)]
pub struct InferArgs {
    #[arg(long)]
    pub input: PathBuf,
    #[arg(long)]
    pub checkpoint: PathBuf,
    #[arg(long)]
    pub output: PathBuf,
    /// full, nopseudo, noorigdoc, noblending or nojoint [default: full]
    #[arg(long)]
    pub mode: Option<String>,
    /// Blending threshold; defaults to the one stored in the checkpoint.
    #[arg(long, allow_hyphen_values = true)]
    pub tau: Option<f64>,
    #[command(flatten)]
    pub evidence: EvidenceArgs,
}

#[derive(Debug, Args)]
pub struct TuneTauArgs {
    /// Dev corpus with gold labels.
    #[arg(long)]
    pub input: PathBuf,
    #[arg(long)]
    pub checkpoint: PathBuf,
    /// Where to write the tuned checkpoint [default: CHECKPOINT]
    #[arg(long)]
    pub output: Option<PathBuf>,
    #[command(flatten)]
    pub evidence: EvidenceArgs,
}

#[derive(Debug, Args)]
pub struct EvalArgs {
    /// Gold corpus.
    #[arg(long)]
    pub input: PathBuf,
    /// Corpus carrying `predictions` and `predicted_evidence`; without
    /// them its labels are taken as the predictions.
    #[arg(long)]
    pub predictions: PathBuf,
    /// Training corpus, for Ign F1.
    #[arg(long)]
    pub train: Option<PathBuf>,
    #[command(flatten)]
    pub coref: CorefArg,
    /// Report as JSON.
    #[arg(long)]
    pub output: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct ReportArgs {
    #[arg(long)]
    pub input: PathBuf,
    #[command(flatten)]
    pub coref: CorefArg,
    /// Statistics as JSON.
    #[arg(long)]
    pub output: Option<PathBuf>,
}

/// Parses `args` (program name first) and runs the subcommand, writing
/// human-readable output to `out`.
pub fn run<I, T>(args: I, out: &mut dyn Write) -> Result<(), CliError>
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) if matches!(e.kind(), clap::error::ErrorKind::DisplayHelp | clap::error::ErrorKind::DisplayVersion) => {
            let _ = write!(out, "{e}");
            return Ok(());
        }
        Err(e) => {
            let text = e.to_string();
            let first = text.lines().next().unwrap_or_default();
            return Err(CliError::Usage(first.trim_start_matches("error: ").to_string()));
        }
    };
    let cfg = match &cli.config {
        Some(p) => RunConfig::load(p)?,
        None => RunConfig::default(),
    };
    let seed = cli.seed.or(cfg.seed).unwrap_or(0);
    commands::dispatch(&cli.command, &cfg, seed, out)
}
