//! Command-line pipeline. Every subcommand reads and writes plain files and
//! leaves a `manifest.txt` whose run id is derived from its configuration
//! and input hashes, so identical invocations give identical outputs.

mod commands;
pub mod manifest;
pub mod report;

use std::ffi::OsString;
use std::fs;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};

pub use manifest::RunManifest;

/// Exit status for a successful run.
pub const EXIT_OK: i32 = 0;
/// Exit status for malformed invocations.
pub const EXIT_USAGE: i32 = 1;
/// Exit status for unreadable or invalid data.
pub const EXIT_DATA: i32 = 2;

#[derive(Debug, thiserror::Error)]
pub enum CliError {
    #[error("{0}")]
    Usage(String),
    #[error("{0:#}")]
    Data(#[from] anyhow::Error),
}

impl CliError {
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Usage(_) => EXIT_USAGE,
            CliError::Data(_) => EXIT_DATA,
        }
    }
}

pub type CliResult = Result<(), CliError>;

#[derive(Debug, Parser)]
#[command(name = "numprobe", version, about = "Numeral magnitude probing toolkit")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Generate the cross-notation comparison dataset.
    GenData(GenDataArgs),
    /// Extract decimal and scientific numerals from text files.
    Extract(ExtractArgs),
    /// Check hidden-state files and print their headers.
    ValidateTensors(ValidateArgs),
    /// Fit one linear probe on a hidden-state file.
    FitProbe(FitProbeArgs),
    /// Fit a probe per layer and select the best layer on validation data.
    Sweep(SweepArgs),
    /// Score a predictions file.
    Metrics(MetricsArgs),
    /// Bin comparison accuracy along a problem attribute.
    Bin(BinArgs),
    /// Correlate early-layer probe quality with verbal accuracy across models.
    Correlate(CorrelateArgs),
    /// Train the toy transformer on a same-notation comparison corpus.
    ToylmTrain(ToyTrainArgs),
    /// Finetune a toy checkpoint with the auxiliary probe loss.
    ToylmFinetune(ToyFinetuneArgs),
    /// Evaluate a toy checkpoint: verbal accuracy, probe head, layer probes.
    ToylmEval(ToyEvalArgs),
    /// Assemble figure and table CSVs from evaluation outputs.
    Report(ReportArgs),
}

#[derive(Debug, Args)]
#[command(args_override_self = true)]
pub struct GenDataArgs {
    #[arg(long, default_value = "int-sci")]
    pub variant: String,
    #[arg(long)]
    pub seed: u64,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Args)]
#[command(args_override_self = true)]
pub struct ExtractArgs {
    /// Plain-text input files.
    #[arg(long = "input", required = true, num_args = 1..)]
    pub inputs: Vec<PathBuf>,
    /// Documents longer than this many characters are skipped.
    #[arg(long, default_value_t = crate::dataset::DEFAULT_MAX_CHARS)]
    pub max_chars: usize,
    /// Treat each non-empty line as its own document.
    #[arg(long)]
    pub per_line: bool,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Args)]
#[command(args_override_self = true)]
pub struct ValidateArgs {
    #[arg(required = true)]
    pub files: Vec<PathBuf>,
}

#[derive(Debug, Args)]
#[command(args_override_self = true)]
pub struct FitProbeArgs {
    /// Hidden-state file to fit on.
    #[arg(long)]
    pub train: PathBuf,
    /// magnitude, log-ratio, or classifier.
    #[arg(long)]
    pub kind: String,
    /// Ridge λ or logistic γ.
    #[arg(long, default_value_t = 1.0)]
    pub reg: f64,
    /// Dataset directory; rows are split by problem id (fit on train, report validation and test).
    #[arg(long)]
    pub dataset: Option<PathBuf>,
    /// Separate hidden-state file to evaluate on.
    #[arg(long)]
    pub eval: Option<PathBuf>,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Args)]
#[command(args_override_self = true)]
pub struct SweepArgs {
    /// Directory of per-layer `.hstn` files.
    #[arg(long)]
    pub dir: PathBuf,
    #[arg(long)]
    pub dataset: PathBuf,
    #[arg(long)]
    pub kind: String,
    /// r2 or accuracy; defaults to r2 for regression probes.
    #[arg(long)]
    pub select: Option<String>,
    #[arg(long, default_value_t = 1.0)]
    pub reg: f64,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Args)]
#[command(args_override_self = true)]
pub struct MetricsArgs {
    /// CSV with `problem_id,predicted` (first/second/unparsed), scored against
    /// `--dataset`, or with `predicted,gold` log2 columns for regression metrics.
    #[arg(long)]
    pub predictions: PathBuf,
    #[arg(long)]
    pub dataset: Option<PathBuf>,
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Args)]
#[command(args_override_self = true)]
pub struct BinArgs {
    #[arg(long)]
    pub predictions: PathBuf,
    #[arg(long)]
    pub dataset: PathBuf,
    /// log-ratio, digit-count, or log-sum.
    #[arg(long, default_value = "log-ratio")]
    pub axis: String,
    /// Comma-separated increasing bin edges; defaults depend on the axis.
    #[arg(long, value_delimiter = ',', allow_hyphen_values = true)]
    pub edges: Option<Vec<f64>>,
    /// Method label written in the CSV.
    #[arg(long, default_value = "model")]
    pub method: String,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Args)]
#[command(args_override_self = true)]
pub struct CorrelateArgs {
    /// CSV with `tag,early_probe_metric,verbal_accuracy`.
    #[arg(long)]
    pub points: PathBuf,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Args)]
#[command(args_override_self = true)]
pub struct ToyTrainArgs {
    #[arg(long)]
    pub seed: u64,
    #[arg(long, default_value = "int-sci")]
    pub variant: String,
    /// Number of same-notation training comparisons.
    #[arg(long, default_value_t = 100_000)]
    pub base_size: usize,
    #[arg(long, default_value_t = 4)]
    pub layers: usize,
    #[arg(long, default_value_t = 128)]
    pub d_model: usize,
    #[arg(long, default_value_t = 4)]
    pub heads: usize,
    #[arg(long, default_value_t = 128)]
    pub context: usize,
    #[arg(long, default_value_t = 1)]
    pub epochs: usize,
    #[arg(long, default_value_t = 3e-3)]
    pub lr: f64,
    #[arg(long, default_value_t = 16)]
    pub batch_size: usize,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Args)]
#[command(args_override_self = true)]
pub struct ToyFinetuneArgs {
    #[arg(long)]
    pub checkpoint: PathBuf,
    #[arg(long)]
    pub dataset: PathBuf,
    #[arg(long)]
    pub seed: u64,
    #[arg(long, default_value_t = 0.0)]
    pub alpha: f64,
    #[arg(long, default_value_t = 0.02)]
    pub beta: f64,
    /// Probe layer depth as a fraction of the stack.
    #[arg(long, default_value_t = 0.9)]
    pub depth: f64,
    #[arg(long, default_value_t = 1e-3)]
    pub lr: f64,
    #[arg(long, default_value_t = 3)]
    pub epochs: usize,
    #[arg(long, default_value_t = 16)]
    pub batch_size: usize,
    /// Logistic γ for the classifier-head initialization.
    #[arg(long, default_value_t = 1.0)]
    pub gamma: f64,
    /// Ridge λ for the regression-head initialization.
    #[arg(long, default_value_t = 1.0)]
    pub lambda: f64,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Args)]
#[command(args_override_self = true)]
pub struct ToyEvalArgs {
    #[arg(long)]
    pub checkpoint: PathBuf,
    #[arg(long)]
    pub dataset: PathBuf,
    /// train, validation, or test.
    #[arg(long, default_value = "test")]
    pub split: String,
    /// 0 for zero-shot, 1-5 for k-shot prompts.
    #[arg(long, default_value_t = 0)]
    pub shots: u8,
    /// Exchange the operands of the first demonstration.
    #[arg(long)]
    pub swap_demo: bool,
    /// Also fit per-layer magnitude and classifier probes on this model's states.
    #[arg(long)]
    pub layer_probes: bool,
    /// Training rows used by the per-layer probes.
    #[arg(long, default_value_t = 2_000)]
    pub probe_train_size: usize,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Args)]
#[command(args_override_self = true)]
pub struct ReportArgs {
    #[arg(long)]
    pub dataset: PathBuf,
    /// `TAG=DIR` of a `toylm-eval` output; repeatable. Tags `base`,
    /// `finetuned`, and `finetuned_probe` fill the table columns.
    #[arg(long = "eval", required = true)]
    pub evals: Vec<String>,
    /// Extra `tag,early_probe_metric,verbal_accuracy` points for the correlation figure.
    #[arg(long)]
    pub points: Option<PathBuf>,
    #[arg(long)]
    pub out: PathBuf,
}

/// Expands `--config FILE` into `--key value` flags placed right after the
/// subcommand, so explicit flags given later on the command line win.
fn expand_config(argv: Vec<OsString>) -> Result<Vec<OsString>, CliError> {
    let mut config = None;
    let mut rest = Vec::with_capacity(argv.len());
    let mut it = argv.into_iter();
    while let Some(arg) = it.next() {
        let s = arg.to_string_lossy().into_owned();
        if s == "--config" {
            let path = it
                .next()
                .ok_or_else(|| CliError::Usage("--config needs a file".into()))?;
            config = Some(PathBuf::from(path));
        } else if let Some(path) = s.strip_prefix("--config=") {
            config = Some(PathBuf::from(path));
        } else {
            rest.push(arg);
        }
    }
    let Some(path) = config else {
        return Ok(rest);
    };
    let flags = read_config(&path)?;
    let at = rest.len().min(2);
    let mut out: Vec<OsString> = rest[..at].to_vec();
    out.extend(flags.into_iter().map(OsString::from));
    out.extend_from_slice(&rest[at..]);
    Ok(out)
}

/// Flat `key=value` lines; `#` starts a comment. `true` / `false` toggle switches.
fn read_config(path: &Path) -> Result<Vec<String>, CliError> {
    let text = fs::read_to_string(path).map_err(|e| CliError::Data(anyhow::anyhow!("{}: {e}", path.display())))?;
    let mut flags = Vec::new();
    for (i, line) in text.lines().enumerate() {
        let line = line.split('#').next().unwrap_or("").trim();
        if line.is_empty() {
            continue;
        }
        let (key, value) = line
            .split_once('=')
            .ok_or_else(|| CliError::Usage(format!("{}:{}: expected key=value", path.display(), i + 1)))?;
        let key = format!("--{}", key.trim().replace('_', "-"));
        match value.trim() {
            "true" => flags.push(key),
            "false" => {}
            v => {
                flags.push(key);
                flags.push(v.to_string());
            }
        }
    }
    Ok(flags)
}

/// Parses `argv` (including the program name), runs the subcommand, and
/// returns the process exit code. Messages go to standard error.
pub fn dispatch<I, T>(argv: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString>,
{
    let argv: Vec<OsString> = argv.into_iter().map(Into::into).collect();
    let argv = match expand_config(argv) {
        Ok(a) => a,
        Err(e) => {
            eprintln!("error: {e}");
            return e.exit_code();
        }
    };
    let cli = match Cli::try_parse_from(argv) {
        Ok(cli) => cli,
        Err(e) => {
            use clap::error::ErrorKind;
            let code = match e.kind() {
                ErrorKind::DisplayHelp | ErrorKind::DisplayVersion => EXIT_OK,
                _ => EXIT_USAGE,
            };
            let _ = e.print();
            return code;
        }
    };
    match commands::run(cli.command) {
        Ok(()) => EXIT_OK,
        Err(e) => {
            eprintln!("error: {e}");
            e.exit_code()
        }
    }
}
