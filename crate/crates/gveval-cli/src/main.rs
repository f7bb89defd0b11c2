//! Command-line front end for the caption evaluation library.
//!
//! Exit codes: 0 on success, 1 for usage and validation problems, 2 when
//! a run finished but some records failed (the manifest lists them), and
//! 3 for transport or backend failures.

mod backend;
mod commands;
mod config;
mod runner;

use std::fmt;
use std::path::PathBuf;
use std::process;

use clap::error::ErrorKind;
use clap::{Parser, Subcommand, ValueEnum};
use gveval::corpus::{CorpusFormat, ReportStyle};
use gveval::model::{Dimensionality, EvalConfig, EvalMode, ScoreScale, VisualKind};
use gveval::stats::HumanProjection;

use config::BackendFlags;

// ---------------------------------------------------------------------------
// error and exit codes
// ---------------------------------------------------------------------------

#[derive(Debug)]
pub enum CliError {
    /// Bad flags, bad config, or input that failed validation.
    Usage(String),
    /// The run finished but some records failed.
    Partial(String),
    /// The backend or transport gave up.
    Backend(String),
}

impl CliError {
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Usage(_) => 1,
            CliError::Partial(_) => 2,
            CliError::Backend(_) => 3,
        }
    }
}

impl fmt::Display for CliError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            CliError::Usage(msg) | CliError::Partial(msg) | CliError::Backend(msg) => {
                f.write_str(msg)
            }
        }
    }
}

// ---------------------------------------------------------------------------
// argument surface
// ---------------------------------------------------------------------------

#[derive(Parser)]
#[command(
    name = "gveval",
    version,
    about = "Caption evaluation with an LLM judge"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Judge every caption in a corpus and write outcomes plus a manifest
    Evaluate(EvaluateArgs),
    /// Correlate metric scores with human judgments
    Correlate(CorrelateArgs),
    /// Build the three-frame strip a video judgment attaches
    Compose(ComposeArgs),
    /// Pairwise accuracy on caption pairs with a known good side
    Foil(FoilArgs),
    /// Re-judge one record several times and report score variance
    Variance(VarianceArgs),
}

#[derive(Clone, Copy, ValueEnum)]
enum ModeArg {
    RefOnly,
    RefFree,
    Combined,
}

#[derive(Clone, Copy, ValueEnum)]
enum ScaleArg {
    Scoring,
    Rating,
}

#[derive(Clone, Copy, ValueEnum)]
enum KindArg {
    /// Take the kind from each record's visual handle (image when absent)
    Auto,
    Image,
    Video,
}

#[derive(Clone, Copy, ValueEnum)]
enum FormatArg {
    Canonical,
    Flickr8kExpert,
    Flickr8kCf,
    VatexEval,
    MsvdEvalAccr,
    FoilPairs,
}

impl From<FormatArg> for CorpusFormat {
    fn from(arg: FormatArg) -> CorpusFormat {
        match arg {
            FormatArg::Canonical => CorpusFormat::Canonical,
            FormatArg::Flickr8kExpert => CorpusFormat::Flickr8kExpert,
            FormatArg::Flickr8kCf => CorpusFormat::Flickr8kCf,
            FormatArg::VatexEval => CorpusFormat::VatexEval,
            FormatArg::MsvdEvalAccr => CorpusFormat::MsvdEvalAccr,
            FormatArg::FoilPairs => CorpusFormat::FoilPairs,
        }
    }
}

#[derive(Clone, Copy, ValueEnum)]
enum ProjectionArg {
    Auto,
    ExpertMean,
    CrowdProportion,
    Vatex,
    AccrMean,
    Accuracy,
    Completeness,
    Conciseness,
    Relevance,
}

impl From<ProjectionArg> for HumanProjection {
    fn from(arg: ProjectionArg) -> HumanProjection {
        match arg {
            ProjectionArg::Auto => HumanProjection::Auto,
            ProjectionArg::ExpertMean => HumanProjection::ExpertMean,
            ProjectionArg::CrowdProportion => HumanProjection::CrowdProportion,
            ProjectionArg::Vatex => HumanProjection::Vatex,
            ProjectionArg::AccrMean => HumanProjection::AccrMean,
            ProjectionArg::Accuracy => HumanProjection::Accuracy,
            ProjectionArg::Completeness => HumanProjection::Completeness,
            ProjectionArg::Conciseness => HumanProjection::Conciseness,
            ProjectionArg::Relevance => HumanProjection::Relevance,
        }
    }
}

#[derive(Clone, Copy, ValueEnum)]
enum StyleArg {
    Markdown,
    Csv,
    Scaled,
}

impl From<StyleArg> for ReportStyle {
    fn from(arg: StyleArg) -> ReportStyle {
        match arg {
            StyleArg::Markdown => ReportStyle::Markdown,
            StyleArg::Csv => ReportStyle::Csv,
            StyleArg::Scaled => ReportStyle::ScaledTable,
        }
    }
}

#[derive(clap::Args)]
struct EvaluateArgs {
    /// Corpus file (JSONL)
    corpus: PathBuf,
    /// Corpus layout
    #[arg(long, value_enum, default_value_t = FormatArg::Canonical)]
    format: FormatArg,
    /// What the judge sees besides the caption
    #[arg(long, value_enum, default_value_t = ModeArg::RefOnly)]
    mode: ModeArg,
    /// Score scale the judge replies on
    #[arg(long, value_enum, default_value_t = ScaleArg::Scoring)]
    scale: ScaleArg,
    /// Score the four dimensions separately instead of one overall score
    #[arg(long)]
    accr: bool,
    /// Drop the generated reasoning steps from the prompt
    #[arg(long)]
    no_cot: bool,
    /// Ask for the score alone, without a written rationale
    #[arg(long)]
    no_reason: bool,
    /// Keep the raw score instead of the probability-weighted one
    #[arg(long)]
    no_expected: bool,
    /// Visual kind when records do not say
    #[arg(long, value_enum, default_value_t = KindArg::Auto)]
    kind: KindArg,
    /// Worker threads
    #[arg(long, value_name = "N")]
    parallel: Option<u32>,
    /// Output directory for outcomes and the manifest
    #[arg(long, value_name = "DIR", default_value = "gveval-run")]
    out: PathBuf,
    /// Only judge the first ten records
    #[arg(long)]
    smoke: bool,
    /// Accept an estimated prompt volume above the configured budget
    #[arg(long)]
    yes: bool,
    #[command(flatten)]
    backend: BackendFlags,
}

#[derive(clap::Args)]
struct CorrelateArgs {
    /// Corpus file carrying the human judgments
    corpus: PathBuf,
    /// Outcome file from an evaluate run
    #[arg(long, value_name = "FILE")]
    outcomes: PathBuf,
    /// Corpus layout
    #[arg(long, value_enum, default_value_t = FormatArg::Canonical)]
    format: FormatArg,
    /// How to project human judgments onto a scalar
    #[arg(long, value_enum, default_value_t = ProjectionArg::Auto)]
    human: ProjectionArg,
    /// Report format
    #[arg(long, value_enum, default_value_t = StyleArg::Markdown)]
    style: StyleArg,
    /// Dataset label for the report (default: corpus file stem)
    #[arg(long)]
    dataset: Option<String>,
}

#[derive(clap::Args)]
struct ComposeArgs {
    /// Video frame directory, video file, or single image
    #[arg(long, value_name = "PATH")]
    input: PathBuf,
    /// Where the PNG goes
    #[arg(long, value_name = "FILE")]
    output: PathBuf,
    /// Treat the input as this kind (auto: directories and video files
    /// become strips, image files pass through)
    #[arg(long, value_enum, default_value_t = KindArg::Auto)]
    input_kind: KindArg,
    /// Shell command template for video decoding, with {input} and
    /// {outdir} placeholders
    #[arg(long, value_name = "CMD")]
    decoder_cmd: Option<String>,
}

#[derive(clap::Args)]
struct FoilArgs {
    /// Pairs corpus (foil-pairs layout)
    pairs: PathBuf,
    /// Outcome file holding scores for both sides of every pair
    #[arg(long, value_name = "FILE")]
    scores: PathBuf,
}

#[derive(clap::Args)]
struct VarianceArgs {
    /// Corpus file
    corpus: PathBuf,
    /// Record to re-judge
    #[arg(long, value_name = "ID")]
    id: String,
    /// How many times to ask (at least 2)
    #[arg(long, value_name = "K")]
    repeats: usize,
    /// Corpus layout
    #[arg(long, value_enum, default_value_t = FormatArg::Canonical)]
    format: FormatArg,
    /// What the judge sees besides the caption
    #[arg(long, value_enum, default_value_t = ModeArg::RefOnly)]
    mode: ModeArg,
    /// Score scale the judge replies on
    #[arg(long, value_enum, default_value_t = ScaleArg::Scoring)]
    scale: ScaleArg,
    /// Visual kind when the record does not say
    #[arg(long, value_enum, default_value_t = KindArg::Auto)]
    kind: KindArg,
    #[command(flatten)]
    backend: BackendFlags,
}

// ---------------------------------------------------------------------------
// config assembly
// ---------------------------------------------------------------------------

impl EvaluateArgs {
    fn eval_config(&self, parallel: u32) -> EvalConfig {
        EvalConfig {
            mode: match self.mode {
                ModeArg::RefOnly => EvalMode::RefOnly,
                ModeArg::RefFree => EvalMode::RefFree,
                ModeArg::Combined => EvalMode::Combined,
            },
            scale: match self.scale {
                ScaleArg::Scoring => ScoreScale::Scoring,
                ScaleArg::Rating => ScoreScale::Rating,
            },
            dimensionality: if self.accr {
                Dimensionality::Accr
            } else {
                Dimensionality::Overall
            },
            use_expected_score: !self.no_expected,
            include_cot_steps: !self.no_cot,
            require_reason: !self.no_reason,
            parallelism: parallel as usize,
            ..EvalConfig::default()
        }
    }
}

impl KindArg {
    fn resolve(self, declared: Option<VisualKind>) -> VisualKind {
        match self {
            KindArg::Auto => declared.unwrap_or(VisualKind::Image),
            KindArg::Image => VisualKind::Image,
            KindArg::Video => VisualKind::Video,
        }
    }
}

// ---------------------------------------------------------------------------
// entry point
// ---------------------------------------------------------------------------

fn dispatch(cli: Cli) -> Result<(), CliError> {
    match cli.command {
        Command::Evaluate(args) => runner::cmd_evaluate(&args),
        Command::Correlate(args) => commands::cmd_correlate(&args),
        Command::Compose(args) => commands::cmd_compose(&args),
        Command::Foil(args) => commands::cmd_foil(&args),
        Command::Variance(args) => commands::cmd_variance(&args),
    }
}

fn main() {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();

    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(err) => {
            let code = match err.kind() {
                ErrorKind::DisplayHelp | ErrorKind::DisplayVersion => 0,
                _ => 1,
            };
            let _ = err.print();
            process::exit(code);
        }
    };

    match dispatch(cli) {
        Ok(()) => {}
        Err(err) => {
            eprintln!("error: {err}");
            process::exit(err.exit_code());
        }
    }
}
