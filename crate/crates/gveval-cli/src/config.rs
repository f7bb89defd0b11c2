//! Runtime settings resolved from flags, environment, and config file.
//!
//! Precedence is flags over environment over file over defaults. The
//! file is TOML; `--config` names it explicitly, otherwise `gveval.toml`
//! in the working directory is read when present.

use std::path::{Path, PathBuf};

use serde::Deserialize;

use crate::CliError;

pub const ENV_API_KEY: &str = "GVEVAL_API_KEY";
pub const ENV_BASE_URL: &str = "GVEVAL_BASE_URL";
pub const ENV_MODEL: &str = "GVEVAL_MODEL";
pub const ENV_CACHE_DIR: &str = "GVEVAL_CACHE_DIR";

const DEFAULT_BASE_URL: &str = "https://api.openai.com/v1";
const DEFAULT_MODEL: &str = "gpt-4o";
const DEFAULT_CACHE_DIR: &str = ".gveval-cache";
const DEFAULT_BUDGET_MAX_TOKENS: u64 = 200_000;

/// Recognized config file keys. Unknown keys are rejected so typos do
/// not silently fall back to defaults.
#[derive(Debug, Clone, Default, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FileConfig {
    pub model: Option<String>,
    pub base_url: Option<String>,
    pub api_key: Option<String>,
    pub cache_dir: Option<PathBuf>,
    pub corpus_root: Option<PathBuf>,
    pub decoder_cmd: Option<String>,
    pub parallel: Option<u32>,
    pub requests_per_minute: Option<f64>,
    pub budget_max_tokens: Option<u64>,
}

impl FileConfig {
    pub fn load(explicit: Option<&Path>) -> Result<FileConfig, CliError> {
        let path = match explicit {
            Some(path) => path.to_path_buf(),
            None => {
                let fallback = PathBuf::from("gveval.toml");
                if !fallback.exists() {
                    return Ok(FileConfig::default());
                }
                fallback
            }
        };
        let text = std::fs::read_to_string(&path).map_err(|e| {
            CliError::Usage(format!("cannot read config file {}: {e}", path.display()))
        })?;
        toml::from_str(&text)
            .map_err(|e| CliError::Usage(format!("bad config file {}: {e}", path.display())))
    }
}

/// Backend flags shared by the subcommands that talk to a judge.
#[derive(Debug, Clone, Default, clap::Args)]
pub struct BackendFlags {
    /// TOML config file (default: ./gveval.toml when present)
    #[arg(long, value_name = "FILE")]
    pub config: Option<PathBuf>,
    /// Judge model identifier
    #[arg(long)]
    pub model: Option<String>,
    /// Chat-completions endpoint base URL
    #[arg(long, value_name = "URL")]
    pub base_url: Option<String>,
    /// Response cache directory
    #[arg(long, value_name = "DIR")]
    pub cache_dir: Option<PathBuf>,
    /// Resolve visual paths against this directory (default: the corpus
    /// file's parent)
    #[arg(long, value_name = "DIR")]
    pub corpus_root: Option<PathBuf>,
    /// Shell command template for video decoding, with {input} and
    /// {outdir} placeholders
    #[arg(long, value_name = "CMD")]
    pub decoder_cmd: Option<String>,
    /// Serve responses from this fixture file instead of a live backend
    #[arg(long, value_name = "FILE")]
    pub mock: Option<PathBuf>,
}

/// Fully resolved runtime settings.
#[derive(Debug, Clone)]
pub struct Settings {
    pub model_id: String,
    pub base_url: String,
    pub api_key: Option<String>,
    pub cache_dir: PathBuf,
    pub corpus_root: PathBuf,
    pub decoder_cmd: Option<String>,
    pub parallel: u32,
    pub requests_per_minute: Option<f64>,
    pub budget_max_tokens: u64,
    pub mock_fixture: Option<PathBuf>,
}

pub fn resolve(
    flags: &BackendFlags,
    parallel_flag: Option<u32>,
    corpus_path: Option<&Path>,
    env: impl Fn(&str) -> Option<String>,
) -> Result<Settings, CliError> {
    let file = FileConfig::load(flags.config.as_deref())?;

    let model_id = flags
        .model
        .clone()
        .or_else(|| env(ENV_MODEL))
        .or(file.model)
        .unwrap_or_else(|| DEFAULT_MODEL.to_string());
    let base_url = flags
        .base_url
        .clone()
        .or_else(|| env(ENV_BASE_URL))
        .or(file.base_url)
        .unwrap_or_else(|| DEFAULT_BASE_URL.to_string());
    let api_key = env(ENV_API_KEY).or(file.api_key);
    let cache_dir = flags
        .cache_dir
        .clone()
        .or_else(|| env(ENV_CACHE_DIR).map(PathBuf::from))
        .or(file.cache_dir)
        .unwrap_or_else(|| PathBuf::from(DEFAULT_CACHE_DIR));
    let corpus_root = flags
        .corpus_root
        .clone()
        .or(file.corpus_root)
        .or_else(|| corpus_path.and_then(|p| p.parent().map(Path::to_path_buf)))
        .unwrap_or_else(|| PathBuf::from("."));
    let decoder_cmd = flags.decoder_cmd.clone().or(file.decoder_cmd);
    let parallel = parallel_flag.or(file.parallel).unwrap_or(1);
    if parallel == 0 {
        return Err(CliError::Usage("--parallel must be at least 1".to_string()));
    }

    Ok(Settings {
        model_id,
        base_url,
        api_key,
        cache_dir,
        corpus_root,
        decoder_cmd,
        parallel,
        requests_per_minute: file.requests_per_minute,
        budget_max_tokens: file.budget_max_tokens.unwrap_or(DEFAULT_BUDGET_MAX_TOKENS),
        mock_fixture: flags.mock.clone(),
    })
}
