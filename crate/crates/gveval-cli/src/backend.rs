//! Builds the judge client from resolved settings.

use std::sync::Arc;
use std::time::Duration;

use gveval::judge::JudgeError;
use gveval::oracle::{Client, LiveBackend, MockBackend, RateLimiter, ResponseCache};

use crate::config::{Settings, ENV_API_KEY};
use crate::CliError;

const REQUEST_TIMEOUT: Duration = Duration::from_secs(120);

/// Assembles a client for the configured backend. Mock fixtures run
/// fully offline; live runs require an API key and go through the
/// shared rate limiter when one is configured.
pub fn build_client(settings: &Settings) -> Result<Client, CliError> {
    let mut client = match &settings.mock_fixture {
        Some(fixture) => {
            let backend = MockBackend::from_fixture(fixture)
                .map_err(|e| CliError::Usage(format!("mock fixture: {e}")))?;
            Client::new(Box::new(backend))
        }
        None => {
            let api_key = settings.api_key.as_deref().ok_or_else(|| {
                CliError::Usage(format!(
                    "no API key configured; set {ENV_API_KEY} or use --mock"
                ))
            })?;
            let backend = LiveBackend::new(&settings.base_url, api_key, REQUEST_TIMEOUT)
                .map_err(|e| CliError::Backend(e.to_string()))?;
            let mut client = Client::new(Box::new(backend));
            if let Some(rpm) = settings.requests_per_minute {
                if rpm <= 0.0 {
                    return Err(CliError::Usage(
                        "requests_per_minute must be positive".to_string(),
                    ));
                }
                client = client.with_limiter(Arc::new(RateLimiter::new(rpm / 60.0, 1)));
            }
            client
        }
    };
    client = client.with_cache(ResponseCache::new(settings.cache_dir.clone()));
    Ok(client)
}

/// Maps a per-record judge failure onto the exit-code contract. Backend
/// and transport trouble is fatal for the whole run; everything else is
/// a record-level failure the run can carry.
pub fn fatal_backend_error(error: &JudgeError) -> bool {
    matches!(error, JudgeError::Backend(_))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::config::BackendFlags;

    fn settings_with(mock: Option<std::path::PathBuf>, api_key: Option<String>) -> Settings {
        let flags = BackendFlags {
            mock,
            ..BackendFlags::default()
        };
        let mut settings = crate::config::resolve(&flags, None, None, |_| None).unwrap();
        settings.api_key = api_key;
        settings
    }

    #[test]
    fn live_backend_without_key_is_a_usage_error() {
        let result = build_client(&settings_with(None, None));
        assert!(matches!(result, Err(CliError::Usage(message)) if message.contains("--mock")));
    }

    #[test]
    fn missing_fixture_is_a_usage_error() {
        let result = settings_with(Some("does-not-exist.json".into()), None);
        assert!(matches!(build_client(&result), Err(CliError::Usage(_))));
    }
}
