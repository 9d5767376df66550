//! Endpoint configuration as read from the run config file.

use std::sync::Arc;
use std::time::Duration;

use serde::{Deserialize, Serialize};

use super::{ChatBackend, ClientOptions, EndpointSpec, OpenAiBackend};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EndpointConfig {
    pub id: String,
    /// OpenAI-compatible base URL, e.g. `https://api.example.com/v1`.
    #[serde(default)]
    pub base_url: Option<String>,
    #[serde(default)]
    pub model: Option<String>,
    /// Name of the environment variable holding the API key.
    #[serde(default)]
    pub api_key_env_var: Option<String>,
    #[serde(default)]
    pub supports_token_scores: bool,
    #[serde(default)]
    pub requests_per_second: Option<f64>,
    #[serde(default)]
    pub timeout_secs: Option<u64>,
}

impl EndpointConfig {
    pub fn spec(&self) -> EndpointSpec {
        EndpointSpec {
            id: self.id.clone(),
            supports_token_scores: self.supports_token_scores,
            requests_per_second: self.requests_per_second,
        }
    }

    /// Live backend, or `None` when no base URL is configured (replay only).
    pub fn backend(&self) -> Result<Option<Arc<dyn ChatBackend>>, String> {
        let Some(url) = &self.base_url else { return Ok(None) };
        let key = match &self.api_key_env_var {
            Some(var) => Some(std::env::var(var).map_err(|_| format!("endpoint {}: environment variable {var} is not set", self.id))?),
            None => None,
        };
        let model = self.model.clone().unwrap_or_else(|| self.id.clone());
        let timeout = Duration::from_secs(self.timeout_secs.unwrap_or(120));
        let backend = OpenAiBackend::new(url, model, key, timeout).map_err(|e| format!("endpoint {}: {e}", self.id))?;
        Ok(Some(Arc::new(backend)))
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ClientConfig {
    pub max_in_flight: usize,
    pub max_retries: u32,
    pub backoff_base_ms: u64,
    pub backoff_cap_ms: u64,
    pub sampling_budget: u32,
}

impl Default for ClientConfig {
    fn default() -> Self {
        let o = ClientOptions::default();
        ClientConfig {
            max_in_flight: o.max_in_flight,
            max_retries: o.max_retries,
            backoff_base_ms: o.backoff_base.as_millis() as u64,
            backoff_cap_ms: o.backoff_cap.as_millis() as u64,
            sampling_budget: o.sampling_budget,
        }
    }
}

impl ClientConfig {
    pub fn options(&self) -> ClientOptions {
        ClientOptions {
            max_in_flight: self.max_in_flight,
            max_retries: self.max_retries,
            backoff_base: Duration::from_millis(self.backoff_base_ms),
            backoff_cap: Duration::from_millis(self.backoff_cap_ms),
            sampling_budget: self.sampling_budget,
        }
    }
}
