//! Live chat-completions backend over HTTP(S).

use std::time::{Duration, Instant};

use super::{Backend, BackendConfig, BackendRequest, BackendResponse, GatewayError};
use crate::pool::Semaphore;

#[derive(Debug)]
pub struct HttpBackend {
    config: BackendConfig,
    api_key: String,
    agent: ureq::Agent,
    permits: Semaphore,
}

impl HttpBackend {
    /// Reads the API key from the environment variable named in `config`.
    pub fn from_env(config: BackendConfig) -> Result<Self, GatewayError> {
        let key = std::env::var(&config.api_key_env)
            .ok()
            .filter(|k| !k.trim().is_empty())
            .ok_or_else(|| GatewayError::MissingApiKey(config.api_key_env.clone()))?;
        Self::new(config, key)
    }

    pub(crate) fn new(config: BackendConfig, api_key: String) -> Result<Self, GatewayError> {
        config.validate()?;
        let agent: ureq::Agent = ureq::Agent::config_builder()
            .timeout_global(Some(Duration::from_millis(config.request_timeout_ms)))
            .http_status_as_error(false)
            .build()
            .into();
        Ok(Self {
            permits: Semaphore::new(config.max_in_flight),
            config,
            api_key,
            agent,
        })
    }

    pub fn config(&self) -> &BackendConfig {
        &self.config
    }
}

impl Backend for HttpBackend {
    fn complete(&self, request: &BackendRequest) -> Result<BackendResponse, GatewayError> {
        let _permit = self.permits.acquire();
        let payload = request.wire_payload().to_string();
        let started = Instant::now();
        let mut response = self
            .agent
            .post(&self.config.endpoint_url)
            .header("Authorization", &format!("Bearer {}", self.api_key))
            .header("Content-Type", "application/json")
            .send(payload)
            .map_err(|e| GatewayError::Transport(e.to_string()))?;
        let status = response.status().as_u16();
        let body = response
            .body_mut()
            .read_to_string()
            .map_err(|e| GatewayError::Transport(e.to_string()))?;
        let latency_ms = started.elapsed().as_millis() as u64;
        if !(200..300).contains(&status) {
            return Err(GatewayError::Status { status, body });
        }
        Ok(BackendResponse { body, latency_ms })
    }

    fn fingerprint(&self) -> String {
        format!("http:{}@{}", self.config.model_name, self.config.endpoint_url)
    }
}
