//! Model client speaking JSON over HTTP.

use std::time::Duration;

use fair_embed::augment::{LlmClient, PromptPayload};
use fair_embed::{Error, Result};

pub const ENDPOINT_VAR: &str = "FAIR_EMBED_LLM_ENDPOINT";
pub const KEY_VAR: &str = "FAIR_EMBED_LLM_KEY";

/// POSTs the prompt payload as JSON and hands back the response body.
///
/// The endpoint is expected to answer with the reply object itself
/// (`{"neutral": .., "groups": {..}, "confidence": ..}`); the pipeline does
/// the parsing.
#[derive(Debug, Clone)]
pub struct HttpLlmClient {
    endpoint: String,
    key: Option<String>,
    http: reqwest::blocking::Client,
}

impl HttpLlmClient {
    pub fn new(endpoint: impl Into<String>, key: Option<String>, timeout: Duration) -> Result<Self> {
        let http = reqwest::blocking::Client::builder()
            .timeout(timeout)
            .build()
            .map_err(|e| Error::Transport(e.to_string()))?;
        Ok(Self {
            endpoint: endpoint.into(),
            key,
            http,
        })
    }

    /// Reads the endpoint and bearer key from the environment.
    pub fn from_env(timeout: Duration) -> Result<Self> {
        let endpoint = std::env::var(ENDPOINT_VAR).map_err(|_| {
            Error::InvalidParameter(format!("{ENDPOINT_VAR} is not set and no --mock was given"))
        })?;
        Self::new(endpoint, std::env::var(KEY_VAR).ok(), timeout)
    }
}

impl LlmClient for HttpLlmClient {
    fn endpoint(&self) -> String {
        self.endpoint.clone()
    }

    fn complete(&self, payload: &PromptPayload) -> Result<String> {
        let mut req = self.http.post(&self.endpoint).json(payload);
        if let Some(key) = &self.key {
            req = req.bearer_auth(key);
        }
        let resp = req
            .send()
            .map_err(|e| Error::Transport(format!("{}: {e}", self.endpoint)))?;
        let status = resp.status();
        let body = resp
            .text()
            .map_err(|e| Error::Transport(format!("{}: {e}", self.endpoint)))?;
        if !status.is_success() {
            return Err(Error::Transport(format!("{}: HTTP {status}", self.endpoint)));
        }
        Ok(body)
    }
}
