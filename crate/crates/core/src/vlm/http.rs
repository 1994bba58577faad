//! Live backend speaking the OpenAI-compatible chat-completions protocol.

use std::time::Duration;

use serde_json::{json, Value};

use super::{Oracle, VlmBackend, VlmError, VlmQuery};

pub const ENV_ENDPOINT: &str = "VLM_ENDPOINT";
pub const ENV_API_KEY: &str = "VLM_API_KEY";
pub const ENV_MODEL: &str = "VLM_MODEL";

#[derive(Debug, Clone, PartialEq)]
pub struct HttpConfig {
    /// Full URL of the chat-completions route.
    pub endpoint: String,
    pub api_key: Option<String>,
    pub model: String,
    pub timeout: Duration,
    pub max_retries: u32,
    pub backoff: Duration,
    pub temperature: f64,
}

impl HttpConfig {
    pub fn new(endpoint: &str, model: &str) -> Self {
        HttpConfig {
            endpoint: endpoint.to_string(),
            api_key: None,
            model: model.to_string(),
            timeout: Duration::from_secs(60),
            max_retries: 3,
            backoff: Duration::from_millis(500),
            temperature: 0.0,
        }
    }

    pub fn from_env() -> Result<Self, VlmError> {
        Self::from_lookup(|k| std::env::var(k).ok())
    }

    pub fn from_lookup(get: impl Fn(&str) -> Option<String>) -> Result<Self, VlmError> {
        let endpoint = get(ENV_ENDPOINT).filter(|s| !s.is_empty()).ok_or_else(|| VlmError::Config(format!("{ENV_ENDPOINT} is not set")))?;
        let model = get(ENV_MODEL).filter(|s| !s.is_empty()).ok_or_else(|| VlmError::Config(format!("{ENV_MODEL} is not set")))?;
        let mut cfg = HttpConfig::new(&endpoint, &model);
        cfg.api_key = get(ENV_API_KEY).filter(|s| !s.is_empty());
        Ok(cfg)
    }
}

#[derive(Debug, Clone)]
pub struct HttpBackend {
    cfg: HttpConfig,
    agent: ureq::Agent,
}

impl HttpBackend {
    pub fn new(cfg: HttpConfig) -> Self {
        let agent = ureq::Agent::config_builder()
            .timeout_global(Some(cfg.timeout))
            .http_status_as_error(false)
            .build()
            .into();
        HttpBackend { cfg, agent }
    }

    pub fn config(&self) -> &HttpConfig {
        &self.cfg
    }

    /// Request body for a query.
    pub fn body(&self, query: &VlmQuery) -> Value {
        let mut content = vec![json!({"type": "text", "text": query.text})];
        for img in &query.images {
            content.push(json!({"type": "image_url", "image_url": {"url": format!("data:image/png;base64,{img}")}}));
        }
        json!({
            "model": self.cfg.model,
            "temperature": self.cfg.temperature,
            "messages": [{"role": "user", "content": content}],
        })
    }

    fn attempt(&self, body: &str) -> Result<String, (bool, String)> {
        let mut req = self.agent.post(&self.cfg.endpoint).header("Content-Type", "application/json");
        if let Some(key) = &self.cfg.api_key {
            req = req.header("Authorization", &format!("Bearer {key}"));
        }
        let mut resp = req.send(body).map_err(|e| (true, e.to_string()))?;
        let status = resp.status().as_u16();
        let text = resp.body_mut().read_to_string().map_err(|e| (true, e.to_string()))?;
        if status == 429 || status >= 500 {
            return Err((true, format!("HTTP {status}")));
        }
        if status >= 400 {
            return Err((false, format!("HTTP {status}: {text}")));
        }
        Ok(text)
    }
}

/// Extracts the assistant message text from a chat-completions reply.
pub fn extract_content(reply: &str) -> Result<String, VlmError> {
    let v: Value = serde_json::from_str(reply).map_err(|e| VlmError::Malformed(format!("reply is not JSON: {e}")))?;
    v.pointer("/choices/0/message/content")
        .and_then(Value::as_str)
        .map(str::to_string)
        .ok_or_else(|| VlmError::Malformed("reply has no choices[0].message.content".into()))
}

impl VlmBackend for HttpBackend {
    fn name(&self) -> &str {
        "http"
    }

    fn complete(&self, query: &VlmQuery, _oracle: &Oracle<'_>) -> Result<String, VlmError> {
        let body = self.body(query).to_string();
        let mut last = String::new();
        for attempt in 0..=self.cfg.max_retries {
            if attempt > 0 {
                std::thread::sleep(self.cfg.backoff * 2u32.pow(attempt - 1));
            }
            match self.attempt(&body) {
                Ok(text) => return extract_content(&text),
                Err((true, msg)) => last = msg,
                Err((false, msg)) => return Err(VlmError::Unavailable(msg)),
            }
        }
        Err(VlmError::Unavailable(format!("gave up after {} retries: {last}", self.cfg.max_retries)))
    }
}
