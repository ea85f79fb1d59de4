//! Completion-endpoint client.
//!
//! Request body (JSON, POST to `url`):
//!
//! ```json
//! {"model": "...", "prompt": "...", "max_tokens": 512, "temperature": 1.0,
//!  "top_p": 0.8, "top_k": 0, "n": 1, "num_beams": 1,
//!  "repetition_penalty": 1.0, "length_penalty": 1.0,
//!  "do_sample": false, "early_stopping": true}
//! ```
//!
//! The credential is read from the environment variable named in the
//! config and sent as `Authorization: Bearer <value>`. The first
//! `choices[].text` of the response is returned.

use std::sync::{Condvar, Mutex};
use std::thread;
use std::time::Duration;

use serde::{Deserialize, Serialize};
use serde_json::{json, Value};

use super::{check_input, Backend, BackendError, GenerationParams};

pub const DEFAULT_CREDENTIAL_ENV: &str = "PROMPTMATCH_API_KEY";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct EndpointConfig {
    pub url: String,
    pub model: String,
    pub timeout_s: f64,
    pub retries: u32,
    pub credential_env: String,
    pub max_in_flight: usize,
    /// Base delay before the first retry; doubles per attempt.
    pub backoff_ms: u64,
}

impl Default for EndpointConfig {
    fn default() -> Self {
        Self {
            url: String::new(),
            model: String::new(),
            timeout_s: 60.0,
            retries: 2,
            credential_env: DEFAULT_CREDENTIAL_ENV.into(),
            max_in_flight: 4,
            backoff_ms: 250,
        }
    }
}

/// JSON body for one completion request.
pub fn request_body(model: &str, input: &str, params: &GenerationParams) -> Value {
    json!({
        "model": model,
        "prompt": input,
        "max_tokens": params.max_new_tokens,
        "temperature": params.temperature,
        "top_p": params.top_p,
        "top_k": params.top_k,
        "n": params.num_return_sequences,
        "num_beams": params.num_beams,
        "repetition_penalty": params.repetition_penalty,
        "length_penalty": params.length_penalty,
        "do_sample": params.do_sample,
        "early_stopping": params.early_stopping,
    })
}

struct Semaphore {
    free: Mutex<usize>,
    cond: Condvar,
}

struct Permit<'a>(&'a Semaphore);

impl Semaphore {
    fn new(n: usize) -> Self {
        Self { free: Mutex::new(n.max(1)), cond: Condvar::new() }
    }

    fn acquire(&self) -> Permit<'_> {
        let mut free = self.free.lock().expect("semaphore poisoned");
        while *free == 0 {
            free = self.cond.wait(free).expect("semaphore poisoned");
        }
        *free -= 1;
        Permit(self)
    }
}

impl Drop for Permit<'_> {
    fn drop(&mut self) {
        *self.0.free.lock().expect("semaphore poisoned") += 1;
        self.0.cond.notify_one();
    }
}

pub struct HttpBackend {
    config: EndpointConfig,
    credential: String,
    client: reqwest::blocking::Client,
    slots: Semaphore,
}

impl HttpBackend {
    /// Fails before any network activity when the URL or the credential is missing.
    pub fn new(config: EndpointConfig) -> Result<Self, BackendError> {
        if config.url.is_empty() {
            return Err(BackendError::Config("endpoint url is not set".into()));
        }
        let credential = std::env::var(&config.credential_env).map_err(|_| {
            BackendError::Config(format!("credential environment variable {} is not set", config.credential_env))
        })?;
        if !(config.timeout_s > 0.0) {
            return Err(BackendError::Config("timeout_s must be positive".into()));
        }
        let client = reqwest::blocking::Client::builder()
            .timeout(Duration::from_secs_f64(config.timeout_s))
            .build()
            .map_err(|e| BackendError::Config(e.to_string()))?;
        let slots = Semaphore::new(config.max_in_flight);
        Ok(Self { config, credential, client, slots })
    }

    fn attempt(&self, body: &Value) -> Result<String, BackendError> {
        let _permit = self.slots.acquire();
        let response = self
            .client
            .post(&self.config.url)
            .bearer_auth(&self.credential)
            .json(body)
            .send()
            .map_err(|e| {
                if e.is_timeout() {
                    BackendError::Timeout(Duration::from_secs_f64(self.config.timeout_s))
                } else {
                    BackendError::Transport(e.to_string())
                }
            })?;
        let status = response.status();
        let text = response.text().map_err(|e| BackendError::Transport(e.to_string()))?;
        if !status.is_success() {
            return Err(BackendError::Status { status: status.as_u16(), body: excerpt(&text) });
        }
        parse_completion(&text)
    }
}

fn excerpt(body: &str) -> String {
    const MAX: usize = 200;
    match body.char_indices().nth(MAX) {
        Some((i, _)) => format!("{}...", &body[..i]),
        None => body.to_string(),
    }
}

fn parse_completion(body: &str) -> Result<String, BackendError> {
    let value: Value = serde_json::from_str(body).map_err(|e| BackendError::Malformed(e.to_string()))?;
    value
        .get("choices")
        .and_then(Value::as_array)
        .and_then(|c| c.first())
        .and_then(|c| c.get("text"))
        .and_then(Value::as_str)
        .map(str::to_string)
        .ok_or_else(|| BackendError::Malformed(format!("no choices[0].text in {}", excerpt(body))))
}

impl Backend for HttpBackend {
    fn respond(&self, input: &str, params: &GenerationParams) -> Result<String, BackendError> {
        check_input(input)?;
        params.validate()?;
        let body = request_body(&self.config.model, input, params);
        let mut attempt = 0;
        loop {
            match self.attempt(&body) {
                Err(e) if e.is_retryable() && attempt < self.config.retries => {
                    let delay = self.config.backoff_ms.saturating_mul(1 << attempt.min(16));
                    log::warn!("request failed (attempt {}): {e}; retrying in {delay} ms", attempt + 1);
                    thread::sleep(Duration::from_millis(delay));
                    attempt += 1;
                }
                other => return other,
            }
        }
    }
}
