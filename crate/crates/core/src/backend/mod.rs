//! LLM backends.
//!
//! [`Backend::respond`] turns a composed input into a completion. Three
//! implementations ship: the deterministic [`SyntheticBackend`] used for
//! training and verification, [`HttpBackend`] for completion-style
//! endpoints, and [`ReplayBackend`], which records or replays responses
//! keyed by a 64-bit FNV-1a hash of the input.

mod http;
mod replay;
mod synthetic;

pub use http::{request_body, EndpointConfig, HttpBackend};
pub use replay::{input_hash, ReplayBackend, ReplayMode};
pub use synthetic::{
    generate_synthetic_task, synthetic_respond, LabeledExemplar, LabeledQuery, SyntheticBackend, SyntheticTask,
};

use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error)]
pub enum BackendError {
    #[error("input text is empty")]
    EmptyInput,

    #[error("backend configuration: {0}")]
    Config(String),

    #[error("HTTP {status}: {body}")]
    Status { status: u16, body: String },

    #[error("request timed out after {0:?}")]
    Timeout(std::time::Duration),

    #[error("transport: {0}")]
    Transport(String),

    #[error("malformed response: {0}")]
    Malformed(String),

    #[error("no recorded response for input hash {0}")]
    ReplayMiss(String),

    #[error("input does not match the prompt template: {0}")]
    Unparseable(String),

    #[error("recording: {0}")]
    Recording(String),
}

impl BackendError {
    /// Transient failures worth retrying.
    pub fn is_retryable(&self) -> bool {
        match self {
            BackendError::Status { status, .. } => *status == 429 || *status >= 500,
            BackendError::Timeout(_) | BackendError::Transport(_) => true,
            _ => false,
        }
    }
}

/// Sampling parameters forwarded to the LLM.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct GenerationParams {
    pub temperature: f64,
    pub top_p: f64,
    pub top_k: u32,
    pub num_beams: u32,
    pub max_new_tokens: u32,
    pub repetition_penalty: f64,
    pub length_penalty: f64,
    pub do_sample: bool,
    pub early_stopping: bool,
    pub num_return_sequences: u32,
}

impl Default for GenerationParams {
    fn default() -> Self {
        Self {
            temperature: 1.0,
            top_p: 0.8,
            top_k: 0,
            num_beams: 1,
            max_new_tokens: 512,
            repetition_penalty: 1.0,
            length_penalty: 1.0,
            do_sample: false,
            early_stopping: true,
            num_return_sequences: 1,
        }
    }
}

impl GenerationParams {
    pub fn validate(&self) -> Result<(), BackendError> {
        if self.max_new_tokens < 1 {
            return Err(BackendError::Config("max_new_tokens must be >= 1".into()));
        }
        if !(self.top_p > 0.0 && self.top_p <= 1.0) {
            return Err(BackendError::Config(format!("top_p must be in (0, 1], got {}", self.top_p)));
        }
        if !(self.temperature > 0.0) {
            return Err(BackendError::Config(format!("temperature must be positive, got {}", self.temperature)));
        }
        Ok(())
    }
}

pub trait Backend: Send + Sync {
    fn respond(&self, input: &str, params: &GenerationParams) -> Result<String, BackendError>;
}

impl<B: Backend + ?Sized> Backend for Box<B> {
    fn respond(&self, input: &str, params: &GenerationParams) -> Result<String, BackendError> {
        (**self).respond(input, params)
    }
}

impl<B: Backend + ?Sized> Backend for &B {
    fn respond(&self, input: &str, params: &GenerationParams) -> Result<String, BackendError> {
        (**self).respond(input, params)
    }
}

fn check_input(input: &str) -> Result<(), BackendError> {
    if input.trim().is_empty() {
        Err(BackendError::EmptyInput)
    } else {
        Ok(())
    }
}
