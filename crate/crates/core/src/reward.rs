//! Similarity score between LLM output and expected answer, and the reward
//! derived from it.
//!
//! `score = lambda * textual + (1 - lambda) * semantic`, where textual is the
//! normalized Levenshtein ratio over characters and semantic is the cosine of
//! the two encoded texts, clamped at zero. The continuous reward is
//! `alpha * score`; the discrete reward zeroes scores below `threshold`.

use serde::{Deserialize, Serialize};

use crate::corpus::{cosine, Encoder};
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum RewardMode {
    Continuous,
    Discrete,
}

impl std::str::FromStr for RewardMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "continuous" => Ok(RewardMode::Continuous),
            "discrete" => Ok(RewardMode::Discrete),
            other => Err(Error::Config(format!("unknown reward mode {other:?}"))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RewardConfig {
    /// Weight of the textual term.
    pub lambda: f64,
    pub alpha: f64,
    pub mode: RewardMode,
    /// Discrete-mode cutoff, inclusive.
    pub threshold: f64,
}

impl Default for RewardConfig {
    fn default() -> Self {
        Self { lambda: 0.2, alpha: 10.0, mode: RewardMode::Continuous, threshold: 0.6 }
    }
}

impl RewardConfig {
    pub fn validate(&self) -> Result<()> {
        if !(0.0..=1.0).contains(&self.lambda) {
            return Err(Error::Config(format!("lambda must be in [0, 1], got {}", self.lambda)));
        }
        if !(self.alpha > 0.0 && self.alpha.is_finite()) {
            return Err(Error::Config(format!("alpha must be positive, got {}", self.alpha)));
        }
        if !(self.threshold > 0.0 && self.threshold < 1.0) {
            return Err(Error::Config(format!("threshold must be in (0, 1), got {}", self.threshold)));
        }
        Ok(())
    }
}

/// `1 - levenshtein(y, y_hat) / max(|y|, |y_hat|)` over chars; 1 when both are empty.
pub fn textual_similarity(y: &str, y_hat: &str) -> f64 {
    strsim::normalized_levenshtein(y, y_hat)
}

/// Character-level edit distance.
pub fn levenshtein(a: &str, b: &str) -> usize {
    strsim::levenshtein(a, b)
}

/// `max(0, cosine(encode(y), encode(y_hat)))`.
pub fn semantic_similarity(y: &str, y_hat: &str, encoder: &dyn Encoder) -> Result<f64> {
    let a = encoder.encode(y)?;
    let b = encoder.encode(y_hat)?;
    Ok(cosine(&a, &b)?.max(0.0))
}

/// Blended similarity in `[0, 1]`.
pub fn score(y: &str, y_hat: &str, cfg: &RewardConfig, encoder: &dyn Encoder) -> Result<f64> {
    let textual = textual_similarity(y, y_hat);
    if cfg.lambda == 1.0 {
        return Ok(textual);
    }
    let semantic = semantic_similarity(y, y_hat, encoder)?;
    Ok(blend(textual, semantic, cfg.lambda))
}

pub fn blend(textual: f64, semantic: f64, lambda: f64) -> f64 {
    (lambda * textual + (1.0 - lambda) * semantic).clamp(0.0, 1.0)
}

/// Maps a score to a reward under the configured mode.
pub fn reward(score: f64, cfg: &RewardConfig) -> f64 {
    match cfg.mode {
        RewardMode::Continuous => cfg.alpha * score,
        RewardMode::Discrete if score >= cfg.threshold => cfg.alpha * score,
        RewardMode::Discrete => 0.0,
    }
}
