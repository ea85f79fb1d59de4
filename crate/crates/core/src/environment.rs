//! Episodic exemplar-selection environment.
//!
//! A state is the list of chosen pool indices, starting from `[-1]`. Each
//! step appends one unchosen index; the episode ends after `m` steps. The
//! final LLM input is laid out as
//!
//! ```text
//! [system prompt]
//!
//! question 1
//!
//! ###
//!
//! answer 1
//!
//! ###
//!
//! ...
//!
//! user query
//!
//! ###
//! ```

use serde::{Deserialize, Serialize};

use crate::corpus::{join_context, mean_aggregate, EmbeddingSet, EmbeddingVector, Encoder, PromptPool};
use crate::error::{Error, Result};

pub const DEFAULT_SEPARATOR: &str = "###";

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct EnvConfig {
    /// Number of shots `m`.
    pub shots: usize,
    /// Initial system prompt; omitted from the input when empty.
    pub system_prompt: String,
    pub separator: String,
}

impl Default for EnvConfig {
    fn default() -> Self {
        Self { shots: 1, system_prompt: String::new(), separator: DEFAULT_SEPARATOR.into() }
    }
}

impl EnvConfig {
    /// Checks `1 <= m <= pool_size` and a non-empty separator.
    pub fn validate(&self, pool_size: usize) -> Result<()> {
        if self.shots == 0 {
            return Err(Error::Config("number of shots must be at least 1".into()));
        }
        if self.shots > pool_size {
            return Err(Error::Config(format!("{} shots requested but pool has {pool_size} entries", self.shots)));
        }
        if self.separator.is_empty() {
            return Err(Error::Config("separator must be non-empty".into()));
        }
        Ok(())
    }
}

/// Selected indices behind a leading `-1`, plus the step counter.
#[derive(Debug, Clone, PartialEq, Eq, Hash)]
pub struct EpisodeState {
    indices: Vec<i64>,
    shots: usize,
}

impl EpisodeState {
    pub fn initial(shots: usize) -> Self {
        Self { indices: vec![-1], shots }
    }

    pub fn indices(&self) -> &[i64] {
        &self.indices
    }

    /// Steps taken so far.
    pub fn t(&self) -> usize {
        self.indices.len() - 1
    }

    pub fn shots(&self) -> usize {
        self.shots
    }

    pub fn is_terminal(&self) -> bool {
        self.t() == self.shots
    }

    /// Chosen pool indices in selection order.
    pub fn selected(&self) -> Vec<usize> {
        self.indices[1..].iter().map(|&i| i as usize).collect()
    }

    /// Appends `action`, rejecting terminal states, duplicates and
    /// out-of-range indices.
    pub fn step(&self, action: usize, pool_size: usize) -> Result<EpisodeState> {
        if self.is_terminal() {
            return Err(Error::Terminal);
        }
        if action >= pool_size {
            return Err(Error::InvalidAction { action, reason: "out of range" });
        }
        if self.indices[1..].contains(&(action as i64)) {
            return Err(Error::InvalidAction { action, reason: "already selected" });
        }
        let mut indices = self.indices.clone();
        indices.push(action as i64);
        Ok(EpisodeState { indices, shots: self.shots })
    }

    /// Checks every structural invariant of a reachable state.
    pub fn check_invariants(&self, pool_size: usize) -> Result<()> {
        if self.indices.first() != Some(&-1) {
            return Err(Error::Config("state must start with -1".into()));
        }
        if self.t() > self.shots {
            return Err(Error::Config(format!("t={} exceeds m={}", self.t(), self.shots)));
        }
        let sel = &self.indices[1..];
        for (k, &i) in sel.iter().enumerate() {
            if i < 0 || i as usize >= pool_size {
                return Err(Error::Config(format!("index {i} out of range")));
            }
            if sel[..k].contains(&i) {
                return Err(Error::Config(format!("duplicate index {i}")));
            }
        }
        Ok(())
    }
}

/// An episode in progress: the query, its cached embedding and the state.
#[derive(Debug, Clone, PartialEq)]
pub struct Episode {
    pub query: String,
    pub query_embedding: EmbeddingVector,
    pub state: EpisodeState,
}

/// The pool, its embeddings and the encoder used for queries.
pub struct Environment<'a> {
    pool: &'a PromptPool,
    embeddings: &'a EmbeddingSet,
    encoder: &'a dyn Encoder,
    config: EnvConfig,
}

impl<'a> Environment<'a> {
    pub fn new(
        pool: &'a PromptPool,
        embeddings: &'a EmbeddingSet,
        encoder: &'a dyn Encoder,
        config: EnvConfig,
    ) -> Result<Self> {
        config.validate(pool.len())?;
        if embeddings.len() != pool.len() {
            return Err(Error::DimensionMismatch { expected: pool.len(), found: embeddings.len() });
        }
        if encoder.dim() != embeddings.dim() {
            return Err(Error::DimensionMismatch { expected: embeddings.dim(), found: encoder.dim() });
        }
        Ok(Self { pool, embeddings, encoder, config })
    }

    pub fn pool(&self) -> &PromptPool {
        self.pool
    }

    pub fn embeddings(&self) -> &EmbeddingSet {
        self.embeddings
    }

    pub fn encoder(&self) -> &dyn Encoder {
        self.encoder
    }

    pub fn config(&self) -> &EnvConfig {
        &self.config
    }

    /// Starts an episode, embedding the query.
    pub fn reset(&self, query: &str) -> Result<Episode> {
        if query.trim().is_empty() {
            return Err(Error::EmptyQuery);
        }
        let g = self.encoder.encode(query)?;
        self.reset_with_embedding(query, g)
    }

    /// Starts an episode with a precomputed query embedding.
    pub fn reset_with_embedding(&self, query: &str, g: EmbeddingVector) -> Result<Episode> {
        if query.trim().is_empty() {
            return Err(Error::EmptyQuery);
        }
        if g.dim() != self.embeddings.dim() {
            return Err(Error::DimensionMismatch { expected: self.embeddings.dim(), found: g.dim() });
        }
        Ok(Episode { query: query.to_string(), query_embedding: g, state: EpisodeState::initial(self.config.shots) })
    }

    pub fn step(&self, state: &EpisodeState, action: usize) -> Result<EpisodeState> {
        state.step(action, self.pool.len())
    }

    pub fn state_representation(&self, episode: &Episode) -> Result<Vec<f64>> {
        state_representation(&episode.state, &episode.query_embedding, self.embeddings)
    }

    pub fn compose(&self, episode: &Episode) -> Result<String> {
        compose_llm_input(&episode.state, self.pool, &episode.query, &self.config)
    }
}

/// `concat(g, h)` where `h` is the mean embedding of the selected entries.
pub fn state_representation(state: &EpisodeState, g: &EmbeddingVector, set: &EmbeddingSet) -> Result<Vec<f64>> {
    if g.dim() != set.dim() {
        return Err(Error::DimensionMismatch { expected: set.dim(), found: g.dim() });
    }
    let selected = state.selected();
    let chosen = selected
        .iter()
        .map(|&i| set.get(i).ok_or(Error::InvalidAction { action: i, reason: "out of range" }))
        .collect::<Result<Vec<_>>>()?;
    let h = mean_aggregate(chosen, set.dim())?;
    let mut l = Vec::with_capacity(2 * set.dim());
    l.extend_from_slice(g.as_slice());
    l.extend_from_slice(h.as_slice());
    Ok(l)
}

/// Composes the LLM input for a terminal state.
pub fn compose_llm_input(state: &EpisodeState, pool: &PromptPool, query: &str, cfg: &EnvConfig) -> Result<String> {
    if !state.is_terminal() {
        return Err(Error::NotTerminal { t: state.t(), m: state.shots() });
    }
    compose_with_selection(&state.selected(), pool, query, cfg)
}

/// Composes the LLM input for an arbitrary selection, including the empty
/// (zero-shot) one.
pub fn compose_with_selection(selected: &[usize], pool: &PromptPool, query: &str, cfg: &EnvConfig) -> Result<String> {
    let sep = cfg.separator.as_str();
    let mut blocks: Vec<&str> = Vec::with_capacity(2 + 4 * selected.len());
    let questions = selected
        .iter()
        .map(|&i| pool.get(i).map(|e| e.question_block()).ok_or(Error::InvalidAction { action: i, reason: "out of range" }))
        .collect::<Result<Vec<_>>>()?;
    if !cfg.system_prompt.is_empty() {
        blocks.push(&cfg.system_prompt);
    }
    for (&i, question) in selected.iter().zip(&questions) {
        blocks.extend([question.as_str(), sep, pool.get(i).expect("checked").answer.as_str(), sep]);
    }
    blocks.extend([query, sep]);
    Ok(blocks.join("\n\n"))
}

/// Query text as seen by the environment: question plus optional context.
pub fn query_text(question: &str, context: &str) -> String {
    join_context(question, context)
}

/// Exemplar and query blocks recovered from a composed input.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ParsedInput {
    /// `(question block, answer)` pairs in order.
    pub exemplars: Vec<(String, String)>,
    pub query: String,
}

/// Inverse of [`compose_with_selection`]. Fails when the text does not
/// follow the template for the given system prompt and separator.
pub fn parse_llm_input(text: &str, system_prompt: &str, separator: &str) -> Result<ParsedInput> {
    let bad = |why: &str| Error::Config(format!("input does not match template: {why}"));
    let mut body = text;
    if !system_prompt.is_empty() {
        body = body
            .strip_prefix(system_prompt)
            .and_then(|b| b.strip_prefix("\n\n"))
            .ok_or_else(|| bad("missing system prompt"))?;
    }
    let tail = format!("\n\n{separator}");
    let body = body.strip_suffix(tail.as_str()).ok_or_else(|| bad("missing trailing separator"))?;
    let delim = format!("\n\n{separator}\n\n");
    let parts: Vec<&str> = body.split(delim.as_str()).collect();
    if parts.len() % 2 != 1 {
        return Err(bad("unbalanced question/answer blocks"));
    }
    if parts.iter().any(|p| p.is_empty()) {
        return Err(bad("empty block"));
    }
    let (query, pairs) = parts.split_last().expect("at least one part");
    let exemplars = pairs.chunks_exact(2).map(|p| (p[0].to_string(), p[1].to_string())).collect();
    Ok(ParsedInput { exemplars, query: query.to_string() })
}
