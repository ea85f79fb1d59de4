//! Learned few-shot exemplar selection.
//!
//! A matching-network policy picks `m` exemplars from a prompt pool for each
//! user query, the composed prompt goes to an LLM backend, and the
//! similarity between the response and the expected answer is the reward
//! for REINFORCE training.
//!
//! - [`corpus`]: pool files, hashed n-gram embeddings, cosine and mean.
//! - [`policy`]: the two-MLP matching network, exact log-prob gradients, checkpoints.
//! - [`environment`]: episode state, transitions and prompt composition.
//! - [`reward`]: textual/semantic score and continuous or discrete reward.
//! - [`backend`]: synthetic cluster oracle, HTTP client and record/replay cache.
//! - [`trainer`]: rollouts, updates, the training loop, evaluation and baselines.

pub mod backend;
pub mod corpus;
pub mod environment;
pub mod error;
pub mod policy;
pub mod reward;
pub mod trainer;

pub use backend::{
    Backend, BackendError, EndpointConfig, GenerationParams, HttpBackend, ReplayBackend, SyntheticBackend,
    SyntheticTask,
};
pub use corpus::{
    cosine, encode_pool, hash_ngram_encode, load_pool, mean_aggregate, EmbeddingSet, EmbeddingVector, Encoder,
    HashNgramEncoder, LookupEncoder, PromptPool, PromptTriple,
};
pub use environment::{compose_llm_input, EnvConfig, Environment, Episode, EpisodeState};
pub use error::{Error, Result};
pub use policy::{ActionDistribution, Gradient, MatchingNet, Mlp, Precision};
pub use reward::{RewardConfig, RewardMode};
pub use trainer::{
    evaluate, simmatch_select, train, EvalRequest, LogRow, Metrics, Profile, SelectionLabels, Selector, TrainConfig,
    TrainOutcome, Trajectory,
};
