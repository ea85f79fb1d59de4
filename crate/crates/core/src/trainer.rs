//! REINFORCE training, evaluation and the non-learned baselines.
//!
//! One episode selects `m` exemplars by sampling the policy, sends the
//! composed input to the backend once, and scores the response against the
//! expected answer. Returns are `G_t = gamma^(m-1-t) * r`. An update uses
//! `mean_batch sum_t (G_t - b) grad log pi(a_t | s_t)` with an exponential
//! moving-average baseline `b`.
//!
//! Rollouts in a batch run in parallel against one parameter snapshot.
//! Each episode draws from its own RNG derived from `(seed, epoch, slot)`,
//! so results do not depend on thread scheduling.

use std::io::Write;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::backend::{Backend, GenerationParams, SyntheticTask};
use crate::corpus::{cosine, EmbeddingSet, EmbeddingVector, PromptTriple};
use crate::environment::{compose_with_selection, query_text, EnvConfig, Environment, EpisodeState};
use crate::error::{Error, Result};
use crate::policy::{GradientAccumulator, Gradient, KeyCache, MatchingNet};
use crate::reward::{reward, score, RewardConfig};

/// Named presets for all training hyperparameters.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Profile {
    /// Small network, larger step size; runs in seconds on the synthetic task.
    Desk,
    /// Published settings: 384-dim embeddings, 1024 hidden, 512 out, lr 1e-6.
    Paper,
}

impl Profile {
    pub fn embedding_dim(self) -> usize {
        match self {
            Profile::Desk => 32,
            Profile::Paper => 384,
        }
    }

    pub fn train_config(self) -> TrainConfig {
        match self {
            Profile::Desk => TrainConfig::default(),
            Profile::Paper => TrainConfig {
                epochs: 150,
                batch_size: 32,
                lr: 1e-6,
                hidden: 1024,
                out: 512,
                ..TrainConfig::default()
            },
        }
    }
}

impl std::str::FromStr for Profile {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "desk" => Ok(Profile::Desk),
            "paper" => Ok(Profile::Paper),
            other => Err(Error::Config(format!("unknown profile {other:?}"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub gamma: f64,
    pub baseline_beta: f64,
    /// Heavy-ball momentum; 0 disables it.
    pub momentum: f64,
    pub seed: u64,
    pub hidden: usize,
    pub out: usize,
    pub reward: RewardConfig,
    pub env: EnvConfig,
    pub generation: GenerationParams,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            epochs: 200,
            batch_size: 32,
            lr: 0.1,
            gamma: 1.0,
            baseline_beta: 0.9,
            momentum: 0.0,
            seed: 0,
            hidden: 64,
            out: 32,
            reward: RewardConfig::default(),
            env: EnvConfig::default(),
            generation: GenerationParams::default(),
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.epochs == 0 {
            return Err(Error::Config("epochs must be at least 1".into()));
        }
        if self.batch_size == 0 {
            return Err(Error::Config("batch_size must be at least 1".into()));
        }
        if !(0.0..=1.0).contains(&self.gamma) {
            return Err(Error::Config(format!("gamma must be in [0, 1], got {}", self.gamma)));
        }
        if !(0.0..1.0).contains(&self.baseline_beta) {
            return Err(Error::Config(format!("baseline_beta must be in [0, 1), got {}", self.baseline_beta)));
        }
        if !(0.0..1.0).contains(&self.momentum) {
            return Err(Error::Config(format!("momentum must be in [0, 1), got {}", self.momentum)));
        }
        if !self.lr.is_finite() || self.lr < 0.0 {
            return Err(Error::Config(format!("lr must be finite and non-negative, got {}", self.lr)));
        }
        if self.hidden == 0 || self.out == 0 {
            return Err(Error::Config("network sizes must be positive".into()));
        }
        self.reward.validate()?;
        self.generation.validate()?;
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Step {
    /// State representation `concat(g, h)` the action was chosen from.
    pub state: Vec<f64>,
    /// Indices that were masked (already chosen).
    pub mask: Vec<usize>,
    pub action: usize,
    pub log_prob: f64,
    pub entropy: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Trajectory {
    pub steps: Vec<Step>,
    pub final_state: EpisodeState,
    pub response: String,
    pub score: f64,
    pub reward: f64,
    pub returns: Vec<f64>,
}

impl Trajectory {
    pub fn selected(&self) -> Vec<usize> {
        self.final_state.selected()
    }
}

/// `G_t = gamma^(m-1-t) * r` for `t` in `0..m`.
pub fn discounted_returns(reward: f64, steps: usize, gamma: f64) -> Vec<f64> {
    let mut returns = vec![0.0; steps];
    let mut g = reward;
    for slot in returns.iter_mut().rev() {
        *slot = g;
        g *= gamma;
    }
    returns
}

/// Shared, read-only pieces of a rollout.
pub struct RolloutContext<'a> {
    pub env: &'a Environment<'a>,
    pub backend: &'a dyn Backend,
    pub reward: &'a RewardConfig,
    pub generation: &'a GenerationParams,
    pub gamma: f64,
}

impl RolloutContext<'_> {
    /// Samples one episode for `query` (with precomputed embedding `g`) and
    /// scores the response against `expected`.
    pub fn rollout(
        &self,
        net: &MatchingNet,
        cache: &KeyCache,
        query: &str,
        g: &EmbeddingVector,
        expected: &str,
        rng: &mut ChaCha8Rng,
    ) -> Result<Trajectory> {
        let mut episode = self.env.reset_with_embedding(query, g.clone())?;
        let mut steps = Vec::with_capacity(episode.state.shots());
        while !episode.state.is_terminal() {
            let state = self.env.state_representation(&episode)?;
            let mask = episode.state.selected();
            let dist = net.forward_with(cache, &state, &mask)?;
            let action = dist.sample(rng);
            steps.push(Step { log_prob: dist.log_prob(action), entropy: dist.entropy(), state, mask, action });
            episode.state = self.env.step(&episode.state, action)?;
        }
        let input = self.env.compose(&episode)?;
        let response = self.backend.respond(&input, self.generation)?;
        let zeta = score(&response, expected, self.reward, self.env.encoder())?;
        let r = reward(zeta, self.reward);
        let returns = discounted_returns(r, steps.len(), self.gamma);
        Ok(Trajectory { steps, final_state: episode.state, response, score: zeta, reward: r, returns })
    }
}

/// Samples one episode, computing the key cache from `net`.
#[allow(clippy::too_many_arguments)]
pub fn rollout(
    net: &MatchingNet,
    env: &Environment<'_>,
    backend: &dyn Backend,
    reward_cfg: &RewardConfig,
    query: &str,
    expected: &str,
    gamma: f64,
    rng: &mut ChaCha8Rng,
) -> Result<Trajectory> {
    let cache = net.key_cache(env.embeddings())?;
    let g = env.encoder().encode(query)?;
    let generation = GenerationParams::default();
    let ctx = RolloutContext { env, backend, reward: reward_cfg, generation: &generation, gamma };
    ctx.rollout(net, &cache, query, &g, expected, rng)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct UpdateStats {
    pub mean_score: f64,
    pub mean_reward: f64,
    pub entropy: f64,
    pub grad_norm: f64,
}

/// Baseline-adjusted policy-gradient estimate and batch statistics.
pub fn policy_gradient(
    net: &MatchingNet,
    set: &EmbeddingSet,
    cache: &KeyCache,
    batch: &[Trajectory],
    baseline: f64,
) -> Result<(Gradient, UpdateStats)> {
    if batch.is_empty() {
        return Err(Error::Config("empty batch".into()));
    }
    let scale = 1.0 / batch.len() as f64;
    let mut acc = GradientAccumulator::new(net, set, cache)?;
    let (mut entropy, mut n_steps) = (0.0, 0usize);
    for traj in batch {
        for (step, g_t) in traj.steps.iter().zip(&traj.returns) {
            acc.add(&step.state, &step.mask, step.action, (g_t - baseline) * scale)?;
            entropy += step.entropy;
            n_steps += 1;
        }
    }
    let grad = acc.finish();
    let grad_norm = grad.norm();
    let stats = UpdateStats {
        mean_score: batch.iter().map(|t| t.score).sum::<f64>() * scale,
        mean_reward: batch.iter().map(|t| t.reward).sum::<f64>() * scale,
        entropy: if n_steps > 0 { entropy / n_steps as f64 } else { 0.0 },
        grad_norm,
    };
    if !grad.is_finite() {
        return Err(Error::NonFinite(format!(
            "policy gradient (mean reward {}, baseline {baseline}, batch {})",
            stats.mean_reward,
            batch.len()
        )));
    }
    Ok((grad, stats))
}

/// `b' = beta * b + (1 - beta) * mean(G_0)`.
pub fn update_baseline(baseline: f64, batch: &[Trajectory], beta: f64) -> f64 {
    let mean = batch.iter().map(|t| t.returns.first().copied().unwrap_or(0.0)).sum::<f64>() / batch.len() as f64;
    beta * baseline + (1.0 - beta) * mean
}

/// One plain gradient-ascent REINFORCE step.
pub fn reinforce_update(
    net: &MatchingNet,
    set: &EmbeddingSet,
    batch: &[Trajectory],
    baseline: f64,
    lr: f64,
    beta: f64,
) -> Result<(MatchingNet, f64, UpdateStats)> {
    let cache = net.key_cache(set)?;
    let (grad, stats) = policy_gradient(net, set, &cache, batch, baseline)?;
    let next = net.apply_update(&grad, lr)?;
    Ok((next, update_baseline(baseline, batch, beta), stats))
}

/// Gradient ascent with optional heavy-ball momentum.
#[derive(Debug, Clone)]
pub struct Optimizer {
    lr: f64,
    momentum: f64,
    velocity: Option<Gradient>,
}

impl Optimizer {
    pub fn new(lr: f64, momentum: f64) -> Self {
        Self { lr, momentum, velocity: None }
    }

    pub fn step(&mut self, net: &MatchingNet, grad: &Gradient) -> Result<MatchingNet> {
        if self.momentum == 0.0 {
            return net.apply_update(grad, self.lr);
        }
        let velocity = self.velocity.get_or_insert_with(|| net.zero_gradient());
        velocity.scale(self.momentum);
        velocity.add_scaled(grad, 1.0);
        net.apply_update(velocity, self.lr)
    }
}

/// One row of the training log.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LogRow {
    pub epoch: usize,
    pub batch: usize,
    pub mean_score: f64,
    pub mean_reward: f64,
    pub baseline: f64,
    pub entropy: f64,
    pub grad_norm: f64,
}

pub fn write_log(path: impl AsRef<Path>, rows: &[LogRow]) -> Result<()> {
    let mut file = std::fs::File::create(path)?;
    file.write_all(&log_csv(rows)?)?;
    Ok(())
}

/// The log as CSV bytes with header `epoch,batch,mean_score,...`.
pub fn log_csv(rows: &[LogRow]) -> Result<Vec<u8>> {
    let mut writer = csv::Writer::from_writer(Vec::new());
    if rows.is_empty() {
        writer.write_record(["epoch", "batch", "mean_score", "mean_reward", "baseline", "entropy", "grad_norm"])?;
    }
    for row in rows {
        writer.serialize(row)?;
    }
    writer.into_inner().map_err(|e| Error::Io(e.into_error()))
}

#[derive(Debug, Clone)]
pub struct TrainOutcome {
    pub params: MatchingNet,
    pub baseline: f64,
    pub log: Vec<LogRow>,
}

/// Embeds queries as `question [\n context]`.
pub fn encode_queries(queries: &[PromptTriple], env: &Environment<'_>) -> Result<Vec<EmbeddingVector>> {
    queries.iter().map(|q| env.encoder().encode(&query_text(&q.question, &q.context))).collect()
}

fn episode_rng(seed: u64, epoch: usize, slot: usize) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(((epoch as u64) << 32) | slot as u64);
    rng
}

/// Trains from freshly initialized parameters.
pub fn train(
    cfg: &TrainConfig,
    env: &Environment<'_>,
    queries: &[PromptTriple],
    backend: &dyn Backend,
) -> Result<TrainOutcome> {
    let net = MatchingNet::init(cfg.seed, env.embeddings().dim(), cfg.hidden, cfg.out)?;
    train_from(net, cfg, env, queries, backend)
}

pub fn train_from(
    mut net: MatchingNet,
    cfg: &TrainConfig,
    env: &Environment<'_>,
    queries: &[PromptTriple],
    backend: &dyn Backend,
) -> Result<TrainOutcome> {
    cfg.validate()?;
    if queries.is_empty() {
        return Err(Error::Config("no training queries".into()));
    }
    if net.embedding_dim() != env.embeddings().dim() {
        return Err(Error::DimensionMismatch { expected: env.embeddings().dim(), found: net.embedding_dim() });
    }
    let texts: Vec<String> = queries.iter().map(|q| query_text(&q.question, &q.context)).collect();
    let embeddings = encode_queries(queries, env)?;
    let ctx = RolloutContext { env, backend, reward: &cfg.reward, generation: &cfg.generation, gamma: cfg.gamma };

    let mut shuffle_rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut optimizer = Optimizer::new(cfg.lr, cfg.momentum);
    let mut baseline = None;
    let mut log = Vec::new();
    let mut order: Vec<usize> = (0..queries.len()).collect();

    for epoch in 0..cfg.epochs {
        order.shuffle(&mut shuffle_rng);
        for (batch_idx, chunk) in order.chunks(cfg.batch_size).enumerate() {
            let at = |e: Error| e.context(format!("epoch {epoch}, batch {batch_idx}"));
            let cache = net.key_cache(env.embeddings()).map_err(at)?;
            let start = batch_idx * cfg.batch_size;
            let batch = chunk
                .par_iter()
                .enumerate()
                .map(|(k, &q)| {
                    let mut rng = episode_rng(cfg.seed, epoch, start + k);
                    ctx.rollout(&net, &cache, &texts[q], &embeddings[q], &queries[q].answer, &mut rng)
                        .map_err(|e| e.context(format!("query {q}")))
                })
                .collect::<Result<Vec<_>>>()
                .map_err(at)?;
            // the first batch seeds the baseline with its own mean return
            let b = *baseline.get_or_insert_with(|| update_baseline(0.0, &batch, 0.0));
            let (grad, stats) = policy_gradient(&net, env.embeddings(), &cache, &batch, b).map_err(at)?;
            net = optimizer.step(&net, &grad).map_err(at)?;
            let b = update_baseline(b, &batch, cfg.baseline_beta);
            baseline = Some(b);
            log.push(LogRow {
                epoch,
                batch: batch_idx,
                mean_score: stats.mean_score,
                mean_reward: stats.mean_reward,
                baseline: b,
                entropy: stats.entropy,
                grad_norm: stats.grad_norm,
            });
        }
    }
    Ok(TrainOutcome { params: net, baseline: baseline.unwrap_or(0.0), log })
}

/// How exemplars are chosen at evaluation time.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Selector {
    PolicyGreedy,
    PolicySampled,
    Simmatch,
    Random,
    ZeroShot,
}

impl Selector {
    pub fn needs_policy(self) -> bool {
        matches!(self, Selector::PolicyGreedy | Selector::PolicySampled)
    }

    pub fn name(self) -> &'static str {
        match self {
            Selector::PolicyGreedy => "policy-greedy",
            Selector::PolicySampled => "policy-sampled",
            Selector::Simmatch => "simmatch",
            Selector::Random => "random",
            Selector::ZeroShot => "zero-shot",
        }
    }
}

impl std::str::FromStr for Selector {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "policy" | "policy-greedy" => Ok(Selector::PolicyGreedy),
            "policy-sampled" => Ok(Selector::PolicySampled),
            "simmatch" => Ok(Selector::Simmatch),
            "random" => Ok(Selector::Random),
            "zero-shot" => Ok(Selector::ZeroShot),
            other => Err(Error::Config(format!("unknown selector {other:?}"))),
        }
    }
}

/// Top-`m` pool indices by cosine to the query; ties keep the smaller index.
pub fn simmatch_select(query: &EmbeddingVector, set: &EmbeddingSet, m: usize) -> Result<Vec<usize>> {
    let sims = set.vectors().iter().map(|f| cosine(query, f)).collect::<Result<Vec<_>>>()?;
    let mut order: Vec<usize> = (0..set.len()).collect();
    order.sort_by(|&a, &b| sims[b].total_cmp(&sims[a]));
    order.truncate(m);
    Ok(order)
}

/// Runs the policy for a full episode without a backend call.
pub fn policy_select(
    net: &MatchingNet,
    cache: &KeyCache,
    env: &Environment<'_>,
    query: &str,
    g: &EmbeddingVector,
    rng: Option<&mut ChaCha8Rng>,
) -> Result<Vec<usize>> {
    let mut episode = env.reset_with_embedding(query, g.clone())?;
    let mut rng = rng;
    while !episode.state.is_terminal() {
        let l = env.state_representation(&episode)?;
        let dist = net.forward_with(cache, &l, &episode.state.selected())?;
        let action = match rng.as_deref_mut() {
            Some(r) => dist.sample(r),
            None => dist.greedy(),
        };
        episode.state = env.step(&episode.state, action)?;
    }
    Ok(episode.state.selected())
}

/// Hidden cluster labels for computing selection accuracy.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct SelectionLabels {
    pub pool: Vec<usize>,
    /// One label per evaluated query, in order.
    pub queries: Vec<usize>,
}

impl SelectionLabels {
    /// Labels from a synthetic task, looking queries up by text.
    pub fn from_task(task: &SyntheticTask, queries: &[PromptTriple]) -> Result<Self> {
        let queries = queries
            .iter()
            .map(|q| {
                task.query_cluster(&q.question)
                    .ok_or_else(|| Error::Config(format!("query {:?} is not part of the task", q.question)))
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(Self { pool: task.pool.iter().map(|e| e.cluster).collect(), queries })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Metrics {
    pub selector: String,
    pub n: usize,
    pub mean_score: f64,
    pub mean_reward: f64,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub selection_accuracy: Option<f64>,
    pub backend_failures: usize,
}

pub struct EvalRequest<'a> {
    pub selector: Selector,
    pub policy: Option<&'a MatchingNet>,
    pub labels: Option<&'a SelectionLabels>,
    pub reward: &'a RewardConfig,
    pub generation: &'a GenerationParams,
    pub seed: u64,
}

/// Scores a selector over `queries`. Backend failures are counted, not
/// averaged in.
pub fn evaluate(
    req: &EvalRequest<'_>,
    env: &Environment<'_>,
    queries: &[PromptTriple],
    backend: &dyn Backend,
) -> Result<Metrics> {
    let cache = match (req.selector.needs_policy(), req.policy) {
        (true, Some(net)) => {
            if net.embedding_dim() != env.embeddings().dim() {
                return Err(Error::DimensionMismatch { expected: env.embeddings().dim(), found: net.embedding_dim() });
            }
            Some(net.key_cache(env.embeddings())?)
        }
        (true, None) => return Err(Error::Config(format!("selector {} needs a policy", req.selector.name()))),
        (false, _) => None,
    };
    if let Some(labels) = req.labels {
        if labels.queries.len() != queries.len() || labels.pool.len() != env.pool().len() {
            return Err(Error::Config("labels do not match the pool and queries".into()));
        }
    }
    let m = env.config().shots;
    let embeddings = encode_queries(queries, env)?;

    struct Outcome {
        selected: Vec<usize>,
        scored: Option<(f64, f64)>,
    }

    let outcomes = queries
        .par_iter()
        .enumerate()
        .map(|(i, q)| -> Result<Outcome> {
            let text = query_text(&q.question, &q.context);
            let mut rng = episode_rng(req.seed, usize::MAX >> 32, i);
            let selected = match req.selector {
                Selector::PolicyGreedy | Selector::PolicySampled => {
                    let net = req.policy.expect("checked above");
                    let cache = cache.as_ref().expect("checked above");
                    let rng = (req.selector == Selector::PolicySampled).then_some(&mut rng);
                    policy_select(net, cache, env, &text, &embeddings[i], rng)?
                }
                Selector::Simmatch => simmatch_select(&embeddings[i], env.embeddings(), m)?,
                Selector::Random => {
                    rand::seq::index::sample(&mut rng, env.pool().len(), m).into_iter().collect()
                }
                Selector::ZeroShot => Vec::new(),
            };
            let input = compose_with_selection(&selected, env.pool(), &text, env.config())?;
            let scored = match backend.respond(&input, req.generation) {
                Ok(response) => {
                    let zeta = score(&response, &q.answer, req.reward, env.encoder())?;
                    Some((zeta, reward(zeta, req.reward)))
                }
                Err(e) => {
                    log::warn!("backend failure on query {i}: {e}");
                    None
                }
            };
            Ok(Outcome { selected, scored })
        })
        .collect::<Result<Vec<_>>>()?;

    let scored: Vec<(f64, f64)> = outcomes.iter().filter_map(|o| o.scored).collect();
    let n = scored.len();
    let mean = |f: fn(&(f64, f64)) -> f64| if n == 0 { 0.0 } else { scored.iter().map(f).sum::<f64>() / n as f64 };
    let selection_accuracy = match (req.labels, req.selector) {
        (_, Selector::ZeroShot) | (None, _) => None,
        (Some(labels), _) => {
            let total: f64 = outcomes
                .iter()
                .zip(&labels.queries)
                .map(|(o, &c)| o.selected.iter().filter(|&&i| labels.pool[i] == c).count() as f64 / o.selected.len() as f64)
                .sum();
            Some(total / queries.len() as f64)
        }
    };
    Ok(Metrics {
        selector: req.selector.name().into(),
        n,
        mean_score: mean(|s| s.0),
        mean_reward: mean(|s| s.1),
        selection_accuracy,
        backend_failures: queries.len() - n,
    })
}
