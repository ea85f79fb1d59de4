//! Synthetic cluster-oracle LLM.
//!
//! Pool entries and queries belong to hidden clusters. Every cluster has a
//! small surface vocabulary, a short cue word, a gold answer and a
//! distractor answer. Exemplar questions are built from their cluster's
//! vocabulary. A query carries its own cluster's cue word followed by
//! surface words; with probability `rho` those surface words are taken from
//! a different cluster, so embedding similarity points at the wrong
//! exemplars while the cue still identifies the right ones.
//!
//! The oracle answers with the query's gold answer when at least
//! `ceil(m/2)` of the `m` exemplars come from the query's cluster, and with
//! the distractor of the most frequent foreign cluster otherwise (ties go
//! to the smallest cluster index). With no exemplars it answers with the
//! empty string.

use std::collections::{HashMap, HashSet};
use std::hash::Hasher;

use fnv::FnvHasher;
use rand::seq::IndexedRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::{check_input, Backend, BackendError, GenerationParams};
use crate::corpus::{PromptPool, PromptTriple};
use crate::environment::{parse_llm_input, DEFAULT_SEPARATOR};
use crate::error::{Error, Result};

const VOCAB_PER_CLUSTER: usize = 3;
const WORDS_PER_TEXT: std::ops::RangeInclusive<usize> = 3..=5;
const LETTERS: &[u8] = b"abcdefghijklmnopqrstuvwxyz";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LabeledExemplar {
    pub question: String,
    pub answer: String,
    pub cluster: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LabeledQuery {
    pub question: String,
    /// Gold answer of the query's cluster.
    pub answer: String,
    pub cluster: usize,
    /// Cluster whose vocabulary the surface words came from.
    pub surface_cluster: usize,
}

/// A generated task with its hidden labels. Serializes to the task manifest.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SyntheticTask {
    pub seed: u64,
    pub clusters: usize,
    pub misalignment: f64,
    pub vocabulary: Vec<Vec<String>>,
    pub cues: Vec<String>,
    pub gold_answers: Vec<String>,
    pub distractors: Vec<String>,
    pub pool: Vec<LabeledExemplar>,
    pub queries: Vec<LabeledQuery>,
}

struct WordSource {
    rng: ChaCha8Rng,
    used: HashSet<String>,
}

impl WordSource {
    fn word(&mut self, len: std::ops::RangeInclusive<usize>) -> String {
        loop {
            let n = self.rng.random_range(len.clone());
            let w: String = (0..n).map(|_| *LETTERS.choose(&mut self.rng).expect("letters") as char).collect();
            if self.used.insert(w.clone()) {
                return w;
            }
        }
    }
}

/// Generates a task. `pool_size >= clusters >= 1`, `n_queries >= 1`,
/// `rho` in `[0, 1]`.
pub fn generate_synthetic_task(
    seed: u64,
    clusters: usize,
    pool_size: usize,
    n_queries: usize,
    rho: f64,
) -> Result<SyntheticTask> {
    if clusters == 0 || pool_size < clusters {
        return Err(Error::Config(format!("need pool_size >= clusters >= 1, got {pool_size} and {clusters}")));
    }
    if n_queries == 0 {
        return Err(Error::Config("n_queries must be at least 1".into()));
    }
    if !(0.0..=1.0).contains(&rho) {
        return Err(Error::Config(format!("misalignment must be in [0, 1], got {rho}")));
    }
    if clusters == 1 && rho > 0.0 {
        return Err(Error::Config("misalignment needs at least two clusters".into()));
    }

    let mut words = WordSource { rng: ChaCha8Rng::seed_from_u64(seed), used: HashSet::new() };
    let vocabulary: Vec<Vec<String>> =
        (0..clusters).map(|_| (0..VOCAB_PER_CLUSTER).map(|_| words.word(5..=7)).collect()).collect();
    let cues: Vec<String> = (0..clusters).map(|_| words.word(4..=4)).collect();
    let gold_answers: Vec<String> = (0..clusters).map(|_| format!("answer {}", words.word(6..=6))).collect();
    let distractors: Vec<String> = (0..clusters).map(|_| format!("answer {}", words.word(6..=6))).collect();

    let mut rng = words.rng;
    let phrase = |rng: &mut ChaCha8Rng, c: usize| -> String {
        let n = rng.random_range(WORDS_PER_TEXT);
        (0..n).map(|_| vocabulary[c].choose(rng).expect("vocabulary").as_str()).collect::<Vec<_>>().join(" ")
    };

    let mut seen = HashSet::new();
    let mut pool = Vec::with_capacity(pool_size);
    for i in 0..pool_size {
        let cluster = i % clusters;
        // prefer distinct questions; small vocabularies may force repeats
        let mut question = phrase(&mut rng, cluster);
        for _ in 0..32 {
            if !seen.contains(&question) {
                break;
            }
            question = phrase(&mut rng, cluster);
        }
        seen.insert(question.clone());
        pool.push(LabeledExemplar { question, answer: gold_answers[cluster].clone(), cluster });
    }

    let queries = (0..n_queries)
        .map(|q| {
            let cluster = q % clusters;
            let surface_cluster = if rng.random::<f64>() < rho {
                let k = rng.random_range(0..clusters - 1);
                if k >= cluster {
                    k + 1
                } else {
                    k
                }
            } else {
                cluster
            };
            let question = format!("{} {}", cues[cluster], phrase(&mut rng, surface_cluster));
            LabeledQuery { question, answer: gold_answers[cluster].clone(), cluster, surface_cluster }
        })
        .collect();

    Ok(SyntheticTask {
        seed,
        clusters,
        misalignment: rho,
        vocabulary,
        cues,
        gold_answers,
        distractors,
        pool,
        queries,
    })
}

impl SyntheticTask {
    /// The visible pool (no cluster labels).
    pub fn prompt_pool(&self) -> PromptPool {
        PromptPool::new(
            self.pool
                .iter()
                .map(|e| PromptTriple { id: 0, question: e.question.clone(), context: String::new(), answer: e.answer.clone() })
                .collect(),
        )
        .expect("generated pool is non-empty")
    }

    /// Queries as `(question, context, expected answer)` triples.
    pub fn query_triples(&self, range: std::ops::Range<usize>) -> Vec<PromptTriple> {
        self.queries[range]
            .iter()
            .enumerate()
            .map(|(id, q)| PromptTriple { id, question: q.question.clone(), context: String::new(), answer: q.answer.clone() })
            .collect()
    }

    pub fn pool_cluster(&self, id: usize) -> usize {
        self.pool[id].cluster
    }

    /// Cluster of a query by its text.
    pub fn query_cluster(&self, text: &str) -> Option<usize> {
        self.queries.iter().find(|q| q.question == text).map(|q| q.cluster)
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("task serializes")
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let task: SyntheticTask = serde_json::from_str(text)?;
        if task.clusters == 0
            || task.gold_answers.len() != task.clusters
            || task.distractors.len() != task.clusters
            || task.pool.iter().any(|e| e.cluster >= task.clusters)
            || task.queries.iter().any(|q| q.cluster >= task.clusters)
        {
            return Err(Error::Config("task manifest is inconsistent".into()));
        }
        Ok(task)
    }
}

/// Oracle answer for an input composed from `task`'s pool and queries.
pub fn synthetic_respond(task: &SyntheticTask, input: &str) -> Result<String, BackendError> {
    SyntheticBackend::new(task.clone(), 0).answer(input)
}

/// [`Backend`] over a [`SyntheticTask`].
#[derive(Debug, Clone)]
pub struct SyntheticBackend {
    task: SyntheticTask,
    seed: u64,
    noise: f64,
    system_prompt: String,
    separator: String,
    exemplar_cluster: HashMap<(String, String), usize>,
    query_cluster: HashMap<String, usize>,
}

impl SyntheticBackend {
    pub fn new(task: SyntheticTask, seed: u64) -> Self {
        let exemplar_cluster =
            task.pool.iter().map(|e| ((e.question.clone(), e.answer.clone()), e.cluster)).collect();
        let query_cluster = task.queries.iter().map(|q| (q.question.clone(), q.cluster)).collect();
        Self {
            task,
            seed,
            noise: 0.0,
            system_prompt: String::new(),
            separator: DEFAULT_SEPARATOR.into(),
            exemplar_cluster,
            query_cluster,
        }
    }

    /// Template the inputs are composed with.
    pub fn with_template(mut self, system_prompt: impl Into<String>, separator: impl Into<String>) -> Self {
        self.system_prompt = system_prompt.into();
        self.separator = separator.into();
        self
    }

    /// Probability that an otherwise-gold answer is replaced by the
    /// distractor of the next cluster. Decided by a hash of the seed and
    /// the input, so responses stay deterministic.
    pub fn with_noise(mut self, noise: f64) -> Self {
        self.noise = noise.clamp(0.0, 1.0);
        self
    }

    pub fn task(&self) -> &SyntheticTask {
        &self.task
    }

    fn answer(&self, input: &str) -> Result<String, BackendError> {
        check_input(input)?;
        let parsed = parse_llm_input(input, &self.system_prompt, &self.separator)
            .map_err(|e| BackendError::Unparseable(e.to_string()))?;
        let target = *self
            .query_cluster
            .get(&parsed.query)
            .ok_or_else(|| BackendError::Unparseable(format!("unknown query {:?}", parsed.query)))?;
        let mut counts = vec![0usize; self.task.clusters];
        for (question, answer) in parsed.exemplars {
            let cluster = *self
                .exemplar_cluster
                .get(&(question, answer))
                .ok_or_else(|| BackendError::Unparseable("exemplar not in pool".into()))?;
            counts[cluster] += 1;
        }
        let m: usize = counts.iter().sum();
        if m == 0 {
            return Ok(String::new());
        }
        if counts[target] >= m.div_ceil(2) {
            if self.noise > 0.0 && self.unit_hash(input) < self.noise {
                return Ok(self.task.distractors[(target + 1) % self.task.clusters].clone());
            }
            return Ok(self.task.gold_answers[target].clone());
        }
        let mut best = None;
        for (c, &n) in counts.iter().enumerate() {
            if c != target && n > 0 && best.map_or(true, |b: usize| n > counts[b]) {
                best = Some(c);
            }
        }
        Ok(self.task.distractors[best.expect("some foreign exemplar")].clone())
    }

    fn unit_hash(&self, input: &str) -> f64 {
        let mut h = FnvHasher::default();
        h.write(&self.seed.to_le_bytes());
        h.write(input.as_bytes());
        (h.finish() >> 11) as f64 / (1u64 << 53) as f64
    }
}

impl Backend for SyntheticBackend {
    fn respond(&self, input: &str, _params: &GenerationParams) -> Result<String, BackendError> {
        self.answer(input)
    }
}
