//! Run configuration: profile defaults, then the `--config` file, then flags.

use std::fs;
use std::path::{Path, PathBuf};

use clap::{Args, ValueEnum};
use promptmatch_core::backend::EndpointConfig;
use promptmatch_core::environment::query_text;
use promptmatch_core::{
    Backend, EmbeddingSet, Encoder, EnvConfig, Environment, HashNgramEncoder, HttpBackend, LookupEncoder, Profile,
    PromptPool, PromptTriple, ReplayBackend, RewardMode, Selector, SyntheticBackend, SyntheticTask, TrainConfig,
};
use serde::{Deserialize, Serialize};
use serde_json::Value;

use crate::Failure;

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum BackendKind {
    /// Rule-based oracle over a `synth` task manifest.
    Synthetic,
    /// Completion endpoint; credential from the environment.
    Http,
    /// Answers from a recording file.
    Replay,
    /// Wraps the synthetic or HTTP backend and appends to a recording file.
    Record,
}

/// Options shared by `train`, `eval` and `smoke`. Every option can also be
/// set in the flat JSON object passed with `--config`, using the long flag
/// name with underscores.
#[derive(Debug, Default, Clone, Args, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    /// Flat JSON config file; flags take precedence over its values.
    #[arg(long)]
    #[serde(skip)]
    pub config: Option<PathBuf>,

    /// Print the resolved training configuration and exit.
    #[arg(long)]
    #[serde(skip)]
    pub print_config: bool,

    /// Preset for all hyperparameters [default: desk].
    #[arg(long)]
    pub profile: Option<Profile>,

    /// Prompt pool (newline-delimited JSON).
    #[arg(long)]
    pub pool: Option<PathBuf>,
    /// Query file, same format as the pool.
    #[arg(long)]
    pub queries: Option<PathBuf>,
    /// Precomputed pool embeddings (`dim=<d> count=<n>` header).
    #[arg(long)]
    pub embeddings: Option<PathBuf>,
    /// Precomputed query embeddings, one row per query.
    #[arg(long)]
    pub query_embeddings: Option<PathBuf>,
    /// Policy checkpoint (written by train, read by eval).
    #[arg(long)]
    pub checkpoint: Option<PathBuf>,
    /// Training log (CSV).
    #[arg(long)]
    pub log: Option<PathBuf>,
    /// Also write the eval metrics object here.
    #[arg(long)]
    pub metrics: Option<PathBuf>,
    /// Synthetic task manifest written by `synth`.
    #[arg(long)]
    pub task: Option<PathBuf>,
    /// policy-greedy, policy-sampled, simmatch, random or zero-shot.
    #[arg(long)]
    pub selector: Option<Selector>,

    #[arg(long)]
    pub epochs: Option<usize>,
    #[arg(long)]
    pub batch_size: Option<usize>,
    #[arg(long)]
    pub lr: Option<f64>,
    #[arg(long)]
    pub gamma: Option<f64>,
    #[arg(long)]
    pub baseline_beta: Option<f64>,
    #[arg(long)]
    pub momentum: Option<f64>,
    #[arg(long)]
    pub seed: Option<u64>,
    /// Exemplars per query (m).
    #[arg(long)]
    pub shots: Option<usize>,
    #[arg(long)]
    pub hidden: Option<usize>,
    /// Output size of both MLPs.
    #[arg(long)]
    pub out: Option<usize>,
    /// Hashed-encoder dimension; ignored with precomputed embeddings.
    #[arg(long)]
    pub dim: Option<usize>,

    #[arg(long)]
    pub lambda: Option<f64>,
    #[arg(long)]
    pub alpha: Option<f64>,
    /// continuous or discrete.
    #[arg(long)]
    pub reward_mode: Option<RewardMode>,
    #[arg(long)]
    pub threshold: Option<f64>,

    #[arg(long)]
    pub system_prompt: Option<String>,
    #[arg(long)]
    pub separator: Option<String>,

    /// [default: synthetic]
    #[arg(long, value_enum)]
    pub backend: Option<BackendKind>,
    #[arg(long)]
    pub url: Option<String>,
    #[arg(long)]
    pub model: Option<String>,
    #[arg(long)]
    pub timeout_s: Option<f64>,
    #[arg(long)]
    pub retries: Option<u32>,
    /// Name of the environment variable holding the API key.
    #[arg(long)]
    pub credential_env: Option<String>,
    #[arg(long)]
    pub max_in_flight: Option<usize>,
    /// Recording file for the replay and record backends.
    #[arg(long)]
    pub recording: Option<PathBuf>,
    /// Fail on replay misses instead of delegating [default: true].
    #[arg(long)]
    pub replay_strict: Option<bool>,
    /// Synthetic backend: probability of corrupting a gold answer.
    #[arg(long)]
    pub noise: Option<f64>,

    #[arg(long)]
    pub temperature: Option<f64>,
    #[arg(long)]
    pub top_p: Option<f64>,
    #[arg(long)]
    pub top_k: Option<u32>,
    #[arg(long)]
    pub max_new_tokens: Option<u32>,
    #[arg(long)]
    pub do_sample: Option<bool>,
}

pub fn require<'a>(path: &'a Option<PathBuf>, flag: &str) -> Result<&'a Path, Failure> {
    existing(path.as_deref().ok_or_else(|| Failure::usage(format!("--{flag} is required")))?, flag)
}

/// `path` itself, if it exists; a usage error otherwise.
pub fn existing<'a>(path: &'a Path, flag: &str) -> Result<&'a Path, Failure> {
    if !path.exists() {
        return Err(Failure::usage(format!("--{flag} {}: no such file", path.display())));
    }
    Ok(path)
}

pub fn read_text(path: &Path) -> Result<String, Failure> {
    fs::read_to_string(path).map_err(|e| Failure::Data(anyhow::anyhow!("{}: {e}", path.display())))
}

pub fn load_task(path: &Path) -> Result<SyntheticTask, Failure> {
    SyntheticTask::from_json(&read_text(path)?)
        .map_err(|e| Failure::Data(anyhow::anyhow!("task manifest {}: {e}", path.display())))
}

pub fn load_triples(path: &Path) -> Result<PromptPool, Failure> {
    PromptPool::parse(&read_text(path)?).map_err(|e| Failure::Data(anyhow::anyhow!("{}: {e}", path.display())))
}

impl RunConfig {
    /// Layers flags over the `--config` file.
    pub fn resolve(self) -> Result<RunConfig, Failure> {
        let Some(path) = self.config.clone() else { return Ok(self) };
        let text = fs::read_to_string(&path).map_err(|e| Failure::usage(format!("config {}: {e}", path.display())))?;
        let mut base: Value =
            serde_json::from_str(&text).map_err(|e| Failure::usage(format!("config {}: {e}", path.display())))?;
        let Some(fields) = base.as_object_mut() else {
            return Err(Failure::usage(format!("config {}: expected a JSON object", path.display())));
        };
        let flags = serde_json::to_value(&self).expect("config serializes");
        for (key, value) in flags.as_object().expect("object") {
            if !value.is_null() {
                fields.insert(key.clone(), value.clone());
            }
        }
        let mut merged: RunConfig =
            serde_json::from_value(base).map_err(|e| Failure::usage(format!("config {}: {e}", path.display())))?;
        merged.config = Some(path);
        merged.print_config = self.print_config;
        Ok(merged)
    }

    pub fn profile(&self) -> Profile {
        self.profile.unwrap_or(Profile::Desk)
    }

    pub fn train_config(&self) -> Result<TrainConfig, Failure> {
        let mut c = self.profile().train_config();
        macro_rules! set {
            ($($src:ident => $($dst:ident).+),* $(,)?) => {
                $( if let Some(v) = self.$src.clone() { c.$($dst).+ = v; } )*
            };
        }
        set!(
            epochs => epochs,
            batch_size => batch_size,
            lr => lr,
            gamma => gamma,
            baseline_beta => baseline_beta,
            momentum => momentum,
            seed => seed,
            hidden => hidden,
            out => out,
            shots => env.shots,
            system_prompt => env.system_prompt,
            separator => env.separator,
            lambda => reward.lambda,
            alpha => reward.alpha,
            reward_mode => reward.mode,
            threshold => reward.threshold,
            temperature => generation.temperature,
            top_p => generation.top_p,
            top_k => generation.top_k,
            max_new_tokens => generation.max_new_tokens,
            do_sample => generation.do_sample,
        );
        c.validate()?;
        Ok(c)
    }

    fn endpoint(&self) -> EndpointConfig {
        let mut e = EndpointConfig::default();
        if let Some(v) = &self.url {
            e.url = v.clone();
        }
        if let Some(v) = &self.model {
            e.model = v.clone();
        }
        if let Some(v) = &self.credential_env {
            e.credential_env = v.clone();
        }
        e.timeout_s = self.timeout_s.unwrap_or(e.timeout_s);
        e.retries = self.retries.unwrap_or(e.retries);
        e.max_in_flight = self.max_in_flight.unwrap_or(e.max_in_flight);
        e
    }

    fn synthetic(&self, cfg: &TrainConfig) -> Result<SyntheticBackend, Failure> {
        let task = load_task(require(&self.task, "task")?)?;
        let noise = self.noise.unwrap_or(0.0);
        if !(0.0..=1.0).contains(&noise) {
            return Err(Failure::usage(format!("--noise must be in [0, 1], got {noise}")));
        }
        Ok(SyntheticBackend::new(task, cfg.seed)
            .with_template(cfg.env.system_prompt.clone(), cfg.env.separator.clone())
            .with_noise(noise))
    }

    /// Backend that record mode and non-strict replay delegate to.
    fn inner(&self, cfg: &TrainConfig) -> Result<Box<dyn Backend>, Failure> {
        if self.task.is_some() {
            Ok(Box::new(self.synthetic(cfg)?))
        } else if self.url.is_some() {
            Ok(Box::new(HttpBackend::new(self.endpoint())?))
        } else {
            Err(Failure::usage("record and non-strict replay need --task or --url to delegate to"))
        }
    }

    pub fn backend(&self, cfg: &TrainConfig) -> Result<Box<dyn Backend>, Failure> {
        Ok(match self.backend.unwrap_or(BackendKind::Synthetic) {
            BackendKind::Synthetic => Box::new(self.synthetic(cfg)?),
            BackendKind::Http => Box::new(HttpBackend::new(self.endpoint())?),
            BackendKind::Replay => {
                let path = require(&self.recording, "recording")?;
                let strict = self.replay_strict.unwrap_or(true);
                let inner = if strict { None } else { Some(self.inner(cfg)?) };
                Box::new(ReplayBackend::replay(path, strict, inner)?)
            }
            BackendKind::Record => {
                let path = self.recording.as_deref().ok_or_else(|| Failure::usage("--recording is required"))?;
                Box::new(ReplayBackend::record(path, self.inner(cfg)?)?)
            }
        })
    }
}

/// Pool, embeddings, encoder and (optionally) queries for one run.
pub struct Corpus {
    pub pool: PromptPool,
    pub set: EmbeddingSet,
    pub encoder: Box<dyn Encoder>,
    pub queries: Vec<PromptTriple>,
}

impl Corpus {
    /// `queries` is the query file, if the command reads one.
    pub fn load(
        pool: &Path,
        queries: Option<&Path>,
        embeddings: Option<&Path>,
        query_embeddings: Option<&Path>,
        dim: usize,
    ) -> Result<Self, Failure> {
        let pool = load_triples(pool)?;
        let queries = match queries {
            Some(path) => load_triples(path)?.entries().to_vec(),
            None => Vec::new(),
        };
        let data = |path: &Path, e: promptmatch_core::Error| Failure::Data(anyhow::anyhow!("{}: {e}", path.display()));
        let (set, encoder): (EmbeddingSet, Box<dyn Encoder>) = match embeddings {
            Some(path) => {
                let set = promptmatch_core::corpus::load_embeddings(path, Some(pool.len())).map_err(|e| data(path, e))?;
                let mut encoder = LookupEncoder::new(set.dim())?.with_pool(&pool, &set)?;
                match query_embeddings {
                    Some(qpath) => {
                        let rows = promptmatch_core::corpus::load_embeddings(qpath, Some(queries.len()))
                            .map_err(|e| data(qpath, e))?;
                        for (q, v) in queries.iter().zip(rows.vectors()) {
                            encoder.insert(query_text(&q.question, &q.context), v.clone())?;
                        }
                    }
                    None if !queries.is_empty() => {
                        return Err(Failure::usage("--embeddings with a query file also needs --query-embeddings"));
                    }
                    None => {}
                }
                (set, Box::new(encoder))
            }
            None => {
                let encoder = HashNgramEncoder::new(dim)?;
                (promptmatch_core::encode_pool(&pool, &encoder)?, Box::new(encoder))
            }
        };
        Ok(Self { pool, set, encoder, queries })
    }

    pub fn env(&self, cfg: &EnvConfig) -> Result<Environment<'_>, Failure> {
        Ok(Environment::new(&self.pool, &self.set, self.encoder.as_ref(), cfg.clone())?)
    }
}

impl RunConfig {
    pub fn corpus(&self, with_queries: bool) -> Result<Corpus, Failure> {
        let pool = require(&self.pool, "pool")?;
        let queries = if with_queries { Some(require(&self.queries, "queries")?) } else { None };
        let embeddings = match &self.embeddings {
            Some(_) => Some(require(&self.embeddings, "embeddings")?),
            None => None,
        };
        let query_embeddings = match &self.query_embeddings {
            Some(_) => Some(require(&self.query_embeddings, "query-embeddings")?),
            None => None,
        };
        let dim = self.dim.unwrap_or_else(|| self.profile().embedding_dim());
        Corpus::load(pool, queries, embeddings, query_embeddings, dim)
    }
}
