use std::collections::HashMap;
use std::fs;
use std::path::{Path, PathBuf};

use anyhow::anyhow;
use clap::Args;
use promptmatch_core::backend::generate_synthetic_task;
use promptmatch_core::corpus::parse_pool_record;
use promptmatch_core::environment::{compose_with_selection, query_text, DEFAULT_SEPARATOR};
use promptmatch_core::trainer::{policy_select, write_log};
use promptmatch_core::{
    evaluate, EnvConfig, EvalRequest, MatchingNet, PromptTriple, SelectionLabels, Selector,
};

use crate::config::{existing, load_task, read_text, require, Corpus, RunConfig};
use crate::Failure;

fn io_failure(path: &Path, e: impl std::fmt::Display) -> Failure {
    Failure::Runtime(anyhow!("{}: {e}", path.display()))
}

fn load_policy(path: &Path) -> Result<MatchingNet, Failure> {
    MatchingNet::load_checkpoint(path).map_err(|e| Failure::Data(anyhow!("{}: {e}", path.display())))
}

pub fn pool_validate(path: &Path) -> Result<(), Failure> {
    if !path.exists() {
        return Err(Failure::usage(format!("{}: no such file", path.display())));
    }
    let text = read_text(path)?;
    let mut n = 0;
    let mut errors = 0;
    let mut seen: HashMap<String, usize> = HashMap::new();
    for (idx, line) in text.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let line_no = idx + 1;
        match parse_pool_record(line) {
            Ok(t) => {
                n += 1;
                if let Some(first) = seen.get(&t.question) {
                    eprintln!("warning: line {line_no}: duplicate question (first on line {first})");
                } else {
                    seen.insert(t.question, line_no);
                }
            }
            Err(e) => {
                errors += 1;
                eprintln!("line {line_no}: {e}");
            }
        }
    }
    if errors > 0 {
        return Err(Failure::Data(anyhow!("{}: {errors} invalid record(s)", path.display())));
    }
    if n == 0 {
        return Err(Failure::Data(anyhow!("{}: pool is empty", path.display())));
    }
    println!("ok n={n}");
    Ok(())
}

#[derive(Args)]
pub struct SynthArgs {
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    /// Number of clusters C.
    #[arg(long, default_value_t = 4)]
    pub clusters: usize,
    #[arg(long, default_value_t = 40)]
    pub pool_size: usize,
    /// Total queries, split 9:2 into train and test.
    #[arg(long, default_value_t = 1100)]
    pub queries: usize,
    /// Probability that a query's wording comes from a wrong cluster.
    #[arg(long, default_value_t = 0.5)]
    pub rho: f64,
    /// Output directory (created if missing).
    #[arg(long)]
    pub out: PathBuf,
}

fn records(triples: &[PromptTriple]) -> String {
    triples.iter().map(|t| t.to_record() + "\n").collect()
}

pub fn synth(args: &SynthArgs) -> Result<(), Failure> {
    if !(0.0..=1.0).contains(&args.rho) {
        return Err(Failure::usage(format!("--rho must be in [0, 1], got {}", args.rho)));
    }
    if args.queries < 2 {
        return Err(Failure::usage("--queries must be at least 2 to fill both splits"));
    }
    let task = generate_synthetic_task(args.seed, args.clusters, args.pool_size, args.queries, args.rho)?;
    let n_train = ((args.queries * 9 + 5) / 11).clamp(1, args.queries - 1);
    let out = &args.out;
    fs::create_dir_all(out).map_err(|e| io_failure(out, e))?;
    let write = |name: &str, text: String| {
        let path = out.join(name);
        fs::write(&path, text).map_err(|e| io_failure(&path, e))
    };
    write("pool.jsonl", task.prompt_pool().to_records())?;
    write("train.jsonl", records(&task.query_triples(0..n_train)))?;
    write("test.jsonl", records(&task.query_triples(n_train..args.queries)))?;
    write("task.json", task.to_json() + "\n")?;
    println!(
        "wrote {}: pool={} train={} test={} clusters={} rho={}",
        out.display(),
        args.pool_size,
        n_train,
        args.queries - n_train,
        args.clusters,
        args.rho
    );
    Ok(())
}

pub fn train(run: RunConfig) -> Result<(), Failure> {
    let run = run.resolve()?;
    let cfg = run.train_config()?;
    if run.print_config {
        println!("{}", serde_json::to_string_pretty(&cfg).expect("config serializes"));
        return Ok(());
    }
    let checkpoint = run.checkpoint.clone().ok_or_else(|| Failure::usage("--checkpoint is required"))?;
    let corpus = run.corpus(true)?;
    if corpus.queries.is_empty() {
        return Err(Failure::Data(anyhow!("query file is empty")));
    }
    let backend = run.backend(&cfg)?;
    let env = corpus.env(&cfg.env)?;
    let outcome = promptmatch_core::train(&cfg, &env, &corpus.queries, backend.as_ref())?;
    outcome.params.save_checkpoint(&checkpoint).map_err(|e| io_failure(&checkpoint, e))?;
    if let Some(log) = &run.log {
        write_log(log, &outcome.log).map_err(|e| io_failure(log, e))?;
    }
    let last = outcome.log.last().expect("at least one batch");
    println!(
        "trained {} epochs ({} updates); last batch mean reward {:.4}, baseline {:.4}; checkpoint {}",
        cfg.epochs,
        outcome.log.len(),
        last.mean_reward,
        outcome.baseline,
        checkpoint.display()
    );
    Ok(())
}

pub fn eval(run: RunConfig) -> Result<(), Failure> {
    let run = run.resolve()?;
    let cfg = run.train_config()?;
    let selector = run.selector.unwrap_or(Selector::PolicyGreedy);
    let policy = match (selector.needs_policy(), &run.checkpoint) {
        (true, None) => return Err(Failure::usage(format!("selector {} needs --checkpoint", selector.name()))),
        (true, Some(_)) => Some(load_policy(require(&run.checkpoint, "checkpoint")?)?),
        (false, _) => None,
    };
    let corpus = run.corpus(true)?;
    let labels = match &run.task {
        Some(path) => {
            let task = load_task(path)?;
            Some(SelectionLabels::from_task(&task, &corpus.queries).map_err(|e| Failure::Data(e.into()))?)
        }
        None => None,
    };
    let backend = run.backend(&cfg)?;
    let env = corpus.env(&cfg.env)?;
    let req = EvalRequest {
        selector,
        policy: policy.as_ref(),
        labels: labels.as_ref(),
        reward: &cfg.reward,
        generation: &cfg.generation,
        seed: cfg.seed,
    };
    let metrics = evaluate(&req, &env, &corpus.queries, backend.as_ref())?;
    let json = serde_json::to_string_pretty(&metrics).expect("metrics serialize");
    println!("{json}");
    if let Some(path) = &run.metrics {
        fs::write(path, json + "\n").map_err(|e| io_failure(path, e))?;
    }
    if metrics.n == 0 && metrics.backend_failures > 0 {
        return Err(Failure::Runtime(anyhow!("every backend call failed ({})", metrics.backend_failures)));
    }
    Ok(())
}

#[derive(Args)]
pub struct MatchArgs {
    #[arg(long)]
    pub checkpoint: PathBuf,
    #[arg(long)]
    pub pool: PathBuf,
    #[arg(long)]
    pub query: String,
    #[arg(long, default_value = "")]
    pub context: String,
    /// Number of exemplars m.
    #[arg(long, default_value_t = 1)]
    pub shots: usize,
    /// Precomputed pool embeddings; needs --query-embeddings with one row.
    #[arg(long)]
    pub embeddings: Option<PathBuf>,
    #[arg(long)]
    pub query_embeddings: Option<PathBuf>,
    #[arg(long, default_value = "")]
    pub system_prompt: String,
    #[arg(long, default_value = DEFAULT_SEPARATOR)]
    pub separator: String,
}

pub fn match_query(args: MatchArgs) -> Result<(), Failure> {
    let net = load_policy(existing(&args.checkpoint, "checkpoint")?)?;
    let pool_path = existing(&args.pool, "pool")?;
    let text = query_text(&args.query, &args.context);
    let corpus = match &args.embeddings {
        Some(path) => {
            let qpath = args
                .query_embeddings
                .as_deref()
                .ok_or_else(|| Failure::usage("--embeddings also needs --query-embeddings"))?;
            let mut corpus = Corpus::load(pool_path, None, Some(path), None, net.embedding_dim())?;
            let rows = promptmatch_core::corpus::load_embeddings(qpath, Some(1))
                .map_err(|e| Failure::Data(anyhow!("{}: {e}", qpath.display())))?;
            let mut encoder = promptmatch_core::LookupEncoder::new(rows.dim())?.with_pool(&corpus.pool, &corpus.set)?;
            encoder.insert(text.clone(), rows.vectors()[0].clone())?;
            corpus.encoder = Box::new(encoder);
            corpus
        }
        None => Corpus::load(pool_path, None, None, None, net.embedding_dim())?,
    };
    if args.shots == 0 || args.shots > corpus.pool.len() {
        return Err(Failure::usage(format!("--shots must be in 1..={}, got {}", corpus.pool.len(), args.shots)));
    }
    if corpus.set.dim() != net.embedding_dim() {
        return Err(Failure::Data(anyhow!(
            "checkpoint expects {}-dim embeddings, pool has {}",
            net.embedding_dim(),
            corpus.set.dim()
        )));
    }
    let env_cfg = EnvConfig { shots: args.shots, system_prompt: args.system_prompt, separator: args.separator };
    let env = corpus.env(&env_cfg)?;
    let g = corpus.encoder.encode(&text)?;
    let cache = net.key_cache(&corpus.set)?;
    let selected = policy_select(&net, &cache, &env, &text, &g, None)?;
    println!("selected:");
    for &i in &selected {
        let e = corpus.pool.get(i).expect("selected index is in the pool");
        println!("  [{i}] {} => {}", e.question_block().replace('\n', " / "), e.answer);
    }
    println!();
    println!("{}", compose_with_selection(&selected, &corpus.pool, &text, &env_cfg)?);
    Ok(())
}

#[derive(Args)]
pub struct SmokeArgs {
    #[command(flatten)]
    pub run: RunConfig,
    /// Input text to send; defaults to a one-shot prompt built from the task.
    #[arg(long)]
    pub input: Option<String>,
}

pub fn smoke(args: SmokeArgs) -> Result<(), Failure> {
    let run = args.run.resolve()?;
    let cfg = run.train_config()?;
    let input = match (args.input, &run.task) {
        (Some(text), _) => text,
        (None, Some(path)) => {
            let task = load_task(path)?;
            let query = task.queries.first().ok_or_else(|| Failure::Data(anyhow!("task has no queries")))?;
            let own = (0..task.pool.len()).find(|&i| task.pool_cluster(i) == query.cluster).unwrap_or(0);
            compose_with_selection(&[own], &task.prompt_pool(), &query.question, &cfg.env)?
        }
        (None, None) => return Err(Failure::usage("--input is required without --task")),
    };
    let backend = run.backend(&cfg)?;
    let response = backend.respond(&input, &cfg.generation)?;
    println!("{response}");
    Ok(())
}
