//! Acceptance suite. Prints one line per criterion and exits non-zero if a
//! hard criterion fails. Criterion 7 is soft: its failure is reported only.

use std::collections::{HashMap, HashSet};
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::time::{Duration, Instant};

use promptmatch_core::backend::generate_synthetic_task;
use promptmatch_core::environment::{parse_llm_input, state_representation};
use promptmatch_core::reward::{levenshtein, reward, textual_similarity};
use promptmatch_core::trainer::{log_csv, policy_select, rollout};
use promptmatch_core::*;
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

// Pinned tolerances and budgets.
const FD_EPS: f64 = 1e-4;
const FD_REL_TOL: f64 = 1e-4;
const KINK_MARGIN: f64 = 1e-3;
const SCORE_IDENTITY_TOL: f64 = 1e-6;
const FD_INSTANCES: usize = 120;
const EPISODES: usize = 1000;
const LEARN_ACCURACY: f64 = 0.9;
const LEARN_BUDGET: Duration = Duration::from_secs(60);
const ABLATION_BUDGET: Duration = Duration::from_secs(300);

const CLUSTERS: usize = 4;
const POOL: usize = 40;
const TRAIN_QUERIES: usize = 900;
const TEST_QUERIES: usize = 200;
const DIM: usize = 32;

struct Fixture {
    task: SyntheticTask,
    pool: PromptPool,
    set: EmbeddingSet,
    encoder: HashNgramEncoder,
    train: Vec<PromptTriple>,
    test: Vec<PromptTriple>,
}

impl Fixture {
    fn new(seed: u64, rho: f64) -> Self {
        let task = generate_synthetic_task(seed, CLUSTERS, POOL, TRAIN_QUERIES + TEST_QUERIES, rho).unwrap();
        let pool = task.prompt_pool();
        let encoder = HashNgramEncoder::new(DIM).unwrap();
        let set = encode_pool(&pool, &encoder).unwrap();
        let train = task.query_triples(0..TRAIN_QUERIES);
        let test = task.query_triples(TRAIN_QUERIES..TRAIN_QUERIES + TEST_QUERIES);
        Self { task, pool, set, encoder, train, test }
    }

    fn env(&self, shots: usize) -> Environment<'_> {
        Environment::new(&self.pool, &self.set, &self.encoder, EnvConfig { shots, ..Default::default() }).unwrap()
    }

    fn backend(&self) -> SyntheticBackend {
        SyntheticBackend::new(self.task.clone(), 0)
    }

    fn eval(&self, shots: usize, selector: Selector, policy: Option<&MatchingNet>, seed: u64) -> Metrics {
        let labels = SelectionLabels::from_task(&self.task, &self.test).unwrap();
        let req = EvalRequest {
            selector,
            policy,
            labels: Some(&labels),
            reward: &RewardConfig::default(),
            generation: &GenerationParams::default(),
            seed,
        };
        evaluate(&req, &self.env(shots), &self.test, &self.backend()).unwrap()
    }
}

type Verdict = Result<String, String>;

fn check(cond: bool, detail: String) -> Verdict {
    if cond {
        Ok(detail)
    } else {
        Err(detail)
    }
}

// ---------------------------------------------------------------- 1

fn random_unit(rng: &mut ChaCha8Rng, d: usize) -> EmbeddingVector {
    let v: Vec<f64> = (0..d).map(|_| rng.random_range(-1.0..1.0)).collect();
    EmbeddingVector::normalized(v).unwrap()
}

fn near_kink(mlp: &Mlp, x: &[f64]) -> bool {
    (0..mlp.hidden).any(|j| {
        let z: f64 = mlp.b1[j] + (0..mlp.input).map(|i| mlp.w1[j * mlp.input + i] * x[i]).sum::<f64>();
        z.abs() < KINK_MARGIN
    })
}

fn log_prob(net: &MatchingNet, set: &EmbeddingSet, l: &[f64], mask: &[usize], a: usize) -> f64 {
    net.forward(set, l, mask).unwrap().log_prob(a)
}

fn norm(v: &[f64]) -> f64 {
    v.iter().map(|x| x * x).sum::<f64>().sqrt()
}

fn gradient_correctness() -> Verdict {
    let mut rng = ChaCha8Rng::seed_from_u64(0x6ead);
    let (mut checked, mut skipped, mut worst, mut worst_identity) = (0, 0, 0.0f64, 0.0f64);
    let mut attempt = 0u64;
    while checked < FD_INSTANCES {
        attempt += 1;
        let d = rng.random_range(2..=8);
        let hidden = rng.random_range(2..=16);
        let out = rng.random_range(2..=8);
        let n = rng.random_range(2..=6);
        let mut net = MatchingNet::init(attempt, d, hidden, out).unwrap();
        // larger weights than init so the distribution is far from uniform
        for p in net.params_mut() {
            *p *= 3.0;
        }
        let set = EmbeddingSet::new((0..n).map(|_| random_unit(&mut rng, d)).collect()).unwrap();
        let k = rng.random_range(0..n);
        let mut mask: Vec<usize> = (0..n).collect();
        mask.shuffle(&mut rng);
        mask.truncate(k);
        let state = mask.iter().fold(EpisodeState::initial(k.max(1)), |s, &i| s.step(i, n).unwrap());
        let g = random_unit(&mut rng, d);
        let l = state_representation(&state, &g, &set).unwrap();
        let free: Vec<usize> = (0..n).filter(|i| !mask.contains(i)).collect();
        let action = free[rng.random_range(0..free.len())];

        if near_kink(&net.query, &l) || set.vectors().iter().any(|f| near_kink(&net.keys, f.as_slice())) {
            skipped += 1;
            continue;
        }

        let analytic: Vec<f64> = net.grad_log_prob(&set, &l, &mask, action).unwrap().params().copied().collect();
        let mut numeric = Vec::with_capacity(analytic.len());
        for idx in 0..net.num_params() {
            let mut plus = net.clone();
            *plus.params_mut().nth(idx).unwrap() += FD_EPS;
            let mut minus = net.clone();
            *minus.params_mut().nth(idx).unwrap() -= FD_EPS;
            numeric.push(
                (log_prob(&plus, &set, &l, &mask, action) - log_prob(&minus, &set, &l, &mask, action)) / (2.0 * FD_EPS),
            );
        }
        let diff: Vec<f64> = analytic.iter().zip(&numeric).map(|(a, b)| a - b).collect();
        let denom = norm(&analytic).max(norm(&numeric)).max(1e-12);
        worst = worst.max(norm(&diff) / denom);

        // sum_a pi(a) grad log pi(a) = 0
        let dist = net.forward(&set, &l, &mask).unwrap();
        let mut total = net.zero_gradient();
        for &a in &free {
            total.add_scaled(&net.grad_log_prob(&set, &l, &mask, a).unwrap(), dist.probs()[a]);
        }
        worst_identity = worst_identity.max(total.norm());
        checked += 1;
    }
    check(
        worst <= FD_REL_TOL && worst_identity <= SCORE_IDENTITY_TOL,
        format!(
            "{checked} instances ({skipped} near a ReLU kink skipped), worst rel err {worst:.2e}, worst |sum pi grad log pi| {worst_identity:.2e}"
        ),
    )
}

// ---------------------------------------------------------------- 2

fn naive_levenshtein(a: &[u8], b: &[u8], memo: &mut HashMap<(usize, usize), usize>) -> usize {
    if a.is_empty() {
        return b.len();
    }
    if b.is_empty() {
        return a.len();
    }
    if let Some(&v) = memo.get(&(a.len(), b.len())) {
        return v;
    }
    let v = if a[0] == b[0] {
        naive_levenshtein(&a[1..], &b[1..], memo)
    } else {
        1 + naive_levenshtein(&a[1..], b, memo)
            .min(naive_levenshtein(a, &b[1..], memo))
            .min(naive_levenshtein(&a[1..], &b[1..], memo))
    };
    memo.insert((a.len(), b.len()), v);
    v
}

fn all_strings(max_len: usize) -> Vec<String> {
    let mut out = vec![String::new()];
    let mut frontier = vec![String::new()];
    for _ in 0..max_len {
        frontier = frontier.iter().flat_map(|s| [format!("{s}a"), format!("{s}b")]).collect();
        out.extend(frontier.iter().cloned());
    }
    out
}

fn reward_formulas() -> Verdict {
    let continuous = RewardConfig::default();
    let discrete = RewardConfig { mode: RewardMode::Discrete, ..continuous };
    let mut failures = Vec::new();
    for k in 0..=10 {
        let zeta = k as f64 / 10.0;
        let c = reward(zeta, &continuous);
        let d = reward(zeta, &discrete);
        let expect_d = if k >= 6 { 10.0 * zeta } else { 0.0 };
        if (c - 10.0 * zeta).abs() > 1e-12 || (d - expect_d).abs() > 1e-12 {
            failures.push(format!("zeta={zeta}: continuous {c}, discrete {d}"));
        }
    }
    if reward(0.6 - 1e-12, &discrete) != 0.0 {
        failures.push("discrete reward just below the cutoff is non-zero".into());
    }

    let strings = all_strings(6);
    let mut pairs = 0;
    for a in &strings {
        for b in &strings {
            let expected = naive_levenshtein(a.as_bytes(), b.as_bytes(), &mut HashMap::new());
            let sim = if a.is_empty() && b.is_empty() { 1.0 } else { 1.0 - expected as f64 / a.len().max(b.len()) as f64 };
            if levenshtein(a, b) != expected || (textual_similarity(a, b) - sim).abs() > 1e-12 {
                failures.push(format!("{a:?} vs {b:?}"));
            }
            pairs += 1;
        }
    }
    check(failures.is_empty(), format!("11 grid points, {pairs} string pairs; failures: {failures:?}"))
}

// ---------------------------------------------------------------- 3

fn expected_text(system: &str, sep: &str, exemplars: &[&PromptTriple], query: &str) -> String {
    let mut blocks: Vec<String> = Vec::new();
    if !system.is_empty() {
        blocks.push(system.to_string());
    }
    for e in exemplars {
        let q = if e.context.is_empty() { e.question.clone() } else { format!("{}\n{}", e.question, e.context) };
        blocks.extend([q, sep.to_string(), e.answer.clone(), sep.to_string()]);
    }
    blocks.extend([query.to_string(), sep.to_string()]);
    blocks.join("\n\n")
}

fn word(rng: &mut ChaCha8Rng) -> String {
    let len = rng.random_range(1..=7);
    (0..len).map(|_| rng.random_range(b'a'..=b'z') as char).collect()
}

fn mdp_contract() -> Verdict {
    let mut rng = ChaCha8Rng::seed_from_u64(0x3d9);
    let encoder = HashNgramEncoder::new(16).unwrap();
    let mut problems = Vec::new();
    for ep in 0..EPISODES {
        let n = rng.random_range(1..=12);
        let triples: Vec<PromptTriple> = (0..n)
            .map(|i| PromptTriple {
                id: i,
                question: format!("{} {}", word(&mut rng), word(&mut rng)),
                context: if rng.random_bool(0.3) { word(&mut rng) } else { String::new() },
                answer: word(&mut rng),
            })
            .collect();
        let pool = PromptPool::new(triples).unwrap();
        let set = encode_pool(&pool, &encoder).unwrap();
        let shots = rng.random_range(1..=n.min(4));
        let system = if rng.random_bool(0.5) { String::new() } else { format!("{} {}", word(&mut rng), word(&mut rng)) };
        let separator = if rng.random_bool(0.5) { "###".to_string() } else { "---".to_string() };
        let cfg = EnvConfig { shots, system_prompt: system.clone(), separator: separator.clone() };
        let env = Environment::new(&pool, &set, &encoder, cfg).unwrap();
        let query = word(&mut rng);
        let mut episode = env.reset(&query).unwrap();
        let mut steps = 0;
        while !episode.state.is_terminal() {
            if env.compose(&episode).is_ok() {
                problems.push(format!("episode {ep}: non-terminal state composed"));
            }
            let selected = episode.state.selected();
            if let Some(&dup) = selected.first() {
                if env.step(&episode.state, dup).is_ok() {
                    problems.push(format!("episode {ep}: repeated action accepted"));
                }
            }
            if env.step(&episode.state, n).is_ok() {
                problems.push(format!("episode {ep}: out-of-range action accepted"));
            }
            let free: Vec<usize> = (0..n).filter(|i| !selected.contains(i)).collect();
            let action = free[rng.random_range(0..free.len())];
            episode.state = env.step(&episode.state, action).unwrap();
            steps += 1;
            let idx = episode.state.indices();
            let distinct: HashSet<i64> = idx[1..].iter().copied().collect();
            if idx[0] != -1 || idx.len() != episode.state.t() + 1 || distinct.len() != idx.len() - 1 {
                problems.push(format!("episode {ep}: bad indices {idx:?}"));
            }
            if let Err(e) = episode.state.check_invariants(n) {
                problems.push(format!("episode {ep}: {e}"));
            }
        }
        if steps != shots || episode.state.t() != shots {
            problems.push(format!("episode {ep}: {steps} steps for m={shots}"));
        }
        if env.step(&episode.state, 0).is_ok() {
            problems.push(format!("episode {ep}: step after termination accepted"));
        }
        let text = env.compose(&episode).unwrap();
        let chosen: Vec<&PromptTriple> = episode.state.selected().iter().map(|&i| pool.get(i).unwrap()).collect();
        if text != expected_text(&system, &separator, &chosen, &query) {
            problems.push(format!("episode {ep}: template mismatch {text:?}"));
        }
        let parsed = parse_llm_input(&text, &system, &separator).unwrap();
        if parsed.exemplars.len() != shots || parsed.query != query || !text.ends_with(&separator) {
            problems.push(format!("episode {ep}: parsed {} exemplars", parsed.exemplars.len()));
        }
        if problems.len() > 5 {
            break;
        }
    }
    check(problems.is_empty(), format!("{EPISODES} episodes; problems: {problems:?}"))
}

// ---------------------------------------------------------------- 4

fn learnability() -> Verdict {
    let started = Instant::now();
    let fx = Fixture::new(0, 0.0);
    let cfg = Profile::Desk.train_config();
    let out = train(&cfg, &fx.env(1), &fx.train, &fx.backend()).unwrap();
    let elapsed = started.elapsed();
    let policy = fx.eval(1, Selector::PolicyGreedy, Some(&out.params), 0);
    let random = fx.eval(1, Selector::Random, None, 0);
    let acc = policy.selection_accuracy.unwrap();
    let racc = random.selection_accuracy.unwrap();
    let p = 1.0 / CLUSTERS as f64;
    let sigma = (p * (1.0 - p) / TEST_QUERIES as f64).sqrt();
    check(
        acc >= LEARN_ACCURACY && (racc - p).abs() <= 3.0 * sigma && elapsed < LEARN_BUDGET,
        format!(
            "greedy accuracy {acc:.3} after {} epochs, random {racc:.3} (3 sigma = {:.3}), {:.1}s",
            cfg.epochs,
            3.0 * sigma,
            elapsed.as_secs_f64()
        ),
    )
}

// ---------------------------------------------------------------- 5

fn ablation_ordering() -> Verdict {
    let started = Instant::now();
    let (mut pol, mut sim, mut rnd) = (Vec::new(), Vec::new(), Vec::new());
    for seed in 0..5 {
        let fx = Fixture::new(seed, 0.5);
        let cfg = TrainConfig { seed, ..Profile::Desk.train_config() };
        let out = train(&cfg, &fx.env(1), &fx.train, &fx.backend()).unwrap();
        pol.push(fx.eval(1, Selector::PolicyGreedy, Some(&out.params), seed).mean_reward);
        sim.push(fx.eval(1, Selector::Simmatch, None, seed).mean_reward);
        rnd.push(fx.eval(1, Selector::Random, None, seed).mean_reward);
    }
    let mean = |v: &[f64]| v.iter().sum::<f64>() / v.len() as f64;
    let (p, s, r) = (mean(&pol), mean(&sim), mean(&rnd));
    let elapsed = started.elapsed();
    let per_seed: Vec<String> = pol.iter().zip(&sim).map(|(a, b)| format!("{a:.2}/{b:.2}")).collect();
    check(
        p > s && p > r && elapsed < ABLATION_BUDGET,
        format!(
            "mean test reward policy {p:.3}, simmatch {s:.3}, random {r:.3}; per seed policy/simmatch {per_seed:?}; {:.1}s",
            elapsed.as_secs_f64()
        ),
    )
}

// ---------------------------------------------------------------- 6

fn shots_behavior() -> Verdict {
    let fx = Fixture::new(11, 0.5);
    let backend = fx.backend();
    let single = rayon::ThreadPoolBuilder::new().num_threads(1).build().unwrap();
    let mut per_episode = Vec::new();
    let mut problems = Vec::new();
    for shots in 1..=3 {
        let env = fx.env(shots);
        let cfg = TrainConfig { epochs: 3, seed: 5, ..Profile::Desk.train_config() };
        let started = Instant::now();
        let out = single.install(|| train(&cfg, &env, &fx.train, &backend)).unwrap();
        per_episode.push(started.elapsed().as_secs_f64() / (cfg.epochs * fx.train.len()) as f64);

        let cache = out.params.key_cache(&fx.set).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(shots as u64);
        for q in fx.test.iter().take(50) {
            let traj = rollout(&out.params, &env, &backend, &cfg.reward, &q.question, &q.answer, 1.0, &mut rng).unwrap();
            if traj.steps.len() != shots || traj.final_state.check_invariants(POOL).is_err() {
                problems.push(format!("m={shots}: bad trajectory {:?}", traj.final_state));
            }
            let g = fx.encoder.encode(&q.question).unwrap();
            let chosen = policy_select(&out.params, &cache, &env, &q.question, &g, None).unwrap();
            let distinct: HashSet<usize> = chosen.iter().copied().collect();
            if chosen.len() != shots || distinct.len() != shots {
                problems.push(format!("m={shots}: greedy selection {chosen:?}"));
            }
        }
        let metrics = fx.eval(shots, Selector::PolicyGreedy, Some(&out.params), 0);
        if metrics.n != fx.test.len() || metrics.backend_failures != 0 {
            problems.push(format!("m={shots}: {metrics:?}"));
        }
    }
    let times: Vec<String> = per_episode.iter().map(|t| format!("{:.1}us", t * 1e6)).collect();
    check(
        problems.is_empty() && per_episode[2] > per_episode[0],
        format!("per-episode training time for m=1,2,3: {times:?}; problems: {problems:?}"),
    )
}

// ---------------------------------------------------------------- 7

fn variance(v: &[f64]) -> f64 {
    let mean = v.iter().sum::<f64>() / v.len() as f64;
    v.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / v.len() as f64
}

fn median(mut v: Vec<f64>) -> f64 {
    v.sort_by(f64::total_cmp);
    let n = v.len();
    if n % 2 == 1 {
        v[n / 2]
    } else {
        (v[n / 2 - 1] + v[n / 2]) / 2.0
    }
}

fn reward_type_stability() -> Verdict {
    let (mut cont, mut disc) = (Vec::new(), Vec::new());
    for seed in 0..10 {
        let fx = Fixture::new(100 + seed, 0.5);
        let env = fx.env(1);
        let backend = fx.backend();
        for (mode, sink) in [(RewardMode::Continuous, &mut cont), (RewardMode::Discrete, &mut disc)] {
            let mut cfg = TrainConfig { epochs: 50, seed, ..Profile::Desk.train_config() };
            cfg.reward.mode = mode;
            let out = train(&cfg, &env, &fx.train, &backend).unwrap();
            let norms: Vec<f64> = out.log.iter().map(|r| r.grad_norm).collect();
            sink.push(variance(&norms));
        }
    }
    let (c, d) = (median(cont), median(disc));
    check(d >= c, format!("median grad-norm variance discrete {d:.4e}, continuous {c:.4e} (10 seeds, 50 epochs)"))
}

// ---------------------------------------------------------------- 8

fn determinism() -> Verdict {
    let fx = Fixture::new(3, 0.5);
    let env = fx.env(2);
    let backend = fx.backend();
    let cfg = TrainConfig { epochs: 4, seed: 42, ..Profile::Desk.train_config() };
    let run = |threads: usize| {
        let pool = rayon::ThreadPoolBuilder::new().num_threads(threads).build().unwrap();
        let out = pool.install(|| train(&cfg, &env, &fx.train, &backend)).unwrap();
        (log_csv(&out.log).unwrap(), out.params.to_checkpoint_bytes(Precision::F64), out.params)
    };
    let (log_a, ckpt_a, net) = run(1);
    let (log_b, ckpt_b, _) = run(4);
    let (log_c, ckpt_c, _) = run(4);

    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("policy.ckpt");
    net.save_checkpoint(&path).unwrap();
    let loaded = MatchingNet::load_checkpoint(&path).unwrap();
    let bits = |n: &MatchingNet| n.params().map(|p| p.to_bits()).collect::<Vec<_>>();
    let round_trip = bits(&loaded) == bits(&net) && loaded.scale.to_bits() == net.scale.to_bits();
    let file_same = std::fs::read(&path).unwrap() == ckpt_a;

    check(
        log_a == log_b && log_b == log_c && ckpt_a == ckpt_b && ckpt_b == ckpt_c && round_trip && file_same,
        format!(
            "log {} bytes, checkpoint {} bytes; identical across runs and thread counts: {}, round-trip bit-exact: {round_trip}",
            log_a.len(),
            ckpt_a.len(),
            log_a == log_b && log_b == log_c && ckpt_a == ckpt_b && ckpt_b == ckpt_c
        ),
    )
}

// ----------------------------------------------------------------

fn main() {
    let criteria: [(&str, fn() -> Verdict, bool); 8] = [
        ("gradient correctness", gradient_correctness, false),
        ("reward formulas", reward_formulas, false),
        ("MDP contract", mdp_contract, false),
        ("learnability", learnability, false),
        ("ablation ordering", ablation_ordering, false),
        ("shots behavior", shots_behavior, false),
        ("reward-type stability", reward_type_stability, true),
        ("determinism and persistence", determinism, false),
    ];
    let only: Vec<usize> = std::env::args().skip(1).filter_map(|a| a.parse().ok()).collect();
    let mut hard_failures = 0;
    for (i, (name, f, soft)) in criteria.iter().enumerate() {
        let n = i + 1;
        if !only.is_empty() && !only.contains(&n) {
            continue;
        }
        let started = Instant::now();
        let verdict = catch_unwind(AssertUnwindSafe(f)).unwrap_or_else(|e| {
            let msg = e.downcast_ref::<String>().cloned().or_else(|| e.downcast_ref::<&str>().map(|s| s.to_string()));
            Err(format!("panicked: {}", msg.unwrap_or_default()))
        });
        let secs = started.elapsed().as_secs_f64();
        match verdict {
            Ok(detail) => println!("criterion {n} [{name}]: PASS ({secs:.1}s) {detail}"),
            Err(detail) if *soft => println!("criterion {n} [{name}]: FAIL (soft, not fatal) ({secs:.1}s) {detail}"),
            Err(detail) => {
                hard_failures += 1;
                println!("criterion {n} [{name}]: FAIL ({secs:.1}s) {detail}");
            }
        }
    }
    if hard_failures > 0 {
        eprintln!("{hard_failures} acceptance criteria failed");
        std::process::exit(1);
    }
}
