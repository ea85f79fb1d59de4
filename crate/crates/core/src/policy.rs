//! Matching-network policy.
//!
//! Two one-hidden-layer ReLU MLPs: the key net maps each pool embedding
//! `f_i` (dim `d`) to a key `c_i`, the query net maps the state
//! representation `l` (dim `2d`) to a query `q`. Logits are
//! `scale * <q, c_i>`, masked entries are excluded, and a softmax gives the
//! action distribution.
//!
//! Gradients of `log pi(a | l)` are computed in closed form. Key activations
//! depend only on the parameters and the pool, so [`GradientAccumulator`]
//! sums the key adjoints over every step of a batch and back-propagates
//! through the key net once per pool entry.

use std::fs;
use std::io::Write as _;
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::corpus::EmbeddingSet;
use crate::error::{Error, Result};

/// Dense `in -> hidden -> out` network with a ReLU hidden layer.
///
/// Weight matrices are row-major: `w1` is `hidden x input`, `w2` is
/// `output x hidden`.
#[derive(Debug, Clone, PartialEq)]
pub struct Mlp {
    pub input: usize,
    pub hidden: usize,
    pub output: usize,
    pub w1: Vec<f64>,
    pub b1: Vec<f64>,
    pub w2: Vec<f64>,
    pub b2: Vec<f64>,
}

impl Mlp {
    pub fn zeros(input: usize, hidden: usize, output: usize) -> Self {
        Self {
            input,
            hidden,
            output,
            w1: vec![0.0; hidden * input],
            b1: vec![0.0; hidden],
            w2: vec![0.0; output * hidden],
            b2: vec![0.0; output],
        }
    }

    fn init(rng: &mut ChaCha8Rng, input: usize, hidden: usize, output: usize) -> Self {
        let mut mlp = Self::zeros(input, hidden, output);
        let r1 = 1.0 / (input as f64).sqrt();
        mlp.w1.iter_mut().for_each(|w| *w = rng.random_range(-r1..=r1));
        let r2 = 1.0 / (hidden as f64).sqrt();
        mlp.w2.iter_mut().for_each(|w| *w = rng.random_range(-r2..=r2));
        mlp
    }

    pub fn same_shape(&self, other: &Mlp) -> bool {
        (self.input, self.hidden, self.output) == (other.input, other.hidden, other.output)
    }

    /// `W2 . relu(W1 . x + b1) + b2`.
    pub fn forward(&self, x: &[f64]) -> Result<Vec<f64>> {
        if x.len() != self.input {
            return Err(Error::DimensionMismatch { expected: self.input, found: x.len() });
        }
        Ok(self.forward_cached(x).1)
    }

    /// Returns `(hidden activations, output)`. `x.len()` must equal `input`.
    fn forward_cached(&self, x: &[f64]) -> (Vec<f64>, Vec<f64>) {
        let hidden: Vec<f64> = self
            .w1
            .chunks_exact(self.input)
            .zip(&self.b1)
            .map(|(row, b)| (dot(row, x) + b).max(0.0))
            .collect();
        let out = self
            .w2
            .chunks_exact(self.hidden)
            .zip(&self.b2)
            .map(|(row, b)| dot(row, &hidden) + b)
            .collect();
        (hidden, out)
    }

    /// Accumulates into `grad` the parameter gradient for upstream `d_out`.
    fn backward(&self, x: &[f64], hidden: &[f64], d_out: &[f64], grad: &mut Mlp) {
        let mut d_hidden = vec![0.0; self.hidden];
        for (o, &g) in d_out.iter().enumerate() {
            if g == 0.0 {
                continue;
            }
            grad.b2[o] += g;
            let row = o * self.hidden;
            for j in 0..self.hidden {
                grad.w2[row + j] += g * hidden[j];
                d_hidden[j] += g * self.w2[row + j];
            }
        }
        for j in 0..self.hidden {
            if hidden[j] <= 0.0 || d_hidden[j] == 0.0 {
                continue;
            }
            let g = d_hidden[j];
            grad.b1[j] += g;
            let row = j * self.input;
            for (k, &xk) in x.iter().enumerate() {
                grad.w1[row + k] += g * xk;
            }
        }
    }

    fn tensors(&self) -> [&Vec<f64>; 4] {
        [&self.w1, &self.b1, &self.w2, &self.b2]
    }

    fn tensors_mut(&mut self) -> [&mut Vec<f64>; 4] {
        [&mut self.w1, &mut self.b1, &mut self.w2, &mut self.b2]
    }
}

/// Free-function form of [`Mlp::forward`].
pub fn mlp_forward(params: &Mlp, x: &[f64]) -> Result<Vec<f64>> {
    params.forward(x)
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

/// Parameters of the policy.
#[derive(Debug, Clone, PartialEq)]
pub struct MatchingNet {
    /// Key net, input dim `d`.
    pub keys: Mlp,
    /// Query net, input dim `2d`.
    pub query: Mlp,
    /// Logit scale, `1/sqrt(out)` at init.
    pub scale: f64,
}

/// Gradient with the same tensor shapes as [`MatchingNet`].
#[derive(Debug, Clone, PartialEq)]
pub struct Gradient {
    pub keys: Mlp,
    pub query: Mlp,
}

impl MatchingNet {
    /// Uniform `[-1/sqrt(fan_in), 1/sqrt(fan_in)]` weights, zero biases.
    pub fn init(seed: u64, dim: usize, hidden: usize, out: usize) -> Result<Self> {
        if dim == 0 || hidden == 0 || out == 0 {
            return Err(Error::Config(format!("network dims must be positive: d={dim} hidden={hidden} out={out}")));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let keys = Mlp::init(&mut rng, dim, hidden, out);
        let query = Mlp::init(&mut rng, 2 * dim, hidden, out);
        Ok(Self { keys, query, scale: 1.0 / (out as f64).sqrt() })
    }

    /// Embedding dimension `d` the network expects.
    pub fn embedding_dim(&self) -> usize {
        self.keys.input
    }

    fn validate(&self) -> Result<()> {
        let (k, q) = (&self.keys, &self.query);
        if k.output != q.output || q.input != 2 * k.input || k.hidden != q.hidden {
            return Err(Error::Checkpoint(format!(
                "inconsistent shapes: keys {}x{}x{}, query {}x{}x{}",
                k.input, k.hidden, k.output, q.input, q.hidden, q.output
            )));
        }
        if !(self.scale > 0.0 && self.scale.is_finite()) {
            return Err(Error::Checkpoint(format!("scale must be positive, got {}", self.scale)));
        }
        Ok(())
    }

    /// Key vectors (and hidden activations) for every pool embedding.
    pub fn key_cache(&self, set: &EmbeddingSet) -> Result<KeyCache> {
        if set.dim() != self.keys.input {
            return Err(Error::DimensionMismatch { expected: self.keys.input, found: set.dim() });
        }
        let (hidden, keys) = set.vectors().iter().map(|f| self.keys.forward_cached(f.as_slice())).unzip();
        Ok(KeyCache { hidden, keys })
    }

    /// Action distribution for state representation `l`; `mask` lists
    /// forbidden pool indices.
    pub fn forward(&self, set: &EmbeddingSet, l: &[f64], mask: &[usize]) -> Result<ActionDistribution> {
        self.forward_with(&self.key_cache(set)?, l, mask)
    }

    pub fn forward_with(&self, cache: &KeyCache, l: &[f64], mask: &[usize]) -> Result<ActionDistribution> {
        Ok(self.query_pass(cache, l, mask)?.1)
    }

    fn query_pass(&self, cache: &KeyCache, l: &[f64], mask: &[usize]) -> Result<(QueryPass, ActionDistribution)> {
        if l.len() != self.query.input {
            return Err(Error::DimensionMismatch { expected: self.query.input, found: l.len() });
        }
        let n = cache.keys.len();
        let mut masked = vec![false; n];
        for &i in mask {
            if i >= n {
                return Err(Error::InvalidAction { action: i, reason: "mask index out of range" });
            }
            masked[i] = true;
        }
        let (hidden, q) = self.query.forward_cached(l);
        let logits: Vec<f64> = cache
            .keys
            .iter()
            .zip(&masked)
            .map(|(c, &m)| if m { f64::NEG_INFINITY } else { self.scale * dot(&q, c) })
            .collect();
        let dist = ActionDistribution::from_logits(logits, masked)?;
        Ok((QueryPass { hidden, q }, dist))
    }

    /// Exact `grad_theta log pi(action | l)`.
    pub fn grad_log_prob(&self, set: &EmbeddingSet, l: &[f64], mask: &[usize], action: usize) -> Result<Gradient> {
        let cache = self.key_cache(set)?;
        let mut acc = GradientAccumulator::new(self, set, &cache)?;
        acc.add(l, mask, action, 1.0)?;
        Ok(acc.finish())
    }

    pub fn zero_gradient(&self) -> Gradient {
        Gradient {
            keys: Mlp::zeros(self.keys.input, self.keys.hidden, self.keys.output),
            query: Mlp::zeros(self.query.input, self.query.hidden, self.query.output),
        }
    }

    /// `theta + lr * g` (gradient ascent).
    pub fn apply_update(&self, grad: &Gradient, lr: f64) -> Result<MatchingNet> {
        if !self.keys.same_shape(&grad.keys) || !self.query.same_shape(&grad.query) {
            return Err(Error::DimensionMismatch { expected: self.num_params(), found: grad.num_params() });
        }
        if !grad.is_finite() {
            return Err(Error::NonFinite("gradient".into()));
        }
        let mut next = self.clone();
        for (p, g) in next.params_mut().zip(grad.params()) {
            *p += lr * g;
        }
        Ok(next)
    }

    /// All weights in checkpoint order: keys (W1, b1, W2, b2), then query.
    pub fn params(&self) -> impl Iterator<Item = &f64> + '_ {
        self.keys.tensors().into_iter().chain(self.query.tensors()).flat_map(|t| t.iter())
    }

    pub fn params_mut(&mut self) -> impl Iterator<Item = &mut f64> + '_ {
        self.keys.tensors_mut().into_iter().chain(self.query.tensors_mut()).flat_map(|t| t.iter_mut())
    }

    pub fn num_params(&self) -> usize {
        self.params().count()
    }

    pub fn save_checkpoint(&self, path: impl AsRef<Path>) -> Result<()> {
        self.save_checkpoint_as(path, Precision::F64)
    }

    pub fn save_checkpoint_as(&self, path: impl AsRef<Path>, precision: Precision) -> Result<()> {
        let mut file = fs::File::create(path)?;
        file.write_all(&self.to_checkpoint_bytes(precision))?;
        file.sync_all()?;
        Ok(())
    }

    /// Serializes as `PMK1`, a header line, then little-endian weights.
    pub fn to_checkpoint_bytes(&self, precision: Precision) -> Vec<u8> {
        let header = format!(
            "d={} hidden={} out={} scale={} dtype={}\n",
            self.keys.input,
            self.keys.hidden,
            self.keys.output,
            self.scale,
            precision.tag()
        );
        let mut bytes = Vec::with_capacity(4 + header.len() + self.num_params() * precision.width());
        bytes.extend_from_slice(CHECKPOINT_MAGIC);
        bytes.extend_from_slice(header.as_bytes());
        for &w in self.params() {
            match precision {
                Precision::F32 => bytes.extend_from_slice(&(w as f32).to_le_bytes()),
                Precision::F64 => bytes.extend_from_slice(&w.to_le_bytes()),
            }
        }
        bytes
    }

    pub fn load_checkpoint(path: impl AsRef<Path>) -> Result<Self> {
        Self::from_checkpoint_bytes(&fs::read(path)?)
    }

    pub fn from_checkpoint_bytes(bytes: &[u8]) -> Result<Self> {
        let rest = bytes
            .strip_prefix(CHECKPOINT_MAGIC.as_slice())
            .ok_or_else(|| Error::Checkpoint("bad magic, expected PMK1".into()))?;
        let newline = rest
            .iter()
            .position(|&b| b == b'\n')
            .ok_or_else(|| Error::Checkpoint("truncated header".into()))?;
        let header = std::str::from_utf8(&rest[..newline]).map_err(|_| Error::Checkpoint("header is not UTF-8".into()))?;
        let payload = &rest[newline + 1..];

        let (mut d, mut hidden, mut out, mut scale, mut precision) = (None, None, None, None, Precision::F32);
        for field in header.split_whitespace() {
            let (key, value) =
                field.split_once('=').ok_or_else(|| Error::Checkpoint(format!("bad header field {field:?}")))?;
            let bad = || Error::Checkpoint(format!("bad header value {field:?}"));
            match key {
                "d" => d = Some(value.parse::<usize>().map_err(|_| bad())?),
                "hidden" => hidden = Some(value.parse::<usize>().map_err(|_| bad())?),
                "out" => out = Some(value.parse::<usize>().map_err(|_| bad())?),
                "scale" => scale = Some(value.parse::<f64>().map_err(|_| bad())?),
                "dtype" => precision = Precision::from_tag(value).ok_or_else(bad)?,
                _ => return Err(Error::Checkpoint(format!("unknown header key {key:?}"))),
            }
        }
        let (Some(d), Some(hidden), Some(out), Some(scale)) = (d, hidden, out, scale) else {
            return Err(Error::Checkpoint("header needs d, hidden, out and scale".into()));
        };
        if d == 0 || hidden == 0 || out == 0 {
            return Err(Error::Checkpoint("dims must be positive".into()));
        }
        let mut net = MatchingNet {
            keys: Mlp::zeros(d, hidden, out),
            query: Mlp::zeros(2 * d, hidden, out),
            scale,
        };
        net.validate()?;
        let expected = net.num_params() * precision.width();
        if payload.len() != expected {
            return Err(Error::Checkpoint(format!(
                "payload is {} bytes, header declares {} ({} weights)",
                payload.len(),
                expected,
                net.num_params()
            )));
        }
        let width = precision.width();
        for (w, chunk) in net.params_mut().zip(payload.chunks_exact(width)) {
            *w = match precision {
                Precision::F32 => f32::from_le_bytes(chunk.try_into().expect("4 bytes")) as f64,
                Precision::F64 => f64::from_le_bytes(chunk.try_into().expect("8 bytes")),
            };
        }
        if net.params().any(|w| !w.is_finite()) {
            return Err(Error::NonFinite("checkpoint weights".into()));
        }
        Ok(net)
    }
}

const CHECKPOINT_MAGIC: &[u8; 4] = b"PMK1";

/// Stored weight width in a checkpoint.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum Precision {
    /// 32-bit floats. Lossy for trained weights; default when no `dtype` key is present.
    F32,
    /// 64-bit floats, bit-exact round trip.
    #[default]
    F64,
}

impl Precision {
    fn tag(self) -> &'static str {
        match self {
            Precision::F32 => "f32",
            Precision::F64 => "f64",
        }
    }

    fn from_tag(tag: &str) -> Option<Self> {
        match tag {
            "f32" => Some(Precision::F32),
            "f64" => Some(Precision::F64),
            _ => None,
        }
    }

    fn width(self) -> usize {
        match self {
            Precision::F32 => 4,
            Precision::F64 => 8,
        }
    }
}

pub fn init_params(seed: u64, dim: usize, hidden: usize, out: usize) -> Result<MatchingNet> {
    MatchingNet::init(seed, dim, hidden, out)
}

pub fn apply_update(theta: &MatchingNet, grad: &Gradient, lr: f64) -> Result<MatchingNet> {
    theta.apply_update(grad, lr)
}

impl Gradient {
    pub fn params(&self) -> impl Iterator<Item = &f64> + '_ {
        self.keys.tensors().into_iter().chain(self.query.tensors()).flat_map(|t| t.iter())
    }

    pub fn params_mut(&mut self) -> impl Iterator<Item = &mut f64> + '_ {
        self.keys.tensors_mut().into_iter().chain(self.query.tensors_mut()).flat_map(|t| t.iter_mut())
    }

    pub fn num_params(&self) -> usize {
        self.params().count()
    }

    pub fn norm(&self) -> f64 {
        self.params().map(|g| g * g).sum::<f64>().sqrt()
    }

    pub fn is_finite(&self) -> bool {
        self.params().all(|g| g.is_finite())
    }

    pub fn is_zero(&self) -> bool {
        self.params().all(|g| *g == 0.0)
    }

    pub fn scale(&mut self, factor: f64) {
        self.params_mut().for_each(|g| *g *= factor);
    }

    /// `self += factor * other`.
    pub fn add_scaled(&mut self, other: &Gradient, factor: f64) {
        for (a, b) in self.params_mut().zip(other.params()) {
            *a += factor * b;
        }
    }

    pub fn dot(&self, other: &Gradient) -> f64 {
        self.params().zip(other.params()).map(|(a, b)| a * b).sum()
    }
}

/// Key-net outputs for each pool entry under fixed parameters.
#[derive(Debug, Clone)]
pub struct KeyCache {
    hidden: Vec<Vec<f64>>,
    keys: Vec<Vec<f64>>,
}

impl KeyCache {
    pub fn len(&self) -> usize {
        self.keys.len()
    }

    pub fn is_empty(&self) -> bool {
        self.keys.is_empty()
    }

    pub fn key(&self, i: usize) -> &[f64] {
        &self.keys[i]
    }
}

struct QueryPass {
    hidden: Vec<f64>,
    q: Vec<f64>,
}

/// Softmax over unmasked pool indices.
#[derive(Debug, Clone, PartialEq)]
pub struct ActionDistribution {
    probs: Vec<f64>,
    logits: Vec<f64>,
    masked: Vec<bool>,
    log_norm: f64,
}

impl ActionDistribution {
    /// Builds from raw logits; `masked[i]` forces probability zero.
    pub fn from_logits(mut logits: Vec<f64>, masked: Vec<bool>) -> Result<Self> {
        if logits.len() != masked.len() {
            return Err(Error::DimensionMismatch { expected: logits.len(), found: masked.len() });
        }
        let mut max = f64::NEG_INFINITY;
        for (l, &m) in logits.iter_mut().zip(&masked) {
            if m {
                *l = f64::NEG_INFINITY;
            } else if !l.is_finite() {
                return Err(Error::NonFinite("logits".into()));
            } else {
                max = max.max(*l);
            }
        }
        if max == f64::NEG_INFINITY {
            return Err(Error::AllMasked);
        }
        let mut probs: Vec<f64> =
            logits.iter().zip(&masked).map(|(l, &m)| if m { 0.0 } else { (l - max).exp() }).collect();
        let sum: f64 = probs.iter().sum();
        probs.iter_mut().for_each(|p| *p /= sum);
        Ok(Self { probs, logits, masked, log_norm: max + sum.ln() })
    }

    pub fn probs(&self) -> &[f64] {
        &self.probs
    }

    pub fn logits(&self) -> &[f64] {
        &self.logits
    }

    pub fn is_masked(&self, i: usize) -> bool {
        self.masked[i]
    }

    pub fn len(&self) -> usize {
        self.probs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.probs.is_empty()
    }

    /// `log pi(a)`; `-inf` for masked actions.
    pub fn log_prob(&self, action: usize) -> f64 {
        self.logits[action] - self.log_norm
    }

    pub fn entropy(&self) -> f64 {
        self.probs.iter().filter(|p| **p > 0.0).map(|p| -p * p.ln()).sum()
    }

    /// Inverse-CDF sample. Masked indices are never returned.
    pub fn sample<R: Rng + ?Sized>(&self, rng: &mut R) -> usize {
        let u: f64 = rng.random();
        let mut cum = 0.0;
        let mut last = 0;
        for (i, &p) in self.probs.iter().enumerate() {
            if p <= 0.0 {
                continue;
            }
            cum += p;
            last = i;
            if u < cum {
                return i;
            }
        }
        last
    }

    /// Highest-probability unmasked index; ties go to the smallest index.
    pub fn greedy(&self) -> usize {
        let mut best: Option<usize> = None;
        for (i, &p) in self.probs.iter().enumerate() {
            if self.masked[i] {
                continue;
            }
            if best.map_or(true, |b| p > self.probs[b]) {
                best = Some(i);
            }
        }
        best.expect("distribution has an unmasked action")
    }
}

pub fn sample_action<R: Rng + ?Sized>(dist: &ActionDistribution, rng: &mut R) -> usize {
    dist.sample(rng)
}

pub fn greedy_action(dist: &ActionDistribution) -> usize {
    dist.greedy()
}

/// Sums `weight * grad log pi(a | l)` over many steps sharing one parameter
/// snapshot.
pub struct GradientAccumulator<'a> {
    net: &'a MatchingNet,
    set: &'a EmbeddingSet,
    cache: &'a KeyCache,
    grad: Gradient,
    key_adjoints: Vec<Vec<f64>>,
}

impl<'a> GradientAccumulator<'a> {
    pub fn new(net: &'a MatchingNet, set: &'a EmbeddingSet, cache: &'a KeyCache) -> Result<Self> {
        if set.len() != cache.len() || set.dim() != net.keys.input {
            return Err(Error::DimensionMismatch { expected: cache.len(), found: set.len() });
        }
        Ok(Self {
            net,
            set,
            cache,
            grad: net.zero_gradient(),
            key_adjoints: vec![vec![0.0; net.keys.output]; cache.len()],
        })
    }

    /// Adds `weight * grad log pi(action | l, mask)`; returns the step's distribution.
    pub fn add(&mut self, l: &[f64], mask: &[usize], action: usize, weight: f64) -> Result<ActionDistribution> {
        let (pass, dist) = self.net.query_pass(self.cache, l, mask)?;
        if action >= dist.len() {
            return Err(Error::InvalidAction { action, reason: "out of range" });
        }
        if dist.is_masked(action) {
            return Err(Error::InvalidAction { action, reason: "masked" });
        }
        if weight == 0.0 {
            return Ok(dist);
        }
        // d log pi(a) / d logit_i = [i == a] - p_i
        let s = self.net.scale * weight;
        let mut d_q = vec![0.0; pass.q.len()];
        for (i, &p) in dist.probs().iter().enumerate() {
            let coeff = if i == action { 1.0 - p } else { -p };
            if coeff == 0.0 {
                continue;
            }
            let c = self.cache.key(i);
            for (dq, ck) in d_q.iter_mut().zip(c) {
                *dq += s * coeff * ck;
            }
            for (adj, qk) in self.key_adjoints[i].iter_mut().zip(&pass.q) {
                *adj += s * coeff * qk;
            }
        }
        self.net.query.backward(l, &pass.hidden, &d_q, &mut self.grad.query);
        Ok(dist)
    }

    pub fn finish(mut self) -> Gradient {
        for (i, adj) in self.key_adjoints.iter().enumerate() {
            if adj.iter().all(|a| *a == 0.0) {
                continue;
            }
            let f = self.set.vectors()[i].as_slice();
            self.net.keys.backward(f, &self.cache.hidden[i], adj, &mut self.grad.keys);
        }
        self.grad
    }
}
