//! Prompt pool loading, text embedding and the vector primitives used by
//! state construction and rewards.
//!
//! Pool and query files are newline-delimited JSON objects with a required
//! `question`, an optional `context` and a required `answer`. Blank lines are
//! skipped. Pool entries are embedded from `question \n answer`; queries from
//! `question` with the context appended after a newline when present.

use std::collections::HashMap;
use std::fmt::Write as _;
use std::fs;
use std::hash::Hasher;
use std::path::Path;

use fnv::FnvHasher;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Default embedding dimension for desk-scale runs.
pub const DEFAULT_DIM: usize = 32;

/// Smallest dimension accepted by the hashed n-gram encoder.
pub const MIN_HASH_DIM: usize = 8;

const NGRAM_SEED: u64 = 0x5eed_9a11_0c0d_e5e7;

/// One exemplar: a question, optional context and the expected answer.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct PromptTriple {
    pub id: usize,
    pub question: String,
    #[serde(default)]
    pub context: String,
    pub answer: String,
}

#[derive(Deserialize)]
struct RawRecord {
    question: Option<String>,
    #[serde(default)]
    context: Option<String>,
    answer: Option<String>,
}

#[derive(Serialize)]
struct RecordOut<'a> {
    question: &'a str,
    #[serde(skip_serializing_if = "str::is_empty")]
    context: &'a str,
    answer: &'a str,
}

impl PromptTriple {
    /// The question block shown to the LLM: question, plus the context on
    /// its own line when present.
    pub fn question_block(&self) -> String {
        join_context(&self.question, &self.context)
    }

    /// Text embedded for this pool entry.
    pub fn embedding_text(&self) -> String {
        format!("{}\n{}", self.question, self.answer)
    }

    /// Serializes to one record line (no trailing newline).
    pub fn to_record(&self) -> String {
        serde_json::to_string(&RecordOut {
            question: &self.question,
            context: &self.context,
            answer: &self.answer,
        })
        .expect("string fields always serialize")
    }
}

/// Question with its context appended after a newline when non-empty.
pub fn join_context(question: &str, context: &str) -> String {
    if context.is_empty() {
        question.to_string()
    } else {
        format!("{question}\n{context}")
    }
}

/// Parses one record line. The returned triple has `id` 0; callers assign ids.
pub fn parse_pool_record(record: &str) -> Result<PromptTriple> {
    let raw: RawRecord =
        serde_json::from_str(record).map_err(|e| Error::Record(format!("malformed record: {e}")))?;
    let question = raw.question.ok_or_else(|| Error::Record("missing question".into()))?;
    let answer = raw.answer.ok_or_else(|| Error::Record("missing answer".into()))?;
    if question.trim().is_empty() {
        return Err(Error::Record("empty question".into()));
    }
    if answer.trim().is_empty() {
        return Err(Error::Record("empty answer".into()));
    }
    Ok(PromptTriple { id: 0, question, context: raw.context.unwrap_or_default(), answer })
}

/// Ordered, non-empty set of exemplars with ids `0..n`.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct PromptPool {
    entries: Vec<PromptTriple>,
}

impl PromptPool {
    /// Builds a pool, renumbering ids to match positions.
    pub fn new(entries: Vec<PromptTriple>) -> Result<Self> {
        if entries.is_empty() {
            return Err(Error::EmptyPool);
        }
        let entries = entries
            .into_iter()
            .enumerate()
            .map(|(id, e)| PromptTriple { id, ..e })
            .collect();
        Ok(Self { entries })
    }

    /// Parses newline-delimited records. Errors carry the 1-based line number.
    pub fn parse(text: &str) -> Result<Self> {
        let mut entries = Vec::new();
        for (idx, line) in text.lines().enumerate() {
            if line.trim().is_empty() {
                continue;
            }
            let triple = parse_pool_record(line).map_err(|e| Error::Parse {
                line: idx + 1,
                message: match e {
                    Error::Record(m) => m,
                    other => other.to_string(),
                },
            })?;
            entries.push(triple);
        }
        Self::new(entries)
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn get(&self, id: usize) -> Option<&PromptTriple> {
        self.entries.get(id)
    }

    pub fn entries(&self) -> &[PromptTriple] {
        &self.entries
    }

    pub fn iter(&self) -> impl Iterator<Item = &PromptTriple> {
        self.entries.iter()
    }

    /// Serializes the pool back to the record format, one line per entry.
    pub fn to_records(&self) -> String {
        let mut out = String::new();
        for e in &self.entries {
            out.push_str(&e.to_record());
            out.push('\n');
        }
        out
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        fs::write(path, self.to_records())?;
        Ok(())
    }
}

/// Loads a pool (or a query set, which shares the format) from disk.
pub fn load_pool(path: impl AsRef<Path>) -> Result<PromptPool> {
    let text = fs::read_to_string(path)?;
    PromptPool::parse(&text)
}

/// Dense embedding. Encoder outputs are unit-norm or zero; aggregates need not be.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EmbeddingVector(Vec<f64>);

impl EmbeddingVector {
    pub fn zeros(dim: usize) -> Self {
        Self(vec![0.0; dim])
    }

    /// Wraps raw values, rejecting empty or non-finite input.
    pub fn new(values: Vec<f64>) -> Result<Self> {
        if values.is_empty() {
            return Err(Error::DimensionMismatch { expected: 1, found: 0 });
        }
        if values.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite("embedding".into()));
        }
        Ok(Self(values))
    }

    /// Scales to unit L2 norm; the zero vector is left unchanged.
    pub fn normalized(mut values: Vec<f64>) -> Result<Self> {
        let norm = l2_norm(&values);
        if norm > 0.0 {
            values.iter_mut().for_each(|v| *v /= norm);
        }
        Self::new(values)
    }

    pub fn dim(&self) -> usize {
        self.0.len()
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.0
    }

    pub fn norm(&self) -> f64 {
        l2_norm(&self.0)
    }

    pub fn is_zero(&self) -> bool {
        self.0.iter().all(|v| *v == 0.0)
    }

    pub fn into_inner(self) -> Vec<f64> {
        self.0
    }
}

fn l2_norm(v: &[f64]) -> f64 {
    v.iter().map(|x| x * x).sum::<f64>().sqrt()
}

/// Text to fixed-dimension vector.
pub trait Encoder: Send + Sync {
    fn dim(&self) -> usize;
    fn encode(&self, text: &str) -> Result<EmbeddingVector>;
}

/// Character 3-gram counts hashed into `dim` buckets, then L2-normalized.
///
/// Text is lowercased and padded with one space on each side before the
/// trigrams are taken. Each trigram is hashed with 64-bit FNV-1a over the
/// little-endian seed bytes followed by its UTF-8 bytes; the bucket is the
/// hash modulo `dim`. The empty string maps to the zero vector.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct HashNgramEncoder {
    dim: usize,
}

impl HashNgramEncoder {
    pub fn new(dim: usize) -> Result<Self> {
        if dim < MIN_HASH_DIM {
            return Err(Error::Config(format!("encoder dim must be >= {MIN_HASH_DIM}, got {dim}")));
        }
        Ok(Self { dim })
    }

    /// Bucket a single trigram falls into.
    pub fn bucket(&self, trigram: &str) -> usize {
        let mut h = FnvHasher::default();
        h.write(&NGRAM_SEED.to_le_bytes());
        h.write(trigram.as_bytes());
        (h.finish() % self.dim as u64) as usize
    }

    /// Trigrams of `text` after lowercasing and padding.
    pub fn trigrams(text: &str) -> Vec<String> {
        if text.is_empty() {
            return Vec::new();
        }
        let chars: Vec<char> = std::iter::once(' ')
            .chain(text.chars().flat_map(char::to_lowercase))
            .chain(std::iter::once(' '))
            .collect();
        chars.windows(3).map(|w| w.iter().collect()).collect()
    }

    pub fn counts(&self, text: &str) -> Vec<f64> {
        let mut counts = vec![0.0; self.dim];
        for gram in Self::trigrams(text) {
            counts[self.bucket(&gram)] += 1.0;
        }
        counts
    }
}

impl Encoder for HashNgramEncoder {
    fn dim(&self) -> usize {
        self.dim
    }

    fn encode(&self, text: &str) -> Result<EmbeddingVector> {
        EmbeddingVector::normalized(self.counts(text))
    }
}

/// Encodes `text` with a [`HashNgramEncoder`] of dimension `dim` (`dim >= 8`).
pub fn hash_ngram_encode(text: &str, dim: usize) -> Result<EmbeddingVector> {
    HashNgramEncoder::new(dim)?.encode(text)
}

/// One vector per pool entry, all of the same dimension.
#[derive(Debug, Clone, PartialEq)]
pub struct EmbeddingSet {
    dim: usize,
    vectors: Vec<EmbeddingVector>,
}

impl EmbeddingSet {
    pub fn new(vectors: Vec<EmbeddingVector>) -> Result<Self> {
        let dim = vectors.first().map(EmbeddingVector::dim).ok_or(Error::EmptyPool)?;
        if let Some(bad) = vectors.iter().find(|v| v.dim() != dim) {
            return Err(Error::DimensionMismatch { expected: dim, found: bad.dim() });
        }
        Ok(Self { dim, vectors })
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn len(&self) -> usize {
        self.vectors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.vectors.is_empty()
    }

    pub fn get(&self, id: usize) -> Option<&EmbeddingVector> {
        self.vectors.get(id)
    }

    pub fn vectors(&self) -> &[EmbeddingVector] {
        &self.vectors
    }

    /// Writes the precomputed-embedding text format.
    pub fn to_text(&self) -> String {
        let mut out = format!("dim={} count={}\n", self.dim, self.vectors.len());
        for v in &self.vectors {
            let mut first = true;
            for x in v.as_slice() {
                if !first {
                    out.push(' ');
                }
                first = false;
                write!(out, "{x}").expect("write to String");
            }
            out.push('\n');
        }
        out
    }
}

/// Serves precomputed vectors for known texts and hashes everything else
/// (model responses, unseen queries) at the same dimension.
#[derive(Debug, Clone)]
pub struct LookupEncoder {
    table: HashMap<String, EmbeddingVector>,
    fallback: HashNgramEncoder,
}

impl LookupEncoder {
    pub fn new(dim: usize) -> Result<Self> {
        Ok(Self { table: HashMap::new(), fallback: HashNgramEncoder::new(dim)? })
    }

    /// Registers `vector` for `text`; the first registration wins.
    pub fn insert(&mut self, text: impl Into<String>, vector: EmbeddingVector) -> Result<()> {
        if vector.dim() != self.fallback.dim() {
            return Err(Error::DimensionMismatch { expected: self.fallback.dim(), found: vector.dim() });
        }
        self.table.entry(text.into()).or_insert(vector);
        Ok(())
    }

    /// Registers the pool's embedding texts against the rows of `set`.
    pub fn with_pool(mut self, pool: &PromptPool, set: &EmbeddingSet) -> Result<Self> {
        if pool.len() != set.len() {
            return Err(Error::DimensionMismatch { expected: pool.len(), found: set.len() });
        }
        for (entry, v) in pool.iter().zip(set.vectors()) {
            self.insert(entry.embedding_text(), v.clone())?;
        }
        Ok(self)
    }

    pub fn len(&self) -> usize {
        self.table.len()
    }

    pub fn is_empty(&self) -> bool {
        self.table.is_empty()
    }
}

impl Encoder for LookupEncoder {
    fn dim(&self) -> usize {
        self.fallback.dim()
    }

    fn encode(&self, text: &str) -> Result<EmbeddingVector> {
        match self.table.get(text) {
            Some(v) => Ok(v.clone()),
            None => self.fallback.encode(text),
        }
    }
}

/// Embeds every pool entry from its question and answer.
pub fn encode_pool(pool: &PromptPool, encoder: &dyn Encoder) -> Result<EmbeddingSet> {
    let vectors = pool
        .iter()
        .map(|e| {
            encoder
                .encode(&e.embedding_text())
                .map_err(|source| Error::Encode { id: e.id, source: Box::new(source) })
        })
        .collect::<Result<Vec<_>>>()?;
    EmbeddingSet::new(vectors)
}

/// Parses the precomputed-embedding format: a `dim=<d> count=<n>` header and
/// then `n` rows of `d` whitespace-separated floats. Rows are L2-normalized.
pub fn parse_embeddings(text: &str, expected_count: Option<usize>) -> Result<EmbeddingSet> {
    let mut lines = text.lines().enumerate().filter(|(_, l)| !l.trim().is_empty());
    let (_, header) = lines.next().ok_or(Error::Parse { line: 1, message: "missing header".into() })?;
    let mut dim = None;
    let mut count = None;
    for field in header.split_whitespace() {
        let (key, value) = field
            .split_once('=')
            .ok_or_else(|| Error::Parse { line: 1, message: format!("bad header field {field:?}") })?;
        let value: usize = value
            .parse()
            .map_err(|_| Error::Parse { line: 1, message: format!("bad header value {field:?}") })?;
        match key {
            "dim" => dim = Some(value),
            "count" => count = Some(value),
            _ => return Err(Error::Parse { line: 1, message: format!("unknown header key {key:?}") }),
        }
    }
    let (dim, count) = match (dim, count) {
        (Some(d), Some(c)) if d > 0 => (d, c),
        _ => return Err(Error::Parse { line: 1, message: "header needs dim=<d> count=<n>".into() }),
    };
    if let Some(expected) = expected_count {
        if expected != count {
            return Err(Error::DimensionMismatch { expected, found: count });
        }
    }
    let mut vectors = Vec::with_capacity(count);
    for (idx, line) in lines {
        let values = line
            .split_whitespace()
            .map(str::parse::<f64>)
            .collect::<std::result::Result<Vec<_>, _>>()
            .map_err(|e| Error::Parse { line: idx + 1, message: e.to_string() })?;
        if values.len() != dim {
            return Err(Error::Parse {
                line: idx + 1,
                message: format!("expected {dim} values, found {}", values.len()),
            });
        }
        let v = EmbeddingVector::normalized(values)
            .map_err(|e| Error::Parse { line: idx + 1, message: e.to_string() })?;
        vectors.push(v);
    }
    if vectors.len() != count {
        return Err(Error::DimensionMismatch { expected: count, found: vectors.len() });
    }
    EmbeddingSet::new(vectors)
}

pub fn load_embeddings(path: impl AsRef<Path>, expected_count: Option<usize>) -> Result<EmbeddingSet> {
    parse_embeddings(&fs::read_to_string(path)?, expected_count)
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

/// Cosine similarity; 0 when either side is the zero vector.
pub fn cosine(a: &EmbeddingVector, b: &EmbeddingVector) -> Result<f64> {
    if a.dim() != b.dim() {
        return Err(Error::DimensionMismatch { expected: a.dim(), found: b.dim() });
    }
    let (na, nb) = (a.norm(), b.norm());
    if na == 0.0 || nb == 0.0 {
        return Ok(0.0);
    }
    Ok((dot(a.as_slice(), b.as_slice()) / (na * nb)).clamp(-1.0, 1.0))
}

/// Element-wise mean. An empty input yields the zero vector of `dim`.
pub fn mean_aggregate<'a, I>(vectors: I, dim: usize) -> Result<EmbeddingVector>
where
    I: IntoIterator<Item = &'a EmbeddingVector>,
{
    let mut sum = vec![0.0; dim];
    let mut count = 0usize;
    for v in vectors {
        if v.dim() != dim {
            return Err(Error::DimensionMismatch { expected: dim, found: v.dim() });
        }
        sum.iter_mut().zip(v.as_slice()).for_each(|(s, x)| *s += x);
        count += 1;
    }
    if count > 0 {
        let inv = count as f64;
        sum.iter_mut().for_each(|s| *s /= inv);
    }
    Ok(EmbeddingVector(sum))
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn record_defaults_context() {
        let t = parse_pool_record(r#"{"question":"Q1","answer":"A1"}"#).unwrap();
        assert_eq!((t.question.as_str(), t.context.as_str(), t.answer.as_str()), ("Q1", "", "A1"));
    }

    #[test]
    fn lookup_encoder_prefers_table() {
        let pool = PromptPool::parse("{\"question\":\"q\",\"answer\":\"a\"}\n").unwrap();
        let set = parse_embeddings("dim=8 count=1\n1 0 0 0 0 0 0 0\n", Some(1)).unwrap();
        let enc = LookupEncoder::new(8).unwrap().with_pool(&pool, &set).unwrap();
        assert_eq!(enc.encode("q\na").unwrap(), *set.get(0).unwrap());
        assert_eq!(enc.encode("other").unwrap(), hash_ngram_encode("other", 8).unwrap());
        assert!(LookupEncoder::new(16).unwrap().with_pool(&pool, &set).is_err());
    }

    #[test]
    fn record_with_context() {
        let t = parse_pool_record(r#"{"question":"Q","context":"C","answer":"A"}"#).unwrap();
        assert_eq!(t.context, "C");
        assert_eq!(t.question_block(), "Q\nC");
    }

    #[test]
    fn record_errors() {
        let err = parse_pool_record(r#"{"question":"Q1"}"#).unwrap_err();
        assert!(err.to_string().contains("missing answer"), "{err}");
        assert!(parse_pool_record(r#"{"answer":"A"}"#).is_err());
        assert!(parse_pool_record(r#"{"question":"  ","answer":"A"}"#).is_err());
        assert!(parse_pool_record(r#"{"question":"Q","answer":""}"#).is_err());
        assert!(parse_pool_record("not json").is_err());
    }

    #[test]
    fn pool_parse_assigns_ids_and_reports_lines() {
        let text = "{\"question\":\"a\",\"answer\":\"b\"}\n\n{\"question\":\"c\",\"answer\":\"d\"}\n";
        let pool = PromptPool::parse(text).unwrap();
        assert_eq!(pool.len(), 2);
        assert_eq!(pool.get(1).unwrap().id, 1);

        let bad = "{\"question\":\"a\",\"answer\":\"b\"}\n{\"question\":\"c\"}\n";
        match PromptPool::parse(bad).unwrap_err() {
            Error::Parse { line, message } => {
                assert_eq!(line, 2);
                assert!(message.contains("missing answer"));
            }
            other => panic!("unexpected {other}"),
        }
        assert!(matches!(PromptPool::parse("").unwrap_err(), Error::EmptyPool));
    }

    #[test]
    fn load_pool_sizes() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("pool.jsonl");
        let body: String = (0..100)
            .map(|i| format!("{{\"question\":\"q{i}\",\"answer\":\"a{i}\"}}\n"))
            .collect();
        fs::write(&path, body).unwrap();
        assert_eq!(load_pool(&path).unwrap().len(), 100);

        fs::write(&path, "{\"question\":\"q\",\"answer\":\"a\"}\n").unwrap();
        let pool = load_pool(&path).unwrap();
        assert_eq!(pool.len(), 1);
        assert_eq!(pool.get(0).unwrap().id, 0);

        fs::write(&path, "").unwrap();
        assert!(load_pool(&path).is_err());
    }

    #[test]
    fn encoder_conventions() {
        let z = hash_ngram_encode("", 32).unwrap();
        assert_eq!(z, EmbeddingVector::zeros(32));
        assert_eq!(hash_ngram_encode("some text", 32).unwrap(), hash_ngram_encode("some text", 32).unwrap());
        let v = hash_ngram_encode("hello world", 64).unwrap();
        assert!((v.norm() - 1.0).abs() < 1e-12);
        assert!(HashNgramEncoder::new(4).is_err());
    }

    #[test]
    fn trigram_padding() {
        assert_eq!(HashNgramEncoder::trigrams("Ab"), vec![" ab", "ab "]);
        assert!(HashNgramEncoder::trigrams("").is_empty());
        // one character still yields a trigram after padding
        assert_eq!(HashNgramEncoder::trigrams("x"), vec![" x "]);
    }

    #[test]
    fn encode_pool_is_deterministic() {
        let mut entries: Vec<PromptTriple> = (0..4)
            .map(|i| PromptTriple { id: 0, question: format!("q{i}"), context: String::new(), answer: "a".into() })
            .collect();
        entries.push(entries[0].clone());
        let pool = PromptPool::new(entries).unwrap();
        let enc = HashNgramEncoder::new(32).unwrap();
        let a = encode_pool(&pool, &enc).unwrap();
        let b = encode_pool(&pool, &enc).unwrap();
        assert_eq!(a.len(), 5);
        assert_eq!(a.dim(), 32);
        assert_eq!(a.get(0), a.get(4));
        assert_eq!(a, b);
    }

    #[test]
    fn cosine_cases() {
        let e1 = EmbeddingVector::new(vec![1.0, 0.0]).unwrap();
        let e2 = EmbeddingVector::new(vec![0.0, 1.0]).unwrap();
        let v = EmbeddingVector::new(vec![0.3, -2.0]).unwrap();
        assert_eq!(cosine(&e1, &e2).unwrap(), 0.0);
        assert!((cosine(&v, &v).unwrap() - 1.0).abs() < 1e-12);
        assert_eq!(cosine(&EmbeddingVector::zeros(2), &v).unwrap(), 0.0);
        assert!(cosine(&e1, &EmbeddingVector::zeros(3)).is_err());
    }

    #[test]
    fn mean_cases() {
        assert_eq!(mean_aggregate(std::iter::empty(), 4).unwrap(), EmbeddingVector::zeros(4));
        let v = EmbeddingVector::new(vec![0.25, -1.0, 3.0]).unwrap();
        assert_eq!(mean_aggregate([&v], 3).unwrap(), v);
        let e1 = EmbeddingVector::new(vec![1.0, 0.0]).unwrap();
        let e2 = EmbeddingVector::new(vec![0.0, 1.0]).unwrap();
        assert_eq!(mean_aggregate([&e1, &e2], 2).unwrap().as_slice(), &[0.5, 0.5]);
        assert!(mean_aggregate([&e1, &v], 2).is_err());
    }

    #[test]
    fn embeddings_file() {
        let set = EmbeddingSet::new(vec![
            EmbeddingVector::new(vec![1.0, 0.0, 0.0]).unwrap(),
            EmbeddingVector::new(vec![0.0, 0.6, 0.8]).unwrap(),
        ])
        .unwrap();
        let parsed = parse_embeddings(&set.to_text(), Some(2)).unwrap();
        assert_eq!(parsed, set);
        // rows are normalized on load
        let p = parse_embeddings("dim=2 count=1\n3 4\n", None).unwrap();
        assert_eq!(p.get(0).unwrap().as_slice(), &[0.6, 0.8]);
        assert!(parse_embeddings(&set.to_text(), Some(3)).is_err());
        assert!(parse_embeddings("dim=2 count=2\n1 0\n", None).is_err());
        assert!(parse_embeddings("dim=3 count=1\n1 0\n", None).is_err());
        assert!(parse_embeddings("count=1\n1 0\n", None).is_err());
    }

    proptest! {
        #[test]
        fn pool_round_trip(rows in prop::collection::vec(("[a-z ]{0,6}[a-z]", "[a-z]{0,4}", "[a-z\"]{1,5}"), 1..6)) {
            let entries = rows
                .iter()
                .map(|(q, c, a)| PromptTriple { id: 0, question: q.clone(), context: c.clone(), answer: a.clone() })
                .collect();
            let pool = PromptPool::new(entries).unwrap();
            prop_assert_eq!(PromptPool::parse(&pool.to_records()).unwrap(), pool);
        }

        #[test]
        fn nonzero_embeddings_are_unit(text in ".{0,40}") {
            let v = hash_ngram_encode(&text, 32).unwrap();
            prop_assert!(v.is_zero() || (v.norm() - 1.0).abs() < 1e-6);
        }

        #[test]
        fn cosine_symmetric(a in prop::collection::vec(-1.0f64..1.0, 5), b in prop::collection::vec(-1.0f64..1.0, 5)) {
            let (a, b) = (EmbeddingVector::new(a).unwrap(), EmbeddingVector::new(b).unwrap());
            prop_assert_eq!(cosine(&a, &b).unwrap(), cosine(&b, &a).unwrap());
            let self_sim = cosine(&a, &a).unwrap();
            prop_assert!(self_sim == 0.0 || (self_sim - 1.0).abs() < 1e-12);
        }

        #[test]
        fn mean_of_copies(v in prop::collection::vec(-1.0f64..1.0, 4), k in 1usize..6) {
            let v = EmbeddingVector::new(v).unwrap();
            let copies = vec![v.clone(); k];
            let m = mean_aggregate(copies.iter(), 4).unwrap();
            for (x, y) in m.as_slice().iter().zip(v.as_slice()) {
                prop_assert!((x - y).abs() < 1e-12);
            }
        }
    }
}
