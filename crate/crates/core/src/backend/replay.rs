//! Record/replay cache keyed by input hash.
//!
//! The recording file holds one JSON object per line:
//! `{"input_hash":"<16 hex digits>","output":"..."}`, where the hash is the
//! 64-bit FNV-1a of the input text. Lines are only ever appended, and
//! loading is order-independent: conflicting outputs for one hash are
//! rejected.

use std::collections::HashMap;
use std::fs::{self, File, OpenOptions};
use std::hash::Hasher;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::sync::Mutex;

use fnv::FnvHasher;
use serde::{Deserialize, Serialize};

use super::{check_input, Backend, BackendError, GenerationParams};

/// 64-bit FNV-1a of `input`.
pub fn input_hash(input: &str) -> u64 {
    let mut h = FnvHasher::default();
    h.write(input.as_bytes());
    h.finish()
}

fn hex(hash: u64) -> String {
    format!("{hash:016x}")
}

#[derive(Serialize, Deserialize)]
struct RecordLine {
    input_hash: String,
    output: String,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ReplayMode {
    /// Serve only recorded responses; misses are errors.
    Strict,
    /// Serve recorded responses, delegate misses to the wrapped backend.
    Fallback,
    /// Delegate misses to the wrapped backend and append the response.
    Record,
}

pub struct ReplayBackend {
    mode: ReplayMode,
    cache: Mutex<HashMap<u64, String>>,
    inner: Option<Box<dyn Backend>>,
    sink: Option<Mutex<File>>,
    path: PathBuf,
}

fn load_recording(path: &Path) -> Result<HashMap<u64, String>, BackendError> {
    let text = fs::read_to_string(path).map_err(|e| BackendError::Recording(format!("{}: {e}", path.display())))?;
    let mut cache = HashMap::new();
    for (idx, line) in text.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let bad = |why: String| BackendError::Recording(format!("{} line {}: {why}", path.display(), idx + 1));
        let rec: RecordLine = serde_json::from_str(line).map_err(|e| bad(e.to_string()))?;
        let hash = u64::from_str_radix(&rec.input_hash, 16).map_err(|e| bad(e.to_string()))?;
        match cache.get(&hash) {
            Some(existing) if existing != &rec.output => {
                return Err(bad(format!("conflicting outputs for hash {}", rec.input_hash)));
            }
            Some(_) => {}
            None => {
                cache.insert(hash, rec.output);
            }
        }
    }
    Ok(cache)
}

impl ReplayBackend {
    /// Replays from an existing recording. `Fallback` needs `inner`.
    pub fn replay(path: impl AsRef<Path>, strict: bool, inner: Option<Box<dyn Backend>>) -> Result<Self, BackendError> {
        let path = path.as_ref().to_path_buf();
        if !strict && inner.is_none() {
            return Err(BackendError::Config("non-strict replay needs a backend to delegate to".into()));
        }
        let cache = load_recording(&path)?;
        let mode = if strict { ReplayMode::Strict } else { ReplayMode::Fallback };
        Ok(Self { mode, cache: Mutex::new(cache), inner, sink: None, path })
    }

    /// Wraps `inner`, appending every new response to `path` (created if absent).
    pub fn record(path: impl AsRef<Path>, inner: Box<dyn Backend>) -> Result<Self, BackendError> {
        let path = path.as_ref().to_path_buf();
        let cache = if path.exists() { load_recording(&path)? } else { HashMap::new() };
        let file = OpenOptions::new()
            .create(true)
            .append(true)
            .open(&path)
            .map_err(|e| BackendError::Recording(format!("{}: {e}", path.display())))?;
        Ok(Self { mode: ReplayMode::Record, cache: Mutex::new(cache), inner: Some(inner), sink: Some(Mutex::new(file)), path })
    }

    pub fn mode(&self) -> ReplayMode {
        self.mode
    }

    pub fn len(&self) -> usize {
        self.cache.lock().expect("cache poisoned").len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    fn append(&self, hash: u64, output: &str) -> Result<(), BackendError> {
        let Some(sink) = &self.sink else { return Ok(()) };
        let line = serde_json::to_string(&RecordLine { input_hash: hex(hash), output: output.to_string() })
            .expect("record serializes");
        let mut file = sink.lock().expect("sink poisoned");
        writeln!(file, "{line}")
            .and_then(|_| file.flush())
            .map_err(|e| BackendError::Recording(format!("{}: {e}", self.path.display())))
    }
}

impl Backend for ReplayBackend {
    fn respond(&self, input: &str, params: &GenerationParams) -> Result<String, BackendError> {
        check_input(input)?;
        let hash = input_hash(input);
        if let Some(hit) = self.cache.lock().expect("cache poisoned").get(&hash) {
            return Ok(hit.clone());
        }
        let inner = match (self.mode, &self.inner) {
            (ReplayMode::Strict, _) | (_, None) => return Err(BackendError::ReplayMiss(hex(hash))),
            (_, Some(inner)) => inner,
        };
        let output = inner.respond(input, params)?;
        if self.mode == ReplayMode::Record {
            let mut cache = self.cache.lock().expect("cache poisoned");
            // another thread may have recorded the same input meanwhile
            if let std::collections::hash_map::Entry::Vacant(slot) = cache.entry(hash) {
                self.append(hash, &output)?;
                slot.insert(output.clone());
            }
        }
        Ok(output)
    }
}
