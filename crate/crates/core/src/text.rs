//! Text-embedding providers standing in for a frozen sentence encoder.
//!
//! Three interchangeable backends: a deterministic hashing stub, a JSON-lines
//! fixture file of precomputed vectors, and a small HTTP client. Every
//! provider also reports a fingerprint so artifacts built with one backend
//! are not silently mixed with another.

use std::collections::HashMap;
use std::fs;
use std::path::{Path, PathBuf};
use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::Mutex;
use std::time::Duration;

use rand_distr::{Distribution, StandardNormal};
use rmd_tensor::Tensor;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::motion::json_parse_error;
use crate::seed;

/// Default stub dimensionality.
pub const STUB_DIM: usize = 64;

/// Weight of the whole-string component in a stub sentence embedding,
/// relative to each unit-norm token vector.
const STUB_STRING_WEIGHT: f64 = 0.5;

const REMOTE_ATTEMPTS: u32 = 3;

#[derive(Clone, Debug, PartialEq)]
pub struct TextEmbedding {
    pub vector: Vec<f64>,
    pub unit_norm: bool,
}

impl TextEmbedding {
    pub fn normalized(mut vector: Vec<f64>) -> Result<Self> {
        let norm = vector.iter().map(|v| v * v).sum::<f64>().sqrt();
        if !(norm > 0.0 && norm.is_finite()) {
            return Err(Error::Numeric(format!("cannot normalize embedding with norm {norm}")));
        }
        vector.iter_mut().for_each(|v| *v /= norm);
        Ok(Self {
            vector,
            unit_norm: true,
        })
    }

    pub fn dim(&self) -> usize {
        self.vector.len()
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct TokenFeatures {
    /// `n_tokens × d_text`.
    pub matrix: Tensor,
    pub last_index: usize,
}

impl TokenFeatures {
    fn new(matrix: Tensor) -> Result<Self> {
        if !matrix.is_matrix() || matrix.rows() == 0 {
            return Err(Error::Schema(format!(
                "token features must be a non-empty matrix, got {:?}",
                matrix.shape()
            )));
        }
        let last_index = matrix.rows() - 1;
        Ok(Self { matrix, last_index })
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "backend", rename_all = "snake_case", deny_unknown_fields)]
pub enum ProviderConfig {
    Stub {
        seed: u64,
        #[serde(default = "default_stub_dim")]
        dim: usize,
    },
    Fixture {
        path: PathBuf,
    },
    Remote {
        endpoint: String,
        #[serde(default = "default_timeout_ms")]
        timeout_ms: u64,
        #[serde(default = "default_backoff_ms")]
        backoff_ms: u64,
    },
}

fn default_stub_dim() -> usize {
    STUB_DIM
}
fn default_timeout_ms() -> u64 {
    10_000
}
fn default_backoff_ms() -> u64 {
    200
}

impl Default for ProviderConfig {
    fn default() -> Self {
        Self::Stub {
            seed: 0,
            dim: STUB_DIM,
        }
    }
}

/// Lowercased whitespace tokenization used by the stub backend.
pub fn stub_tokens(text: &str) -> Vec<String> {
    text.split_whitespace().map(str::to_lowercase).collect()
}

#[derive(Clone, Debug)]
struct Entry {
    sentence: Vec<f64>,
    tokens: Tensor,
}

#[derive(Deserialize)]
struct WireEntry {
    sentence: Vec<f64>,
    tokens: Vec<Vec<f64>>,
}

impl WireEntry {
    fn into_entry(self, what: &str) -> Result<Entry> {
        if self.sentence.is_empty() {
            return Err(Error::Schema(format!("{what}: empty sentence vector")));
        }
        let tokens = Tensor::from_rows(&self.tokens)
            .map_err(|e| Error::Schema(format!("{what}: {e}")))?;
        if tokens.rows() == 0 || tokens.cols() != self.sentence.len() {
            return Err(Error::Schema(format!(
                "{what}: need ≥1 token row of width {}, got {:?}",
                self.sentence.len(),
                tokens.shape()
            )));
        }
        if !tokens.is_finite() || self.sentence.iter().any(|v| !v.is_finite()) {
            return Err(Error::Schema(format!("{what}: non-finite values")));
        }
        Ok(Entry {
            sentence: self.sentence,
            tokens,
        })
    }
}

struct Remote {
    endpoint: String,
    agent: ureq::Agent,
    backoff: Duration,
    cache: Mutex<HashMap<String, Entry>>,
    requests: AtomicUsize,
}

enum Backend {
    Stub { seed: u64, dim: usize },
    Fixture { entries: HashMap<String, Entry> },
    Remote(Remote),
}

pub struct TextProvider {
    backend: Backend,
    fingerprint: String,
}

impl std::fmt::Debug for TextProvider {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("TextProvider")
            .field("fingerprint", &self.fingerprint)
            .finish()
    }
}

impl TextProvider {
    pub fn from_config(cfg: &ProviderConfig) -> Result<Self> {
        match cfg {
            &ProviderConfig::Stub { seed, dim } => Self::stub(seed, dim),
            ProviderConfig::Fixture { path } => Self::fixture(path),
            ProviderConfig::Remote {
                endpoint,
                timeout_ms,
                backoff_ms,
            } => Ok(Self::remote(
                endpoint,
                Duration::from_millis(*timeout_ms),
                Duration::from_millis(*backoff_ms),
            )),
        }
    }

    pub fn stub(seed: u64, dim: usize) -> Result<Self> {
        if dim == 0 {
            return Err(Error::Contract("stub embedding dimension must be positive".into()));
        }
        Ok(Self {
            backend: Backend::Stub { seed, dim },
            fingerprint: format!("stub:seed={seed}:dim={dim}"),
        })
    }

    /// Loads a JSON-lines fixture of `{text, sentence, tokens}` records.
    pub fn fixture(path: &Path) -> Result<Self> {
        let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
        let mut entries = HashMap::new();
        let mut dim = None;
        let mut offset = 0usize;
        for line in bytes.split(|&b| b == b'\n') {
            let start = offset;
            offset += line.len() + 1;
            if line.iter().all(u8::is_ascii_whitespace) {
                continue;
            }
            #[derive(Deserialize)]
            #[serde(deny_unknown_fields)]
            struct Record {
                text: String,
                sentence: Vec<f64>,
                tokens: Vec<Vec<f64>>,
            }
            let rec: Record = serde_json::from_slice(line).map_err(|e| {
                match json_parse_error(path, line, &e) {
                    Error::Parse { file, offset, message } => Error::Parse {
                        file,
                        offset: offset + start as u64,
                        message,
                    },
                    other => other,
                }
            })?;
            let what = format!("{} (caption {:?})", path.display(), rec.text);
            let entry = WireEntry {
                sentence: rec.sentence,
                tokens: rec.tokens,
            }
            .into_entry(&what)?;
            if *dim.get_or_insert(entry.sentence.len()) != entry.sentence.len() {
                return Err(Error::Schema(format!("{what}: inconsistent embedding width")));
            }
            if entries.insert(rec.text.clone(), entry).is_some() {
                return Err(Error::Schema(format!("{what}: duplicate caption")));
            }
        }
        let digest = hex(&Sha256::digest(&bytes));
        Ok(Self {
            backend: Backend::Fixture { entries },
            fingerprint: format!("fixture:{}", &digest[..16]),
        })
    }

    pub fn remote(endpoint: &str, timeout: Duration, backoff: Duration) -> Self {
        let agent: ureq::Agent = ureq::Agent::config_builder()
            .timeout_global(Some(timeout))
            .build()
            .into();
        Self {
            backend: Backend::Remote(Remote {
                endpoint: endpoint.trim_end_matches('/').to_string(),
                agent,
                backoff,
                cache: Mutex::new(HashMap::new()),
                requests: AtomicUsize::new(0),
            }),
            fingerprint: format!("remote:{endpoint}"),
        }
    }

    /// Identifies the backend and its parameters.
    pub fn fingerprint(&self) -> &str {
        &self.fingerprint
    }

    /// Number of HTTP requests issued so far (remote backend only).
    pub fn remote_requests(&self) -> usize {
        match &self.backend {
            Backend::Remote(r) => r.requests.load(Ordering::Relaxed),
            _ => 0,
        }
    }

    pub fn embed_sentence(&self, text: &str) -> Result<TextEmbedding> {
        check_text(text)?;
        match &self.backend {
            &Backend::Stub { seed, dim } => {
                let mut acc = string_vector(seed, dim, text);
                acc.iter_mut().for_each(|v| *v *= STUB_STRING_WEIGHT);
                for tok in stub_tokens(text) {
                    for (a, t) in acc.iter_mut().zip(token_vector(seed, dim, &tok)) {
                        *a += t;
                    }
                }
                TextEmbedding::normalized(acc)
            }
            _ => TextEmbedding::normalized(self.lookup(text)?.sentence),
        }
    }

    pub fn embed_tokens(&self, text: &str) -> Result<TokenFeatures> {
        check_text(text)?;
        match &self.backend {
            &Backend::Stub { seed, dim } => {
                let toks = stub_tokens(text);
                let data = toks.iter().flat_map(|t| token_vector(seed, dim, t)).collect();
                TokenFeatures::new(Tensor::matrix(toks.len(), dim, data)?)
            }
            _ => TokenFeatures::new(self.lookup(text)?.tokens),
        }
    }

    fn lookup(&self, text: &str) -> Result<Entry> {
        match &self.backend {
            Backend::Fixture { entries } => entries
                .get(text)
                .cloned()
                .ok_or_else(|| Error::UnknownCaption(text.to_string())),
            Backend::Remote(r) => r.fetch(text),
            Backend::Stub { .. } => unreachable!("stub embeddings are computed, not looked up"),
        }
    }
}

impl Remote {
    fn fetch(&self, text: &str) -> Result<Entry> {
        // The lock is held across the request so concurrent callers asking for
        // the same caption never both reach the network.
        let mut cache = self.cache.lock().unwrap_or_else(|p| p.into_inner());
        if let Some(e) = cache.get(text) {
            return Ok(e.clone());
        }
        let url = format!("{}/embed", self.endpoint);
        let mut last = String::new();
        for attempt in 1..=REMOTE_ATTEMPTS {
            self.requests.fetch_add(1, Ordering::Relaxed);
            let result = self
                .agent
                .post(&url)
                .send_json(serde_json::json!({ "text": text }))
                .and_then(|mut resp| resp.body_mut().read_json::<WireEntry>());
            match result {
                Ok(wire) => {
                    let entry = wire.into_entry(&format!("{url} (caption {text:?})"))?;
                    cache.insert(text.to_string(), entry.clone());
                    return Ok(entry);
                }
                Err(e) => last = e.to_string(),
            }
            if attempt < REMOTE_ATTEMPTS {
                std::thread::sleep(self.backoff * 2u32.pow(attempt - 1));
            }
        }
        Err(Error::Transport {
            attempts: REMOTE_ATTEMPTS,
            message: last,
        })
    }
}

fn check_text(text: &str) -> Result<()> {
    if text.trim().is_empty() {
        return Err(Error::Contract("text to embed must be non-empty".into()));
    }
    Ok(())
}

fn gaussian_unit(seed: u64, dim: usize, label: &str) -> Vec<f64> {
    let mut rng = seed::stream(seed, label);
    let mut v: Vec<f64> = (0..dim).map(|_| StandardNormal.sample(&mut rng)).collect();
    let n = v.iter().map(|x| x * x).sum::<f64>().sqrt();
    v.iter_mut().for_each(|x| *x /= n);
    v
}

fn token_vector(seed: u64, dim: usize, token: &str) -> Vec<f64> {
    gaussian_unit(seed, dim, &format!("text/token/{token}"))
}

fn string_vector(seed: u64, dim: usize, text: &str) -> Vec<f64> {
    gaussian_unit(seed, dim, &format!("text/string/{text}"))
}

fn hex(bytes: &[u8]) -> String {
    bytes.iter().map(|b| format!("{b:02x}")).collect()
}

/// Cosine similarity of two equal-length vectors.
pub fn cosine(a: &[f64], b: &[f64]) -> f64 {
    let dot: f64 = a.iter().zip(b).map(|(x, y)| x * y).sum();
    let na = a.iter().map(|x| x * x).sum::<f64>().sqrt();
    let nb = b.iter().map(|x| x * x).sum::<f64>().sqrt();
    dot / (na * nb)
}
