//! Sentence embeddings behind a pluggable provider, an on-disk cache, and
//! cosine similarity.

use std::collections::HashMap;
use std::fs;
use std::path::{Path, PathBuf};
use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::{Arc, Mutex};
use std::time::Duration;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{error_chain, Error, Result};
use crate::textproc::tokenize;

/// Model tag used for the remote provider unless configured otherwise.
pub const DEFAULT_REMOTE_MODEL: &str = "mixedbread-ai/mxbai-embed-large-v1";
pub const DETERMINISTIC_DIM: usize = 256;

#[derive(Debug, Clone, PartialEq)]
pub struct EmbeddingVector {
    values: Vec<f64>,
    provider_tag: String,
}

impl EmbeddingVector {
    pub fn new(values: Vec<f64>, provider_tag: impl Into<String>) -> Result<Self> {
        if values.is_empty() {
            return Err(Error::Protocol("embedding has dimension 0".into()));
        }
        if values.iter().any(|v| !v.is_finite()) {
            return Err(Error::Protocol("embedding has non-finite values".into()));
        }
        Ok(EmbeddingVector {
            values,
            provider_tag: provider_tag.into(),
        })
    }

    pub fn dim(&self) -> usize {
        self.values.len()
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn provider_tag(&self) -> &str {
        &self.provider_tag
    }

    pub fn norm(&self) -> f64 {
        self.values.iter().map(|v| v * v).sum::<f64>().sqrt()
    }

    pub fn normalized(mut self) -> Result<Self> {
        let n = self.norm();
        if n == 0.0 {
            return Err(Error::Protocol("cannot normalize a zero embedding".into()));
        }
        for v in &mut self.values {
            *v /= n;
        }
        Ok(self)
    }
}

pub fn cosine(a: &EmbeddingVector, b: &EmbeddingVector) -> Result<f64> {
    if a.dim() != b.dim() {
        return Err(Error::Invalid(format!("dimension mismatch: {} vs {}", a.dim(), b.dim())));
    }
    let (na, nb) = (a.norm(), b.norm());
    if na == 0.0 || nb == 0.0 {
        return Err(Error::Invalid("cosine of a zero vector".into()));
    }
    let dot: f64 = a.values.iter().zip(&b.values).map(|(x, y)| x * y).sum();
    Ok((dot / (na * nb)).clamp(-1.0, 1.0))
}

/// Raw sentence-in, vector-out model access.
pub trait EmbeddingProvider: Send + Sync {
    fn tag(&self) -> &str;
    fn embed_batch(&self, texts: &[String]) -> Result<Vec<Vec<f64>>>;
}

/// Bag-of-directions embedding: each lowercased token hashes (with a seed) to
/// a fixed pseudo-random unit direction, and a text is the normalized sum of
/// its token directions. Platform independent and free of any model.
pub struct DeterministicProvider {
    seed: u64,
    dim: usize,
    tag: String,
}

const EMPTY_TOKEN: &str = "\u{0}empty";

impl DeterministicProvider {
    pub fn new(seed: u64) -> Self {
        Self::with_dim(seed, DETERMINISTIC_DIM)
    }

    pub fn with_dim(seed: u64, dim: usize) -> Self {
        assert!(dim > 0 && dim % 4 == 0, "dimension must be a positive multiple of 4");
        DeterministicProvider {
            seed,
            dim,
            tag: format!("hashbag-v1-s{seed}-d{dim}"),
        }
    }

    /// Unit direction for one token.
    pub fn token_direction(&self, token: &str) -> Vec<f64> {
        let mut v = Vec::with_capacity(self.dim);
        for block in 0..(self.dim / 4) as u32 {
            let mut h = Sha256::new();
            h.update(b"crscore-hashbag\0");
            h.update(self.seed.to_le_bytes());
            h.update(block.to_le_bytes());
            h.update(token.as_bytes());
            let digest = h.finalize();
            for chunk in digest.chunks_exact(8) {
                let u = u64::from_le_bytes(chunk.try_into().unwrap());
                v.push((u >> 11) as f64 / (1u64 << 53) as f64 * 2.0 - 1.0);
            }
        }
        let n = v.iter().map(|x| x * x).sum::<f64>().sqrt();
        v.iter_mut().for_each(|x| *x /= n);
        v
    }

    pub fn embed_text(&self, text: &str) -> Vec<f64> {
        let mut tokens: Vec<String> = tokenize(text).iter().map(|t| t.text.to_lowercase()).collect();
        if tokens.is_empty() {
            tokens.push(EMPTY_TOKEN.to_string());
        }
        // summation order fixed so the bag is order free bit-for-bit
        tokens.sort();
        let mut sum = vec![0.0; self.dim];
        for t in &tokens {
            for (s, d) in sum.iter_mut().zip(self.token_direction(t)) {
                *s += d;
            }
        }
        sum
    }
}

impl EmbeddingProvider for DeterministicProvider {
    fn tag(&self) -> &str {
        &self.tag
    }

    fn embed_batch(&self, texts: &[String]) -> Result<Vec<Vec<f64>>> {
        Ok(texts.iter().map(|t| self.embed_text(t)).collect())
    }
}

#[derive(Serialize)]
struct EmbedRequest<'a> {
    texts: &'a [String],
}

#[derive(Deserialize)]
struct EmbedResponse {
    model: String,
    dim: usize,
    embeddings: Vec<Vec<f64>>,
}

#[derive(Debug, Deserialize)]
pub struct HealthResponse {
    pub status: String,
    pub model: String,
    #[serde(default)]
    pub dim: Option<usize>,
}

/// Client for an embedding sidecar speaking `POST /embed` and `GET /health`.
pub struct RemoteProvider {
    base_url: String,
    model: String,
    tag: String,
    attempts: u32,
    client: reqwest::blocking::Client,
}

impl RemoteProvider {
    pub fn new(base_url: &str, model: &str, attempts: u32, timeout: Duration) -> Result<Self> {
        let client = reqwest::blocking::Client::builder()
            .timeout(timeout)
            .build()
            .map_err(|e| Error::Invalid(format!("http client: {e}")))?;
        Ok(RemoteProvider {
            base_url: base_url.trim_end_matches('/').to_string(),
            model: model.to_string(),
            tag: format!("remote:{model}"),
            attempts: attempts.max(1),
            client,
        })
    }

    pub fn health(&self) -> Result<HealthResponse> {
        let resp = self
            .client
            .get(format!("{}/health", self.base_url))
            .send()
            .map_err(|e| Error::Transport {
                attempts: 1,
                message: error_chain(&e),
            })?;
        resp.json().map_err(|e| Error::Protocol(e.to_string()))
    }

    fn post(&self, texts: &[String]) -> std::result::Result<EmbedResponse, String> {
        let resp = self
            .client
            .post(format!("{}/embed", self.base_url))
            .json(&EmbedRequest { texts })
            .send()
            .map_err(|e| error_chain(&e))?;
        if !resp.status().is_success() {
            return Err(format!("HTTP {}", resp.status()));
        }
        resp.json().map_err(|e| error_chain(&e))
    }
}

impl EmbeddingProvider for RemoteProvider {
    fn tag(&self) -> &str {
        &self.tag
    }

    fn embed_batch(&self, texts: &[String]) -> Result<Vec<Vec<f64>>> {
        let mut last = String::new();
        for attempt in 0..self.attempts {
            if attempt > 0 {
                std::thread::sleep(Duration::from_millis(200 << attempt.min(5)));
            }
            match self.post(texts) {
                Ok(r) => {
                    if r.model != self.model {
                        return Err(Error::Protocol(format!(
                            "sidecar serves `{}` but `{}` was configured",
                            r.model, self.model
                        )));
                    }
                    if r.embeddings.len() != texts.len() {
                        return Err(Error::Protocol(format!(
                            "{} embeddings for {} texts",
                            r.embeddings.len(),
                            texts.len()
                        )));
                    }
                    if let Some(bad) = r.embeddings.iter().find(|e| e.len() != r.dim) {
                        return Err(Error::Protocol(format!(
                            "embedding of length {} in a batch declared dim {}",
                            bad.len(),
                            r.dim
                        )));
                    }
                    return Ok(r.embeddings);
                }
                Err(e) => last = e,
            }
        }
        Err(Error::Transport {
            attempts: self.attempts,
            message: last,
        })
    }
}

const CACHE_MAGIC: &[u8; 4] = b"CRSE";

/// Write-through cache in front of another provider. Entries live in memory
/// for the run and, when a directory is given, on disk as
/// `magic | dim (u32 LE) | dim x f64 LE`.
pub struct CachedProvider {
    inner: Box<dyn EmbeddingProvider>,
    dir: Option<PathBuf>,
    memory: Mutex<HashMap<String, Vec<f64>>>,
    inner_texts: AtomicUsize,
}

impl CachedProvider {
    pub fn new(inner: Box<dyn EmbeddingProvider>, dir: Option<PathBuf>) -> Self {
        CachedProvider {
            inner,
            dir,
            memory: Mutex::new(HashMap::new()),
            inner_texts: AtomicUsize::new(0),
        }
    }

    /// Number of texts forwarded to the inner provider so far.
    pub fn inner_calls(&self) -> usize {
        self.inner_texts.load(Ordering::SeqCst)
    }

    pub fn key(&self, text: &str) -> String {
        let mut h = Sha256::new();
        h.update(self.inner.tag().as_bytes());
        h.update([0u8]);
        h.update(text.as_bytes());
        hex::encode(h.finalize())
    }

    pub fn entry_path(&self, text: &str) -> Option<PathBuf> {
        self.dir.as_ref().map(|d| d.join(format!("{}.bin", self.key(text))))
    }

    fn read_disk(path: &Path) -> Option<Vec<f64>> {
        let bytes = fs::read(path).ok()?;
        let decoded = (|| {
            if bytes.len() < 8 || &bytes[..4] != CACHE_MAGIC {
                return None;
            }
            let dim = u32::from_le_bytes(bytes[4..8].try_into().ok()?) as usize;
            if dim == 0 || bytes.len() != 8 + 8 * dim {
                return None;
            }
            let values: Vec<f64> = bytes[8..]
                .chunks_exact(8)
                .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
                .collect();
            values.iter().all(|v| v.is_finite()).then_some(values)
        })();
        if decoded.is_none() {
            log::warn!("discarding corrupt embedding cache entry {}", path.display());
        }
        decoded
    }

    fn write_disk(path: &Path, values: &[f64]) -> Result<()> {
        let dir = path.parent().unwrap_or(Path::new("."));
        fs::create_dir_all(dir)?;
        let mut bytes = Vec::with_capacity(8 + 8 * values.len());
        bytes.extend_from_slice(CACHE_MAGIC);
        bytes.extend_from_slice(&(values.len() as u32).to_le_bytes());
        for v in values {
            bytes.extend_from_slice(&v.to_le_bytes());
        }
        let tmp = tempfile::NamedTempFile::new_in(dir)?;
        fs::write(tmp.path(), &bytes)?;
        tmp.persist(path).map_err(|e| Error::Io(e.error))?;
        Ok(())
    }
}

impl EmbeddingProvider for CachedProvider {
    fn tag(&self) -> &str {
        self.inner.tag()
    }

    fn embed_batch(&self, texts: &[String]) -> Result<Vec<Vec<f64>>> {
        let mut out: Vec<Option<Vec<f64>>> = vec![None; texts.len()];
        let mut missing: Vec<String> = Vec::new();
        {
            let mem = self.memory.lock().unwrap();
            for (i, t) in texts.iter().enumerate() {
                if let Some(v) = mem.get(t) {
                    out[i] = Some(v.clone());
                }
            }
        }
        for (i, t) in texts.iter().enumerate() {
            if out[i].is_some() {
                continue;
            }
            if let Some(v) = self.entry_path(t).and_then(|p| Self::read_disk(&p)) {
                self.memory.lock().unwrap().insert(t.clone(), v.clone());
                out[i] = Some(v);
            } else if !missing.contains(t) {
                missing.push(t.clone());
            }
        }

        if !missing.is_empty() {
            self.inner_texts.fetch_add(missing.len(), Ordering::SeqCst);
            let fresh = self.inner.embed_batch(&missing)?;
            if fresh.len() != missing.len() {
                return Err(Error::Protocol(format!(
                    "provider returned {} vectors for {} texts",
                    fresh.len(),
                    missing.len()
                )));
            }
            let mut mem = self.memory.lock().unwrap();
            for (t, v) in missing.iter().zip(fresh) {
                if let Some(p) = self.entry_path(t) {
                    Self::write_disk(&p, &v)?;
                }
                mem.insert(t.clone(), v);
            }
            for (i, t) in texts.iter().enumerate() {
                if out[i].is_none() {
                    out[i] = mem.get(t).cloned();
                }
            }
        }
        Ok(out.into_iter().map(|v| v.expect("filled")).collect())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "lowercase")]
pub enum ProviderKind {
    Remote { url: String, model: String },
    Deterministic { seed: u64 },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ProviderConfig {
    pub kind: ProviderKind,
    pub batch_size: usize,
    pub normalize: bool,
    /// Wrap the provider in a cache (memory always, disk when set).
    pub cache_dir: Option<PathBuf>,
    pub attempts: u32,
    pub timeout_s: u64,
}

impl Default for ProviderConfig {
    fn default() -> Self {
        ProviderConfig {
            kind: ProviderKind::Deterministic { seed: 0 },
            batch_size: 32,
            normalize: true,
            cache_dir: None,
            attempts: 3,
            timeout_s: 120,
        }
    }
}

/// A provider plus batching and normalization.
#[derive(Clone)]
pub struct Embedder {
    provider: Arc<dyn EmbeddingProvider>,
    batch_size: usize,
    normalize: bool,
}

impl Embedder {
    pub fn new(provider: Arc<dyn EmbeddingProvider>, batch_size: usize, normalize: bool) -> Result<Self> {
        if batch_size == 0 {
            return Err(Error::Invalid("batch_size must be >= 1".into()));
        }
        Ok(Embedder {
            provider,
            batch_size,
            normalize,
        })
    }

    pub fn from_config(cfg: &ProviderConfig) -> Result<Self> {
        let base: Box<dyn EmbeddingProvider> = match &cfg.kind {
            ProviderKind::Deterministic { seed } => Box::new(DeterministicProvider::new(*seed)),
            ProviderKind::Remote { url, model } => Box::new(RemoteProvider::new(
                url,
                model,
                cfg.attempts,
                Duration::from_secs(cfg.timeout_s),
            )?),
        };
        let cached = CachedProvider::new(base, cfg.cache_dir.clone());
        Embedder::new(Arc::new(cached), cfg.batch_size, cfg.normalize)
    }

    pub fn tag(&self) -> &str {
        self.provider.tag()
    }

    /// Embed texts in order, batching by `batch_size`.
    pub fn embed(&self, texts: &[String]) -> Result<Vec<EmbeddingVector>> {
        let mut out = Vec::with_capacity(texts.len());
        let mut dim = None;
        for batch in texts.chunks(self.batch_size) {
            for raw in self.provider.embed_batch(batch)? {
                if *dim.get_or_insert(raw.len()) != raw.len() {
                    return Err(Error::Protocol(format!(
                        "provider `{}` returned mixed dimensions",
                        self.tag()
                    )));
                }
                let v = EmbeddingVector::new(raw, self.tag())?;
                out.push(if self.normalize { v.normalized()? } else { v });
            }
        }
        Ok(out)
    }
}
