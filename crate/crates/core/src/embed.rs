//! Record embeddings.
//!
//! The built-in embedder hashes character n-grams into `dimension` buckets with
//! a sign bit taken from the hash, sums term frequencies, and L2-normalizes.
//! An external HTTP service can be used instead.

use std::collections::HashMap;
use std::time::Duration;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use serde_json::{json, Value};

use crate::coordination::CoordinatedDataset;
use crate::error::{Error, Result};
use crate::tables::EntityRef;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum EmbedderKind {
    #[default]
    HashedNgram,
    ExternalService,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct EmbedderConfig {
    pub kind: EmbedderKind,
    pub dimension: usize,
    /// Whitespace tokens kept before embedding.
    pub max_seq_length: usize,
    pub batch_size: usize,
    pub ngram_n: usize,
    pub endpoint: Option<String>,
    pub timeout_secs: f64,
    pub retry_limit: u32,
}

impl Default for EmbedderConfig {
    fn default() -> Self {
        Self {
            kind: EmbedderKind::HashedNgram,
            dimension: 384,
            max_seq_length: 64,
            batch_size: 512,
            ngram_n: 3,
            endpoint: None,
            timeout_secs: 60.0,
            retry_limit: 2,
        }
    }
}

impl EmbedderConfig {
    pub fn validate(&self) -> Result<()> {
        if self.dimension < 8 {
            return Err(Error::Config("embedding dimension must be >= 8".into()));
        }
        if self.max_seq_length == 0 || self.batch_size == 0 || self.ngram_n == 0 {
            return Err(Error::Config(
                "max_seq_length, batch_size and ngram_n must be positive".into(),
            ));
        }
        if self.kind == EmbedderKind::ExternalService && self.endpoint.is_none() {
            return Err(Error::Config("external embedder needs an endpoint".into()));
        }
        Ok(())
    }
}

/// Unit-norm, finite embedding.
#[derive(Debug, Clone, PartialEq)]
pub struct EmbeddingVector(Vec<f32>);

impl EmbeddingVector {
    /// L2-normalizes `values`. A zero vector maps to the first basis vector.
    pub fn normalized(values: Vec<f32>) -> Result<Self> {
        if values.is_empty() {
            return Err(Error::DimensionMismatch {
                expected: 1,
                found: 0,
            });
        }
        if values.iter().any(|v| !v.is_finite()) {
            return Err(Error::InvalidArgument("embedding has NaN or infinite values".into()));
        }
        let norm = values.iter().map(|&v| f64::from(v) * f64::from(v)).sum::<f64>().sqrt();
        if norm == 0.0 {
            let mut basis = vec![0.0; values.len()];
            basis[0] = 1.0;
            return Ok(Self(basis));
        }
        Ok(Self(values.into_iter().map(|v| (f64::from(v) / norm) as f32).collect()))
    }

    pub fn as_slice(&self) -> &[f32] {
        &self.0
    }

    pub fn into_inner(self) -> Vec<f32> {
        self.0
    }

    pub fn dimension(&self) -> usize {
        self.0.len()
    }
}

impl AsRef<[f32]> for EmbeddingVector {
    fn as_ref(&self) -> &[f32] {
        &self.0
    }
}

/// Dot product with eight independent accumulators.
#[inline]
pub fn dot(a: &[f32], b: &[f32]) -> f32 {
    debug_assert_eq!(a.len(), b.len());
    let mut acc = [0.0f32; 8];
    let chunks_a = a.chunks_exact(8);
    let chunks_b = b.chunks_exact(8);
    let tail: f32 = chunks_a
        .remainder()
        .iter()
        .zip(chunks_b.remainder())
        .map(|(x, y)| x * y)
        .sum();
    for (ca, cb) in chunks_a.zip(chunks_b) {
        for i in 0..8 {
            acc[i] += ca[i] * cb[i];
        }
    }
    acc.iter().sum::<f32>() + tail
}

/// `1 - u·v` for unit vectors, clamped to `[0, 2]`.
#[inline]
pub fn cosine_distance(a: &[f32], b: &[f32]) -> f32 {
    (1.0 - dot(a, b)).clamp(0.0, 2.0)
}

/// FNV-1a, 64-bit. Stable across platforms and toolchains.
fn fnv1a(bytes: &[u8]) -> u64 {
    let mut h: u64 = 0xcbf2_9ce4_8422_2325;
    for &b in bytes {
        h ^= u64::from(b);
        h = h.wrapping_mul(0x0000_0100_0000_01b3);
    }
    h
}

fn hashed_ngram(text: &str, config: &EmbedderConfig) -> EmbeddingVector {
    let dim = config.dimension;
    let lowered = text.to_lowercase();
    let tokens: Vec<&str> = lowered.split_whitespace().take(config.max_seq_length).collect();
    let mut values = vec![0.0f32; dim];
    if tokens.is_empty() {
        values[0] = 1.0;
        return EmbeddingVector(values);
    }
    let padded = format!(" {} ", tokens.join(" "));
    let chars: Vec<(usize, char)> = padded.char_indices().collect();
    let n = config.ngram_n.min(chars.len());
    let mut counts: HashMap<u64, u32> = HashMap::new();
    for start in 0..=chars.len() - n {
        let from = chars[start].0;
        let to = chars
            .get(start + n)
            .map_or(padded.len(), |&(i, _)| i);
        *counts.entry(fnv1a(&padded.as_bytes()[from..to])).or_default() += 1;
    }
    // sublinear tf: separators and field names repeat in every record
    for (h, c) in counts {
        let bucket = (h % dim as u64) as usize;
        let sign = if h >> 63 == 1 { -1.0 } else { 1.0 };
        values[bucket] += sign * (1.0 + (c as f32).ln());
    }
    EmbeddingVector::normalized(values).expect("finite by construction")
}

/// Embeds one text. Deterministic for the hashed embedder.
pub fn embed_text(text: &str, config: &EmbedderConfig) -> Result<EmbeddingVector> {
    config.validate()?;
    match config.kind {
        EmbedderKind::HashedNgram => Ok(hashed_ngram(text, config)),
        EmbedderKind::ExternalService => Ok(ServiceClient::new(config)?
            .embed(&[text])
            .map_err(|e| with_entity(e, None))?
            .remove(0)),
    }
}

/// Row-major embedding matrix per table, addressed by [`EntityRef`].
#[derive(Debug, Clone, PartialEq)]
pub struct Embeddings {
    dim: usize,
    tables: Vec<Vec<f32>>,
}

impl Embeddings {
    pub fn new(dim: usize, tables: Vec<Vec<f32>>) -> Result<Self> {
        for t in &tables {
            if t.len() % dim != 0 {
                return Err(Error::DimensionMismatch {
                    expected: dim,
                    found: t.len() % dim,
                });
            }
        }
        Ok(Self { dim, tables })
    }

    /// Builds the store from `(entity, vector)` pairs covering rows `0..m` of every table.
    pub fn from_vectors(dim: usize, items: impl IntoIterator<Item = (EntityRef, EmbeddingVector)>) -> Result<Self> {
        let mut rows: Vec<Vec<Option<EmbeddingVector>>> = Vec::new();
        for (e, v) in items {
            if v.dimension() != dim {
                return Err(Error::DimensionMismatch {
                    expected: dim,
                    found: v.dimension(),
                });
            }
            let t = e.table_id as usize;
            let r = e.row_index as usize;
            if rows.len() <= t {
                rows.resize_with(t + 1, Vec::new);
            }
            if rows[t].len() <= r {
                rows[t].resize(r + 1, None);
            }
            rows[t][r] = Some(v);
        }
        let tables = rows
            .into_iter()
            .enumerate()
            .map(|(t, rows)| {
                let mut flat = Vec::with_capacity(rows.len() * dim);
                for (r, v) in rows.into_iter().enumerate() {
                    let v = v.ok_or_else(|| Error::UnknownEntity {
                        entity: EntityRef::new(t as u32, r as u32),
                    })?;
                    flat.extend_from_slice(v.as_slice());
                }
                Ok(flat)
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(Self { dim, tables })
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn n_tables(&self) -> usize {
        self.tables.len()
    }

    pub fn table_len(&self, table_id: u32) -> usize {
        self.tables.get(table_id as usize).map_or(0, |t| t.len() / self.dim)
    }

    pub fn len(&self) -> usize {
        self.tables.iter().map(|t| t.len() / self.dim).sum()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn get(&self, entity: EntityRef) -> Option<&[f32]> {
        let t = self.tables.get(entity.table_id as usize)?;
        let start = entity.row_index as usize * self.dim;
        t.get(start..start + self.dim)
    }

    /// Panicking lookup for callers that have already validated coverage.
    pub fn vector(&self, entity: EntityRef) -> &[f32] {
        self.get(entity)
            .unwrap_or_else(|| panic!("no embedding for {entity}"))
    }

    pub fn table(&self, table_id: u32) -> Option<&[f32]> {
        self.tables.get(table_id as usize).map(Vec::as_slice)
    }

    pub fn iter(&self) -> impl Iterator<Item = (EntityRef, &[f32])> + '_ {
        self.tables.iter().enumerate().flat_map(move |(t, flat)| {
            flat.chunks_exact(self.dim)
                .enumerate()
                .map(move |(r, v)| (EntityRef::new(t as u32, r as u32), v))
        })
    }

    pub(crate) fn raw_tables(&self) -> &[Vec<f32>] {
        &self.tables
    }
}

/// Embeds every coordinated record, `batch_size` texts at a time.
pub fn embed_dataset(dataset: &CoordinatedDataset, config: &EmbedderConfig) -> Result<Embeddings> {
    config.validate()?;
    let dim = config.dimension;
    let client = match config.kind {
        EmbedderKind::ExternalService => Some(ServiceClient::new(config)?),
        EmbedderKind::HashedNgram => None,
    };
    let mut tables = Vec::with_capacity(dataset.texts.len());
    for (t, rows) in dataset.texts.iter().enumerate() {
        let chunks: Vec<Result<Vec<f32>>> = rows
            .par_chunks(config.batch_size)
            .enumerate()
            .map(|(chunk_index, chunk)| {
                let vectors = match &client {
                    None => chunk.iter().map(|s| hashed_ngram(s, config)).collect(),
                    Some(client) => {
                        let texts: Vec<&str> = chunk.iter().map(String::as_str).collect();
                        let first = EntityRef::new(t as u32, (chunk_index * config.batch_size) as u32);
                        client.embed(&texts).map_err(|e| with_entity(e, Some(first)))?
                    }
                };
                let mut flat = Vec::with_capacity(chunk.len() * dim);
                for v in vectors {
                    flat.extend_from_slice(v.as_slice());
                }
                Ok(flat)
            })
            .collect();
        let mut flat = Vec::with_capacity(rows.len() * dim);
        for chunk in chunks {
            flat.extend(chunk?);
        }
        tables.push(flat);
    }
    Embeddings::new(dim, tables)
}

fn with_entity(err: Error, entity: Option<EntityRef>) -> Error {
    match err {
        Error::Embedding {
            attempts, message, ..
        } => Error::Embedding {
            attempts,
            entity,
            message,
        },
        other => other,
    }
}

/// HTTP client for `{texts: [...]}` → `{vectors: [[...]]}` services.
struct ServiceClient<'a> {
    config: &'a EmbedderConfig,
    agent: ureq::Agent,
}

impl<'a> ServiceClient<'a> {
    fn new(config: &'a EmbedderConfig) -> Result<Self> {
        config.validate()?;
        let agent = ureq::Agent::config_builder()
            .timeout_global(Some(Duration::from_secs_f64(config.timeout_secs)))
            .build()
            .into();
        Ok(Self { config, agent })
    }

    fn attempt(&self, texts: &[&str]) -> std::result::Result<Vec<EmbeddingVector>, String> {
        let endpoint = self.config.endpoint.as_deref().unwrap_or_default();
        let mut response = self
            .agent
            .post(endpoint)
            .send_json(json!({ "texts": texts }))
            .map_err(|e| e.to_string())?;
        let value: Value = response
            .body_mut()
            .read_json()
            .map_err(|e| format!("bad response body: {e}"))?;
        let vectors = value
            .get("vectors")
            .and_then(Value::as_array)
            .ok_or("response has no `vectors` array")?;
        if vectors.len() != texts.len() {
            return Err(format!("expected {} vectors, got {}", texts.len(), vectors.len()));
        }
        vectors
            .iter()
            .map(|v| {
                let values: Vec<f32> = v
                    .as_array()
                    .ok_or("vector is not an array")?
                    .iter()
                    .map(|x| x.as_f64().map(|x| x as f32).ok_or("non-numeric component"))
                    .collect::<std::result::Result<_, _>>()?;
                if values.len() != self.config.dimension {
                    return Err(format!(
                        "dimension mismatch: expected {}, found {}",
                        self.config.dimension,
                        values.len()
                    ));
                }
                EmbeddingVector::normalized(values).map_err(|e| e.to_string())
            })
            .collect()
    }

    fn embed(&self, texts: &[&str]) -> Result<Vec<EmbeddingVector>> {
        let attempts = self.config.retry_limit + 1;
        let mut last = String::new();
        for attempt in 0..attempts {
            match self.attempt(texts) {
                Ok(v) => return Ok(v),
                Err(e) => {
                    log::warn!("embedding attempt {}/{attempts} failed: {e}", attempt + 1);
                    last = e;
                }
            }
        }
        Err(Error::Embedding {
            attempts,
            entity: None,
            message: last,
        })
    }
}
