//! Sentence-embedding rerank of lexical candidates.
//!
//! Two embedding backends sit behind [`Embedder`]: a remote HTTP service and
//! an offline hashing embedder that is a pure function of the input text.

use std::collections::{BTreeMap, HashMap};
use std::time::Duration;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::http::{HttpClient, HttpFailure, RetryPolicy};
use crate::ingest::Claim;
use crate::par;
use crate::retrieval::{tokenize, ScoredCandidate};

#[derive(Debug, thiserror::Error)]
pub enum EmbedError {
    #[error("embedding provider unavailable: {0}")]
    ProviderUnavailable(HttpFailure),
    #[error("embedding dimension mismatch: expected {expected}, got {got}")]
    DimensionMismatch { expected: usize, got: usize },
    #[error("cosine of a zero vector")]
    ZeroVector,
    #[error("cannot embed empty text")]
    EmptyText,
    #[error("embedding contains a non-finite value")]
    NonFinite,
    #[error("invalid embedding provider: {0}")]
    InvalidSpec(String),
    #[error("malformed embedding response: {0}")]
    BadResponse(String),
    #[error("no text for post `{0}`")]
    UnknownPost(String),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EmbeddingVector(Vec<f64>);

impl EmbeddingVector {
    pub fn new(values: Vec<f64>) -> Result<Self, EmbedError> {
        if values.iter().all(|v| v.is_finite()) {
            Ok(Self(values))
        } else {
            Err(EmbedError::NonFinite)
        }
    }

    pub fn dim(&self) -> usize {
        self.0.len()
    }

    pub fn values(&self) -> &[f64] {
        &self.0
    }

    pub fn norm(&self) -> f64 {
        self.0.iter().map(|v| v * v).sum::<f64>().sqrt()
    }

    pub fn scaled(&self, k: f64) -> Self {
        Self(self.0.iter().map(|v| v * k).collect())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum EmbeddingKind {
    Remote,
    DeterministicLocal,
}

fn default_dim() -> usize {
    384
}
fn default_batch() -> usize {
    64
}
fn default_retries() -> u32 {
    3
}
fn default_backoff_ms() -> u64 {
    250
}
fn default_timeout_secs() -> u64 {
    30
}
fn default_parallelism() -> usize {
    4
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EmbeddingProviderSpec {
    pub kind: EmbeddingKind,
    #[serde(default)]
    pub endpoint: Option<String>,
    #[serde(default)]
    pub model_name: Option<String>,
    #[serde(default = "default_dim")]
    pub dim: usize,
    #[serde(default = "default_batch")]
    pub batch_size: usize,
    #[serde(default = "default_retries")]
    pub max_retries: u32,
    #[serde(default = "default_backoff_ms")]
    pub backoff_ms: u64,
    #[serde(default = "default_timeout_secs")]
    pub timeout_secs: u64,
    /// Upper bound on concurrent batch requests.
    #[serde(default = "default_parallelism")]
    pub parallelism: usize,
    /// Environment variable holding a bearer token, if any.
    #[serde(default)]
    pub api_key_env: Option<String>,
}

impl EmbeddingProviderSpec {
    pub fn local(dim: usize) -> Self {
        Self {
            kind: EmbeddingKind::DeterministicLocal,
            endpoint: None,
            model_name: None,
            dim,
            batch_size: default_batch(),
            max_retries: default_retries(),
            backoff_ms: default_backoff_ms(),
            timeout_secs: default_timeout_secs(),
            parallelism: default_parallelism(),
            api_key_env: None,
        }
    }

    pub fn remote(endpoint: impl Into<String>, model_name: impl Into<String>, dim: usize) -> Self {
        Self {
            kind: EmbeddingKind::Remote,
            endpoint: Some(endpoint.into()),
            model_name: Some(model_name.into()),
            ..Self::local(dim)
        }
    }

    pub fn validate(&self) -> Result<(), EmbedError> {
        if self.dim == 0 {
            return Err(EmbedError::InvalidSpec("dim must be positive".into()));
        }
        if self.batch_size == 0 || self.batch_size > 64 {
            return Err(EmbedError::InvalidSpec("batch_size must be within 1..=64".into()));
        }
        if self.kind == EmbeddingKind::Remote && self.endpoint.is_none() {
            return Err(EmbedError::InvalidSpec("remote provider requires an endpoint".into()));
        }
        Ok(())
    }
}

pub trait Embedder: Send + Sync {
    fn dim(&self) -> usize;

    /// Embeds texts in order. Implementations batch as they see fit.
    fn embed_batch(&self, texts: &[&str]) -> Result<Vec<EmbeddingVector>, EmbedError>;
}

pub fn embedder_for(spec: &EmbeddingProviderSpec) -> Result<Box<dyn Embedder>, EmbedError> {
    spec.validate()?;
    Ok(match spec.kind {
        EmbeddingKind::DeterministicLocal => Box::new(HashingEmbedder::new(spec.dim)),
        EmbeddingKind::Remote => Box::new(RemoteEmbedder::new(spec.clone())),
    })
}

/// Embeds one text.
pub fn embed(provider: &dyn Embedder, text: &str) -> Result<EmbeddingVector, EmbedError> {
    if text.trim().is_empty() {
        return Err(EmbedError::EmptyText);
    }
    let mut v = provider.embed_batch(&[text])?;
    v.pop().ok_or_else(|| EmbedError::BadResponse("empty batch result".into()))
}

/// Signed feature hashing of word tokens into `dim` buckets, L2-normalized.
#[derive(Debug, Clone)]
pub struct HashingEmbedder {
    dim: usize,
}

impl HashingEmbedder {
    pub fn new(dim: usize) -> Self {
        assert!(dim > 0, "embedding dim must be positive");
        Self { dim }
    }

    fn add_feature(&self, acc: &mut [f64], feature: &[u8]) {
        let h = Sha256::digest(feature);
        let mut idx = [0u8; 8];
        idx.copy_from_slice(&h[..8]);
        let bucket = (u64::from_le_bytes(idx) % self.dim as u64) as usize;
        acc[bucket] += if h[8] & 1 == 0 { 1.0 } else { -1.0 };
    }

    pub fn embed_one(&self, text: &str) -> EmbeddingVector {
        let mut acc = vec![0.0; self.dim];
        let toks = tokenize(text);
        if toks.is_empty() {
            self.add_feature(&mut acc, text.trim().as_bytes());
        } else {
            for t in toks.iter() {
                self.add_feature(&mut acc, t.as_bytes());
            }
        }
        let norm = acc.iter().map(|v| v * v).sum::<f64>().sqrt();
        if norm > 0.0 {
            acc.iter_mut().for_each(|v| *v /= norm);
        }
        EmbeddingVector(acc)
    }
}

impl Embedder for HashingEmbedder {
    fn dim(&self) -> usize {
        self.dim
    }

    fn embed_batch(&self, texts: &[&str]) -> Result<Vec<EmbeddingVector>, EmbedError> {
        Ok(texts.iter().map(|t| self.embed_one(t)).collect())
    }
}

#[derive(Serialize)]
struct EmbedRequest<'a> {
    model_name: Option<&'a str>,
    texts: &'a [&'a str],
}

#[derive(Deserialize)]
struct EmbedResponse {
    vectors: Vec<Vec<f64>>,
}

/// HTTP embedding service: POST `{model_name, texts}`, reply `{vectors}`.
pub struct RemoteEmbedder {
    spec: EmbeddingProviderSpec,
    client: HttpClient,
}

impl RemoteEmbedder {
    pub fn new(spec: EmbeddingProviderSpec) -> Self {
        let client = HttpClient::new(Duration::from_secs(spec.timeout_secs), spec.api_key_env.as_deref());
        Self { spec, client }
    }

    fn policy(&self) -> RetryPolicy {
        RetryPolicy::exponential(self.spec.max_retries, Duration::from_millis(self.spec.backoff_ms))
    }

    fn request(&self, texts: &[&str]) -> Result<Vec<EmbeddingVector>, EmbedError> {
        let url = self.spec.endpoint.as_deref().unwrap_or_default();
        let body = EmbedRequest { model_name: self.spec.model_name.as_deref(), texts };
        let reply = self
            .client
            .post_json(url, &body, &self.policy())
            .map_err(EmbedError::ProviderUnavailable)?;
        let parsed: EmbedResponse =
            serde_json::from_value(reply.body).map_err(|e| EmbedError::BadResponse(e.to_string()))?;
        if parsed.vectors.len() != texts.len() {
            return Err(EmbedError::BadResponse(format!(
                "{} vectors for {} texts",
                parsed.vectors.len(),
                texts.len()
            )));
        }
        parsed
            .vectors
            .into_iter()
            .map(|v| {
                if v.len() != self.spec.dim {
                    return Err(EmbedError::DimensionMismatch { expected: self.spec.dim, got: v.len() });
                }
                EmbeddingVector::new(v)
            })
            .collect()
    }
}

impl Embedder for RemoteEmbedder {
    fn dim(&self) -> usize {
        self.spec.dim
    }

    fn embed_batch(&self, texts: &[&str]) -> Result<Vec<EmbeddingVector>, EmbedError> {
        let chunks: Vec<&[&str]> = texts.chunks(self.spec.batch_size).collect();
        let mut out = Vec::with_capacity(texts.len());
        // Bounded fan-out: at most `parallelism` requests in flight.
        for wave in chunks.chunks(self.spec.parallelism.max(1)) {
            for batch in par::try_map(wave, |c| self.request(c))? {
                out.extend(batch);
            }
        }
        Ok(out)
    }
}

/// Cosine similarity, clamped to [−1, 1].
pub fn cosine(u: &EmbeddingVector, v: &EmbeddingVector) -> Result<f64, EmbedError> {
    if u.dim() != v.dim() {
        return Err(EmbedError::DimensionMismatch { expected: u.dim(), got: v.dim() });
    }
    let (nu, nv) = (u.norm(), v.norm());
    if nu == 0.0 || nv == 0.0 {
        return Err(EmbedError::ZeroVector);
    }
    let dot: f64 = u.0.iter().zip(&v.0).map(|(a, b)| a * b).sum();
    Ok((dot / (nu * nv)).clamp(-1.0, 1.0))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CandidatePair {
    pub claim_id: String,
    pub post_id: String,
    pub bm25_score: f64,
    pub cosine_score: f64,
}

impl CandidatePair {
    /// Stable identifier used by judgment and annotation files.
    pub fn pair_id(&self) -> String {
        pair_id(&self.claim_id, &self.post_id)
    }
}

pub fn pair_id(claim_id: &str, post_id: &str) -> String {
    format!("{claim_id}::{post_id}")
}

fn sort_pairs(pairs: &mut [CandidatePair]) {
    pairs.sort_by(|a, b| {
        b.cosine_score
            .total_cmp(&a.cosine_score)
            .then_with(|| a.post_id.cmp(&b.post_id))
    });
}

/// Orders candidates by cosine similarity between claim and post embeddings,
/// best first, ties by post id.
pub fn rerank(
    claim: &Claim,
    candidates: &[ScoredCandidate],
    post_texts: &HashMap<String, String>,
    provider: &dyn Embedder,
) -> Result<Vec<CandidatePair>, EmbedError> {
    if candidates.is_empty() {
        return Ok(Vec::new());
    }
    let mut texts: Vec<&str> = Vec::with_capacity(candidates.len() + 1);
    texts.push(&claim.text);
    for c in candidates {
        let t = post_texts.get(&c.post_id).ok_or_else(|| EmbedError::UnknownPost(c.post_id.clone()))?;
        texts.push(t);
    }
    let vectors = provider.embed_batch(&texts)?;
    let (claim_vec, post_vecs) = vectors
        .split_first()
        .ok_or_else(|| EmbedError::BadResponse("no vectors".into()))?;
    rerank_with_vectors(claim, candidates, claim_vec, post_vecs)
}

/// Rerank given precomputed embeddings, `post_vecs[i]` belonging to `candidates[i]`.
pub fn rerank_with_vectors(
    claim: &Claim,
    candidates: &[ScoredCandidate],
    claim_vec: &EmbeddingVector,
    post_vecs: &[EmbeddingVector],
) -> Result<Vec<CandidatePair>, EmbedError> {
    let mut pairs = candidates
        .iter()
        .zip(post_vecs)
        .map(|(c, v)| {
            Ok(CandidatePair {
                claim_id: claim.id.clone(),
                post_id: c.post_id.clone(),
                bm25_score: c.bm25_score,
                cosine_score: cosine(claim_vec, v)?,
            })
        })
        .collect::<Result<Vec<_>, EmbedError>>()?;
    sort_pairs(&mut pairs);
    Ok(pairs)
}

/// Takes the head of each claim's reranked list.
pub fn select_top_pairs(
    reranked: &BTreeMap<String, Vec<CandidatePair>>,
    per_claim: usize,
) -> Vec<CandidatePair> {
    reranked
        .values()
        .flat_map(|list| list.iter().take(per_claim).cloned())
        .collect()
}
