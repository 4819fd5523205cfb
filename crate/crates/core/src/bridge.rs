//! Caption embeddings and the coherence weight `w` that gates both stream
//! losses.
//!
//! Two embedders are provided: a deterministic signed feature-hashing
//! embedder over subword unigrams and bigrams, and an HTTP client for an
//! external embedding service. Embeddings never carry gradients.

use std::sync::{Arc, Condvar, Mutex};
use std::thread;
use std::time::Duration;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::hash::fnv1a_seeded;
use crate::tokenizer::{normalize, Vocab};

const INDEX_SEED: u64 = 0x1d8e_4e27_c47d_124f;
const SIGN_SEED: u64 = 0x5a17_9b3c_e0f2_6a91;

#[derive(Debug, Clone, PartialEq)]
pub struct CaptionEmbedding {
    pub vector: Vec<f64>,
    /// Set for empty or degenerate captions; such embeddings are all zeros.
    pub is_zero: bool,
}

impl CaptionEmbedding {
    pub fn zero(dim: usize) -> Self {
        CaptionEmbedding {
            vector: vec![0.0; dim],
            is_zero: true,
        }
    }

    /// L2-normalizes `raw`; an all-zero vector yields the zero embedding.
    pub fn from_raw(mut raw: Vec<f64>) -> Self {
        let norm = raw.iter().map(|v| v * v).sum::<f64>().sqrt();
        if norm == 0.0 {
            let dim = raw.len();
            return Self::zero(dim);
        }
        for v in raw.iter_mut() {
            *v /= norm;
        }
        CaptionEmbedding {
            vector: raw,
            is_zero: false,
        }
    }
}

/// Semantic coherence between two captions, in `[0, 1]`.
#[derive(Debug, Clone, Copy, PartialEq, PartialOrd, Serialize, Deserialize)]
pub struct CoherenceWeight(f64);

impl CoherenceWeight {
    pub const NEUTRAL: CoherenceWeight = CoherenceWeight(0.5);

    /// Clamps into `[0, 1]`; NaN maps to the neutral weight.
    pub fn new(w: f64) -> Self {
        if w.is_nan() {
            Self::NEUTRAL
        } else {
            CoherenceWeight(w.clamp(0.0, 1.0))
        }
    }

    pub fn value(self) -> f64 {
        self.0
    }
}

/// `(cos(a, b) + 1) / 2`, or 0.5 when either side is degenerate.
pub fn coherence_weight(a: &CaptionEmbedding, b: &CaptionEmbedding) -> CoherenceWeight {
    if a.is_zero || b.is_zero || a.vector.len() != b.vector.len() {
        return CoherenceWeight::NEUTRAL;
    }
    if a.vector == b.vector {
        return CoherenceWeight(1.0);
    }
    let cos: f64 = a.vector.iter().zip(&b.vector).map(|(x, y)| x * y).sum();
    CoherenceWeight::new((cos + 1.0) / 2.0)
}

pub trait SemanticBridge: Send + Sync {
    fn dim(&self) -> usize;

    fn embed_batch(&self, texts: &[&str]) -> Result<Vec<CaptionEmbedding>>;

    /// Coherence between a ground-truth caption and a partner model's decode.
    fn coherence(&self, ground_truth: &str, predicted: &str) -> Result<CoherenceWeight> {
        let e = self.embed_batch(&[ground_truth, predicted])?;
        Ok(coherence_weight(&e[0], &e[1]))
    }
}

/// Signed feature hashing of subword unigrams and adjacent bigrams.
#[derive(Debug, Clone)]
pub struct HashedEmbedder {
    vocab: Arc<Vocab>,
    dim: usize,
}

impl HashedEmbedder {
    pub fn new(vocab: Arc<Vocab>, dim: usize) -> Self {
        assert!(dim > 0, "embedding dimension must be positive");
        HashedEmbedder { vocab, dim }
    }

    pub fn embed(&self, text: &str) -> CaptionEmbedding {
        let ids = self.vocab.encode(text);
        let pieces = self.vocab.pieces(&ids);
        let mut raw = vec![0.0; self.dim];
        let mut add = |feature: &[u8]| {
            let idx = (fnv1a_seeded(INDEX_SEED, feature) % self.dim as u64) as usize;
            let sign = if fnv1a_seeded(SIGN_SEED, feature) & 1 == 0 {
                1.0
            } else {
                -1.0
            };
            raw[idx] += sign;
        };
        for p in &pieces {
            add(p.as_bytes());
        }
        let mut buf = Vec::new();
        for pair in pieces.windows(2) {
            buf.clear();
            buf.extend_from_slice(pair[0].as_bytes());
            buf.push(b' ');
            buf.extend_from_slice(pair[1].as_bytes());
            add(&buf);
        }
        CaptionEmbedding::from_raw(raw)
    }
}

impl SemanticBridge for HashedEmbedder {
    fn dim(&self) -> usize {
        self.dim
    }

    fn embed_batch(&self, texts: &[&str]) -> Result<Vec<CaptionEmbedding>> {
        Ok(texts.iter().map(|t| self.embed(t)).collect())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum BridgeKind {
    Hashed,
    Remote,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct BridgeConfig {
    pub kind: BridgeKind,
    pub dim: usize,
    pub endpoint: Option<String>,
    pub timeout_ms: u64,
    pub max_in_flight: usize,
}

impl Default for BridgeConfig {
    fn default() -> Self {
        BridgeConfig {
            kind: BridgeKind::Hashed,
            dim: 256,
            endpoint: None,
            timeout_ms: 10_000,
            max_in_flight: 4,
        }
    }
}

impl BridgeConfig {
    pub fn validate(&self) -> Result<()> {
        if self.dim == 0 {
            return Err(Error::Config("bridge.dim must be positive".into()));
        }
        if self.kind == BridgeKind::Remote && self.endpoint.is_none() {
            return Err(Error::Config(
                "bridge.endpoint required for remote bridge".into(),
            ));
        }
        if self.max_in_flight == 0 {
            return Err(Error::Config(
                "bridge.max_in_flight must be positive".into(),
            ));
        }
        Ok(())
    }

    pub fn build(&self, vocab: Arc<Vocab>) -> Result<Box<dyn SemanticBridge>> {
        self.validate()?;
        Ok(match self.kind {
            BridgeKind::Hashed => Box::new(HashedEmbedder::new(vocab, self.dim)),
            BridgeKind::Remote => Box::new(RemoteEmbedder::new(
                self.endpoint.clone().unwrap_or_default(),
                self.dim,
                Duration::from_millis(self.timeout_ms),
                self.max_in_flight,
            )),
        })
    }
}

/// Counting semaphore bounding concurrent requests.
#[derive(Debug)]
struct Slots {
    free: Mutex<usize>,
    cv: Condvar,
}

struct SlotGuard<'a>(&'a Slots);

impl Slots {
    fn acquire(&self) -> SlotGuard<'_> {
        let mut free = self.free.lock().unwrap_or_else(|e| e.into_inner());
        while *free == 0 {
            free = self.cv.wait(free).unwrap_or_else(|e| e.into_inner());
        }
        *free -= 1;
        SlotGuard(self)
    }
}

impl Drop for SlotGuard<'_> {
    fn drop(&mut self) {
        *self.0.free.lock().unwrap_or_else(|e| e.into_inner()) += 1;
        self.0.cv.notify_one();
    }
}

#[derive(Serialize)]
struct EmbedRequest<'a> {
    texts: &'a [&'a str],
}

#[derive(Deserialize)]
struct EmbedResponse {
    vectors: Vec<Vec<f64>>,
}

/// Client for a `POST {endpoint}/embed` JSON embedding service.
pub struct RemoteEmbedder {
    url: String,
    dim: usize,
    agent: ureq::Agent,
    slots: Slots,
    attempts: u32,
    backoff: Duration,
}

impl RemoteEmbedder {
    pub fn new(endpoint: String, dim: usize, timeout: Duration, max_in_flight: usize) -> Self {
        let agent = ureq::Agent::config_builder()
            .timeout_global(Some(timeout))
            .http_status_as_error(true)
            .build()
            .into();
        RemoteEmbedder {
            url: format!("{}/embed", endpoint.trim_end_matches('/')),
            dim,
            agent,
            slots: Slots {
                free: Mutex::new(max_in_flight.max(1)),
                cv: Condvar::new(),
            },
            attempts: 3,
            backoff: Duration::from_millis(200),
        }
    }

    /// Overrides the retry base delay (tests use a short one).
    pub fn with_backoff(mut self, backoff: Duration) -> Self {
        self.backoff = backoff;
        self
    }

    fn post(&self, texts: &[&str]) -> Result<String> {
        let _slot = self.slots.acquire();
        let mut last_err = String::new();
        for attempt in 0..self.attempts {
            if attempt > 0 {
                thread::sleep(self.backoff * 2u32.pow(attempt - 1));
            }
            let sent = self
                .agent
                .post(&self.url)
                .send_json(&EmbedRequest { texts })
                .and_then(|mut resp| resp.body_mut().read_to_string());
            match sent {
                Ok(body) => return Ok(body),
                Err(e) => last_err = e.to_string(),
            }
        }
        Err(Error::BridgeUnavailable(last_err))
    }
}

impl SemanticBridge for RemoteEmbedder {
    fn dim(&self) -> usize {
        self.dim
    }

    fn embed_batch(&self, texts: &[&str]) -> Result<Vec<CaptionEmbedding>> {
        if texts.is_empty() {
            return Ok(Vec::new());
        }
        let body = self.post(texts)?;
        let resp: EmbedResponse =
            serde_json::from_str(&body).map_err(|_| Error::BridgeInvalidVector)?;
        if resp.vectors.len() != texts.len() {
            return Err(Error::BridgeInvalidVector);
        }
        texts
            .iter()
            .zip(resp.vectors)
            .map(|(text, v)| {
                if v.len() != self.dim {
                    return Err(Error::BridgeDimensionMismatch {
                        expected: self.dim,
                        got: v.len(),
                    });
                }
                if v.iter().any(|x| !x.is_finite()) {
                    return Err(Error::BridgeInvalidVector);
                }
                if normalize(text).is_empty() {
                    return Ok(CaptionEmbedding::zero(self.dim));
                }
                Ok(CaptionEmbedding::from_raw(v))
            })
            .collect()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn embedder() -> HashedEmbedder {
        let corpus = [
            "a small red circle and a large blue square",
            "a medium green triangle",
        ];
        let vocab = Vocab::train(&[&corpus[..]], 128).unwrap();
        HashedEmbedder::new(Arc::new(vocab), 256)
    }

    fn unit(v: Vec<f64>) -> CaptionEmbedding {
        CaptionEmbedding::from_raw(v)
    }

    #[test]
    fn embed_is_deterministic_and_normalized() {
        let e = embedder();
        let a = e.embed("a red circle");
        assert_eq!(a, e.embed("a red circle"));
        let norm: f64 = a.vector.iter().map(|v| v * v).sum::<f64>().sqrt();
        assert!((norm - 1.0).abs() < 1e-6);
        assert!(e.embed("").is_zero);
        assert!(e.embed("   \t").is_zero);
    }

    #[test]
    fn bigrams_make_embeddings_order_sensitive() {
        let e = embedder();
        assert_ne!(
            e.embed("red square blue circle"),
            e.embed("blue circle red square")
        );
    }

    #[test]
    fn weight_endpoints() {
        let a = unit(vec![1.0, 0.0]);
        assert_eq!(coherence_weight(&a, &a).value(), 1.0);
        assert_eq!(coherence_weight(&a, &unit(vec![-1.0, 0.0])).value(), 0.0);
        assert_eq!(coherence_weight(&a, &unit(vec![0.0, 3.0])).value(), 0.5);
        assert_eq!(
            coherence_weight(&a, &CaptionEmbedding::zero(2)).value(),
            0.5
        );
    }

    #[test]
    fn weight_is_symmetric_and_one_on_self() {
        let e = embedder();
        let a = e.embed("a small red circle");
        let b = e.embed("a large blue square and a medium green triangle");
        assert_eq!(coherence_weight(&a, &b), coherence_weight(&b, &a));
        let w = e
            .coherence("a small red circle", "a small red circle")
            .unwrap();
        assert!((w.value() - 1.0).abs() < 1e-6);
    }

    #[test]
    fn remote_config_requires_endpoint() {
        let cfg = BridgeConfig {
            kind: BridgeKind::Remote,
            ..Default::default()
        };
        assert!(cfg.validate().is_err());
    }
}
