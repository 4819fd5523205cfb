//! Transformer encoder-decoder captioner shared by the student and the
//! teacher.
//!
//! The encoder runs over image regions with no positional signal (regions
//! form a set). The decoder uses learned positions, causal self-attention and
//! cross-attention over the encoded regions. Blocks are pre-layer-norm with a
//! GELU feed-forward; the output projection is untied from the token
//! embedding.

mod checkpoint;
mod decode;
mod layers;
mod params;
mod transformer;

use serde::{Deserialize, Serialize};

pub use checkpoint::{load_checkpoint, read_checkpoint, save_checkpoint, write_checkpoint};
pub use decode::{greedy_decode, greedy_decode_uncached, greedy_decode_with_logits};
pub use params::{Gradients, ModelParams, Tensor};
pub use transformer::{forward, forward_logits, loss_grad};

use crate::error::{Error, Result};
use crate::scalar::Scalar;

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default)]
pub struct ModelConfig {
    pub layers: usize,
    pub embed_dim: usize,
    pub heads: usize,
    pub ffn_dim: usize,
    pub vocab_size: usize,
    pub max_positions: usize,
    pub feature_dim: usize,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            layers: 2,
            embed_dim: 64,
            heads: 4,
            ffn_dim: 256,
            vocab_size: 512,
            max_positions: 32,
            feature_dim: crate::datagen::FEATURE_DIM,
        }
    }
}

impl ModelConfig {
    /// Encoder/decoder sizes used by the original captioners (2 layers,
    /// width 512, 8 heads).
    pub fn full_scale(vocab_size: usize, feature_dim: usize) -> Self {
        ModelConfig {
            layers: 2,
            embed_dim: 512,
            heads: 8,
            ffn_dim: 2048,
            vocab_size,
            max_positions: 32,
            feature_dim,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let positive = [
            ("layers", self.layers),
            ("embed_dim", self.embed_dim),
            ("heads", self.heads),
            ("ffn_dim", self.ffn_dim),
            ("vocab_size", self.vocab_size),
            ("max_positions", self.max_positions),
            ("feature_dim", self.feature_dim),
        ];
        for (name, v) in positive {
            if v == 0 {
                return Err(Error::Config(format!("{name} must be positive")));
            }
        }
        if !self.embed_dim.is_multiple_of(self.heads) {
            return Err(Error::Config(format!(
                "embed_dim {} not divisible by heads {}",
                self.embed_dim, self.heads
            )));
        }
        if self.vocab_size < 4 {
            return Err(Error::Config(
                "vocab_size must cover the 4 special tokens".into(),
            ));
        }
        Ok(())
    }
}

/// One feature vector per image region, row-major.
#[derive(Debug, Clone, PartialEq)]
pub struct ImageFeatures<T> {
    regions: usize,
    dim: usize,
    data: Vec<T>,
}

impl<T: Scalar> ImageFeatures<T> {
    pub fn new(rows: &[Vec<f64>]) -> Result<Self> {
        let dim = rows.first().map(Vec::len).unwrap_or(0);
        if rows.is_empty() || dim == 0 {
            return Err(Error::InvalidFeatures("no regions".into()));
        }
        if rows.iter().any(|r| r.len() != dim) {
            return Err(Error::InvalidFeatures("ragged region vectors".into()));
        }
        if rows.iter().flatten().any(|v| !v.is_finite()) {
            return Err(Error::InvalidFeatures("non-finite entry".into()));
        }
        Ok(ImageFeatures {
            regions: rows.len(),
            dim,
            data: rows.iter().flatten().map(|&v| T::lit(v)).collect(),
        })
    }

    pub fn regions(&self) -> usize {
        self.regions
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn region(&self, i: usize) -> &[T] {
        &self.data[i * self.dim..(i + 1) * self.dim]
    }

    pub(crate) fn data(&self) -> &[T] {
        &self.data
    }

    pub(crate) fn check(&self, config: &ModelConfig) -> Result<()> {
        if self.dim != config.feature_dim {
            return Err(Error::InvalidFeatures(format!(
                "feature dim {} != configured {}",
                self.dim, config.feature_dim
            )));
        }
        if self.regions > config.max_positions {
            return Err(Error::InvalidFeatures(format!(
                "{} regions exceed max positions {}",
                self.regions, config.max_positions
            )));
        }
        if self.data.iter().any(|v| !v.is_finite()) {
            return Err(Error::InvalidFeatures("non-finite entry".into()));
        }
        Ok(())
    }
}

/// Per-position next-token distributions.
#[derive(Debug, Clone, PartialEq)]
pub struct SoftmaxSequence<T> {
    vocab: usize,
    data: Vec<T>,
}

impl<T: Scalar> SoftmaxSequence<T> {
    /// Row-normalizes `logits` (`rows × vocab`) at the given temperature.
    pub fn from_logits(logits: &[T], vocab: usize, temperature: T) -> Self {
        let mut data: Vec<T> = logits.iter().map(|&z| z / temperature).collect();
        for row in data.chunks_exact_mut(vocab) {
            crate::linalg::softmax_in_place(row);
        }
        SoftmaxSequence { vocab, data }
    }

    /// Wraps already-normalized rows.
    pub fn from_rows(rows: &[Vec<T>]) -> Result<Self> {
        let vocab = rows.first().map(Vec::len).unwrap_or(0);
        if rows.iter().any(|r| r.len() != vocab) {
            return Err(Error::LengthMismatch("ragged softmax rows".into()));
        }
        Ok(SoftmaxSequence {
            vocab,
            data: rows.iter().flatten().copied().collect(),
        })
    }

    pub fn len(&self) -> usize {
        self.data.len().checked_div(self.vocab).unwrap_or(0)
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn vocab(&self) -> usize {
        self.vocab
    }

    pub fn row(&self, t: usize) -> &[T] {
        &self.data[t * self.vocab..(t + 1) * self.vocab]
    }

    pub fn rows(&self) -> impl Iterator<Item = &[T]> {
        self.data.chunks_exact(self.vocab.max(1))
    }
}
