#![allow(dead_code)]

use std::sync::Arc;

use codistill::bridge::{CaptionEmbedding, CoherenceWeight, HashedEmbedder, SemanticBridge};
use codistill::datagen::{generate_corpus, NoiseConfig};
use codistill::losses::{Origin, StreamSample};
use codistill::model::{ImageFeatures, ModelConfig, ModelParams};
use codistill::tokenizer::Vocab;
use codistill::{Params, Result};

/// Layers 2, width 8, 2 heads, vocabulary of exactly 20 tokens.
pub fn tiny_setup() -> (ModelConfig, Vocab) {
    let corpus = ["abc cab bca abcabc cabbac bcacab aabbcc ccbbaa abacbc"];
    let vocab = Vocab::train(&[&corpus[..]], 20).unwrap();
    assert_eq!(vocab.len(), 20);
    let cfg = ModelConfig {
        layers: 2,
        embed_dim: 8,
        heads: 2,
        ffn_dim: 16,
        vocab_size: 20,
        max_positions: 10,
        feature_dim: 5,
    };
    (cfg, vocab)
}

pub fn features(regions: usize, dim: usize, salt: f64) -> ImageFeatures<f64> {
    let rows: Vec<Vec<f64>> = (0..regions)
        .map(|r| {
            (0..dim)
                .map(|c| ((r * dim + c) as f64 * 0.37 + salt).sin())
                .collect()
        })
        .collect();
    ImageFeatures::new(&rows).unwrap()
}

pub fn tiny_sample(vocab: &Vocab, origin: Origin, caption: &str, salt: f64) -> StreamSample<f64> {
    StreamSample::new("s0", features(3, 5, salt), caption, vocab, origin, None)
}

/// Returns a fixed coherence weight regardless of the captions.
pub struct FixedBridge(pub f64);

impl SemanticBridge for FixedBridge {
    fn dim(&self) -> usize {
        1
    }

    fn embed_batch(&self, texts: &[&str]) -> Result<Vec<CaptionEmbedding>> {
        Ok(texts
            .iter()
            .map(|_| CaptionEmbedding::from_raw(vec![1.0]))
            .collect())
    }

    fn coherence(&self, _: &str, _: &str) -> Result<CoherenceWeight> {
        Ok(CoherenceWeight::new(self.0))
    }
}

pub fn hashed(vocab: &Vocab) -> HashedEmbedder {
    HashedEmbedder::new(Arc::new(vocab.clone()), 256)
}

/// Central differences of `f` over every entry of every tensor, compared to
/// `analytic`. Returns the worst per-tensor relative error
/// `max|a − n| / max(max|a|, max|n|, 1e-6)` together with the tensor name.
/// The floor keeps tensors whose true gradient is identically zero (key
/// biases: softmax ignores a per-query constant) from dividing noise by noise.
pub fn gradient_check(
    params: &Params,
    analytic: &codistill::Grads,
    h: f64,
    mut f: impl FnMut(&Params) -> f64,
) -> Vec<(String, f64)> {
    let mut p = params.clone();
    let mut report = Vec::new();
    for ti in 0..params.tensors().len() {
        let mut max_diff: f64 = 0.0;
        let mut scale: f64 = 0.0;
        for k in 0..params.tensors()[ti].data.len() {
            let orig = p.tensors()[ti].data[k];
            p.tensors_mut()[ti].data[k] = orig + h;
            let up = f(&p);
            p.tensors_mut()[ti].data[k] = orig - h;
            let down = f(&p);
            p.tensors_mut()[ti].data[k] = orig;
            let numeric = (up - down) / (2.0 * h);
            let a = analytic.tensors[ti][k];
            max_diff = max_diff.max((a - numeric).abs());
            scale = scale.max(a.abs()).max(numeric.abs());
        }
        let rel = max_diff / scale.max(1e-6);
        report.push((params.tensors()[ti].name.clone(), rel));
    }
    report
}

pub fn synthetic_samples(
    n: usize,
    noise: &NoiseConfig,
    seed: u64,
    vocab: &Vocab,
    origin: Origin,
) -> Vec<StreamSample<f64>> {
    generate_corpus(n, noise, seed)
        .unwrap()
        .into_iter()
        .map(|r| {
            StreamSample::new(
                r.id.clone(),
                ImageFeatures::new(&r.features).unwrap(),
                &r.caption,
                vocab,
                origin,
                Some(r.noisy),
            )
        })
        .collect()
}

pub fn init(cfg: &ModelConfig, seed: u64) -> Params {
    ModelParams::init(cfg, seed).unwrap()
}

/// Zero weights everywhere except position embeddings and the output
/// projection: position `t` carries `e_{2t} − e_{2t+1}`, which layer norm
/// keeps as a scaled copy, and the projection maps it to `targets[t]`.
pub fn rigged(targets: &[u32]) -> Params {
    let cfg = ModelConfig {
        layers: 1,
        embed_dim: 8,
        heads: 2,
        ffn_dim: 8,
        vocab_size: 10,
        max_positions: 6,
        feature_dim: 3,
    };
    let mut p = ModelParams::zeros(&cfg).unwrap();
    let d = cfg.embed_dim;
    let v = cfg.vocab_size;
    let pos = p.tensor_mut("pos_emb").unwrap();
    for t in 0..cfg.max_positions.min(d / 2) {
        pos.data[t * d + 2 * t] = 1.0;
        pos.data[t * d + 2 * t + 1] = -1.0;
    }
    let out = p.tensor_mut("out_proj.weight").unwrap();
    for (t, &tok) in targets.iter().enumerate() {
        out.data[(2 * t) * v + tok as usize] = 10.0;
    }
    p
}
