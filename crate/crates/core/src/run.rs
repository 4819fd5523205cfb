//! End-to-end training run writing the run directory:
//! `config.json`, `vocab.txt`, `manifest.json`, `metrics.csv`, `checkpoints/`.

use std::fs;
use std::path::Path;
use std::sync::Arc;

use serde::Serialize;

use crate::config::RunConfig;
use crate::datagen::{corpus_to_jsonl, CorpusRecord};
use crate::error::{Error, Result};
use crate::hash::fnv1a;
use crate::losses::{Origin, StreamSample};
use crate::model::{ImageFeatures, ModelConfig};
use crate::scalar::Scalar;
use crate::tokenizer::Vocab;
use crate::trainer::{train_codistill, TrainOutcome};

/// Converts corpus records into stream samples, checking that every caption
/// fits the decoder.
pub fn build_samples<T: Scalar>(
    records: &[CorpusRecord],
    vocab: &Vocab,
    origin: Origin,
    model: &ModelConfig,
) -> Result<Vec<StreamSample<T>>> {
    records
        .iter()
        .map(|r| {
            let with_id = |e: Error| Error::Record {
                id: r.id.clone(),
                source: Box::new(e),
            };
            let features = ImageFeatures::new(&r.features).map_err(with_id)?;
            features.check(model).map_err(with_id)?;
            let s = StreamSample::new(
                r.id.clone(),
                features,
                &r.caption,
                vocab,
                origin,
                Some(r.noisy),
            );
            if s.gt_tokens.len() + 1 > model.max_positions {
                return Err(with_id(Error::SequenceTooLong {
                    len: s.gt_tokens.len() + 1,
                    max: model.max_positions,
                }));
            }
            Ok(s)
        })
        .collect()
}

pub fn corpus_hash(records: &[CorpusRecord]) -> Result<u64> {
    Ok(fnv1a(corpus_to_jsonl(records)?.as_bytes()))
}

/// Joint vocabulary over both corpora's captions.
pub fn train_joint_vocab(
    clean: &[CorpusRecord],
    noisy: &[CorpusRecord],
    target: usize,
) -> Result<Vocab> {
    let a: Vec<&str> = clean.iter().map(|r| r.caption.as_str()).collect();
    let b: Vec<&str> = noisy.iter().map(|r| r.caption.as_str()).collect();
    Vocab::train(&[&a[..], &b[..]], target)
}

#[derive(Debug, Serialize)]
struct DatasetHashes {
    clean: String,
    noisy: String,
}

#[derive(Debug, Serialize)]
struct Manifest<'a> {
    config: &'a RunConfig,
    seed: u64,
    vocab_hash: String,
    vocab_size: usize,
    datasets: DatasetHashes,
    final_step: u64,
}

fn write(path: &Path, bytes: &[u8]) -> Result<()> {
    fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

/// Trains the vocabulary, warm-starts both models, co-distills and writes
/// the full run directory under `out`.
pub fn run_training(
    cfg: &RunConfig,
    clean: &[CorpusRecord],
    noisy: &[CorpusRecord],
    out: &Path,
) -> Result<TrainOutcome<f64>> {
    cfg.validate()?;
    if clean.is_empty() || noisy.is_empty() {
        return Err(Error::EmptyCorpus);
    }
    let vocab = train_joint_vocab(clean, noisy, cfg.vocab_size)?;
    let mut resolved = cfg.clone();
    resolved.model.vocab_size = vocab.len();
    resolved.model.validate()?;

    let clean_samples = build_samples::<f64>(clean, &vocab, Origin::Clean, &resolved.model)?;
    let noisy_samples = build_samples::<f64>(noisy, &vocab, Origin::Noisy, &resolved.model)?;
    let vocab = Arc::new(vocab);
    let bridge = resolved.bridge.build(Arc::clone(&vocab))?;

    fs::create_dir_all(out).map_err(|e| Error::io(out, e))?;
    fs::create_dir_all(out.join("eval")).map_err(|e| Error::io(out.join("eval"), e))?;
    write(&out.join("config.json"), resolved.to_json()?.as_bytes())?;
    write(&out.join("vocab.txt"), vocab.to_text().as_bytes())?;

    let outcome = train_codistill(
        &resolved.train,
        &resolved.model,
        &noisy_samples,
        &clean_samples,
        bridge.as_ref(),
        &vocab,
        Some(out),
    )?;

    let manifest = Manifest {
        config: &resolved,
        seed: resolved.train.seed,
        vocab_hash: format!("{:016x}", vocab.hash()),
        vocab_size: vocab.len(),
        datasets: DatasetHashes {
            clean: format!("{:016x}", corpus_hash(clean)?),
            noisy: format!("{:016x}", corpus_hash(noisy)?),
        },
        final_step: outcome.state.step,
    };
    write(
        &out.join("manifest.json"),
        serde_json::to_string_pretty(&manifest)?.as_bytes(),
    )?;
    Ok(outcome)
}
