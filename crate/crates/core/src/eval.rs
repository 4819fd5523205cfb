//! Automated evaluation: corpus BLEU-4 against clean references and the
//! noise-detection AUC of coherence weights.

use std::collections::HashMap;
use std::hash::Hash;

use serde::{Deserialize, Serialize};

use crate::bridge::SemanticBridge;
use crate::datagen::CorpusRecord;
use crate::error::{Error, Result};
use crate::model::{greedy_decode, ImageFeatures, ModelParams};
use crate::scalar::Scalar;
use crate::tokenizer::{normalize, Vocab};

fn ngram_counts<W: Eq + Hash + Clone>(tokens: &[W], n: usize) -> HashMap<&[W], usize> {
    let mut counts = HashMap::new();
    if tokens.len() >= n {
        for g in tokens.windows(n) {
            *counts.entry(g).or_insert(0) += 1;
        }
    }
    counts
}

/// Corpus BLEU with orders 1..=4 and uniform weights.
///
/// Orders with zero clipped matches use add-one smoothing,
/// `(0 + 1) / (total + 1)`. The brevity penalty is `exp(1 − r/c)` when the
/// candidate length `c` is below the closest reference length `r`
/// (ties pick the shorter reference); an empty candidate corpus scores 0.
pub fn bleu4<W: Eq + Hash + Clone>(
    candidates: &[Vec<W>],
    references: &[Vec<Vec<W>>],
) -> Result<f64> {
    if candidates.len() != references.len() {
        return Err(Error::LengthMismatch(format!(
            "{} candidates vs {} reference sets",
            candidates.len(),
            references.len()
        )));
    }
    let mut matches = [0usize; 4];
    let mut totals = [0usize; 4];
    let mut cand_len = 0usize;
    let mut ref_len = 0usize;
    for (cand, refs) in candidates.iter().zip(references) {
        if refs.is_empty() {
            return Err(Error::LengthMismatch("candidate without references".into()));
        }
        cand_len += cand.len();
        ref_len += refs
            .iter()
            .map(Vec::len)
            .min_by_key(|&l| (l.abs_diff(cand.len()), l))
            .unwrap_or(0);
        for n in 1..=4 {
            let cand_counts = ngram_counts(cand, n);
            let mut max_ref: HashMap<&[W], usize> = HashMap::new();
            for r in refs {
                for (g, c) in ngram_counts(r, n) {
                    let e = max_ref.entry(g).or_insert(0);
                    *e = (*e).max(c);
                }
            }
            for (g, c) in &cand_counts {
                matches[n - 1] += (*c).min(max_ref.get(g).copied().unwrap_or(0));
            }
            totals[n - 1] += cand.len().saturating_sub(n - 1);
        }
    }
    if cand_len == 0 {
        return Ok(0.0);
    }
    let log_mean = (0..4)
        .map(|i| {
            let p = if matches[i] == 0 {
                1.0 / (totals[i] as f64 + 1.0)
            } else {
                matches[i] as f64 / totals[i] as f64
            };
            p.ln()
        })
        .sum::<f64>()
        / 4.0;
    let bp = if cand_len < ref_len {
        (1.0 - ref_len as f64 / cand_len as f64).exp()
    } else {
        1.0
    };
    Ok(bp * log_mean.exp())
}

/// Mann–Whitney AUC of `1 − w` as a detector of `noisy == true`; ties count
/// one half.
pub fn coherence_auc(weights: &[f64], noisy: &[bool]) -> Result<f64> {
    if weights.len() != noisy.len() {
        return Err(Error::LengthMismatch(format!(
            "{} weights vs {} labels",
            weights.len(),
            noisy.len()
        )));
    }
    let n_pos = noisy.iter().filter(|&&b| b).count();
    let n_neg = noisy.len() - n_pos;
    if n_pos == 0 || n_neg == 0 {
        return Err(Error::DegenerateLabels);
    }
    // Rank by detector score 1 − w, averaging ranks over ties.
    let mut order: Vec<usize> = (0..weights.len()).collect();
    let score = |i: usize| 1.0 - weights[i];
    order.sort_by(|&a, &b| score(a).total_cmp(&score(b)));
    let mut rank_sum_pos = 0.0;
    let mut i = 0;
    while i < order.len() {
        let mut j = i + 1;
        while j < order.len() && score(order[j]) == score(order[i]) {
            j += 1;
        }
        let avg_rank = (i + 1 + j) as f64 / 2.0;
        for &k in &order[i..j] {
            if noisy[k] {
                rank_sum_pos += avg_rank;
            }
        }
        i = j;
    }
    let u = rank_sum_pos - (n_pos * (n_pos + 1)) as f64 / 2.0;
    Ok(u / (n_pos as f64 * n_neg as f64))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SampleEval {
    pub id: String,
    pub candidate: String,
    pub w: f64,
    pub noisy: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub bleu4: f64,
    /// Absent unless both clean and noisy records were evaluated.
    pub auc: Option<f64>,
    pub n_samples: usize,
    pub per_sample: Vec<SampleEval>,
}

impl EvalReport {
    pub fn summary(&self) -> String {
        let auc = self
            .auc
            .map(|a| format!("{a:.6}"))
            .unwrap_or_else(|| "NA".to_string());
        format!("bleu4={:.6} auc={} n={}", self.bleu4, auc, self.n_samples)
    }
}

fn words(text: &str) -> Vec<String> {
    normalize(text)
        .split(' ')
        .filter(|w| !w.is_empty())
        .map(str::to_string)
        .collect()
}

/// Greedy-decodes every record and scores it against the clean caption of
/// the scene its features depict.
pub fn evaluate_model<T: Scalar>(
    params: &ModelParams<T>,
    corpus: &[CorpusRecord],
    bridge: &dyn SemanticBridge,
    vocab: &Vocab,
    max_len: usize,
) -> Result<EvalReport> {
    if corpus.is_empty() {
        return Err(Error::EmptyCorpus);
    }
    let mut candidates = Vec::with_capacity(corpus.len());
    let mut references = Vec::with_capacity(corpus.len());
    let mut per_sample = Vec::with_capacity(corpus.len());
    for rec in corpus {
        let with_id = |e: Error| Error::Record {
            id: rec.id.clone(),
            source: Box::new(e),
        };
        let features = ImageFeatures::<T>::new(&rec.features).map_err(with_id)?;
        let ids = greedy_decode(params, &features, max_len).map_err(with_id)?;
        let candidate = vocab.decode(&ids).map_err(with_id)?;
        let reference = rec
            .reference_caption()
            .ok_or_else(|| with_id(Error::InvalidFeatures("cannot recover scene".into())))?;
        let w = bridge
            .coherence(&rec.caption, &candidate)
            .map_err(with_id)?;
        candidates.push(words(&candidate));
        references.push(vec![words(&reference)]);
        per_sample.push(SampleEval {
            id: rec.id.clone(),
            candidate,
            w: w.value(),
            noisy: rec.noisy,
        });
    }
    let bleu = bleu4(&candidates, &references)?;
    let weights: Vec<f64> = per_sample.iter().map(|s| s.w).collect();
    let flags: Vec<bool> = per_sample.iter().map(|s| s.noisy).collect();
    let auc = coherence_auc(&weights, &flags).ok();
    Ok(EvalReport {
        bleu4: bleu,
        auc,
        n_samples: per_sample.len(),
        per_sample,
    })
}
