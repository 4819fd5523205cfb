//! Sequence cross-entropy, sequence KL and the two coherence-weighted stream
//! losses.
//!
//! Denoising (student trainable, teacher frozen):
//! `total = w·CE + (1−w)·KL`.
//! Diversity (teacher trainable, student frozen):
//! `total = (1−w)·CE + w·KL`.
//! In both, KL compares the frozen model (reference `p`) with the trainable
//! model (`q`), both teacher-forced on the frozen model's greedy decode.

use serde::{Deserialize, Serialize};

use crate::bridge::{CoherenceWeight, SemanticBridge};
use crate::error::{Error, Result};
use crate::model::{
    greedy_decode_with_logits, loss_grad, Gradients, ImageFeatures, ModelParams, SoftmaxSequence,
};
use crate::scalar::Scalar;
use crate::tokenizer::{TokenSeq, Vocab, BOS, EOS, PAD};

/// Probabilities are floored here inside logarithms.
pub const LOG_FLOOR: f64 = 1e-12;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Origin {
    Noisy,
    Clean,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Stream {
    Denoise,
    Diversity,
}

impl Stream {
    pub fn name(self) -> &'static str {
        match self {
            Stream::Denoise => "denoise",
            Stream::Diversity => "diversity",
        }
    }

    /// `(ce weight, kl weight)` for coherence `w`.
    pub fn term_weights(self, w: f64) -> (f64, f64) {
        match self {
            Stream::Denoise => (w, 1.0 - w),
            Stream::Diversity => (1.0 - w, w),
        }
    }

    pub fn combine(self, w: f64, ce: f64, kl: f64) -> f64 {
        let (a, b) = self.term_weights(w);
        a * ce + b * kl
    }
}

#[derive(Debug, Clone)]
pub struct StreamSample<T> {
    pub id: String,
    pub features: ImageFeatures<T>,
    pub gt_caption: String,
    pub gt_tokens: TokenSeq,
    pub origin: Origin,
    /// Ground-truth corruption flag, when the corpus records one.
    pub noisy: Option<bool>,
}

impl<T: Scalar> StreamSample<T> {
    pub fn new(
        id: impl Into<String>,
        features: ImageFeatures<T>,
        caption: &str,
        vocab: &Vocab,
        origin: Origin,
        noisy: Option<bool>,
    ) -> Self {
        StreamSample {
            id: id.into(),
            features,
            gt_caption: caption.to_string(),
            gt_tokens: vocab.encode(caption),
            origin,
            noisy,
        }
    }

    /// `BOS + gt` and `gt + EOS`.
    pub fn teacher_forcing(&self) -> (Vec<u32>, Vec<u32>) {
        let mut prefix = Vec::with_capacity(self.gt_tokens.len() + 1);
        prefix.push(BOS);
        prefix.extend_from_slice(&self.gt_tokens);
        let mut targets = self.gt_tokens.clone();
        targets.push(EOS);
        (prefix, targets)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct StreamLossReport {
    pub total: f64,
    pub ce_term: f64,
    pub kl_term: f64,
    pub w: CoherenceWeight,
    pub partner_caption: String,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct LossConfig {
    /// Distillation temperature applied to both sides of the KL term.
    pub temperature: f64,
}

impl Default for LossConfig {
    fn default() -> Self {
        LossConfig { temperature: 1.0 }
    }
}

pub enum Objective<T> {
    /// Mean `−log p[target]` over non-PAD positions.
    CrossEntropy { targets: Vec<u32> },
    /// Mean `KL(reference ‖ softmax(logits / τ))` over positions.
    Distill { reference: SoftmaxSequence<T> },
}

pub struct LossTerm<T> {
    pub prefix: Vec<u32>,
    pub objective: Objective<T>,
    pub weight: T,
}

/// A weighted sum of teacher-forced objectives over one image.
pub struct LossSpec<'a, T> {
    pub features: &'a ImageFeatures<T>,
    pub terms: Vec<LossTerm<T>>,
    pub temperature: T,
}

#[inline]
fn ln_floor<T: Scalar>(p: T) -> T {
    p.max(T::lit(LOG_FLOOR)).ln()
}

fn ce_value<T: Scalar>(probs: &SoftmaxSequence<T>, targets: &[u32]) -> Result<(T, usize)> {
    if probs.len() != targets.len() {
        return Err(Error::LengthMismatch(format!(
            "{} softmax rows vs {} targets",
            probs.len(),
            targets.len()
        )));
    }
    let mut sum = T::zero();
    let mut n = 0;
    for (row, &y) in probs.rows().zip(targets) {
        if y == PAD {
            continue;
        }
        let p = *row.get(y as usize).ok_or(Error::UnknownTokenId(y))?;
        sum -= ln_floor(p);
        n += 1;
    }
    if n == 0 {
        return Ok((T::zero(), 0));
    }
    Ok((sum / T::from_usize_lossy(n), n))
}

fn kl_value<T: Scalar>(p: &SoftmaxSequence<T>, q: &SoftmaxSequence<T>) -> Result<T> {
    if p.len() != q.len() || p.vocab() != q.vocab() {
        return Err(Error::LengthMismatch(format!(
            "KL over {}×{} vs {}×{}",
            p.len(),
            p.vocab(),
            q.len(),
            q.vocab()
        )));
    }
    if p.is_empty() {
        return Ok(T::zero());
    }
    let mut sum = T::zero();
    for (pr, qr) in p.rows().zip(q.rows()) {
        for (&pv, &qv) in pr.iter().zip(qr) {
            if pv > T::zero() {
                sum += pv * (ln_floor(pv) - ln_floor(qv));
            }
        }
    }
    Ok(sum / T::from_usize_lossy(p.len()))
}

/// Mean over non-PAD positions of `−ln softmaxes[t][targets[t]]`.
pub fn cross_entropy_seq<T: Scalar>(softmaxes: &SoftmaxSequence<T>, targets: &[u32]) -> Result<T> {
    ce_value(softmaxes, targets).map(|(v, _)| v)
}

/// Mean over positions of `KL(p[t] ‖ q[t])`; `p` is the frozen reference.
pub fn kl_seq<T: Scalar>(p: &SoftmaxSequence<T>, q: &SoftmaxSequence<T>) -> Result<T> {
    kl_value(p, q)
}

impl<T: Scalar> Objective<T> {
    /// Objective value and its gradient with respect to `logits`.
    pub fn evaluate(&self, logits: &[T], vocab: usize, temperature: T) -> Result<(T, Vec<T>)> {
        let floor = T::lit(LOG_FLOOR);
        match self {
            Objective::CrossEntropy { targets } => {
                let probs = SoftmaxSequence::from_logits(logits, vocab, T::one());
                let (value, n) = ce_value(&probs, targets)?;
                let mut grad = vec![T::zero(); logits.len()];
                if n == 0 {
                    return Ok((value, grad));
                }
                let inv_n = T::one() / T::from_usize_lossy(n);
                for (t, &y) in targets.iter().enumerate() {
                    let row = probs.row(t);
                    if y == PAD || row[y as usize] < floor {
                        continue;
                    }
                    let g = &mut grad[t * vocab..(t + 1) * vocab];
                    for (gv, &pv) in g.iter_mut().zip(row) {
                        *gv = pv * inv_n;
                    }
                    g[y as usize] -= inv_n;
                }
                Ok((value, grad))
            }
            Objective::Distill { reference } => {
                let q = SoftmaxSequence::from_logits(logits, vocab, temperature);
                let value = kl_value(reference, &q)?;
                let mut grad = vec![T::zero(); logits.len()];
                if q.is_empty() {
                    return Ok((value, grad));
                }
                let s = T::one() / (T::from_usize_lossy(q.len()) * temperature);
                for t in 0..q.len() {
                    let (pr, qr) = (reference.row(t), q.row(t));
                    let mass: T = pr
                        .iter()
                        .zip(qr)
                        .filter(|(_, &qv)| qv >= floor)
                        .map(|(&pv, _)| pv)
                        .sum();
                    let g = &mut grad[t * vocab..(t + 1) * vocab];
                    for u in 0..vocab {
                        let own = if qr[u] >= floor { pr[u] } else { T::zero() };
                        g[u] = s * (qr[u] * mass - own);
                    }
                }
                Ok((value, grad))
            }
        }
    }
}

/// One stream loss evaluation: report plus gradients for the trainable model.
#[derive(Debug, Clone)]
pub struct StreamOutput<T> {
    pub report: StreamLossReport,
    pub grads: Gradients<T>,
}

#[allow(clippy::too_many_arguments)]
fn stream_loss<T: Scalar>(
    stream: Stream,
    trainable: &ModelParams<T>,
    frozen: &ModelParams<T>,
    sample: &StreamSample<T>,
    bridge: &dyn SemanticBridge,
    vocab: &Vocab,
    max_len: usize,
    cfg: &LossConfig,
) -> Result<StreamOutput<T>> {
    let (partner, frozen_logits) = greedy_decode_with_logits(frozen, &sample.features, max_len)?;
    let partner_caption = vocab.decode(&partner)?;
    let w = bridge.coherence(&sample.gt_caption, &partner_caption)?;

    let mut partner_prefix = Vec::with_capacity(partner.len() + 1);
    partner_prefix.push(BOS);
    partner_prefix.extend_from_slice(&partner);
    let temperature = T::lit(cfg.temperature);
    let reference =
        SoftmaxSequence::from_logits(&frozen_logits, frozen.config().vocab_size, temperature);

    let (ce_w, kl_w) = stream.term_weights(w.value());
    let (gt_prefix, gt_targets) = sample.teacher_forcing();
    let spec = LossSpec {
        features: &sample.features,
        terms: vec![
            LossTerm {
                prefix: gt_prefix,
                objective: Objective::CrossEntropy {
                    targets: gt_targets,
                },
                weight: T::lit(ce_w),
            },
            LossTerm {
                prefix: partner_prefix,
                objective: Objective::Distill { reference },
                weight: T::lit(kl_w),
            },
        ],
        temperature,
    };
    let (_, values, grads) = loss_grad(trainable, &spec)?;
    let (ce_term, kl_term) = (values[0].as_f64(), values[1].as_f64());
    Ok(StreamOutput {
        report: StreamLossReport {
            total: stream.combine(w.value(), ce_term, kl_term),
            ce_term,
            kl_term,
            w,
            partner_caption,
        },
        grads,
    })
}

/// Student update signal on a noisy sample against a frozen teacher.
pub fn denoising_loss<T: Scalar>(
    student: &ModelParams<T>,
    teacher: &ModelParams<T>,
    sample: &StreamSample<T>,
    bridge: &dyn SemanticBridge,
    vocab: &Vocab,
    max_len: usize,
    cfg: &LossConfig,
) -> Result<StreamOutput<T>> {
    if sample.origin != Origin::Noisy {
        return Err(Error::Config(format!(
            "denoising stream given a {:?} sample",
            sample.origin
        )));
    }
    stream_loss(
        Stream::Denoise,
        student,
        teacher,
        sample,
        bridge,
        vocab,
        max_len,
        cfg,
    )
}

/// Teacher update signal on a clean sample against a frozen student.
pub fn diversity_loss<T: Scalar>(
    teacher: &ModelParams<T>,
    student: &ModelParams<T>,
    sample: &StreamSample<T>,
    bridge: &dyn SemanticBridge,
    vocab: &Vocab,
    max_len: usize,
    cfg: &LossConfig,
) -> Result<StreamOutput<T>> {
    if sample.origin != Origin::Clean {
        return Err(Error::Config(format!(
            "diversity stream given a {:?} sample",
            sample.origin
        )));
    }
    stream_loss(
        Stream::Diversity,
        teacher,
        student,
        sample,
        bridge,
        vocab,
        max_len,
        cfg,
    )
}

/// Plain cross-entropy on a sample's own caption (warm start and baselines).
pub fn caption_ce<T: Scalar>(
    params: &ModelParams<T>,
    sample: &StreamSample<T>,
) -> Result<(T, Gradients<T>)> {
    let (prefix, targets) = sample.teacher_forcing();
    let spec = LossSpec {
        features: &sample.features,
        terms: vec![LossTerm {
            prefix,
            objective: Objective::CrossEntropy { targets },
            weight: T::one(),
        }],
        temperature: T::one(),
    };
    let (total, _, grads) = loss_grad(params, &spec)?;
    Ok((total, grads))
}
