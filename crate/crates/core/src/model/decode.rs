//! Greedy-max decoding with an incremental key/value cache.

use super::layers::{attend_row, ffn_fwd, head_scale, linear_fwd, norm_fwd};
use super::params::ModelParams;
use super::transformer::{embed_token, encode, forward_logits};
use super::ImageFeatures;
use crate::error::{Error, Result};
use crate::linalg::{add_assign, argmax};
use crate::scalar::Scalar;
use crate::tokenizer::{TokenSeq, BOS, EOS};

struct LayerKv<T> {
    self_k: Vec<T>,
    self_v: Vec<T>,
    cross_k: Vec<T>,
    cross_v: Vec<T>,
}

fn check_len<T: Scalar>(params: &ModelParams<T>, max_len: usize) -> Result<()> {
    if max_len + 1 > params.config.max_positions {
        return Err(Error::SequenceTooLong {
            len: max_len + 1,
            max: params.config.max_positions,
        });
    }
    Ok(())
}

/// Emits the argmax token at each step (ties to the smallest id) until EOS
/// or `max_len` tokens. The result excludes BOS and EOS.
pub fn greedy_decode<T: Scalar>(
    params: &ModelParams<T>,
    features: &ImageFeatures<T>,
    max_len: usize,
) -> Result<TokenSeq> {
    run(params, features, max_len, false).map(|(seq, _)| seq)
}

/// Greedy decode that also returns the logits of the teacher-forced pass
/// over `BOS + seq`: one row per prefix position, `seq.len() + 1` rows,
/// bitwise equal to `forward_logits(params, features, BOS + seq)`.
pub fn greedy_decode_with_logits<T: Scalar>(
    params: &ModelParams<T>,
    features: &ImageFeatures<T>,
    max_len: usize,
) -> Result<(TokenSeq, Vec<T>)> {
    run(params, features, max_len, true)
}

fn run<T: Scalar>(
    params: &ModelParams<T>,
    features: &ImageFeatures<T>,
    max_len: usize,
    keep_logits: bool,
) -> Result<(TokenSeq, Vec<T>)> {
    check_len(params, max_len)?;
    if max_len == 0 && !keep_logits {
        features.check(&params.config)?;
        return Ok((Vec::new(), Vec::new()));
    }
    let cfg = &params.config;
    let d = cfg.embed_dim;
    let heads = cfg.heads;
    let hd = d / heads;
    let scale = head_scale::<T>(hd);
    let lay = &params.layout;

    let enc = encode(params, features)?;
    let regions = features.regions();
    let mut cache: Vec<LayerKv<T>> = lay
        .decoder
        .iter()
        .map(|l| LayerKv {
            self_k: Vec::with_capacity((max_len + 1) * d),
            self_v: Vec::with_capacity((max_len + 1) * d),
            cross_k: linear_fwd(params, l.cross_attn.k, &enc.out, regions),
            cross_v: linear_fwd(params, l.cross_attn.v, &enc.out, regions),
        })
        .collect();

    let mut out = Vec::new();
    let mut rows = Vec::new();
    let mut token = BOS;
    let mut x = vec![T::zero(); d];
    let mut probs = vec![T::zero(); (max_len + 1).max(regions)];
    let mut ctx = vec![T::zero(); d];
    let mut ctx_h = vec![T::zero(); hd];
    // With logits requested, a sequence cut at `max_len` needs one more
    // step for the row that follows its last token.
    let steps = if keep_logits { max_len + 1 } else { max_len };
    for t in 0..steps {
        embed_token(params, token, t, &mut x);
        for (l, kv) in lay.decoder.iter().zip(cache.iter_mut()) {
            let (h1, _) = norm_fwd(params, l.ln1, &x, d);
            let q = linear_fwd(params, l.self_attn.q, &h1, 1);
            kv.self_k.extend(linear_fwd(params, l.self_attn.k, &h1, 1));
            kv.self_v.extend(linear_fwd(params, l.self_attn.v, &h1, 1));
            for h in 0..heads {
                attend_row(
                    &q,
                    &kv.self_k,
                    &kv.self_v,
                    t + 1,
                    d,
                    h,
                    hd,
                    scale,
                    &mut probs,
                    &mut ctx_h,
                );
                ctx[h * hd..(h + 1) * hd].copy_from_slice(&ctx_h);
            }
            add_assign(&mut x, &linear_fwd(params, l.self_attn.o, &ctx, 1));

            let (h2, _) = norm_fwd(params, l.ln2, &x, d);
            let q = linear_fwd(params, l.cross_attn.q, &h2, 1);
            for h in 0..heads {
                attend_row(
                    &q,
                    &kv.cross_k,
                    &kv.cross_v,
                    regions,
                    d,
                    h,
                    hd,
                    scale,
                    &mut probs,
                    &mut ctx_h,
                );
                ctx[h * hd..(h + 1) * hd].copy_from_slice(&ctx_h);
            }
            add_assign(&mut x, &linear_fwd(params, l.cross_attn.o, &ctx, 1));

            let (h3, _) = norm_fwd(params, l.ln3, &x, d);
            let (f, _) = ffn_fwd(params, l.ffn, &h3);
            add_assign(&mut x, &f);
        }
        let (hf, _) = norm_fwd(params, lay.dec_norm, &x, d);
        let logits = linear_fwd(params, lay.out_proj, &hf, 1);
        let next = argmax(&logits) as u32;
        if keep_logits {
            rows.extend_from_slice(&logits);
        }
        if next == EOS || t == max_len {
            break;
        }
        out.push(next);
        token = next;
    }
    Ok((out, rows))
}

/// Reference decoder that reruns the full teacher-forced forward pass at
/// every step.
pub fn greedy_decode_uncached<T: Scalar>(
    params: &ModelParams<T>,
    features: &ImageFeatures<T>,
    max_len: usize,
) -> Result<TokenSeq> {
    check_len(params, max_len)?;
    let vocab = params.config.vocab_size;
    let mut prefix = vec![BOS];
    for _ in 0..max_len {
        let logits = forward_logits(params, features, &prefix)?;
        let last = &logits[logits.len() - vocab..];
        let next = argmax(last) as u32;
        if next == EOS {
            break;
        }
        prefix.push(next);
    }
    Ok(prefix[1..].to_vec())
}
