use super::layers::{
    attn_bwd, attn_fwd, ffn_bwd, ffn_fwd, linear_bwd, linear_fwd, norm_bwd, norm_fwd, AttnCache,
    FfnCache, NormCache,
};
use super::params::{Gradients, ModelParams};
use super::{ImageFeatures, SoftmaxSequence};
use crate::error::{Error, Result};
use crate::linalg::add_assign;
use crate::losses::LossSpec;
use crate::scalar::Scalar;
use crate::tokenizer::BOS;

struct EncoderLayerCache<T> {
    ln1: NormCache<T>,
    h1: Vec<T>,
    attn: AttnCache<T>,
    ln2: NormCache<T>,
    h2: Vec<T>,
    ffn: FfnCache<T>,
}

pub(crate) struct EncoderPass<T> {
    layers: Vec<EncoderLayerCache<T>>,
    norm: NormCache<T>,
    pub(crate) out: Vec<T>,
}

struct DecoderLayerCache<T> {
    ln1: NormCache<T>,
    h1: Vec<T>,
    self_attn: AttnCache<T>,
    ln2: NormCache<T>,
    h2: Vec<T>,
    cross: AttnCache<T>,
    ln3: NormCache<T>,
    h3: Vec<T>,
    ffn: FfnCache<T>,
}

pub(crate) struct DecoderPass<T> {
    prefix: Vec<u32>,
    layers: Vec<DecoderLayerCache<T>>,
    norm: NormCache<T>,
    h_final: Vec<T>,
    pub(crate) logits: Vec<T>,
}

pub(crate) fn encode<T: Scalar>(
    p: &ModelParams<T>,
    features: &ImageFeatures<T>,
) -> Result<EncoderPass<T>> {
    features.check(&p.config)?;
    let d = p.config.embed_dim;
    let heads = p.config.heads;
    let lay = &p.layout;
    let rows = features.regions();
    let mut x = linear_fwd(p, lay.feat_proj, features.data(), rows);
    let mut layers = Vec::with_capacity(lay.encoder.len());
    for l in &lay.encoder {
        let x_in = x;
        let (h1, ln1) = norm_fwd(p, l.ln1, &x_in, d);
        let (a, attn) = attn_fwd(p, l.attn, heads, &h1, &h1, false);
        let mut x_mid = x_in;
        add_assign(&mut x_mid, &a);
        let (h2, ln2) = norm_fwd(p, l.ln2, &x_mid, d);
        let (f, ffn) = ffn_fwd(p, l.ffn, &h2);
        x = x_mid;
        add_assign(&mut x, &f);
        layers.push(EncoderLayerCache {
            ln1,
            h1,
            attn,
            ln2,
            h2,
            ffn,
        });
    }
    let (out, norm) = norm_fwd(p, lay.enc_norm, &x, d);
    Ok(EncoderPass { layers, norm, out })
}

pub(crate) fn check_prefix<T: Scalar>(p: &ModelParams<T>, prefix: &[u32]) -> Result<()> {
    if prefix.is_empty() {
        return Err(Error::LengthMismatch("empty decoder prefix".into()));
    }
    if prefix.len() > p.config.max_positions {
        return Err(Error::SequenceTooLong {
            len: prefix.len(),
            max: p.config.max_positions,
        });
    }
    if let Some(&bad) = prefix
        .iter()
        .find(|&&id| id as usize >= p.config.vocab_size)
    {
        return Err(Error::UnknownTokenId(bad));
    }
    Ok(())
}

/// Token plus position embedding for the row at position `t`.
pub(crate) fn embed_token<T: Scalar>(p: &ModelParams<T>, token: u32, t: usize, out: &mut [T]) {
    let d = p.config.embed_dim;
    let tok = &p.data(p.layout.tok_emb)[token as usize * d..(token as usize + 1) * d];
    let pos = &p.data(p.layout.pos_emb)[t * d..(t + 1) * d];
    for c in 0..d {
        out[c] = tok[c] + pos[c];
    }
}

pub(crate) fn decode_pass<T: Scalar>(
    p: &ModelParams<T>,
    enc: &EncoderPass<T>,
    prefix: &[u32],
) -> Result<DecoderPass<T>> {
    check_prefix(p, prefix)?;
    let d = p.config.embed_dim;
    let heads = p.config.heads;
    let lay = &p.layout;
    let len = prefix.len();
    let mut x = vec![T::zero(); len * d];
    for (t, &tok) in prefix.iter().enumerate() {
        embed_token(p, tok, t, &mut x[t * d..(t + 1) * d]);
    }
    let mut layers = Vec::with_capacity(lay.decoder.len());
    for l in &lay.decoder {
        let x_in = x;
        let (h1, ln1) = norm_fwd(p, l.ln1, &x_in, d);
        let (a, self_attn) = attn_fwd(p, l.self_attn, heads, &h1, &h1, true);
        let mut x1 = x_in;
        add_assign(&mut x1, &a);
        let (h2, ln2) = norm_fwd(p, l.ln2, &x1, d);
        let (c, cross) = attn_fwd(p, l.cross_attn, heads, &h2, &enc.out, false);
        let mut x2 = x1;
        add_assign(&mut x2, &c);
        let (h3, ln3) = norm_fwd(p, l.ln3, &x2, d);
        let (f, ffn) = ffn_fwd(p, l.ffn, &h3);
        x = x2;
        add_assign(&mut x, &f);
        layers.push(DecoderLayerCache {
            ln1,
            h1,
            self_attn,
            ln2,
            h2,
            cross,
            ln3,
            h3,
            ffn,
        });
    }
    let (h_final, norm) = norm_fwd(p, lay.dec_norm, &x, d);
    let logits = linear_fwd(p, lay.out_proj, &h_final, len);
    Ok(DecoderPass {
        prefix: prefix.to_vec(),
        layers,
        norm,
        h_final,
        logits,
    })
}

/// Backpropagates `d_logits` through the decoder; returns the gradient with
/// respect to the encoder output.
pub(crate) fn decode_backward<T: Scalar>(
    p: &ModelParams<T>,
    enc: &EncoderPass<T>,
    pass: &DecoderPass<T>,
    d_logits: &[T],
    g: &mut Gradients<T>,
) -> Vec<T> {
    let d = p.config.embed_dim;
    let heads = p.config.heads;
    let lay = &p.layout;
    let len = pass.prefix.len();
    let dh = linear_bwd(p, lay.out_proj, &pass.h_final, d_logits, len, g);
    let mut dx = norm_bwd(p, lay.dec_norm, &pass.norm, &dh, d, g);
    let mut d_enc = vec![T::zero(); enc.out.len()];
    for (l, c) in lay.decoder.iter().zip(&pass.layers).rev() {
        // x = x2 + ffn(ln3(x2))
        let dh3 = ffn_bwd(p, l.ffn, &c.h3, &c.ffn, &dx, g);
        add_assign(&mut dx, &norm_bwd(p, l.ln3, &c.ln3, &dh3, d, g));
        // x2 = x1 + cross(ln2(x1), enc)
        let (dh2, de) = attn_bwd(p, l.cross_attn, heads, &c.h2, &enc.out, &c.cross, &dx, g);
        add_assign(&mut d_enc, &de);
        add_assign(&mut dx, &norm_bwd(p, l.ln2, &c.ln2, &dh2, d, g));
        // x1 = x_in + self(ln1(x_in))
        let (mut dh1, dkv) = attn_bwd(p, l.self_attn, heads, &c.h1, &c.h1, &c.self_attn, &dx, g);
        add_assign(&mut dh1, &dkv);
        add_assign(&mut dx, &norm_bwd(p, l.ln1, &c.ln1, &dh1, d, g));
    }
    for (t, &tok) in pass.prefix.iter().enumerate() {
        let row = &dx[t * d..(t + 1) * d];
        add_assign(
            &mut g.tensors[lay.tok_emb][tok as usize * d..(tok as usize + 1) * d],
            row,
        );
        add_assign(&mut g.tensors[lay.pos_emb][t * d..(t + 1) * d], row);
    }
    d_enc
}

pub(crate) fn encode_backward<T: Scalar>(
    p: &ModelParams<T>,
    features: &ImageFeatures<T>,
    enc: &EncoderPass<T>,
    d_out: &[T],
    g: &mut Gradients<T>,
) {
    let d = p.config.embed_dim;
    let heads = p.config.heads;
    let lay = &p.layout;
    let mut dx = norm_bwd(p, lay.enc_norm, &enc.norm, d_out, d, g);
    for (l, c) in lay.encoder.iter().zip(&enc.layers).rev() {
        let dh2 = ffn_bwd(p, l.ffn, &c.h2, &c.ffn, &dx, g);
        add_assign(&mut dx, &norm_bwd(p, l.ln2, &c.ln2, &dh2, d, g));
        let (mut dh1, dkv) = attn_bwd(p, l.attn, heads, &c.h1, &c.h1, &c.attn, &dx, g);
        add_assign(&mut dh1, &dkv);
        add_assign(&mut dx, &norm_bwd(p, l.ln1, &c.ln1, &dh1, d, g));
    }
    let _ = linear_bwd(
        p,
        lay.feat_proj,
        features.data(),
        &dx,
        features.regions(),
        g,
    );
}

/// Raw logits (`prefix.len() × vocab`) for a teacher-forced prefix.
pub fn forward_logits<T: Scalar>(
    params: &ModelParams<T>,
    features: &ImageFeatures<T>,
    prefix: &[u32],
) -> Result<Vec<T>> {
    let enc = encode(params, features)?;
    Ok(decode_pass(params, &enc, prefix)?.logits)
}

/// Row `t` is the distribution over the token following `prefix[..=t]`.
/// `prefix` must start with BOS.
pub fn forward<T: Scalar>(
    params: &ModelParams<T>,
    features: &ImageFeatures<T>,
    prefix: &[u32],
) -> Result<SoftmaxSequence<T>> {
    if prefix.first() != Some(&BOS) {
        return Err(Error::LengthMismatch(
            "decoder prefix must start with BOS".into(),
        ));
    }
    let logits = forward_logits(params, features, prefix)?;
    Ok(SoftmaxSequence::from_logits(
        &logits,
        params.config.vocab_size,
        T::one(),
    ))
}

/// Value and exact gradient of `spec` with respect to `params`.
///
/// Terms with weight zero contribute nothing to the gradient and are not
/// backpropagated. Returns `(total, per-term values, gradients)`.
pub fn loss_grad<T: Scalar>(
    params: &ModelParams<T>,
    spec: &LossSpec<'_, T>,
) -> Result<(T, Vec<T>, Gradients<T>)> {
    let enc = encode(params, spec.features)?;
    let mut grads = params.zero_grads();
    let mut d_enc = vec![T::zero(); enc.out.len()];
    let mut total = T::zero();
    let mut values = Vec::with_capacity(spec.terms.len());
    let vocab = params.config.vocab_size;
    for term in &spec.terms {
        let pass = decode_pass(params, &enc, &term.prefix)?;
        let (value, mut dlogits) =
            term.objective
                .evaluate(&pass.logits, vocab, spec.temperature)?;
        if !value.is_finite() {
            return Err(Error::Diverged);
        }
        values.push(value);
        total += term.weight * value;
        if term.weight == T::zero() {
            continue;
        }
        for v in dlogits.iter_mut() {
            *v *= term.weight;
        }
        let de = decode_backward(params, &enc, &pass, &dlogits, &mut grads);
        add_assign(&mut d_enc, &de);
    }
    if !total.is_finite() {
        return Err(Error::Diverged);
    }
    encode_backward(params, spec.features, &enc, &d_enc, &mut grads);
    if !grads.all_finite() {
        return Err(Error::Diverged);
    }
    Ok((total, values, grads))
}
