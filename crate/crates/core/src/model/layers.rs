//! Transformer building blocks with explicit forward caches and
//! hand-derived backward passes.

use super::params::{AttnIdx, FfnIdx, Gradients, LinearIdx, ModelParams, NormIdx};
use crate::linalg::{
    acc_col_sums, add_row_bias, dot, matmul, matmul_nt, matmul_tn_acc, softmax_in_place,
};
use crate::scalar::Scalar;

const LN_EPS: f64 = 1e-5;

pub(crate) fn linear_fwd<T: Scalar>(
    p: &ModelParams<T>,
    idx: LinearIdx,
    x: &[T],
    rows: usize,
) -> Vec<T> {
    let mut y = matmul(x, p.data(idx.w), rows, idx.fan_in, idx.fan_out);
    add_row_bias(&mut y, p.data(idx.b));
    y
}

/// Accumulates weight/bias gradients and returns `dx`.
pub(crate) fn linear_bwd<T: Scalar>(
    p: &ModelParams<T>,
    idx: LinearIdx,
    x: &[T],
    dy: &[T],
    rows: usize,
    g: &mut Gradients<T>,
) -> Vec<T> {
    matmul_tn_acc(x, dy, rows, idx.fan_in, idx.fan_out, &mut g.tensors[idx.w]);
    acc_col_sums(dy, &mut g.tensors[idx.b]);
    matmul_nt(dy, p.data(idx.w), rows, idx.fan_out, idx.fan_in)
}

#[derive(Debug, Clone)]
pub(crate) struct NormCache<T> {
    xhat: Vec<T>,
    rstd: Vec<T>,
}

pub(crate) fn norm_fwd<T: Scalar>(
    p: &ModelParams<T>,
    idx: NormIdx,
    x: &[T],
    d: usize,
) -> (Vec<T>, NormCache<T>) {
    let gain = p.data(idx.gain);
    let bias = p.data(idx.bias);
    let rows = x.len() / d;
    let inv_d = T::one() / T::from_usize_lossy(d);
    let eps = T::lit(LN_EPS);
    let mut y = vec![T::zero(); x.len()];
    let mut xhat = vec![T::zero(); x.len()];
    let mut rstd = vec![T::zero(); rows];
    for r in 0..rows {
        let xr = &x[r * d..(r + 1) * d];
        let mean = xr.iter().copied().sum::<T>() * inv_d;
        let var = xr.iter().map(|&v| (v - mean) * (v - mean)).sum::<T>() * inv_d;
        let rs = T::one() / (var + eps).sqrt();
        rstd[r] = rs;
        for c in 0..d {
            let h = (xr[c] - mean) * rs;
            xhat[r * d + c] = h;
            y[r * d + c] = gain[c] * h + bias[c];
        }
    }
    (y, NormCache { xhat, rstd })
}

pub(crate) fn norm_bwd<T: Scalar>(
    p: &ModelParams<T>,
    idx: NormIdx,
    cache: &NormCache<T>,
    dy: &[T],
    d: usize,
    g: &mut Gradients<T>,
) -> Vec<T> {
    let gain = p.data(idx.gain);
    let rows = dy.len() / d;
    let inv_d = T::one() / T::from_usize_lossy(d);
    let mut dx = vec![T::zero(); dy.len()];
    let mut dxhat = vec![T::zero(); d];
    for r in 0..rows {
        let dyr = &dy[r * d..(r + 1) * d];
        let xh = &cache.xhat[r * d..(r + 1) * d];
        {
            let dgain = &mut g.tensors[idx.gain];
            for c in 0..d {
                dgain[c] += dyr[c] * xh[c];
            }
        }
        {
            let dbias = &mut g.tensors[idx.bias];
            for c in 0..d {
                dbias[c] += dyr[c];
            }
        }
        for c in 0..d {
            dxhat[c] = dyr[c] * gain[c];
        }
        let mean_d = dxhat.iter().copied().sum::<T>() * inv_d;
        let mean_dx = dot(&dxhat, xh) * inv_d;
        for c in 0..d {
            dx[r * d + c] = cache.rstd[r] * (dxhat[c] - mean_d - xh[c] * mean_dx);
        }
    }
    dx
}

#[derive(Debug, Clone)]
pub(crate) struct AttnCache<T> {
    q: Vec<T>,
    k: Vec<T>,
    v: Vec<T>,
    /// `[heads][lq][lk]`, zero above the diagonal when causal.
    probs: Vec<T>,
    ctx: Vec<T>,
    lq: usize,
    lk: usize,
}

/// One query row attending over `n_keys` rows of `k`/`v` for one head.
/// Shared by the full and the incremental decoder so both produce identical
/// bits.
#[allow(clippy::too_many_arguments)]
pub(crate) fn attend_row<T: Scalar>(
    q_row: &[T],
    k: &[T],
    v: &[T],
    n_keys: usize,
    d: usize,
    head: usize,
    head_dim: usize,
    scale: T,
    probs: &mut [T],
    ctx: &mut [T],
) {
    let off = head * head_dim;
    let qh = &q_row[off..off + head_dim];
    for j in 0..n_keys {
        probs[j] = dot(qh, &k[j * d + off..j * d + off + head_dim]) * scale;
    }
    softmax_in_place(&mut probs[..n_keys]);
    for c in ctx.iter_mut() {
        *c = T::zero();
    }
    for j in 0..n_keys {
        let pj = probs[j];
        let vh = &v[j * d + off..j * d + off + head_dim];
        for (c, &vv) in ctx.iter_mut().zip(vh) {
            *c += pj * vv;
        }
    }
}

pub(crate) fn head_scale<T: Scalar>(head_dim: usize) -> T {
    T::one() / T::from_usize_lossy(head_dim).sqrt()
}

/// Multi-head attention of `xq` over `xkv`. With `causal`, query `i` sees
/// keys `0..=i` only.
pub(crate) fn attn_fwd<T: Scalar>(
    p: &ModelParams<T>,
    idx: AttnIdx,
    heads: usize,
    xq: &[T],
    xkv: &[T],
    causal: bool,
) -> (Vec<T>, AttnCache<T>) {
    let d = idx.q.fan_in;
    let lq = xq.len() / d;
    let lk = xkv.len() / d;
    let q = linear_fwd(p, idx.q, xq, lq);
    let k = linear_fwd(p, idx.k, xkv, lk);
    let v = linear_fwd(p, idx.v, xkv, lk);
    let (ctx, probs) = attn_core(&q, &k, &v, lq, lk, d, heads, causal);
    let out = linear_fwd(p, idx.o, &ctx, lq);
    (
        out,
        AttnCache {
            q,
            k,
            v,
            probs,
            ctx,
            lq,
            lk,
        },
    )
}

#[allow(clippy::too_many_arguments)]
pub(crate) fn attn_core<T: Scalar>(
    q: &[T],
    k: &[T],
    v: &[T],
    lq: usize,
    lk: usize,
    d: usize,
    heads: usize,
    causal: bool,
) -> (Vec<T>, Vec<T>) {
    let hd = d / heads;
    let scale = head_scale::<T>(hd);
    let mut probs = vec![T::zero(); heads * lq * lk];
    let mut ctx = vec![T::zero(); lq * d];
    let mut ctx_h = vec![T::zero(); hd];
    for h in 0..heads {
        for i in 0..lq {
            let n_keys = if causal { i + 1 } else { lk };
            let prow = &mut probs[(h * lq + i) * lk..(h * lq + i + 1) * lk];
            attend_row(
                &q[i * d..(i + 1) * d],
                k,
                v,
                n_keys,
                d,
                h,
                hd,
                scale,
                prow,
                &mut ctx_h,
            );
            ctx[i * d + h * hd..i * d + (h + 1) * hd].copy_from_slice(&ctx_h);
        }
    }
    (ctx, probs)
}

/// Returns `(dxq, dxkv)`.
#[allow(clippy::too_many_arguments)]
pub(crate) fn attn_bwd<T: Scalar>(
    p: &ModelParams<T>,
    idx: AttnIdx,
    heads: usize,
    xq: &[T],
    xkv: &[T],
    cache: &AttnCache<T>,
    dout: &[T],
    g: &mut Gradients<T>,
) -> (Vec<T>, Vec<T>) {
    let d = idx.q.fan_in;
    let (lq, lk) = (cache.lq, cache.lk);
    let hd = d / heads;
    let scale = head_scale::<T>(hd);
    let dctx = linear_bwd(p, idx.o, &cache.ctx, dout, lq, g);

    let mut dq = vec![T::zero(); lq * d];
    let mut dk = vec![T::zero(); lk * d];
    let mut dv = vec![T::zero(); lk * d];
    let mut dp = vec![T::zero(); lk];
    for h in 0..heads {
        let off = h * hd;
        for i in 0..lq {
            let prow = &cache.probs[(h * lq + i) * lk..(h * lq + i + 1) * lk];
            let dci = &dctx[i * d + off..i * d + off + hd];
            let mut weighted = T::zero();
            for j in 0..lk {
                if prow[j] == T::zero() {
                    dp[j] = T::zero();
                    continue;
                }
                dp[j] = dot(dci, &cache.v[j * d + off..j * d + off + hd]);
                weighted += prow[j] * dp[j];
                let dvj = &mut dv[j * d + off..j * d + off + hd];
                for (a, &b) in dvj.iter_mut().zip(dci) {
                    *a += prow[j] * b;
                }
            }
            for j in 0..lk {
                if prow[j] == T::zero() {
                    continue;
                }
                let ds = prow[j] * (dp[j] - weighted) * scale;
                let kj = &cache.k[j * d + off..j * d + off + hd];
                let dqi = &mut dq[i * d + off..i * d + off + hd];
                for (a, &b) in dqi.iter_mut().zip(kj) {
                    *a += ds * b;
                }
                let qi = &cache.q[i * d + off..i * d + off + hd];
                let dkj = &mut dk[j * d + off..j * d + off + hd];
                for (a, &b) in dkj.iter_mut().zip(qi) {
                    *a += ds * b;
                }
            }
        }
    }
    let dxq = linear_bwd(p, idx.q, xq, &dq, lq, g);
    let mut dxkv = linear_bwd(p, idx.k, xkv, &dk, lk, g);
    let dxv = linear_bwd(p, idx.v, xkv, &dv, lk, g);
    crate::linalg::add_assign(&mut dxkv, &dxv);
    (dxq, dxkv)
}

const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)
const GELU_A: f64 = 0.044_715;

/// Tanh-form GELU.
#[inline]
pub(crate) fn gelu<T: Scalar>(x: T) -> T {
    let u = T::lit(GELU_C) * (x + T::lit(GELU_A) * x * x * x);
    T::lit(0.5) * x * (T::one() + u.tanh())
}

#[inline]
pub(crate) fn gelu_grad<T: Scalar>(x: T) -> T {
    let c = T::lit(GELU_C);
    let a = T::lit(GELU_A);
    let u = c * (x + a * x * x * x);
    let t = u.tanh();
    let half = T::lit(0.5);
    half * (T::one() + t) + half * x * (T::one() - t * t) * c * (T::one() + T::lit(3.0) * a * x * x)
}

#[derive(Debug, Clone)]
pub(crate) struct FfnCache<T> {
    pre: Vec<T>,
    act: Vec<T>,
}

pub(crate) fn ffn_fwd<T: Scalar>(
    p: &ModelParams<T>,
    idx: FfnIdx,
    x: &[T],
) -> (Vec<T>, FfnCache<T>) {
    let rows = x.len() / idx.up.fan_in;
    let pre = linear_fwd(p, idx.up, x, rows);
    let act: Vec<T> = pre.iter().map(|&v| gelu(v)).collect();
    let out = linear_fwd(p, idx.down, &act, rows);
    (out, FfnCache { pre, act })
}

pub(crate) fn ffn_bwd<T: Scalar>(
    p: &ModelParams<T>,
    idx: FfnIdx,
    x: &[T],
    cache: &FfnCache<T>,
    dout: &[T],
    g: &mut Gradients<T>,
) -> Vec<T> {
    let rows = x.len() / idx.up.fan_in;
    let mut dact = linear_bwd(p, idx.down, &cache.act, dout, rows, g);
    for (da, &z) in dact.iter_mut().zip(&cache.pre) {
        *da *= gelu_grad(z);
    }
    linear_bwd(p, idx.up, x, &dact, rows, g)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn gelu_derivative_matches_central_difference() {
        for &x in &[-3.0f64, -0.7, 0.0, 0.3, 1.9] {
            let h = 1e-6;
            let fd = (gelu(x + h) - gelu(x - h)) / (2.0 * h);
            assert!((fd - gelu_grad(x)).abs() < 1e-8, "x={x}");
        }
        assert_eq!(gelu(0.0f64), 0.0);
    }
}
