//! Row-wise building blocks: layer norm, GELU, masked softmax attention.

use crate::linalg::{gemm, Float, View};
use crate::mask::AttentionMask;

pub const LN_EPS: f64 = 1e-5;

/// Normalized inputs and reciprocal std, kept for the backward pass.
#[derive(Clone, Debug, Default)]
pub struct LnTape<T> {
    pub xhat: Vec<T>,
    pub rstd: Vec<T>,
}

pub fn layer_norm<T: Float>(x: &[T], g: &[T], b: &[T], out: &mut [T], tape: Option<&mut LnTape<T>>) {
    let d = g.len();
    let n = x.len() / d;
    let eps = T::from_f64_lossy(LN_EPS);
    let inv_d = T::one() / T::from_usize(d).unwrap();
    let mut xhat_all = tape.as_ref().map(|_| vec![T::zero(); x.len()]);
    let mut rstd_all = tape.as_ref().map(|_| vec![T::zero(); n]);
    for (i, (row, o)) in x.chunks(d).zip(out.chunks_mut(d)).enumerate() {
        let mean = row.iter().copied().sum::<T>() * inv_d;
        let var = row.iter().map(|&v| (v - mean) * (v - mean)).sum::<T>() * inv_d;
        let rstd = T::one() / (var + eps).sqrt();
        for j in 0..d {
            let xh = (row[j] - mean) * rstd;
            o[j] = xh * g[j] + b[j];
            if let Some(xa) = xhat_all.as_mut() {
                xa[i * d + j] = xh;
            }
        }
        if let Some(ra) = rstd_all.as_mut() {
            ra[i] = rstd;
        }
    }
    if let Some(t) = tape {
        t.xhat = xhat_all.unwrap();
        t.rstd = rstd_all.unwrap();
    }
}

/// Accumulates gain/bias grads and adds the input grad into `dx`.
pub fn layer_norm_backward<T: Float>(tape: &LnTape<T>, g: &[T], dy: &[T], dg: &mut [T], db: &mut [T], dx: &mut [T]) {
    let d = g.len();
    let inv_d = T::one() / T::from_usize(d).unwrap();
    let mut dxhat = vec![T::zero(); d];
    for (i, (dyr, xh)) in dy.chunks(d).zip(tape.xhat.chunks(d)).enumerate() {
        let mut mean_dxhat = T::zero();
        let mut mean_dxhat_xhat = T::zero();
        for j in 0..d {
            dg[j] += dyr[j] * xh[j];
            db[j] += dyr[j];
            dxhat[j] = dyr[j] * g[j];
            mean_dxhat += dxhat[j];
            mean_dxhat_xhat += dxhat[j] * xh[j];
        }
        mean_dxhat *= inv_d;
        mean_dxhat_xhat *= inv_d;
        let rstd = tape.rstd[i];
        let dxr = &mut dx[i * d..(i + 1) * d];
        for j in 0..d {
            dxr[j] += rstd * (dxhat[j] - mean_dxhat - xh[j] * mean_dxhat_xhat);
        }
    }
}

const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)
const GELU_A: f64 = 0.044_715;

pub fn gelu<T: Float>(x: T) -> T {
    let c = T::from_f64_lossy(GELU_C);
    let a = T::from_f64_lossy(GELU_A);
    let half = T::from_f64_lossy(0.5);
    half * x * (T::one() + (c * (x + a * x * x * x)).tanh())
}

pub fn gelu_grad<T: Float>(x: T) -> T {
    let c = T::from_f64_lossy(GELU_C);
    let a = T::from_f64_lossy(GELU_A);
    let half = T::from_f64_lossy(0.5);
    let three = T::from_f64_lossy(3.0);
    let t = (c * (x + a * x * x * x)).tanh();
    half * (T::one() + t) + half * x * (T::one() - t * t) * c * (T::one() + three * a * x * x)
}

/// Softmax over the allowed entries of `scores[..limit]`, written into
/// `probs`; masked entries become exactly zero. A row with nothing allowed
/// attends only to `self_idx`.
pub fn masked_softmax_row<T: Float>(scores: &[T], allowed: impl Fn(usize) -> bool, self_idx: usize, probs: &mut [T]) {
    let limit = scores.len();
    let mut max = T::neg_infinity();
    for (v, &s) in scores.iter().enumerate() {
        if allowed(v) && s > max {
            max = s;
        }
    }
    if max == T::neg_infinity() {
        probs[..limit].fill(T::zero());
        if self_idx < probs.len() {
            probs[self_idx] = T::one();
        }
        return;
    }
    let mut sum = T::zero();
    for v in 0..limit {
        if allowed(v) {
            let e = (scores[v] - max).exp();
            probs[v] = e;
            sum += e;
        } else {
            probs[v] = T::zero();
        }
    }
    let inv = T::one() / sum;
    probs[..limit].iter_mut().for_each(|p| *p *= inv);
}

pub const ROW_BLOCK: usize = 64;

/// Row blocks `[r0, r1)` and the largest key limit inside each.
pub fn row_blocks(n: usize, mask: &dyn AttentionMask) -> Vec<(usize, usize, usize)> {
    let mut out = Vec::new();
    let mut r0 = 0;
    while r0 < n {
        let r1 = (r0 + ROW_BLOCK).min(n);
        let limit = (r0..r1).map(|q| mask.key_limit(q)).max().unwrap_or(0).min(n);
        out.push((r0, r1, limit));
        r0 = r1;
    }
    out
}

/// Full-sequence multi-head attention. `qkv` is `n x 3d`; `probs[h]` is
/// filled as a dense `n x n` matrix; `ctx` receives `n x d`.
pub fn attention_forward<T: Float>(
    qkv: &[T],
    n: usize,
    d: usize,
    heads: usize,
    mask: &dyn AttentionMask,
    probs: &mut [Vec<T>],
    ctx: &mut [T],
) {
    let dh = d / heads;
    let scale = T::one() / T::from_usize(dh).unwrap().sqrt();
    let ld = 3 * d;
    let blocks = row_blocks(n, mask);
    let mut scores = Vec::new();
    for h in 0..heads {
        let p = &mut probs[h];
        p.clear();
        p.resize(n * n, T::zero());
        let (qo, ko, vo) = (h * dh, d + h * dh, 2 * d + h * dh);
        for &(r0, r1, limit) in &blocks {
            let bs = r1 - r0;
            if limit == 0 {
                continue;
            }
            scores.clear();
            scores.resize(bs * limit, T::zero());
            gemm(
                bs,
                dh,
                limit,
                scale,
                View::new(&qkv[r0 * ld + qo..], ld),
                View::t(&qkv[ko..], ld),
                T::zero(),
                &mut scores,
                limit,
            );
            for (i, q) in (r0..r1).enumerate() {
                let ql = mask.key_limit(q).min(limit);
                let row = &mut p[q * n..q * n + limit];
                masked_softmax_row(&scores[i * limit..i * limit + ql], |v| mask.allowed(q, v), q, row);
            }
            gemm(
                bs,
                limit,
                dh,
                T::one(),
                View::new(&p[r0 * n..], n),
                View::new(&qkv[vo..], ld),
                T::zero(),
                &mut ctx[r0 * d + h * dh..],
                d,
            );
        }
    }
}

/// Gradient of [`attention_forward`] with respect to `qkv`, accumulated into
/// `dqkv`.
#[allow(clippy::too_many_arguments)]
pub fn attention_backward<T: Float>(
    qkv: &[T],
    n: usize,
    d: usize,
    heads: usize,
    mask: &dyn AttentionMask,
    probs: &[Vec<T>],
    dctx: &[T],
    dqkv: &mut [T],
) {
    let dh = d / heads;
    let scale = T::one() / T::from_usize(dh).unwrap().sqrt();
    let ld = 3 * d;
    let blocks = row_blocks(n, mask);
    let mut dp = Vec::new();
    for h in 0..heads {
        let p = &probs[h];
        let (qo, ko, vo) = (h * dh, d + h * dh, 2 * d + h * dh);
        for &(r0, r1, limit) in &blocks {
            let bs = r1 - r0;
            if limit == 0 {
                continue;
            }
            // dP = dctx * V^T
            dp.clear();
            dp.resize(bs * limit, T::zero());
            gemm(
                bs,
                dh,
                limit,
                T::one(),
                View::new(&dctx[r0 * d + h * dh..], d),
                View::t(&qkv[vo..], ld),
                T::zero(),
                &mut dp,
                limit,
            );
            // dS = P * (dP - rowsum(P * dP)), pre-scaled for the Q/K products
            for i in 0..bs {
                let prow = &p[(r0 + i) * n..(r0 + i) * n + limit];
                let drow = &mut dp[i * limit..(i + 1) * limit];
                let mut s = T::zero();
                for v in 0..limit {
                    s += prow[v] * drow[v];
                }
                for v in 0..limit {
                    drow[v] = prow[v] * (drow[v] - s) * scale;
                }
            }
            // dQ += dS * K
            gemm(
                bs,
                limit,
                dh,
                T::one(),
                View::new(&dp, limit),
                View::new(&qkv[ko..], ld),
                T::one(),
                &mut dqkv[r0 * ld + qo..],
                ld,
            );
            // dK += dS^T * Q
            gemm(
                limit,
                bs,
                dh,
                T::one(),
                View::t(&dp, limit),
                View::new(&qkv[r0 * ld + qo..], ld),
                T::one(),
                &mut dqkv[ko..],
                ld,
            );
            // dV += P^T * dctx
            gemm(
                limit,
                bs,
                dh,
                T::one(),
                View::t(&p[r0 * n..], n),
                View::new(&dctx[r0 * d + h * dh..], d),
                T::one(),
                &mut dqkv[vo..],
                ld,
            );
        }
    }
}
