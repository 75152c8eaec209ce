//! Forward and backward kernels for the differentiable ops recorded by [`crate::graph::Graph`].
//!
//! All kernels work on row-major `[rows × cols]` slices. Backward kernels
//! accumulate into their output buffers.

use rayon::prelude::*;

use crate::tensor::{gemm, MatView, MatViewMut, Real};

pub fn rms_norm_forward<T: Real>(x: &[T], w: &[T], eps: T, y: &mut [T], inv_rms: &mut [T]) {
    let d = w.len();
    for ((xr, yr), inv) in x.chunks_exact(d).zip(y.chunks_exact_mut(d)).zip(inv_rms.iter_mut()) {
        let ms = xr.iter().map(|&v| v * v).sum::<T>() / T::from_f64(d as f64);
        let r = T::ONE / (ms + eps).sqrt();
        *inv = r;
        for ((o, &v), &g) in yr.iter_mut().zip(xr).zip(w) {
            *o = g * v * r;
        }
    }
}

pub fn rms_norm_backward<T: Real>(
    x: &[T],
    w: &[T],
    inv_rms: &[T],
    dy: &[T],
    dx: Option<&mut [T]>,
    dw: Option<&mut [T]>,
) {
    let d = w.len();
    let dn = T::from_f64(d as f64);
    if let Some(dx) = dx {
        for (((xr, gr), dxr), &r) in x
            .chunks_exact(d)
            .zip(dy.chunks_exact(d))
            .zip(dx.chunks_exact_mut(d))
            .zip(inv_rms)
        {
            // g = dy ⊙ w ; dx = r·g − x·r³·mean(g⊙x)
            let dot: T = xr.iter().zip(gr).zip(w).map(|((&v, &g), &wi)| g * wi * v).sum();
            let coef = r * r * r * dot / dn;
            for (((o, &v), &g), &wi) in dxr.iter_mut().zip(xr).zip(gr).zip(w) {
                *o += r * g * wi - v * coef;
            }
        }
    }
    if let Some(dw) = dw {
        for ((xr, gr), &r) in x.chunks_exact(d).zip(dy.chunks_exact(d)).zip(inv_rms) {
            for ((o, &v), &g) in dw.iter_mut().zip(xr).zip(gr) {
                *o += g * v * r;
            }
        }
    }
}

/// In-place numerically stable softmax over each row of `cols` values.
pub fn softmax_rows<T: Real>(data: &mut [T], cols: usize) {
    for row in data.chunks_exact_mut(cols) {
        softmax_in_place(row);
    }
}

pub fn softmax_in_place<T: Real>(row: &mut [T]) {
    let m = row.iter().copied().fold(row[0], T::max);
    let mut s = T::ZERO;
    for v in row.iter_mut() {
        *v = (*v - m).exp();
        s += *v;
    }
    let inv = T::ONE / s;
    for v in row.iter_mut() {
        *v *= inv;
    }
}

/// Log-sum-exp of a row, accumulated in f64.
pub fn log_sum_exp<T: Real>(row: &[T]) -> f64 {
    let m = row.iter().map(|v| v.to_f64()).fold(f64::NEG_INFINITY, f64::max);
    m + row.iter().map(|v| (v.to_f64() - m).exp()).sum::<f64>().ln()
}

/// Rotary position tables: `cos[pos][i]`, `sin[pos][i]` for `i < head_dim/2`.
#[derive(Clone, Debug)]
pub struct RopeTable<T> {
    pub half: usize,
    pub cos: Vec<T>,
    pub sin: Vec<T>,
}

impl<T: Real> RopeTable<T> {
    pub fn new(head_dim: usize, positions: usize, base: f64) -> Self {
        let half = head_dim / 2;
        let mut cos = Vec::with_capacity(positions * half);
        let mut sin = Vec::with_capacity(positions * half);
        for p in 0..positions {
            for i in 0..half {
                let freq = base.powf(-(2.0 * i as f64) / head_dim as f64);
                let a = p as f64 * freq;
                cos.push(T::from_f64(a.cos()));
                sin.push(T::from_f64(a.sin()));
            }
        }
        Self { half, cos, sin }
    }
}

/// Rotate each head's pair `(i, i+half)` by the position angle; `inverse` applies the transpose.
pub fn rope_apply<T: Real>(
    x: &[T],
    out: &mut [T],
    d_model: usize,
    n_heads: usize,
    seq: usize,
    table: &RopeTable<T>,
    inverse: bool,
) {
    let dh = d_model / n_heads;
    let half = table.half;
    for (r, (xr, or)) in x.chunks_exact(d_model).zip(out.chunks_exact_mut(d_model)).enumerate() {
        let pos = r % seq;
        let cs = &table.cos[pos * half..(pos + 1) * half];
        let sn = &table.sin[pos * half..(pos + 1) * half];
        for h in 0..n_heads {
            let base = h * dh;
            for i in 0..half {
                let (c, s) = (cs[i], if inverse { -sn[i] } else { sn[i] });
                let a = xr[base + i];
                let b = xr[base + i + half];
                or[base + i] += a * c - b * s;
                or[base + i + half] += b * c + a * s;
            }
        }
    }
}

pub struct AttnShape {
    pub batch: usize,
    pub seq: usize,
    pub heads: usize,
    pub d_model: usize,
}

impl AttnShape {
    fn head_dim(&self) -> usize {
        self.d_model / self.heads
    }
}

/// Causal multi-head attention. `probs` receives `[batch, heads, seq, seq]`.
pub fn attention_forward<T: Real>(
    q: &[T],
    k: &[T],
    v: &[T],
    s: &AttnShape,
    out: &mut [T],
    probs: &mut [T],
) {
    let (t, d, dh) = (s.seq, s.d_model, s.head_dim());
    let scale = T::from_f64(1.0 / (dh as f64).sqrt());
    out.par_chunks_mut(t * d)
        .zip(probs.par_chunks_mut(s.heads * t * t))
        .enumerate()
        .for_each(|(b, (ob, pb))| {
            let rows = b * t * d..(b + 1) * t * d;
            let (qb, kb, vb) = (&q[rows.clone()], &k[rows.clone()], &v[rows]);
            for h in 0..s.heads {
                let p = &mut pb[h * t * t..(h + 1) * t * t];
                let qh = MatView::columns(qb, t, d, h * dh, dh);
                let kh = MatView::columns(kb, t, d, h * dh, dh);
                gemm(scale, qh, kh.t(), T::ZERO, MatViewMut::new(p, t, t));
                for i in 0..t {
                    let row = &mut p[i * t..(i + 1) * t];
                    softmax_in_place(&mut row[..=i]);
                    for x in &mut row[i + 1..] {
                        *x = T::ZERO;
                    }
                }
                let vh = MatView::columns(vb, t, d, h * dh, dh);
                gemm(
                    T::ONE,
                    MatView::new(p, t, t),
                    vh,
                    T::ZERO,
                    MatViewMut::columns(ob, t, d, h * dh, dh),
                );
            }
        });
}

/// Gradients of causal attention; `dq`, `dk`, `dv` are overwritten.
#[allow(clippy::too_many_arguments)]
pub fn attention_backward<T: Real>(
    q: &[T],
    k: &[T],
    v: &[T],
    probs: &[T],
    dout: &[T],
    s: &AttnShape,
    dq: &mut [T],
    dk: &mut [T],
    dv: &mut [T],
) {
    let (t, d, dh) = (s.seq, s.d_model, s.head_dim());
    let scale = T::from_f64(1.0 / (dh as f64).sqrt());
    dq.par_chunks_mut(t * d)
        .zip(dk.par_chunks_mut(t * d))
        .zip(dv.par_chunks_mut(t * d))
        .enumerate()
        .for_each(|(b, ((dqb, dkb), dvb))| {
            let rows = b * t * d..(b + 1) * t * d;
            let (qb, kb, vb, gb) = (
                &q[rows.clone()],
                &k[rows.clone()],
                &v[rows.clone()],
                &dout[rows],
            );
            let mut dp = vec![T::ZERO; t * t];
            for h in 0..s.heads {
                let p = &probs[(b * s.heads + h) * t * t..(b * s.heads + h + 1) * t * t];
                let go = MatView::columns(gb, t, d, h * dh, dh);
                let vh = MatView::columns(vb, t, d, h * dh, dh);
                // dV = Pᵀ·dO
                gemm(
                    T::ONE,
                    MatView::new(p, t, t).t(),
                    go,
                    T::ZERO,
                    MatViewMut::columns(dvb, t, d, h * dh, dh),
                );
                // dP = dO·Vᵀ ; dS = P ⊙ (dP − rowsum(dP ⊙ P))
                gemm(T::ONE, go, vh.t(), T::ZERO, MatViewMut::new(&mut dp, t, t));
                for i in 0..t {
                    let pr = &p[i * t..(i + 1) * t];
                    let dr = &mut dp[i * t..(i + 1) * t];
                    let dot: T = pr[..=i].iter().zip(&dr[..=i]).map(|(&a, &b)| a * b).sum();
                    for j in 0..=i {
                        dr[j] = pr[j] * (dr[j] - dot);
                    }
                    for x in &mut dr[i + 1..] {
                        *x = T::ZERO;
                    }
                }
                let qh = MatView::columns(qb, t, d, h * dh, dh);
                let kh = MatView::columns(kb, t, d, h * dh, dh);
                gemm(
                    scale,
                    MatView::new(&dp, t, t),
                    kh,
                    T::ZERO,
                    MatViewMut::columns(dqb, t, d, h * dh, dh),
                );
                gemm(
                    scale,
                    MatView::new(&dp, t, t).t(),
                    qh,
                    T::ZERO,
                    MatViewMut::columns(dkb, t, d, h * dh, dh),
                );
            }
        });
}

#[inline]
pub fn sigmoid<T: Real>(x: T) -> T {
    T::ONE / (T::ONE + (-x).exp())
}

pub fn swiglu_forward<T: Real>(gate: &[T], up: &[T], out: &mut [T]) {
    for ((o, &g), &u) in out.iter_mut().zip(gate).zip(up) {
        *o = g * sigmoid(g) * u;
    }
}

pub fn swiglu_backward<T: Real>(
    gate: &[T],
    up: &[T],
    dy: &[T],
    dgate: Option<&mut [T]>,
    dup: Option<&mut [T]>,
) {
    if let Some(dg) = dgate {
        for (((o, &g), &u), &dyv) in dg.iter_mut().zip(gate).zip(up).zip(dy) {
            let sg = sigmoid(g);
            *o += dyv * u * (sg + g * sg * (T::ONE - sg));
        }
    }
    if let Some(du) = dup {
        for ((o, &g), &dyv) in du.iter_mut().zip(gate).zip(dy) {
            *o += dyv * g * sigmoid(g);
        }
    }
}
