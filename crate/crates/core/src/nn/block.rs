//! Pre-normalized decoder block: RMSNorm → multi-head self-attention → residual,
//! RMSNorm → SwiGLU feed-forward → residual.
//!
//! The same forward routine serves training (empty cache, whole sequence, activations
//! recorded) and incremental decoding (rows appended to a per-layer key/value cache),
//! so a cached step performs exactly the arithmetic a full pass performs for that row.

use crate::error::{NepError, Result};
use crate::nn::norm::{rms_norm_backward, rms_norm_forward};
use crate::nn::{gemm, Real, Tensor};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct BlockShape {
    pub d_model: usize,
    pub n_heads: usize,
    pub ffn_dim: usize,
}

impl BlockShape {
    pub fn validate(&self) -> Result<()> {
        if self.d_model == 0 || self.n_heads == 0 || self.ffn_dim == 0 {
            return Err(NepError::Config(format!("degenerate block shape {self:?}")));
        }
        if self.d_model % self.n_heads != 0 {
            return Err(NepError::Config(format!(
                "d_model {} not divisible by {} heads",
                self.d_model, self.n_heads
            )));
        }
        Ok(())
    }

    pub fn head_dim(&self) -> usize {
        self.d_model / self.n_heads
    }

    /// Parameter tensors of one block as `(suffix, dims)` in storage order.
    pub fn tensor_dims(&self) -> [(&'static str, Vec<usize>); 9] {
        let (d, f) = (self.d_model, self.ffn_dim);
        [
            ("attn_norm", vec![d]),
            ("wq", vec![d, d]),
            ("wk", vec![d, d]),
            ("wv", vec![d, d]),
            ("wo", vec![d, d]),
            ("ffn_norm", vec![d]),
            ("w_gate", vec![d, f]),
            ("w_up", vec![d, f]),
            ("w_down", vec![f, d]),
        ]
    }
}

#[derive(Debug, Clone, Copy)]
pub struct BlockWeights<'a, T> {
    pub attn_norm: &'a [T],
    pub wq: &'a [T],
    pub wk: &'a [T],
    pub wv: &'a [T],
    pub wo: &'a [T],
    pub ffn_norm: &'a [T],
    pub w_gate: &'a [T],
    pub w_up: &'a [T],
    pub w_down: &'a [T],
}

impl<'a, T> BlockWeights<'a, T> {
    /// Splits a contiguous slice laid out in [`BlockShape::tensor_dims`] order.
    pub fn from_flat(shape: &BlockShape, flat: &'a [T]) -> Self {
        let mut rest = flat;
        let mut take = |n: usize| {
            let (head, tail) = rest.split_at(n);
            rest = tail;
            head
        };
        let (d, f) = (shape.d_model, shape.ffn_dim);
        Self {
            attn_norm: take(d),
            wq: take(d * d),
            wk: take(d * d),
            wv: take(d * d),
            wo: take(d * d),
            ffn_norm: take(d),
            w_gate: take(d * f),
            w_up: take(d * f),
            w_down: take(f * d),
        }
    }
}

pub struct BlockGrads<'a, T> {
    pub attn_norm: &'a mut [T],
    pub wq: &'a mut [T],
    pub wk: &'a mut [T],
    pub wv: &'a mut [T],
    pub wo: &'a mut [T],
    pub ffn_norm: &'a mut [T],
    pub w_gate: &'a mut [T],
    pub w_up: &'a mut [T],
    pub w_down: &'a mut [T],
}

impl<'a, T> BlockGrads<'a, T> {
    pub fn from_flat(shape: &BlockShape, flat: &'a mut [T]) -> Self {
        let (d, f) = (shape.d_model, shape.ffn_dim);
        let (attn_norm, rest) = flat.split_at_mut(d);
        let (wq, rest) = rest.split_at_mut(d * d);
        let (wk, rest) = rest.split_at_mut(d * d);
        let (wv, rest) = rest.split_at_mut(d * d);
        let (wo, rest) = rest.split_at_mut(d * d);
        let (ffn_norm, rest) = rest.split_at_mut(d);
        let (w_gate, rest) = rest.split_at_mut(d * f);
        let (w_up, rest) = rest.split_at_mut(d * f);
        let (w_down, _) = rest.split_at_mut(f * d);
        Self { attn_norm, wq, wk, wv, wo, ffn_norm, w_gate, w_up, w_down }
    }
}

/// Keys and values of every row a layer has seen so far.
#[derive(Debug, Clone, Default)]
pub struct LayerCache<T> {
    k: Vec<T>,
    v: Vec<T>,
    rows: usize,
}

impl<T: Real> LayerCache<T> {
    pub fn new() -> Self {
        Self { k: Vec::new(), v: Vec::new(), rows: 0 }
    }

    pub fn with_capacity(rows: usize, d: usize) -> Self {
        Self { k: Vec::with_capacity(rows * d), v: Vec::with_capacity(rows * d), rows: 0 }
    }

    pub fn len(&self) -> usize {
        self.rows
    }

    pub fn is_empty(&self) -> bool {
        self.rows == 0
    }
}

/// Activations of a whole-sequence forward pass, kept for the backward pass.
#[derive(Debug, Clone, Default)]
pub struct BlockRecord<T> {
    x: Vec<T>,
    a_in: Vec<T>,
    rstd1: Vec<T>,
    q: Vec<T>,
    k: Vec<T>,
    v: Vec<T>,
    /// `[head][row][col]` attention probabilities, `n × n` per head.
    probs: Vec<T>,
    o: Vec<T>,
    h2: Vec<T>,
    f_in: Vec<T>,
    rstd2: Vec<T>,
    gate: Vec<T>,
    up: Vec<T>,
    act: Vec<T>,
    rows: usize,
}

#[inline]
fn sigmoid(x: f64) -> f64 {
    1.0 / (1.0 + (-x).exp())
}

/// `[rows × d]` to head-major `[head][row][hd]` in f64.
fn split_heads<T: Real>(src: &[T], rows: usize, d: usize, hd: usize) -> Vec<f64> {
    let heads = d / hd;
    let mut out = vec![0.0; rows * d];
    for h in 0..heads {
        for r in 0..rows {
            let dst = &mut out[(h * rows + r) * hd..(h * rows + r + 1) * hd];
            for (o, v) in dst.iter_mut().zip(&src[r * d + h * hd..r * d + (h + 1) * hd]) {
                *o = v.f64();
            }
        }
    }
    out
}

fn merge_heads<T: Real>(src: &[f64], rows: usize, d: usize, hd: usize) -> Vec<T> {
    let heads = d / hd;
    let mut out = vec![T::zero(); rows * d];
    for h in 0..heads {
        for r in 0..rows {
            let from = &src[(h * rows + r) * hd..(h * rows + r + 1) * hd];
            for (o, v) in out[r * d + h * hd..r * d + (h + 1) * hd].iter_mut().zip(from) {
                *o = T::of(*v);
            }
        }
    }
    out
}

/// Runs one block over `x[S×d]`, optionally appending to `cache`.
pub fn attention_block<T: Real>(
    x: &Tensor<T>,
    shape: &BlockShape,
    weights: &BlockWeights<'_, T>,
    cache: Option<&mut LayerCache<T>>,
    causal: bool,
) -> Result<Tensor<T>> {
    shape.validate()?;
    if x.cols() != shape.d_model || x.rows() == 0 {
        return Err(NepError::Config(format!(
            "attention_block: input {:?} does not match d_model {}",
            x.dims(),
            shape.d_model
        )));
    }
    let mut local = LayerCache::new();
    let cache = cache.unwrap_or(&mut local);
    let out = block_forward(shape, weights, x.data(), cache, causal, None);
    Tensor::new(vec![x.rows(), shape.d_model], out)
}

/// Forward over `n` new rows; keys/values are appended to `cache`.
/// When `record` is given, the cache must be empty (whole-sequence training pass).
pub fn block_forward<T: Real>(
    shape: &BlockShape,
    w: &BlockWeights<'_, T>,
    x: &[T],
    cache: &mut LayerCache<T>,
    causal: bool,
    record: Option<&mut BlockRecord<T>>,
) -> Vec<T> {
    let d = shape.d_model;
    let f = shape.ffn_dim;
    let n = x.len() / d;
    let past = cache.rows;
    if record.is_some() {
        assert_eq!(past, 0, "recording requires a whole-sequence pass");
    }

    let mut a_in = vec![T::zero(); n * d];
    let mut rstd1 = vec![T::zero(); n];
    rms_norm_forward(x, w.attn_norm, &mut a_in, &mut rstd1);

    let mut q = vec![T::zero(); n * d];
    let mut k = vec![T::zero(); n * d];
    let mut v = vec![T::zero(); n * d];
    gemm(&mut q, &a_in, w.wq, n, d, d, false, false, T::zero());
    gemm(&mut k, &a_in, w.wk, n, d, d, false, false, T::zero());
    gemm(&mut v, &a_in, w.wv, n, d, d, false, false, T::zero());
    cache.k.extend_from_slice(&k);
    cache.v.extend_from_slice(&v);
    cache.rows += n;
    let total = cache.rows;

    let hd = shape.head_dim();
    let scale = 1.0 / (hd as f64).sqrt();
    let mut o = vec![T::zero(); n * d];
    let mut probs = if record.is_some() {
        vec![T::zero(); shape.n_heads * n * n]
    } else {
        Vec::new()
    };
    let qh = split_heads(&q, n, d, hd);
    let kh = split_heads(&cache.k, total, d, hd);
    let vh = split_heads(&cache.v, total, d, hd);
    let mut scores = vec![0.0f64; n * total];
    let mut oh = vec![0.0f64; n * hd];
    for h in 0..shape.n_heads {
        let c0 = h * hd;
        let kh = &kh[h * total * hd..(h + 1) * total * hd];
        let vh = &vh[h * total * hd..(h + 1) * total * hd];
        gemm(&mut scores, &qh[h * n * hd..(h + 1) * n * hd], kh, n, hd, total, false, true, 0.0);
        for (i, row) in scores.chunks_exact_mut(total).enumerate() {
            let visible = if causal { past + i + 1 } else { total };
            let (live, hidden) = row.split_at_mut(visible);
            hidden.fill(0.0);
            let max = live.iter().fold(f64::NEG_INFINITY, |m, &s| m.max(s));
            let mut z = 0.0;
            for s in live.iter_mut() {
                *s = ((*s - max) * scale).exp();
                z += *s;
            }
            live.iter_mut().for_each(|s| *s /= z);
            if record.is_some() {
                for (p, s) in probs[(h * n + i) * n..(h * n + i + 1) * n].iter_mut().zip(row.iter()) {
                    *p = T::of(*s);
                }
            }
        }
        gemm(&mut oh, &scores, vh, n, total, hd, false, false, 0.0);
        for (i, src) in oh.chunks_exact(hd).enumerate() {
            for (dst, a) in o[i * d + c0..i * d + c0 + hd].iter_mut().zip(src) {
                *dst = T::of(*a);
            }
        }
    }

    let mut h2 = x.to_vec();
    gemm(&mut h2, &o, w.wo, n, d, d, false, false, T::one());

    let mut f_in = vec![T::zero(); n * d];
    let mut rstd2 = vec![T::zero(); n];
    rms_norm_forward(&h2, w.ffn_norm, &mut f_in, &mut rstd2);
    let mut gate = vec![T::zero(); n * f];
    let mut up = vec![T::zero(); n * f];
    gemm(&mut gate, &f_in, w.w_gate, n, d, f, false, false, T::zero());
    gemm(&mut up, &f_in, w.w_up, n, d, f, false, false, T::zero());
    let act: Vec<T> = gate
        .iter()
        .zip(&up)
        .map(|(g, u)| {
            let g = g.f64();
            T::of(g * sigmoid(g) * u.f64())
        })
        .collect();
    let mut out = h2.clone();
    gemm(&mut out, &act, w.w_down, n, f, d, false, false, T::one());

    if let Some(rec) = record {
        *rec = BlockRecord {
            x: x.to_vec(),
            a_in,
            rstd1,
            q,
            k,
            v,
            probs,
            o,
            h2,
            f_in,
            rstd2,
            gate,
            up,
            act,
            rows: n,
        };
    }
    out
}

/// Backward through a recorded block. Returns `d loss / d x` and accumulates into `g`.
pub fn block_backward<T: Real>(
    shape: &BlockShape,
    w: &BlockWeights<'_, T>,
    rec: &BlockRecord<T>,
    dout: &[T],
    g: &mut BlockGrads<'_, T>,
) -> Vec<T> {
    let d = shape.d_model;
    let f = shape.ffn_dim;
    let n = rec.rows;

    // Feed-forward branch.
    let mut dh2 = dout.to_vec();
    gemm(g.w_down, &rec.act, dout, f, n, d, true, false, T::one());
    let mut dact = vec![T::zero(); n * f];
    gemm(&mut dact, dout, w.w_down, n, d, f, false, true, T::zero());
    let mut dgate = vec![T::zero(); n * f];
    let mut dup = vec![T::zero(); n * f];
    for i in 0..n * f {
        let gv = rec.gate[i].f64();
        let s = sigmoid(gv);
        let silu = gv * s;
        let da = dact[i].f64();
        dup[i] = T::of(da * silu);
        dgate[i] = T::of(da * rec.up[i].f64() * (s + gv * s * (1.0 - s)));
    }
    gemm(g.w_gate, &rec.f_in, &dgate, d, n, f, true, false, T::one());
    gemm(g.w_up, &rec.f_in, &dup, d, n, f, true, false, T::one());
    let mut df_in = vec![T::zero(); n * d];
    gemm(&mut df_in, &dgate, w.w_gate, n, f, d, false, true, T::zero());
    gemm(&mut df_in, &dup, w.w_up, n, f, d, false, true, T::one());
    rms_norm_backward(&df_in, &rec.h2, w.ffn_norm, &rec.rstd2, &mut dh2, g.ffn_norm);

    // Attention branch.
    gemm(g.wo, &rec.o, &dh2, d, n, d, true, false, T::one());
    let mut d_o = vec![T::zero(); n * d];
    gemm(&mut d_o, &dh2, w.wo, n, d, d, false, true, T::zero());

    let hd = shape.head_dim();
    let scale = 1.0 / (hd as f64).sqrt();
    let qh = split_heads(&rec.q, n, d, hd);
    let kh = split_heads(&rec.k, n, d, hd);
    let vh = split_heads(&rec.v, n, d, hd);
    let doh = split_heads(&d_o, n, d, hd);
    let mut dqh = vec![0.0f64; n * d];
    let mut dkh = vec![0.0f64; n * d];
    let mut dvh = vec![0.0f64; n * d];
    let mut p = vec![0.0f64; n * n];
    let mut ds = vec![0.0f64; n * n];
    for h in 0..shape.n_heads {
        let span = h * n * hd..(h + 1) * n * hd;
        for (dst, src) in p.iter_mut().zip(&rec.probs[h * n * n..(h + 1) * n * n]) {
            *dst = src.f64();
        }
        gemm(&mut ds, &doh[span.clone()], &vh[span.clone()], n, hd, n, false, true, 0.0);
        for (prow, drow) in p.chunks_exact(n).zip(ds.chunks_exact_mut(n)) {
            let dot_pdp: f64 = prow.iter().zip(drow.iter()).map(|(a, b)| a * b).sum();
            for (dv, pv) in drow.iter_mut().zip(prow) {
                *dv = pv * (*dv - dot_pdp) * scale;
            }
        }
        gemm(&mut dvh[span.clone()], &p, &doh[span.clone()], n, n, hd, true, false, 0.0);
        gemm(&mut dqh[span.clone()], &ds, &kh[span.clone()], n, n, hd, false, false, 0.0);
        gemm(&mut dkh[span.clone()], &ds, &qh[span], n, n, hd, true, false, 0.0);
    }
    let dq: Vec<T> = merge_heads(&dqh, n, d, hd);
    let dk: Vec<T> = merge_heads(&dkh, n, d, hd);
    let dv: Vec<T> = merge_heads(&dvh, n, d, hd);

    gemm(g.wq, &rec.a_in, &dq, d, n, d, true, false, T::one());
    gemm(g.wk, &rec.a_in, &dk, d, n, d, true, false, T::one());
    gemm(g.wv, &rec.a_in, &dv, d, n, d, true, false, T::one());
    let mut da_in = vec![T::zero(); n * d];
    gemm(&mut da_in, &dq, w.wq, n, d, d, false, true, T::zero());
    gemm(&mut da_in, &dk, w.wk, n, d, d, false, true, T::one());
    gemm(&mut da_in, &dv, w.wv, n, d, d, false, true, T::one());
    let mut dx = dh2;
    rms_norm_backward(&da_in, &rec.x, w.attn_norm, &rec.rstd1, &mut dx, g.attn_norm);
    dx
}
