//! Forward and backward passes.
//!
//! Sentences in a batch are packed row-wise without padding; `spans` record
//! where each sentence starts and how long it is. Linear layers run over the
//! whole packed matrix, attention runs per sentence.

use rand::Rng as _;

use super::linalg::{add_into, add_row, col_sum_into, dot, gemm, log_softmax, matmul, softmax};
use super::{
    gelu, gelu_grad, Attention, Example, FeedForward, ModelConfig, ModelError, ModelParameters,
    Norm, Slot,
};
use crate::seeding::Rng;

const LN_EPS: f64 = 1e-5;

type Span = (usize, usize);

struct Packed {
    tokens: Vec<u32>,
    spans: Vec<Span>,
}

impl Packed {
    fn new<'a>(seqs: impl Iterator<Item = &'a [u32]>) -> Packed {
        let mut tokens = Vec::new();
        let mut spans = Vec::new();
        for s in seqs {
            spans.push((tokens.len(), s.len()));
            tokens.extend_from_slice(s);
        }
        Packed { tokens, spans }
    }

    fn rows(&self) -> usize {
        self.tokens.len()
    }
}

/// Dropout source; `None` is evaluation mode.
struct Dropout<'a> {
    p: f64,
    rng: Option<&'a mut Rng>,
}

impl Dropout<'_> {
    fn off() -> Dropout<'static> {
        Dropout { p: 0.0, rng: None }
    }

    fn mask(&mut self, n: usize) -> Option<Vec<f64>> {
        let rng = self.rng.as_mut()?;
        if self.p <= 0.0 {
            return None;
        }
        let keep = 1.0 / (1.0 - self.p);
        Some(
            (0..n)
                .map(|_| if rng.gen::<f64>() < self.p { 0.0 } else { keep })
                .collect(),
        )
    }
}

fn apply_mask(x: &mut [f64], mask: &Option<Vec<f64>>) {
    if let Some(m) = mask {
        x.iter_mut().zip(m).for_each(|(v, k)| *v *= k);
    }
}

fn check_ids(cfg: &ModelConfig, ids: &[u32]) -> Result<(), ModelError> {
    if ids.is_empty() {
        return Err(ModelError::EmptySequence);
    }
    if ids.len() > cfg.max_positions {
        return Err(ModelError::LengthOverflow {
            len: ids.len(),
            max: cfg.max_positions,
        });
    }
    if let Some(&id) = ids.iter().find(|&&id| id as usize >= cfg.vocab_size) {
        return Err(ModelError::IdOutOfRange {
            id,
            vocab_size: cfg.vocab_size,
        });
    }
    Ok(())
}

// ---------------------------------------------------------------------------
// building blocks

struct NormCache {
    xhat: Vec<f64>,
    rstd: Vec<f64>,
    y: Vec<f64>,
}

fn norm_fwd(p: &[f64], norm: &Norm, x: &[f64], d: usize) -> NormCache {
    let (g, b) = (norm.g.of(p), norm.b.of(p));
    let n = x.len() / d;
    let mut xhat = vec![0.0; x.len()];
    let mut y = vec![0.0; x.len()];
    let mut rstd = vec![0.0; n];
    for r in 0..n {
        let row = &x[r * d..(r + 1) * d];
        let mean = row.iter().sum::<f64>() / d as f64;
        let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / d as f64;
        let rs = 1.0 / (var + LN_EPS).sqrt();
        rstd[r] = rs;
        for c in 0..d {
            let h = (row[c] - mean) * rs;
            xhat[r * d + c] = h;
            y[r * d + c] = h * g[c] + b[c];
        }
    }
    NormCache { xhat, rstd, y }
}

fn norm_bwd(p: &[f64], grads: &mut [f64], norm: &Norm, cache: &NormCache, dy: &[f64], d: usize) -> Vec<f64> {
    let g = norm.g.of(p);
    let n = dy.len() / d;
    let mut dx = vec![0.0; dy.len()];
    {
        let gg = norm.g.of_mut(grads);
        for r in 0..n {
            for c in 0..d {
                gg[c] += dy[r * d + c] * cache.xhat[r * d + c];
            }
        }
    }
    col_sum_into(dy, norm.b.of_mut(grads));
    let mut dxhat = vec![0.0; d];
    for r in 0..n {
        let xh = &cache.xhat[r * d..(r + 1) * d];
        for c in 0..d {
            dxhat[c] = dy[r * d + c] * g[c];
        }
        let mean_d = dxhat.iter().sum::<f64>() / d as f64;
        let mean_dx = dot(&dxhat, xh) / d as f64;
        for c in 0..d {
            dx[r * d + c] = cache.rstd[r] * (dxhat[c] - mean_d - xh[c] * mean_dx);
        }
    }
    dx
}

fn linear_fwd(p: &[f64], w: Slot, b: Slot, x: &[f64]) -> Vec<f64> {
    let n = x.len() / w.rows;
    let mut y = matmul(n, w.rows, w.cols, x, w.of(p));
    add_row(&mut y, b.of(p));
    y
}

/// Accumulates weight/bias gradients and adds `dy * W^T` into `dx`.
fn linear_bwd(p: &[f64], grads: &mut [f64], w: Slot, b: Slot, x: &[f64], dy: &[f64], dx: &mut [f64]) {
    let n = x.len() / w.rows;
    gemm(w.rows, n, w.cols, x, true, dy, false, 1.0, w.of_mut(grads));
    col_sum_into(dy, b.of_mut(grads));
    gemm(n, w.cols, w.rows, dy, false, w.of(p), true, 1.0, dx);
}

struct FfnCache {
    pre: Vec<f64>,
    act: Vec<f64>,
}

fn ffn_fwd(p: &[f64], f: &FeedForward, x: &[f64]) -> (Vec<f64>, FfnCache) {
    let pre = linear_fwd(p, f.w1, f.b1, x);
    let act: Vec<f64> = pre.iter().map(|&v| gelu(v)).collect();
    let out = linear_fwd(p, f.w2, f.b2, &act);
    (out, FfnCache { pre, act })
}

fn ffn_bwd(p: &[f64], grads: &mut [f64], f: &FeedForward, cache: &FfnCache, x: &[f64], dout: &[f64]) -> Vec<f64> {
    let mut dact = vec![0.0; cache.act.len()];
    linear_bwd(p, grads, f.w2, f.b2, &cache.act, dout, &mut dact);
    for (g, &pre) in dact.iter_mut().zip(&cache.pre) {
        *g *= gelu_grad(pre);
    }
    let mut dx = vec![0.0; x.len()];
    linear_bwd(p, grads, f.w1, f.b1, x, &dact, &mut dx);
    dx
}

struct AttnCache {
    q: Vec<f64>,
    k: Vec<f64>,
    v: Vec<f64>,
    probs: Vec<f64>,
    ctx: Vec<f64>,
}

struct AttnShape<'a> {
    heads: usize,
    d: usize,
    q_spans: &'a [Span],
    /// Key/value span attended by each query span.
    kv_spans: &'a [Span],
    causal: bool,
}

impl AttnShape<'_> {
    fn visible(&self, i: usize, lk: usize) -> usize {
        if self.causal {
            (i + 1).min(lk)
        } else {
            lk
        }
    }
}

fn attn_fwd(p: &[f64], a: &Attention, xq: &[f64], xkv: &[f64], shape: &AttnShape) -> (Vec<f64>, AttnCache) {
    let d = shape.d;
    let dh = d / shape.heads;
    let scale = 1.0 / (dh as f64).sqrt();
    let q = linear_fwd(p, a.wq, a.bq, xq);
    let k = linear_fwd(p, a.wk, a.bk, xkv);
    let v = linear_fwd(p, a.wv, a.bv, xkv);
    let mut ctx = vec![0.0; xq.len()];
    let mut probs = Vec::new();
    for (&(qs, lq), &(ks, lk)) in shape.q_spans.iter().zip(shape.kv_spans) {
        for h in 0..shape.heads {
            let ho = h * dh;
            for i in 0..lq {
                let qrow = &q[(qs + i) * d + ho..(qs + i) * d + ho + dh];
                let vis = shape.visible(i, lk);
                let base = probs.len();
                probs.resize(base + lk, 0.0);
                let row = &mut probs[base..base + vis];
                for (j, s) in row.iter_mut().enumerate() {
                    *s = dot(qrow, &k[(ks + j) * d + ho..(ks + j) * d + ho + dh]) * scale;
                }
                softmax(row);
                let out = &mut ctx[(qs + i) * d + ho..(qs + i) * d + ho + dh];
                for (j, &pj) in probs[base..base + vis].iter().enumerate() {
                    let vrow = &v[(ks + j) * d + ho..(ks + j) * d + ho + dh];
                    for (o, &vv) in out.iter_mut().zip(vrow) {
                        *o += pj * vv;
                    }
                }
            }
        }
    }
    let out = linear_fwd(p, a.wo, a.bo, &ctx);
    (out, AttnCache { q, k, v, probs, ctx })
}

/// Returns `(dxq, dxkv)`.
fn attn_bwd(
    p: &[f64],
    grads: &mut [f64],
    a: &Attention,
    cache: &AttnCache,
    xq: &[f64],
    xkv: &[f64],
    shape: &AttnShape,
    dout: &[f64],
) -> (Vec<f64>, Vec<f64>) {
    let d = shape.d;
    let dh = d / shape.heads;
    let scale = 1.0 / (dh as f64).sqrt();
    let mut dctx = vec![0.0; cache.ctx.len()];
    linear_bwd(p, grads, a.wo, a.bo, &cache.ctx, dout, &mut dctx);

    let (mut dq, mut dk, mut dv) = (
        vec![0.0; cache.q.len()],
        vec![0.0; cache.k.len()],
        vec![0.0; cache.v.len()],
    );
    let mut dp = Vec::new();
    let mut offset = 0;
    for (&(qs, lq), &(ks, lk)) in shape.q_spans.iter().zip(shape.kv_spans) {
        for h in 0..shape.heads {
            let ho = h * dh;
            for i in 0..lq {
                let vis = shape.visible(i, lk);
                let prow = &cache.probs[offset..offset + vis];
                offset += lk;
                let qi = (qs + i) * d + ho;
                let dc = &dctx[qi..qi + dh];
                dp.clear();
                dp.extend((0..vis).map(|j| dot(dc, &cache.v[(ks + j) * d + ho..(ks + j) * d + ho + dh])));
                let weighted: f64 = prow.iter().zip(&dp).map(|(a, b)| a * b).sum();
                for j in 0..vis {
                    let kj = (ks + j) * d + ho;
                    let ds = prow[j] * (dp[j] - weighted) * scale;
                    for t in 0..dh {
                        dq[qi + t] += ds * cache.k[kj + t];
                        dk[kj + t] += ds * cache.q[qi + t];
                        dv[kj + t] += prow[j] * dc[t];
                    }
                }
            }
        }
    }
    let mut dxq = vec![0.0; xq.len()];
    linear_bwd(p, grads, a.wq, a.bq, xq, &dq, &mut dxq);
    let mut dxkv = vec![0.0; xkv.len()];
    linear_bwd(p, grads, a.wk, a.bk, xkv, &dk, &mut dxkv);
    linear_bwd(p, grads, a.wv, a.bv, xkv, &dv, &mut dxkv);
    (dxq, dxkv)
}

fn embed_fwd(p: &[f64], embed: Slot, pos: Slot, seqs: &Packed, d: usize) -> Vec<f64> {
    let (e, pe) = (embed.of(p), pos.of(p));
    let mut x = vec![0.0; seqs.rows() * d];
    for &(start, len) in &seqs.spans {
        for t in 0..len {
            let r = start + t;
            let tok = seqs.tokens[r] as usize;
            let row = &mut x[r * d..(r + 1) * d];
            for c in 0..d {
                row[c] = e[tok * d + c] + pe[t * d + c];
            }
        }
    }
    x
}

fn embed_bwd(grads: &mut [f64], embed: Slot, pos: Slot, seqs: &Packed, dx: &[f64], d: usize) {
    for &(start, len) in &seqs.spans {
        for t in 0..len {
            let r = start + t;
            let tok = seqs.tokens[r] as usize;
            let g = &dx[r * d..(r + 1) * d];
            add_into(&mut embed.of_mut(grads)[tok * d..(tok + 1) * d], g);
            add_into(&mut pos.of_mut(grads)[t * d..(t + 1) * d], g);
        }
    }
}

// ---------------------------------------------------------------------------
// encoder / decoder stacks

struct EncLayerCache {
    ln1: NormCache,
    attn: AttnCache,
    m1: Option<Vec<f64>>,
    ln2: NormCache,
    ffn: FfnCache,
    m2: Option<Vec<f64>>,
}

struct EncCache {
    m0: Option<Vec<f64>>,
    layers: Vec<EncLayerCache>,
    out: NormCache,
}

fn encoder_fwd(params: &ModelParameters, src: &Packed, drop: &mut Dropout) -> EncCache {
    let (p, lay, cfg) = (&params.data[..], params.layout(), &params.config);
    let d = cfg.model_dim;
    let mut x = embed_fwd(p, lay.embed, lay.enc_pos, src, d);
    let m0 = drop.mask(x.len());
    apply_mask(&mut x, &m0);
    let shape = AttnShape {
        heads: cfg.heads,
        d,
        q_spans: &src.spans,
        kv_spans: &src.spans,
        causal: false,
    };
    let mut layers = Vec::with_capacity(lay.enc.len());
    for l in &lay.enc {
        let ln1 = norm_fwd(p, &l.ln1, &x, d);
        let (mut a, attn) = attn_fwd(p, &l.attn, &ln1.y, &ln1.y, &shape);
        let m1 = drop.mask(a.len());
        apply_mask(&mut a, &m1);
        add_into(&mut x, &a);
        let ln2 = norm_fwd(p, &l.ln2, &x, d);
        let (mut f, ffn) = ffn_fwd(p, &l.ffn, &ln2.y);
        let m2 = drop.mask(f.len());
        apply_mask(&mut f, &m2);
        add_into(&mut x, &f);
        layers.push(EncLayerCache {
            ln1,
            attn,
            m1,
            ln2,
            ffn,
            m2,
        });
    }
    let out = norm_fwd(p, &lay.enc_ln, &x, d);
    EncCache { m0, layers, out }
}

fn encoder_bwd(params: &ModelParameters, grads: &mut [f64], src: &Packed, cache: &EncCache, dmem: &[f64]) {
    let (p, lay, cfg) = (&params.data[..], params.layout(), &params.config);
    let d = cfg.model_dim;
    let shape = AttnShape {
        heads: cfg.heads,
        d,
        q_spans: &src.spans,
        kv_spans: &src.spans,
        causal: false,
    };
    let mut dx = norm_bwd(p, grads, &lay.enc_ln, &cache.out, dmem, d);
    for (l, c) in lay.enc.iter().zip(&cache.layers).rev() {
        let mut df = dx.clone();
        apply_mask(&mut df, &c.m2);
        let dln2 = ffn_bwd(p, grads, &l.ffn, &c.ffn, &c.ln2.y, &df);
        add_into(&mut dx, &norm_bwd(p, grads, &l.ln2, &c.ln2, &dln2, d));
        let mut da = dx.clone();
        apply_mask(&mut da, &c.m1);
        let (dq, dkv) = attn_bwd(p, grads, &l.attn, &c.attn, &c.ln1.y, &c.ln1.y, &shape, &da);
        let mut dln1 = dq;
        add_into(&mut dln1, &dkv);
        add_into(&mut dx, &norm_bwd(p, grads, &l.ln1, &c.ln1, &dln1, d));
    }
    apply_mask(&mut dx, &cache.m0);
    embed_bwd(grads, lay.embed, lay.enc_pos, src, &dx, d);
}

struct DecLayerCache {
    ln1: NormCache,
    self_attn: AttnCache,
    m1: Option<Vec<f64>>,
    ln2: NormCache,
    cross_attn: AttnCache,
    m2: Option<Vec<f64>>,
    ln3: NormCache,
    ffn: FfnCache,
    m3: Option<Vec<f64>>,
}

struct DecCache {
    m0: Option<Vec<f64>>,
    layers: Vec<DecLayerCache>,
    out: NormCache,
}

fn decoder_fwd(
    params: &ModelParameters,
    tgt: &Packed,
    memory: &[f64],
    mem_spans: &[Span],
    drop: &mut Dropout,
) -> DecCache {
    let (p, lay, cfg) = (&params.data[..], params.layout(), &params.config);
    let d = cfg.model_dim;
    let mut x = embed_fwd(p, lay.embed, lay.dec_pos, tgt, d);
    let m0 = drop.mask(x.len());
    apply_mask(&mut x, &m0);
    let self_shape = AttnShape {
        heads: cfg.heads,
        d,
        q_spans: &tgt.spans,
        kv_spans: &tgt.spans,
        causal: true,
    };
    let cross_shape = AttnShape {
        heads: cfg.heads,
        d,
        q_spans: &tgt.spans,
        kv_spans: mem_spans,
        causal: false,
    };
    let mut layers = Vec::with_capacity(lay.dec.len());
    for l in &lay.dec {
        let ln1 = norm_fwd(p, &l.ln1, &x, d);
        let (mut a, self_attn) = attn_fwd(p, &l.self_attn, &ln1.y, &ln1.y, &self_shape);
        let m1 = drop.mask(a.len());
        apply_mask(&mut a, &m1);
        add_into(&mut x, &a);
        let ln2 = norm_fwd(p, &l.ln2, &x, d);
        let (mut c, cross_attn) = attn_fwd(p, &l.cross_attn, &ln2.y, memory, &cross_shape);
        let m2 = drop.mask(c.len());
        apply_mask(&mut c, &m2);
        add_into(&mut x, &c);
        let ln3 = norm_fwd(p, &l.ln3, &x, d);
        let (mut f, ffn) = ffn_fwd(p, &l.ffn, &ln3.y);
        let m3 = drop.mask(f.len());
        apply_mask(&mut f, &m3);
        add_into(&mut x, &f);
        layers.push(DecLayerCache {
            ln1,
            self_attn,
            m1,
            ln2,
            cross_attn,
            m2,
            ln3,
            ffn,
            m3,
        });
    }
    let out = norm_fwd(p, &lay.dec_ln, &x, d);
    DecCache { m0, layers, out }
}

/// Backpropagates the decoder; returns the gradient w.r.t. the memory.
fn decoder_bwd(
    params: &ModelParameters,
    grads: &mut [f64],
    tgt: &Packed,
    memory: &[f64],
    mem_spans: &[Span],
    cache: &DecCache,
    dout: &[f64],
) -> Vec<f64> {
    let (p, lay, cfg) = (&params.data[..], params.layout(), &params.config);
    let d = cfg.model_dim;
    let self_shape = AttnShape {
        heads: cfg.heads,
        d,
        q_spans: &tgt.spans,
        kv_spans: &tgt.spans,
        causal: true,
    };
    let cross_shape = AttnShape {
        heads: cfg.heads,
        d,
        q_spans: &tgt.spans,
        kv_spans: mem_spans,
        causal: false,
    };
    let mut dmem = vec![0.0; memory.len()];
    let mut dx = norm_bwd(p, grads, &lay.dec_ln, &cache.out, dout, d);
    for (l, c) in lay.dec.iter().zip(&cache.layers).rev() {
        let mut df = dx.clone();
        apply_mask(&mut df, &c.m3);
        let dln3 = ffn_bwd(p, grads, &l.ffn, &c.ffn, &c.ln3.y, &df);
        add_into(&mut dx, &norm_bwd(p, grads, &l.ln3, &c.ln3, &dln3, d));

        let mut dc = dx.clone();
        apply_mask(&mut dc, &c.m2);
        let (dq, dkv) = attn_bwd(p, grads, &l.cross_attn, &c.cross_attn, &c.ln2.y, memory, &cross_shape, &dc);
        add_into(&mut dmem, &dkv);
        add_into(&mut dx, &norm_bwd(p, grads, &l.ln2, &c.ln2, &dq, d));

        let mut da = dx.clone();
        apply_mask(&mut da, &c.m1);
        let (dq, dkv) = attn_bwd(p, grads, &l.self_attn, &c.self_attn, &c.ln1.y, &c.ln1.y, &self_shape, &da);
        let mut dln1 = dq;
        add_into(&mut dln1, &dkv);
        add_into(&mut dx, &norm_bwd(p, grads, &l.ln1, &c.ln1, &dln1, d));
    }
    apply_mask(&mut dx, &cache.m0);
    embed_bwd(grads, lay.embed, lay.dec_pos, tgt, &dx, d);
    dmem
}

fn output_logits(params: &ModelParameters, hidden: &[f64]) -> Vec<f64> {
    let cfg = &params.config;
    let (d, v) = (cfg.model_dim, cfg.vocab_size);
    let n = hidden.len() / d;
    let mut logits = vec![0.0; n * v];
    gemm(n, d, v, hidden, false, params.layout().embed.of(&params.data), true, 0.0, &mut logits);
    logits
}

// ---------------------------------------------------------------------------
// public entry points

/// Token-level loss and accuracy totals over a batch.
#[derive(Debug, Clone, Copy, Default, PartialEq)]
pub struct BatchStats {
    pub loss_sum: f64,
    pub tokens: usize,
    pub correct: usize,
}

impl BatchStats {
    pub fn mean_loss(&self) -> f64 {
        self.loss_sum / self.tokens.max(1) as f64
    }

    pub fn accuracy(&self) -> f64 {
        self.correct as f64 / self.tokens.max(1) as f64
    }

    pub fn merge(&mut self, other: &BatchStats) {
        self.loss_sum += other.loss_sum;
        self.tokens += other.tokens;
        self.correct += other.correct;
    }
}

fn pack_batch(cfg: &ModelConfig, batch: &[Example]) -> Result<(Packed, Packed, Vec<u32>), ModelError> {
    if batch.is_empty() {
        return Err(ModelError::EmptyBatch);
    }
    for ex in batch {
        check_ids(cfg, &ex.src)?;
        if ex.tgt.len() < 2 {
            return Err(ModelError::EmptySequence);
        }
        check_ids(cfg, &ex.tgt[..ex.tgt.len() - 1])?;
        check_ids(cfg, &ex.tgt[1..])?;
    }
    let src = Packed::new(batch.iter().map(|e| e.src.as_slice()));
    let tgt = Packed::new(batch.iter().map(|e| &e.tgt[..e.tgt.len() - 1]));
    let labels = batch.iter().flat_map(|e| e.tgt[1..].iter().copied()).collect();
    Ok((src, tgt, labels))
}

fn batch_pass(
    params: &ModelParameters,
    batch: &[Example],
    want_grad: bool,
    mut drop: Dropout,
) -> Result<(BatchStats, Option<ModelParameters>), ModelError> {
    let cfg = &params.config;
    let (src, tgt, labels) = pack_batch(cfg, batch)?;
    let enc = encoder_fwd(params, &src, &mut drop);
    let memory = &enc.out.y;
    let dec = decoder_fwd(params, &tgt, memory, &src.spans, &mut drop);
    let mut logits = output_logits(params, &dec.out.y);

    let v = cfg.vocab_size;
    let n = labels.len();
    let eps = cfg.label_smoothing;
    let mut stats = BatchStats {
        tokens: n,
        ..BatchStats::default()
    };
    for (row, &y) in logits.chunks_exact_mut(v).zip(&labels) {
        let argmax = row
            .iter()
            .enumerate()
            .fold((0, f64::NEG_INFINITY), |best, (i, &x)| if x > best.1 { (i, x) } else { best })
            .0;
        if argmax == y as usize {
            stats.correct += 1;
        }
        log_softmax(row);
        let mut loss = -row[y as usize];
        if eps > 0.0 {
            let mean_lp = row.iter().sum::<f64>() / v as f64;
            loss = (1.0 - eps) * loss - eps * mean_lp;
        }
        stats.loss_sum += loss;
        // row now holds log-probs; turn it into dloss/dlogits
        if want_grad {
            for (i, x) in row.iter_mut().enumerate() {
                let target = eps / v as f64 + if i == y as usize { 1.0 - eps } else { 0.0 };
                *x = (x.exp() - target) / n as f64;
            }
        }
    }
    if !stats.loss_sum.is_finite() {
        return Err(ModelError::NaNLoss);
    }
    if !want_grad {
        return Ok((stats, None));
    }

    let dlogits = logits;
    let mut grads = params.zeros_like();
    let d = cfg.model_dim;
    let embed = params.layout().embed;
    let hidden = &dec.out.y;
    let mut dhidden = vec![0.0; hidden.len()];
    gemm(n, v, d, &dlogits, false, embed.of(&params.data), false, 0.0, &mut dhidden);
    gemm(v, n, d, &dlogits, true, hidden, false, 1.0, embed.of_mut(&mut grads.data));
    let dmem = decoder_bwd(params, &mut grads.data, &tgt, memory, &src.spans, &dec, &dhidden);
    encoder_bwd(params, &mut grads.data, &src, &enc, &dmem);
    Ok((stats, Some(grads)))
}

/// Decoder logits `[tgt_ids.len() x vocab_size]`, evaluation mode.
/// Row `t` scores the token following `tgt_ids[..=t]`.
pub fn forward(params: &ModelParameters, src_ids: &[u32], tgt_ids: &[u32]) -> Result<Vec<f64>, ModelError> {
    let cfg = &params.config;
    check_ids(cfg, src_ids)?;
    check_ids(cfg, tgt_ids)?;
    let src = Packed::new(std::iter::once(src_ids));
    let tgt = Packed::new(std::iter::once(tgt_ids));
    let enc = encoder_fwd(params, &src, &mut Dropout::off());
    let dec = decoder_fwd(params, &tgt, &enc.out.y, &src.spans, &mut Dropout::off());
    Ok(output_logits(params, &dec.out.y))
}

/// Mean token cross-entropy and its exact gradient, evaluation mode.
pub fn loss_and_grad(params: &ModelParameters, batch: &[Example]) -> Result<(f64, ModelParameters), ModelError> {
    let (stats, grads) = batch_pass(params, batch, true, Dropout::off())?;
    Ok((stats.mean_loss(), grads.expect("requested")))
}

/// As [`loss_and_grad`], with inverted dropout at `config.dropout` drawn
/// from `rng`.
pub fn loss_and_grad_with_dropout(
    params: &ModelParameters,
    batch: &[Example],
    rng: &mut Rng,
) -> Result<(f64, ModelParameters), ModelError> {
    let drop = Dropout {
        p: params.config.dropout,
        rng: Some(rng),
    };
    let (stats, grads) = batch_pass(params, batch, true, drop)?;
    Ok((stats.mean_loss(), grads.expect("requested")))
}

/// Teacher-forced loss and accuracy, evaluation mode.
pub fn evaluate(params: &ModelParameters, batch: &[Example]) -> Result<BatchStats, ModelError> {
    batch_pass(params, batch, false, Dropout::off()).map(|(s, _)| s)
}

/// Encoder output for one source sentence.
#[derive(Debug, Clone)]
pub struct Encoded {
    memory: Vec<f64>,
    len: usize,
}

pub fn encode(params: &ModelParameters, src_ids: &[u32]) -> Result<Encoded, ModelError> {
    check_ids(&params.config, src_ids)?;
    let src = Packed::new(std::iter::once(src_ids));
    let enc = encoder_fwd(params, &src, &mut Dropout::off());
    Ok(Encoded {
        memory: enc.out.y,
        len: src_ids.len(),
    })
}

/// Next-token log-probabilities after each prefix, all attending to the
/// same encoded source.
pub(crate) fn next_token_logprobs(
    params: &ModelParameters,
    enc: &Encoded,
    prefixes: &[Vec<u32>],
) -> Result<Vec<Vec<f64>>, ModelError> {
    for p in prefixes {
        check_ids(&params.config, p)?;
    }
    let tgt = Packed::new(prefixes.iter().map(Vec::as_slice));
    let mem_spans = vec![(0, enc.len); prefixes.len()];
    let dec = decoder_fwd(params, &tgt, &enc.memory, &mem_spans, &mut Dropout::off());
    let d = params.config.model_dim;
    let last: Vec<f64> = tgt
        .spans
        .iter()
        .flat_map(|&(s, l)| dec.out.y[(s + l - 1) * d..(s + l) * d].iter().copied())
        .collect();
    let logits = output_logits(params, &last);
    Ok(logits
        .chunks_exact(params.config.vocab_size)
        .map(|r| {
            let mut r = r.to_vec();
            log_softmax(&mut r);
            r
        })
        .collect())
}
