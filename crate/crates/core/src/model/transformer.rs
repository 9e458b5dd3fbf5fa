//! Batched forward and backward passes through the decoder stack.
//!
//! Sequences in a batch are stacked row-wise so the dense projections run as
//! one matrix product; attention is evaluated per sequence, per row, over the
//! key positions its connectivity row allows.

use ndarray::{s, Array1, Array2};

use super::ops::{gelu, gelu_grad, layer_norm, layer_norm_backward, linear, linear_backward, LnCache};
use super::params::{LayerParams, ModelParams};
use super::ModelConfig;
use crate::connectivity::ConnectivityMask;
use crate::error::{Error, Result};
use crate::layout::Layout;
use crate::rng::SplitMix64;

/// One sequence fed to the engine.
///
/// `tokens` holds the known patch tokens; patch position `i` is fed the start
/// symbol when `i == 0` and `tokens[i - 1]` otherwise, and its output row
/// scores candidates for `tokens[i]`.
#[derive(Debug, Clone, Copy)]
pub struct Sequence<'a> {
    pub layout: &'a Layout,
    pub tokens: &'a [usize],
    pub mask: &'a ConnectivityMask,
    /// Rows (over the full `N + M` sequence) served by the novel last layer.
    pub novel_rows: Option<&'a [bool]>,
}

impl<'a> Sequence<'a> {
    pub fn new(layout: &'a Layout, tokens: &'a [usize], mask: &'a ConnectivityMask) -> Self {
        Self { layout, tokens, mask, novel_rows: None }
    }

    pub fn rows(&self) -> usize {
        self.layout.len() + self.tokens.len()
    }
}

/// Extra parameters of a split model: a novel category embedding and a copy
/// of the last block.
#[derive(Debug, Clone, Copy)]
pub struct NovelBranch<'a> {
    pub category: usize,
    pub embedding: &'a Array1<f64>,
    pub layer: &'a LayerParams,
}

#[derive(Debug, Clone, Copy)]
pub enum RowSource {
    Object { category: usize, bins: [usize; 4], slot: usize },
    Patch { token: usize, slot: usize },
}

pub fn quantize(coord: f64, bins: usize) -> usize {
    ((coord * bins as f64).floor().max(0.0) as usize).min(bins - 1)
}

#[derive(Debug, Clone)]
pub struct Segment {
    pub start: usize,
    /// Allowed keys per local row, local indices ascending.
    pub keys: Vec<Vec<usize>>,
}

impl Segment {
    pub fn new(start: usize, len: usize, mask: &ConnectivityMask) -> Result<Self> {
        let keys = (0..len)
            .map(|i| {
                let k: Vec<usize> = (0..len).filter(|&j| mask.get(i, j)).collect();
                if k.is_empty() {
                    Err(Error::EmptyMaskRow(i))
                } else {
                    Ok(k)
                }
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(Self { start, keys })
    }
}

pub struct Dropout<'r> {
    pub rate: f64,
    pub rng: &'r mut SplitMix64,
}

impl Dropout<'_> {
    fn mask(&mut self, dim: (usize, usize)) -> Array2<f64> {
        let keep = 1.0 / (1.0 - self.rate);
        let rate = self.rate;
        let rng = &mut *self.rng;
        Array2::from_shape_simple_fn(dim, || if rng.next_f64() < rate { 0.0 } else { keep })
    }
}

pub struct BlockCache {
    ln1: LnCache,
    h1: Array2<f64>,
    qkv: Array2<f64>,
    probs: Vec<Vec<f64>>,
    attn: Array2<f64>,
    drop1: Option<Array2<f64>>,
    ln2: LnCache,
    h2: Array2<f64>,
    f_pre: Array2<f64>,
    f_act: Array2<f64>,
    drop2: Option<Array2<f64>>,
}

fn attention_forward(qkv: &Array2<f64>, segs: &[Segment], n_heads: usize) -> (Array2<f64>, Vec<Vec<f64>>) {
    let rows = qkv.nrows();
    let d = qkv.ncols() / 3;
    let dh = d / n_heads;
    let scale = 1.0 / (dh as f64).sqrt();
    let src = qkv.as_slice().unwrap();
    let mut out = Array2::zeros((rows, d));
    let dst = out.as_slice_mut().unwrap();
    let mut probs = vec![Vec::new(); rows * n_heads];
    for seg in segs {
        for (i, keys) in seg.keys.iter().enumerate() {
            let gi = seg.start + i;
            for h in 0..n_heads {
                let q = &src[gi * 3 * d + h * dh..gi * 3 * d + (h + 1) * dh];
                let mut p: Vec<f64> = keys
                    .iter()
                    .map(|&j| {
                        let gj = seg.start + j;
                        let k = &src[gj * 3 * d + d + h * dh..gj * 3 * d + d + (h + 1) * dh];
                        q.iter().zip(k).map(|(a, b)| a * b).sum::<f64>() * scale
                    })
                    .collect();
                super::ops::softmax_in_place(&mut p);
                let o = &mut dst[gi * d + h * dh..gi * d + (h + 1) * dh];
                for (&j, &w) in keys.iter().zip(&p) {
                    let gj = seg.start + j;
                    let v = &src[gj * 3 * d + 2 * d + h * dh..gj * 3 * d + 2 * d + (h + 1) * dh];
                    for (o, v) in o.iter_mut().zip(v) {
                        *o += w * v;
                    }
                }
                probs[gi * n_heads + h] = p;
            }
        }
    }
    (out, probs)
}

fn attention_backward(
    d_out: &Array2<f64>,
    qkv: &Array2<f64>,
    probs: &[Vec<f64>],
    segs: &[Segment],
    n_heads: usize,
) -> Array2<f64> {
    let rows = qkv.nrows();
    let d = qkv.ncols() / 3;
    let dh = d / n_heads;
    let scale = 1.0 / (dh as f64).sqrt();
    let src = qkv.as_slice().unwrap();
    let dout = d_out.as_slice().unwrap();
    let mut dqkv = Array2::zeros((rows, 3 * d));
    let g = dqkv.as_slice_mut().unwrap();
    let mut dp = Vec::new();
    for seg in segs {
        for (i, keys) in seg.keys.iter().enumerate() {
            let gi = seg.start + i;
            for h in 0..n_heads {
                let p = &probs[gi * n_heads + h];
                let go = &dout[gi * d + h * dh..gi * d + (h + 1) * dh];
                dp.clear();
                let mut dot = 0.0;
                for (&j, &w) in keys.iter().zip(p) {
                    let gj = seg.start + j;
                    let voff = gj * 3 * d + 2 * d + h * dh;
                    let v = &src[voff..voff + dh];
                    let dpj: f64 = go.iter().zip(v).map(|(a, b)| a * b).sum();
                    dp.push(dpj);
                    dot += w * dpj;
                    for (gv, o) in g[voff..voff + dh].iter_mut().zip(go) {
                        *gv += w * o;
                    }
                }
                let qoff = gi * 3 * d + h * dh;
                for ((&j, &w), &dpj) in keys.iter().zip(p).zip(&dp) {
                    let ds = w * (dpj - dot) * scale;
                    if ds == 0.0 {
                        continue;
                    }
                    let gj = seg.start + j;
                    let koff = gj * 3 * d + d + h * dh;
                    for t in 0..dh {
                        g[qoff + t] += ds * src[koff + t];
                        g[koff + t] += ds * src[qoff + t];
                    }
                }
            }
        }
    }
    dqkv
}

pub fn block_forward(
    p: &LayerParams,
    x: &Array2<f64>,
    segs: &[Segment],
    n_heads: usize,
    dropout: &mut Option<Dropout<'_>>,
) -> (Array2<f64>, BlockCache) {
    let (h1, ln1) = layer_norm(x, &p.ln1_gain, &p.ln1_bias);
    let qkv = linear(&h1, &p.w_qkv, &p.b_qkv);
    let (attn, probs) = attention_forward(&qkv, segs, n_heads);
    let mut a = linear(&attn, &p.w_out, &p.b_out);
    let drop1 = dropout.as_mut().map(|d| d.mask(a.dim()));
    if let Some(m) = &drop1 {
        a *= m;
    }
    let x_mid = x + &a;
    let (h2, ln2) = layer_norm(&x_mid, &p.ln2_gain, &p.ln2_bias);
    let f_pre = linear(&h2, &p.w_ff1, &p.b_ff1);
    let f_act = f_pre.mapv(gelu);
    let mut f = linear(&f_act, &p.w_ff2, &p.b_ff2);
    let drop2 = dropout.as_mut().map(|d| d.mask(f.dim()));
    if let Some(m) = &drop2 {
        f *= m;
    }
    let y = x_mid + &f;
    (y, BlockCache { ln1, h1, qkv, probs, attn, drop1, ln2, h2, f_pre, f_act, drop2 })
}

/// Returns `dx`, accumulating parameter gradients into `g`.
pub fn block_backward(
    p: &LayerParams,
    c: &BlockCache,
    dy: &Array2<f64>,
    segs: &[Segment],
    n_heads: usize,
    g: &mut LayerParams,
) -> Array2<f64> {
    let mut d_f = dy.clone();
    if let Some(m) = &c.drop2 {
        d_f *= m;
    }
    let mut d_fpre = linear_backward(&d_f, &c.f_act, &p.w_ff2, &mut g.w_ff2, &mut g.b_ff2);
    ndarray::Zip::from(&mut d_fpre).and(&c.f_pre).for_each(|d, &x| *d *= gelu_grad(x));
    let d_h2 = linear_backward(&d_fpre, &c.h2, &p.w_ff1, &mut g.w_ff1, &mut g.b_ff1);
    let d_mid = dy + &layer_norm_backward(&d_h2, &c.ln2, &p.ln2_gain, &mut g.ln2_gain, &mut g.ln2_bias);
    let mut d_a = d_mid.clone();
    if let Some(m) = &c.drop1 {
        d_a *= m;
    }
    let d_attn = linear_backward(&d_a, &c.attn, &p.w_out, &mut g.w_out, &mut g.b_out);
    let d_qkv = attention_backward(&d_attn, &c.qkv, &c.probs, segs, n_heads);
    let d_h1 = linear_backward(&d_qkv, &c.h1, &p.w_qkv, &mut g.w_qkv, &mut g.b_qkv);
    d_mid + &layer_norm_backward(&d_h1, &c.ln1, &p.ln1_gain, &mut g.ln1_gain, &mut g.ln1_bias)
}

/// Parameters plus an optional split last layer.
#[derive(Clone, Copy)]
pub struct Engine<'a> {
    pub params: &'a ModelParams,
    pub cfg: &'a ModelConfig,
    pub novel: Option<NovelBranch<'a>>,
}

pub struct ForwardCache {
    rows: Vec<RowSource>,
    segs: Vec<Segment>,
    blocks: Vec<BlockCache>,
    novel_block: Option<BlockCache>,
    novel_rows: Vec<bool>,
    lnf: LnCache,
    hf: Array2<f64>,
}

impl<'a> Engine<'a> {
    pub fn new(params: &'a ModelParams, cfg: &'a ModelConfig) -> Self {
        Self { params, cfg, novel: None }
    }

    fn category_row(&self, category: usize) -> Result<ndarray::ArrayView1<'a, f64>> {
        if category < self.params.category_emb.nrows() {
            return Ok(self.params.category_emb.row(category));
        }
        match self.novel {
            Some(n) if n.category == category => Ok(n.embedding.view()),
            _ => Err(Error::CategoryOutOfRange { category, count: self.params.category_emb.nrows() }),
        }
    }

    fn check(&self, seq: &Sequence<'_>) -> Result<()> {
        let cfg = self.cfg;
        let n = seq.layout.len();
        if n > cfg.max_objects {
            return Err(Error::Shape(format!("{n} objects exceed max_objects {}", cfg.max_objects)));
        }
        if seq.tokens.len() > cfg.grid.len() {
            return Err(Error::Shape(format!("{} tokens for a {}-patch grid", seq.tokens.len(), cfg.grid.len())));
        }
        if seq.mask.n_objects() != n || seq.mask.n_patches() != cfg.grid.len() {
            return Err(Error::Shape(format!(
                "mask covers {}+{} positions, sequence needs {}+{}",
                seq.mask.n_objects(),
                seq.mask.n_patches(),
                n,
                cfg.grid.len()
            )));
        }
        if let Some(&t) = seq.tokens.iter().find(|&&t| t >= cfg.vocab_size) {
            return Err(Error::TokenOutOfRange { token: t, vocab: cfg.vocab_size });
        }
        Ok(())
    }

    /// Input rows of one sequence: object embeddings, then shifted patch tokens.
    pub fn embed(&self, seq: &Sequence<'_>) -> Result<(Array2<f64>, Vec<RowSource>)> {
        self.check(seq)?;
        let cfg = self.cfg;
        let p = self.params;
        let n = seq.layout.len();
        let rows = seq.rows();
        let mut x = Array2::zeros((rows, cfg.embed_dim));
        let mut sources = Vec::with_capacity(rows);
        for (i, obj) in seq.layout.objects.iter().enumerate() {
            let mut r = x.row_mut(i);
            r += &self.category_row(obj.category)?;
            let corners = obj.bbox.corners();
            let bins: [usize; 4] = std::array::from_fn(|c| quantize(corners[c], cfg.coord_bins));
            for (c, &b) in bins.iter().enumerate() {
                r += &p.coord_emb[c].row(b);
            }
            r += &p.pos_emb.row(i);
            sources.push(RowSource::Object { category: obj.category, bins, slot: i });
        }
        for i in 0..seq.tokens.len() {
            let token = if i == 0 { cfg.vocab_size } else { seq.tokens[i - 1] };
            let slot = cfg.max_objects + i;
            let mut r = x.row_mut(n + i);
            r += &p.token_emb.row(token);
            r += &p.pos_emb.row(slot);
            sources.push(RowSource::Patch { token, slot });
        }
        Ok((x, sources))
    }

    /// Logits for every row of every sequence, stacked, plus the backward cache.
    pub fn forward(
        &self,
        seqs: &[Sequence<'_>],
        mut dropout: Option<Dropout<'_>>,
    ) -> Result<(Array2<f64>, ForwardCache)> {
        let cfg = self.cfg;
        let total: usize = seqs.iter().map(Sequence::rows).sum();
        let mut x = Array2::zeros((total, cfg.embed_dim));
        let mut rows = Vec::with_capacity(total);
        let mut segs = Vec::with_capacity(seqs.len());
        let mut novel_rows = vec![false; total];
        let mut start = 0;
        for seq in seqs {
            let (e, src) = self.embed(seq)?;
            let len = e.nrows();
            x.slice_mut(s![start..start + len, ..]).assign(&e);
            rows.extend(src);
            segs.push(Segment::new(start, len, seq.mask)?);
            if let Some(sel) = seq.novel_rows {
                novel_rows[start..start + len].copy_from_slice(&sel[..len]);
            }
            start += len;
        }

        let n_layers = self.params.layers.len();
        let split = self.novel.is_some();
        let shared = if split { n_layers - 1 } else { n_layers };
        let mut blocks = Vec::with_capacity(n_layers);
        for layer in &self.params.layers[..shared] {
            let (y, c) = block_forward(layer, &x, &segs, cfg.n_heads, &mut dropout);
            blocks.push(c);
            x = y;
        }
        let mut novel_block = None;
        if let Some(nb) = self.novel {
            let (mut y, c) = block_forward(&self.params.layers[n_layers - 1], &x, &segs, cfg.n_heads, &mut dropout);
            blocks.push(c);
            let (yn, cn) = block_forward(nb.layer, &x, &segs, cfg.n_heads, &mut dropout);
            novel_block = Some(cn);
            for (r, &sel) in novel_rows.iter().enumerate() {
                if sel {
                    y.row_mut(r).assign(&yn.row(r));
                }
            }
            x = y;
        }
        let (hf, lnf) = layer_norm(&x, &self.params.lnf_gain, &self.params.lnf_bias);
        let logits = linear(&hf, &self.params.w_head, &self.params.b_head);
        Ok((logits, ForwardCache { rows, segs, blocks, novel_block, novel_rows, lnf, hf }))
    }

    /// Backpropagates `d_logits` through a cached forward pass.
    pub fn backward(&self, cache: &ForwardCache, d_logits: &Array2<f64>) -> Gradients {
        let p = self.params;
        let cfg = self.cfg;
        let mut g = p.zeros_like();
        let mut g_novel_layer = self.novel.map(|n| n.layer.zeros_like());
        let mut g_novel_emb = self.novel.map(|n| Array1::zeros(n.embedding.len()));

        let d_hf = linear_backward(d_logits, &cache.hf, &p.w_head, &mut g.w_head, &mut g.b_head);
        let mut dx = layer_norm_backward(&d_hf, &cache.lnf, &p.lnf_gain, &mut g.lnf_gain, &mut g.lnf_bias);

        let n_layers = p.layers.len();
        let mut shared = n_layers;
        if let (Some(nb), Some(nc), Some(gn)) = (self.novel, &cache.novel_block, g_novel_layer.as_mut()) {
            let mut d_base = dx.clone();
            let mut d_novel = dx;
            for (r, &sel) in cache.novel_rows.iter().enumerate() {
                if sel {
                    d_base.row_mut(r).fill(0.0);
                } else {
                    d_novel.row_mut(r).fill(0.0);
                }
            }
            let last = n_layers - 1;
            let dxb = block_backward(&p.layers[last], &cache.blocks[last], &d_base, &cache.segs, cfg.n_heads, &mut g.layers[last]);
            let dxn = block_backward(nb.layer, nc, &d_novel, &cache.segs, cfg.n_heads, gn);
            dx = dxb + &dxn;
            shared = last;
        }
        for l in (0..shared).rev() {
            dx = block_backward(&p.layers[l], &cache.blocks[l], &dx, &cache.segs, cfg.n_heads, &mut g.layers[l]);
        }

        for (r, src) in cache.rows.iter().enumerate() {
            let d = dx.row(r);
            match *src {
                RowSource::Object { category, bins, slot } => {
                    if category < g.category_emb.nrows() {
                        let mut t = g.category_emb.row_mut(category);
                        t += &d;
                    } else if let Some(ge) = g_novel_emb.as_mut() {
                        *ge += &d;
                    }
                    for (c, &b) in bins.iter().enumerate() {
                        let mut t = g.coord_emb[c].row_mut(b);
                        t += &d;
                    }
                    let mut t = g.pos_emb.row_mut(slot);
                    t += &d;
                }
                RowSource::Patch { token, slot } => {
                    let mut t = g.token_emb.row_mut(token);
                    t += &d;
                    let mut t = g.pos_emb.row_mut(slot);
                    t += &d;
                }
            }
        }
        Gradients { model: g, novel_embedding: g_novel_emb, novel_layer: g_novel_layer }
    }

    /// Mean over sequences of the mean patch-position cross-entropy, with the
    /// matching logit gradient.
    pub fn loss_and_dlogits(&self, seqs: &[Sequence<'_>], logits: &Array2<f64>) -> Result<(f64, Array2<f64>)> {
        let k = self.cfg.vocab_size;
        let mut d = Array2::zeros(logits.dim());
        let mut total = 0.0;
        let mut start = 0;
        let b = seqs.len() as f64;
        for seq in seqs {
            let n = seq.layout.len();
            let m = seq.tokens.len();
            let mut seq_loss = 0.0;
            for (i, &target) in seq.tokens.iter().enumerate() {
                let r = start + n + i;
                let row = logits.row(r);
                let row = row.as_slice().unwrap();
                if row.iter().any(|v| !v.is_finite()) {
                    return Err(Error::NonFinite { position: n + i });
                }
                let mut probs = row.to_vec();
                let lse = super::ops::softmax_in_place(&mut probs);
                seq_loss += lse - row[target];
                let scale = 1.0 / (m as f64 * b);
                let mut dr = d.row_mut(r);
                for t in 0..k {
                    dr[t] = probs[t] * scale;
                }
                dr[target] -= scale;
            }
            if m > 0 {
                total += seq_loss / m as f64;
            }
            start += seq.rows();
        }
        let loss = total / b;
        if !loss.is_finite() {
            return Err(Error::NonFinite { position: 0 });
        }
        Ok((loss, d))
    }
}

/// Gradients of a (possibly split) model.
#[derive(Debug, Clone)]
pub struct Gradients {
    pub model: ModelParams,
    pub novel_embedding: Option<Array1<f64>>,
    pub novel_layer: Option<LayerParams>,
}
