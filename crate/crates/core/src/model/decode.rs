//! Incremental decoding with per-layer key/value caches.

use ndarray::{s, Array1, Array2};

use super::ops::{gelu, layer_norm, linear, softmax_in_place};
use super::params::LayerParams;
use super::transformer::{Engine, Sequence};
use crate::connectivity::ConnectivityMask;
use crate::error::{Error, Result};
use crate::layout::Layout;

#[derive(Debug, Clone, Default)]
struct KvCache {
    k: Vec<f64>,
    v: Vec<f64>,
}

fn layer_rows(
    p: &LayerParams,
    x: &Array2<f64>,
    start: usize,
    kv: &mut KvCache,
    mask: &ConnectivityMask,
    n_heads: usize,
) -> Result<Array2<f64>> {
    let (r, d) = x.dim();
    let dh = d / n_heads;
    let scale = 1.0 / (dh as f64).sqrt();
    let (h1, _) = layer_norm(x, &p.ln1_gain, &p.ln1_bias);
    let qkv = linear(&h1, &p.w_qkv, &p.b_qkv);
    for row in qkv.outer_iter() {
        let row = row.as_slice().unwrap();
        kv.k.extend_from_slice(&row[d..2 * d]);
        kv.v.extend_from_slice(&row[2 * d..]);
    }
    let end = start + r;
    let mut attn = Array2::zeros((r, d));
    for i in 0..r {
        let gi = start + i;
        let keys: Vec<usize> = (0..end).filter(|&j| mask.get(gi, j)).collect();
        if keys.is_empty() {
            return Err(Error::EmptyMaskRow(gi));
        }
        let q = qkv.row(i);
        let q = q.as_slice().unwrap();
        let mut out = attn.row_mut(i);
        for h in 0..n_heads {
            let qh = &q[h * dh..(h + 1) * dh];
            let mut w: Vec<f64> = keys
                .iter()
                .map(|&j| {
                    let k = &kv.k[j * d + h * dh..j * d + (h + 1) * dh];
                    qh.iter().zip(k).map(|(a, b)| a * b).sum::<f64>() * scale
                })
                .collect();
            softmax_in_place(&mut w);
            for (&j, &wj) in keys.iter().zip(&w) {
                let v = &kv.v[j * d + h * dh..j * d + (h + 1) * dh];
                for (t, vt) in v.iter().enumerate() {
                    out[h * dh + t] += wj * vt;
                }
            }
        }
    }
    let x_mid = x + &linear(&attn, &p.w_out, &p.b_out);
    let (h2, _) = layer_norm(&x_mid, &p.ln2_gain, &p.ln2_bias);
    let f = linear(&h2, &p.w_ff1, &p.b_ff1).mapv(gelu);
    Ok(x_mid + &linear(&f, &p.w_ff2, &p.b_ff2))
}

/// Generates patch logits one position at a time.
///
/// Object rows are processed once on construction; each call to
/// [`Decoder::advance`] feeds the previously chosen token.
pub struct Decoder<'a> {
    engine: Engine<'a>,
    mask: &'a ConnectivityMask,
    novel_rows: Option<&'a [bool]>,
    n_objects: usize,
    kv: Vec<KvCache>,
    novel_kv: KvCache,
    patches: usize,
    pending: Vec<f64>,
}

impl<'a> Decoder<'a> {
    pub fn new(
        engine: Engine<'a>,
        layout: &'a Layout,
        mask: &'a ConnectivityMask,
        novel_rows: Option<&'a [bool]>,
    ) -> Result<Self> {
        let seq = Sequence { layout, tokens: &[], mask, novel_rows };
        let (x, _) = engine.embed(&seq)?;
        let mut dec = Self {
            engine,
            mask,
            novel_rows,
            n_objects: layout.len(),
            kv: vec![KvCache::default(); engine.params.layers.len()],
            novel_kv: KvCache::default(),
            patches: 0,
            pending: Vec::new(),
        };
        if x.nrows() > 0 {
            dec.run(x, 0)?;
        }
        let first = dec.patch_input(0, dec.engine.cfg.vocab_size);
        dec.pending = dec.run(first, dec.n_objects)?;
        Ok(dec)
    }

    /// Number of patch positions whose logits have been produced.
    pub fn position(&self) -> usize {
        self.patches
    }

    /// Logits for the current patch position.
    pub fn logits(&self) -> &[f64] {
        &self.pending
    }

    /// Feeds the token chosen at the current position and computes the next
    /// position's logits. Returns `None` once the grid is full.
    pub fn advance(&mut self, token: usize) -> Result<Option<&[f64]>> {
        let cfg = self.engine.cfg;
        if token >= cfg.vocab_size {
            return Err(Error::TokenOutOfRange { token, vocab: cfg.vocab_size });
        }
        if self.patches + 1 >= cfg.grid.len() {
            self.patches = cfg.grid.len();
            return Ok(None);
        }
        let x = self.patch_input(self.patches + 1, token);
        self.pending = self.run(x, self.n_objects + self.patches + 1)?;
        self.patches += 1;
        Ok(Some(&self.pending))
    }

    fn patch_input(&self, i: usize, token: usize) -> Array2<f64> {
        let p = self.engine.params;
        let row: Array1<f64> = &p.token_emb.row(token) + &p.pos_emb.row(self.engine.cfg.max_objects + i);
        row.insert_axis(ndarray::Axis(0))
    }

    /// Runs rows starting at sequence position `start`; returns the logits of
    /// the last row.
    fn run(&mut self, mut x: Array2<f64>, start: usize) -> Result<Vec<f64>> {
        let engine = self.engine;
        let heads = engine.cfg.n_heads;
        let n_layers = engine.params.layers.len();
        let shared = if engine.novel.is_some() { n_layers - 1 } else { n_layers };
        for l in 0..shared {
            x = layer_rows(&engine.params.layers[l], &x, start, &mut self.kv[l], self.mask, heads)?;
        }
        if let Some(nb) = engine.novel {
            let base = layer_rows(&engine.params.layers[n_layers - 1], &x, start, &mut self.kv[n_layers - 1], self.mask, heads)?;
            let novel = layer_rows(nb.layer, &x, start, &mut self.novel_kv, self.mask, heads)?;
            let mut y = base;
            for i in 0..y.nrows() {
                if self.novel_rows.is_some_and(|sel| sel[start + i]) {
                    y.row_mut(i).assign(&novel.row(i));
                }
            }
            x = y;
        }
        let last = x.slice(s![x.nrows() - 1.., ..]).to_owned();
        let (h, _) = layer_norm(&last, &engine.params.lnf_gain, &engine.params.lnf_bias);
        let logits = linear(&h, &engine.params.w_head, &engine.params.b_head);
        let out = logits.row(0).to_vec();
        if out.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite { position: start + x.nrows() - 1 });
        }
        Ok(out)
    }
}
