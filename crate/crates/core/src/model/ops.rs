//! Row-wise numerical kernels with hand-written backward passes.

use ndarray::{Array1, Array2, ArrayView2};

use crate::connectivity::ConnectivityMask;
use crate::error::{Error, Result};

pub const LN_EPS: f64 = 1e-5;

/// Per-row statistics kept for the layer-norm backward pass.
#[derive(Debug, Clone)]
pub struct LnCache {
    pub xhat: Array2<f64>,
    pub rstd: Vec<f64>,
}

pub fn layer_norm(x: &Array2<f64>, gain: &Array1<f64>, bias: &Array1<f64>) -> (Array2<f64>, LnCache) {
    let (n, d) = x.dim();
    let mut xhat = Array2::zeros((n, d));
    let mut y = Array2::zeros((n, d));
    let mut rstd = Vec::with_capacity(n);
    let g = gain.as_slice().unwrap();
    let b = bias.as_slice().unwrap();
    for ((xr, mut hr), mut yr) in x.outer_iter().zip(xhat.outer_iter_mut()).zip(y.outer_iter_mut()) {
        let mean = xr.sum() / d as f64;
        let var = xr.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / d as f64;
        let r = 1.0 / (var + LN_EPS).sqrt();
        rstd.push(r);
        for k in 0..d {
            let h = (xr[k] - mean) * r;
            hr[k] = h;
            yr[k] = h * g[k] + b[k];
        }
    }
    (y, LnCache { xhat, rstd })
}

/// Returns `dx`, accumulating `dgain` and `dbias`.
pub fn layer_norm_backward(
    dy: &Array2<f64>,
    cache: &LnCache,
    gain: &Array1<f64>,
    dgain: &mut Array1<f64>,
    dbias: &mut Array1<f64>,
) -> Array2<f64> {
    let (n, d) = dy.dim();
    let mut dx = Array2::zeros((n, d));
    let g = gain.as_slice().unwrap();
    let dg = dgain.as_slice_mut().unwrap();
    let db = dbias.as_slice_mut().unwrap();
    let mut dxhat = vec![0.0; d];
    for i in 0..n {
        let dyr = dy.row(i);
        let hr = cache.xhat.row(i);
        let mut mean_dxhat = 0.0;
        let mut mean_dxhat_xhat = 0.0;
        for k in 0..d {
            dg[k] += dyr[k] * hr[k];
            db[k] += dyr[k];
            dxhat[k] = dyr[k] * g[k];
            mean_dxhat += dxhat[k];
            mean_dxhat_xhat += dxhat[k] * hr[k];
        }
        mean_dxhat /= d as f64;
        mean_dxhat_xhat /= d as f64;
        let r = cache.rstd[i];
        let mut dxr = dx.row_mut(i);
        for k in 0..d {
            dxr[k] = r * (dxhat[k] - mean_dxhat - hr[k] * mean_dxhat_xhat);
        }
    }
    dx
}

const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2 / pi)
const GELU_A: f64 = 0.044_715;

/// Tanh-approximated GELU.
pub fn gelu(x: f64) -> f64 {
    0.5 * x * (1.0 + (GELU_C * (x + GELU_A * x * x * x)).tanh())
}

pub fn gelu_grad(x: f64) -> f64 {
    let t = (GELU_C * (x + GELU_A * x * x * x)).tanh();
    0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * GELU_C * (1.0 + 3.0 * GELU_A * x * x)
}

/// `x W + b` with `b` broadcast over rows.
pub fn linear(x: &Array2<f64>, w: &Array2<f64>, b: &Array1<f64>) -> Array2<f64> {
    let mut y = x.dot(w);
    y += b;
    y
}

/// Returns `dx`, accumulating `dw` and `db`.
pub fn linear_backward(
    dy: &Array2<f64>,
    x: &Array2<f64>,
    w: &Array2<f64>,
    dw: &mut Array2<f64>,
    db: &mut Array1<f64>,
) -> Array2<f64> {
    dw.scaled_add(1.0, &x.t().dot(dy));
    *db += &dy.sum_axis(ndarray::Axis(0));
    dy.dot(&w.t())
}

/// Softmax over `scores` in place; returns the log-normalizer.
pub fn softmax_in_place(scores: &mut [f64]) -> f64 {
    let max = scores.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let mut sum = 0.0;
    for s in scores.iter_mut() {
        *s = (*s - max).exp();
        sum += *s;
    }
    for s in scores.iter_mut() {
        *s /= sum;
    }
    max + sum.ln()
}

/// `log softmax(logits)[target]`.
pub fn log_softmax_at(logits: &[f64], target: usize) -> f64 {
    let max = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let sum: f64 = logits.iter().map(|l| (l - max).exp()).sum();
    logits[target] - max - sum.ln()
}

/// Attention weights `softmax(Q K^T / sqrt(d_k))` with blocked entries at
/// negative infinity. Rows of the result sum to one over allowed keys.
pub fn attention_weights(q: ArrayView2<f64>, k: ArrayView2<f64>, mask: &ConnectivityMask) -> Result<Array2<f64>> {
    let (nq, dk) = q.dim();
    if k.ncols() != dk || mask.size() < nq.max(k.nrows()) {
        return Err(Error::Shape(format!(
            "q {:?}, k {:?} against a mask of size {}",
            q.dim(),
            k.dim(),
            mask.size()
        )));
    }
    let scale = 1.0 / (dk as f64).sqrt();
    let mut w = Array2::zeros((nq, k.nrows()));
    for i in 0..nq {
        let keys: Vec<usize> = (0..k.nrows()).filter(|&j| mask.get(i, j)).collect();
        if keys.is_empty() {
            return Err(Error::EmptyMaskRow(i));
        }
        let mut s: Vec<f64> = keys.iter().map(|&j| q.row(i).dot(&k.row(j)) * scale).collect();
        softmax_in_place(&mut s);
        for (&j, p) in keys.iter().zip(s) {
            w[[i, j]] = p;
        }
    }
    Ok(w)
}

/// Single-head masked attention: `softmax(Q K^T / sqrt(d_k) + mask) V`.
pub fn masked_attention(
    q: ArrayView2<f64>,
    k: ArrayView2<f64>,
    v: ArrayView2<f64>,
    mask: &ConnectivityMask,
) -> Result<Array2<f64>> {
    if v.nrows() != k.nrows() {
        return Err(Error::Shape(format!("{} keys but {} values", k.nrows(), v.nrows())));
    }
    Ok(attention_weights(q, k, mask)?.dot(&v))
}
