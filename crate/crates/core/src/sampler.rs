//! Left-to-right token generation.

use crate::codebook::TokenSequence;
use crate::connectivity::ConnectivityMask;
use crate::error::{Error, Result};
use crate::layout::Layout;
use crate::model::{Decoder, Engine, ModelConfig, ModelParams};
use crate::rng::SplitMix64;

/// Stream id of the sampling RNG under a given seed.
pub const SAMPLE_STREAM: u64 = 3;

/// Picks one index from `logits`. Temperature 0 is argmax with ties going to
/// the lowest index; otherwise one categorical draw from `softmax(logits / t)`.
pub fn choose(logits: &[f64], temperature: f64, rng: &mut SplitMix64) -> Result<usize> {
    if let Some(pos) = logits.iter().position(|v| !v.is_finite()) {
        return Err(Error::NonFinite { position: pos });
    }
    if temperature == 0.0 {
        let mut best = 0;
        for (i, &v) in logits.iter().enumerate() {
            if v > logits[best] {
                best = i;
            }
        }
        return Ok(best);
    }
    let max = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let weights: Vec<f64> = logits.iter().map(|&l| ((l - max) / temperature).exp()).collect();
    Ok(rng.categorical(&weights))
}

/// Generates all `R * C` tokens with an arbitrary engine (base or split).
pub fn generate(
    engine: Engine<'_>,
    layout: &Layout,
    mask: &ConnectivityMask,
    novel_rows: Option<&[bool]>,
    seed: u64,
    temperature: f64,
) -> Result<TokenSequence> {
    if !(temperature >= 0.0 && temperature.is_finite()) {
        return Err(Error::Config(format!("temperature {temperature} must be finite and nonnegative")));
    }
    let mut rng = SplitMix64::stream(seed, SAMPLE_STREAM);
    let m = engine.cfg.grid.len();
    let mut dec = Decoder::new(engine, layout, mask, novel_rows)?;
    let mut out = Vec::with_capacity(m);
    for i in 0..m {
        let t = choose(dec.logits(), temperature, &mut rng)
            .map_err(|_| Error::NonFinite { position: layout.len() + i })?;
        out.push(t);
        dec.advance(t)?;
    }
    Ok(TokenSequence(out))
}

pub fn sample_sequence(
    params: &ModelParams,
    layout: &Layout,
    mask: &ConnectivityMask,
    cfg: &ModelConfig,
    seed: u64,
    temperature: f64,
) -> Result<TokenSequence> {
    generate(Engine::new(params, cfg), layout, mask, None, seed, temperature)
}

pub fn greedy_decode(
    params: &ModelParams,
    layout: &Layout,
    mask: &ConnectivityMask,
    cfg: &ModelConfig,
) -> Result<TokenSequence> {
    generate(Engine::new(params, cfg), layout, mask, None, 0, 0.0)
}
