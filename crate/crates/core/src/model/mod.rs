//! Autoregressive composition transformer over `[objects; patches]`.

mod checkpoint;
mod decode;
pub mod ops;
mod optim;
mod params;
mod transformer;

use ndarray::Array2;

pub use checkpoint::{checkpoint_bytes, checkpoint_from_bytes, load_checkpoint, read_trace, save_checkpoint, write_trace};
pub(crate) use checkpoint::{put_f32s, take_f32s, Reader};
pub use decode::Decoder;
pub use optim::{Adam, OptimizerConfig};
pub use params::{LayerParams, ModelParams, Parameters};
pub use transformer::{quantize, Engine, Gradients, NovelBranch, Sequence};

use crate::connectivity::ConnectivityMask;
use crate::error::{Error, Result};
use crate::layout::{Layout, PatchGrid};
use crate::rng::SplitMix64;
use transformer::Dropout;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ModelConfig {
    pub n_layers: usize,
    pub n_heads: usize,
    pub embed_dim: usize,
    pub vocab_size: usize,
    pub n_categories: usize,
    pub max_objects: usize,
    pub grid: PatchGrid,
    pub dropout_rate: f64,
    pub coord_bins: usize,
}

impl ModelConfig {
    /// Default single-core configuration.
    pub fn desk(n_categories: usize) -> Self {
        Self {
            n_layers: 4,
            n_heads: 4,
            embed_dim: 128,
            vocab_size: 64,
            n_categories,
            max_objects: 8,
            grid: PatchGrid::square(8),
            dropout_rate: 0.0,
            coord_bins: 16,
        }
    }

    /// The gradient-check configuration.
    pub fn tiny(n_categories: usize) -> Self {
        Self {
            n_layers: 2,
            n_heads: 2,
            embed_dim: 16,
            vocab_size: 8,
            n_categories,
            max_objects: 8,
            grid: PatchGrid::square(4),
            dropout_rate: 0.0,
            coord_bins: 16,
        }
    }

    pub fn paper_scale(n_categories: usize) -> Self {
        Self {
            n_layers: 24,
            n_heads: 16,
            embed_dim: 1024,
            vocab_size: 8192,
            n_categories,
            max_objects: 8,
            grid: PatchGrid::square(16),
            dropout_rate: 0.1,
            coord_bins: 16,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        if self.n_layers == 0 || self.n_heads == 0 || self.embed_dim == 0 {
            return bad("n_layers, n_heads and embed_dim must be positive".into());
        }
        if !self.embed_dim.is_multiple_of(self.n_heads) {
            return bad(format!("embed_dim {} not divisible by n_heads {}", self.embed_dim, self.n_heads));
        }
        if self.vocab_size == 0 || self.n_categories == 0 {
            return bad("vocab_size and n_categories must be positive".into());
        }
        if !(0.0..1.0).contains(&self.dropout_rate) {
            return bad(format!("dropout_rate {} outside [0, 1)", self.dropout_rate));
        }
        if self.coord_bins < 2 {
            return bad(format!("coord_bins {} < 2", self.coord_bins));
        }
        if self.grid.is_empty() {
            return bad("empty grid".into());
        }
        Ok(())
    }

    pub fn head_dim(&self) -> usize {
        self.embed_dim / self.n_heads
    }

    pub fn ff_dim(&self) -> usize {
        4 * self.embed_dim
    }

    pub fn max_positions(&self) -> usize {
        self.max_objects + self.grid.len()
    }
}

/// Input rows for `layout` followed by `tokens_prefix.len()` patch positions.
pub fn embed_inputs(
    layout: &Layout,
    tokens_prefix: &[usize],
    params: &ModelParams,
    cfg: &ModelConfig,
) -> Result<Array2<f64>> {
    let n = layout.len();
    let mask = crate::connectivity::causal_mask(n, cfg.grid.len());
    Ok(Engine::new(params, cfg).embed(&Sequence::new(layout, tokens_prefix, &mask))?.0)
}

/// Logits, one row per sequence position (`N + tokens.len()` rows, `K` columns).
///
/// Row `N + i` scores candidates for patch token `i`. Dropout runs only when
/// `train_rng` is given and the configured rate is positive.
pub fn forward(
    params: &ModelParams,
    layout: &Layout,
    tokens: &[usize],
    mask: &ConnectivityMask,
    cfg: &ModelConfig,
    train_rng: Option<&mut SplitMix64>,
) -> Result<Array2<f64>> {
    let dropout = dropout_for(cfg, train_rng);
    let seq = Sequence::new(layout, tokens, mask);
    Ok(Engine::new(params, cfg).forward(&[seq], dropout)?.0)
}

pub(crate) fn dropout_for<'r>(cfg: &ModelConfig, rng: Option<&'r mut SplitMix64>) -> Option<Dropout<'r>> {
    match rng {
        Some(rng) if cfg.dropout_rate > 0.0 => Some(Dropout { rate: cfg.dropout_rate, rng }),
        _ => None,
    }
}

/// Mean teacher-forced cross-entropy over all `R * C` patch positions.
pub fn loss(
    params: &ModelParams,
    layout: &Layout,
    tokens: &[usize],
    mask: &ConnectivityMask,
    cfg: &ModelConfig,
) -> Result<f64> {
    if tokens.len() != cfg.grid.len() {
        return Err(Error::Shape(format!("{} tokens, grid has {} patches", tokens.len(), cfg.grid.len())));
    }
    let seq = Sequence::new(layout, tokens, mask);
    let engine = Engine::new(params, cfg);
    let (logits, _) = engine.forward(&[seq], None)?;
    Ok(engine.loss_and_dlogits(&[seq], &logits)?.0)
}

/// Mean batch loss and its exact gradient, dropout off.
pub fn gradients(params: &ModelParams, batch: &[Sequence<'_>], cfg: &ModelConfig) -> Result<(f64, ModelParams)> {
    let (loss, g) = engine_gradients(Engine::new(params, cfg), batch, None)?;
    Ok((loss, g.model))
}

pub(crate) fn engine_gradients(
    engine: Engine<'_>,
    batch: &[Sequence<'_>],
    dropout: Option<Dropout<'_>>,
) -> Result<(f64, Gradients)> {
    if batch.is_empty() {
        return Err(Error::Shape("empty batch".into()));
    }
    for seq in batch {
        if seq.tokens.len() != engine.cfg.grid.len() {
            return Err(Error::Shape(format!("{} tokens, grid has {} patches", seq.tokens.len(), engine.cfg.grid.len())));
        }
    }
    let (logits, cache) = engine.forward(batch, dropout)?;
    let (loss, d_logits) = engine.loss_and_dlogits(batch, &logits)?;
    Ok((loss, engine.backward(&cache, &d_logits)))
}

/// One training scene.
#[derive(Debug, Clone)]
pub struct Example {
    pub layout: Layout,
    pub tokens: Vec<usize>,
}

#[derive(Debug, Clone)]
pub struct TrainOutput {
    pub params: ModelParams,
    /// Mini-batch loss before each update.
    pub trace: Vec<f64>,
}

/// Seeded mini-batch Adam. Masks are built once per example from its layout.
pub fn train(
    params: ModelParams,
    cfg: &ModelConfig,
    dataset: &[Example],
    mask_builder: &dyn Fn(&Layout) -> Result<ConnectivityMask>,
    opt: &OptimizerConfig,
) -> Result<TrainOutput> {
    train_with(params, cfg, dataset, mask_builder, opt, &mut |_, _| {})
}

/// [`train`] with a per-step callback receiving `(step, loss)`.
pub fn train_with(
    mut params: ModelParams,
    cfg: &ModelConfig,
    dataset: &[Example],
    mask_builder: &dyn Fn(&Layout) -> Result<ConnectivityMask>,
    opt: &OptimizerConfig,
    on_step: &mut dyn FnMut(usize, f64),
) -> Result<TrainOutput> {
    cfg.validate()?;
    opt.validate()?;
    if dataset.is_empty() {
        return Err(Error::Shape("empty dataset".into()));
    }
    let masks = dataset.iter().map(|e| mask_builder(&e.layout)).collect::<Result<Vec<_>>>()?;
    let mut batches = BatchStream::new(dataset.len(), opt.batch_size, opt.seed);
    let mut drop_rng = SplitMix64::stream(opt.seed, 2);
    let mut adam = Adam::new(&params);
    let mut trace = Vec::with_capacity(opt.steps);
    for step in 0..opt.steps {
        let idx = batches.next_batch();
        let batch: Vec<Sequence<'_>> =
            idx.iter().map(|&i| Sequence::new(&dataset[i].layout, &dataset[i].tokens, &masks[i])).collect();
        let dropout = dropout_for(cfg, Some(&mut drop_rng));
        let (loss, grads) = match engine_gradients(Engine::new(&params, cfg), &batch, dropout) {
            Ok(r) => r,
            Err(Error::NonFinite { .. }) => return Err(Error::Diverged { step, loss: f64::NAN }),
            Err(e) => return Err(e),
        };
        if !loss.is_finite() || !grads.model.all_finite() {
            return Err(Error::Diverged { step, loss });
        }
        trace.push(loss);
        on_step(step, loss);
        adam.step(&mut params, &grads.model, opt.lr_at(step), opt);
    }
    Ok(TrainOutput { params, trace })
}

/// Epoch-wise shuffled mini-batch indices from `stream(seed, 1)`.
pub(crate) struct BatchStream {
    order: Vec<usize>,
    pos: usize,
    batch: usize,
    rng: SplitMix64,
}

impl BatchStream {
    pub(crate) fn new(n: usize, batch: usize, seed: u64) -> Self {
        let mut rng = SplitMix64::stream(seed, 1);
        let mut order: Vec<usize> = (0..n).collect();
        rng.shuffle(&mut order);
        Self { order, pos: 0, batch: batch.min(n).max(1), rng }
    }

    pub(crate) fn next_batch(&mut self) -> Vec<usize> {
        let mut out = Vec::with_capacity(self.batch);
        while out.len() < self.batch {
            if self.pos == self.order.len() {
                self.rng.shuffle(&mut self.order);
                self.pos = 0;
            }
            out.push(self.order[self.pos]);
            self.pos += 1;
        }
        out
    }
}
