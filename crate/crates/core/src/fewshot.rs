//! Extending a trained model to one novel instance category.
//!
//! The novel category gets its own embedding and its own copy of the last
//! block. Both copies of the last block read the same layer input; patch rows
//! owned by a novel instance take the novel copy's output, every other row the
//! base copy's. Only the novel pieces are trained.

use std::path::Path;

use ndarray::{Array1, Array2};
use sha2::{Digest, Sha256};

use crate::codebook::TokenSequence;
use crate::connectivity::ConnectivityMask;
use crate::error::{Error, Result};
use crate::layout::{assign_patch_owner, CategoryTable, Layout, Owner, PatchGrid};
use crate::model::{
    checkpoint_bytes, Adam, Engine, Example, LayerParams, ModelConfig, ModelParams, NovelBranch, OptimizerConfig,
    Parameters, Sequence,
};
use crate::rng::SplitMix64;

/// The trainable part of a few-shot model.
#[derive(Debug, Clone, PartialEq)]
pub struct NovelParams {
    pub embedding: Array1<f64>,
    pub layer: LayerParams,
}

impl Parameters for NovelParams {
    fn for_each(&self, f: &mut dyn FnMut(&[f64])) {
        f(self.embedding.as_slice().unwrap());
        self.layer.for_each(f);
    }
    fn for_each_mut(&mut self, f: &mut dyn FnMut(&mut [f64])) {
        f(self.embedding.as_slice_mut().unwrap());
        self.layer.for_each_mut(f);
    }
}

#[derive(Debug, Clone)]
pub struct FewShotModel {
    base: ModelParams,
    cfg: ModelConfig,
    pub novel: NovelParams,
    pub novel_category: usize,
    pub superclass: usize,
}

/// SHA-256 of the serialized checkpoint, hex encoded.
pub fn params_hash(params: &ModelParams, cfg: &ModelConfig) -> String {
    hex(&Sha256::digest(checkpoint_bytes(params, cfg)))
}

pub fn file_hash(path: impl AsRef<Path>) -> Result<String> {
    Ok(hex(&Sha256::digest(std::fs::read(path)?)))
}

fn hex(bytes: &[u8]) -> String {
    bytes.iter().map(|b| format!("{b:02x}")).collect()
}

/// Rows of the `N + M` sequence served by the novel branch: patches whose
/// owning instance has the novel category.
pub fn novel_selection(layout: &Layout, grid: PatchGrid, categories: &CategoryTable, novel_category: usize) -> Vec<bool> {
    let mut sel = vec![false; layout.len()];
    sel.extend(assign_patch_owner(layout, grid, categories).into_iter().map(|o| match o {
        Owner::Instance(j) => layout.objects[j].category == novel_category,
        Owner::Stuff => false,
    }));
    sel
}

/// Hard per-row selection between the two last-layer outputs.
pub fn fuse_tokens(
    base_out: &Array2<f64>,
    novel_out: &Array2<f64>,
    layout: &Layout,
    grid: PatchGrid,
    categories: &CategoryTable,
    novel_category: usize,
) -> Result<Array2<f64>> {
    if base_out.dim() != novel_out.dim() {
        return Err(Error::Shape(format!("branch outputs {:?} and {:?}", base_out.dim(), novel_out.dim())));
    }
    let sel = novel_selection(layout, grid, categories, novel_category);
    if base_out.nrows() > sel.len() {
        return Err(Error::Shape(format!("{} rows for a {}-position sequence", base_out.nrows(), sel.len())));
    }
    let mut out = base_out.clone();
    for (r, &s) in sel.iter().enumerate().take(out.nrows()) {
        if s {
            out.row_mut(r).assign(&novel_out.row(r));
        }
    }
    Ok(out)
}

impl FewShotModel {
    /// Novel id is the next free category id; the novel pieces start as copies
    /// of the superclass embedding and the last block.
    pub fn extend(base: ModelParams, cfg: ModelConfig, superclass: usize) -> Result<Self> {
        if superclass >= cfg.n_categories {
            return Err(Error::CategoryOutOfRange { category: superclass, count: cfg.n_categories });
        }
        let novel = NovelParams {
            embedding: base.category_emb.row(superclass).to_owned(),
            layer: base.layers.last().cloned().ok_or_else(|| Error::Config("model has no layers".into()))?,
        };
        Ok(Self { novel_category: cfg.n_categories, base, cfg, novel, superclass })
    }

    pub fn base(&self) -> &ModelParams {
        &self.base
    }

    pub fn config(&self) -> &ModelConfig {
        &self.cfg
    }

    pub fn engine(&self) -> Engine<'_> {
        Engine {
            params: &self.base,
            cfg: &self.cfg,
            novel: Some(NovelBranch {
                category: self.novel_category,
                embedding: &self.novel.embedding,
                layer: &self.novel.layer,
            }),
        }
    }

    pub fn forward(
        &self,
        layout: &Layout,
        tokens: &[usize],
        mask: &ConnectivityMask,
        categories: &CategoryTable,
    ) -> Result<Array2<f64>> {
        let sel = novel_selection(layout, self.cfg.grid, categories, self.novel_category);
        let seq = Sequence { layout, tokens, mask, novel_rows: Some(&sel) };
        Ok(self.engine().forward(&[seq], None)?.0)
    }

    pub fn sample(
        &self,
        layout: &Layout,
        mask: &ConnectivityMask,
        categories: &CategoryTable,
        seed: u64,
        temperature: f64,
    ) -> Result<TokenSequence> {
        let sel = novel_selection(layout, self.cfg.grid, categories, self.novel_category);
        crate::sampler::generate(self.engine(), layout, mask, Some(&sel), seed, temperature)
    }

    /// Delta file: magic `FGFS`, version, novel and superclass ids, embedding
    /// width, then the embedding and the block as little-endian `f32`.
    pub fn delta_bytes(&self) -> Vec<u8> {
        let mut out = Vec::new();
        out.extend_from_slice(b"FGFS");
        out.extend_from_slice(&1u32.to_le_bytes());
        for v in [self.novel_category, self.superclass, self.cfg.embed_dim] {
            out.extend_from_slice(&(v as u64).to_le_bytes());
        }
        crate::model::put_f32s(&mut out, &self.novel);
        out
    }

    pub fn save_delta(&self, path: impl AsRef<Path>) -> Result<()> {
        std::fs::write(path, self.delta_bytes())?;
        Ok(())
    }

    /// Rebuilds a model from its base and a delta file.
    pub fn from_delta(base: ModelParams, cfg: ModelConfig, bytes: &[u8]) -> Result<Self> {
        let mut r = crate::model::Reader { bytes, pos: 0 };
        if r.take(4)? != b"FGFS" {
            return Err(Error::Format("not a few-shot delta".into()));
        }
        if r.u32()? != 1 {
            return Err(Error::Format("unsupported delta version".into()));
        }
        let novel_category = r.usize()?;
        let superclass = r.usize()?;
        let dim = r.usize()?;
        if novel_category != cfg.n_categories || dim != cfg.embed_dim {
            return Err(Error::Format("delta does not match the base checkpoint".into()));
        }
        let mut m = Self::extend(base, cfg, superclass)?;
        let used = crate::model::take_f32s(&bytes[r.pos..], &mut m.novel)?;
        if r.pos + used != bytes.len() {
            return Err(Error::Format("trailing bytes in delta".into()));
        }
        Ok(m)
    }

    pub fn load_delta(base: ModelParams, cfg: ModelConfig, path: impl AsRef<Path>) -> Result<Self> {
        Self::from_delta(base, cfg, &std::fs::read(path)?)
    }
}

/// Trains the novel embedding and block on `shots`; the base stays frozen.
/// Returns the per-step loss trace.
pub fn finetune(
    model: &mut FewShotModel,
    shots: &[Example],
    categories: &CategoryTable,
    mask_builder: &dyn Fn(&Layout) -> Result<ConnectivityMask>,
    opt: &OptimizerConfig,
) -> Result<Vec<f64>> {
    opt.validate()?;
    if shots.is_empty() {
        return Err(Error::Shape("no shots".into()));
    }
    let before = model.base.clone();
    let grid = model.cfg.grid;
    let masks = shots.iter().map(|e| mask_builder(&e.layout)).collect::<Result<Vec<_>>>()?;
    let sels: Vec<Vec<bool>> =
        shots.iter().map(|e| novel_selection(&e.layout, grid, categories, model.novel_category)).collect();
    let mut batches = crate::model::BatchStream::new(shots.len(), opt.batch_size, opt.seed);
    let mut drop_rng = SplitMix64::stream(opt.seed, 2);
    let mut adam = Adam::new(&model.novel);
    let mut trace = Vec::with_capacity(opt.steps);
    for step in 0..opt.steps {
        let idx = batches.next_batch();
        let batch: Vec<Sequence<'_>> = idx
            .iter()
            .map(|&i| Sequence {
                layout: &shots[i].layout,
                tokens: &shots[i].tokens,
                mask: &masks[i],
                novel_rows: Some(&sels[i]),
            })
            .collect();
        let dropout = crate::model::dropout_for(&model.cfg, Some(&mut drop_rng));
        let (loss, grads) = match crate::model::engine_gradients(model.engine(), &batch, dropout) {
            Ok(r) => r,
            Err(Error::NonFinite { .. }) => return Err(Error::Diverged { step, loss: f64::NAN }),
            Err(e) => return Err(e),
        };
        if !loss.is_finite() {
            return Err(Error::Diverged { step, loss });
        }
        let g = NovelParams {
            embedding: grads.novel_embedding.expect("split engine yields novel gradients"),
            layer: grads.novel_layer.expect("split engine yields novel gradients"),
        };
        trace.push(loss);
        adam.step(&mut model.novel, &g, opt.lr_at(step), opt);
    }
    if model.base != before {
        return Err(Error::FrozenViolated);
    }
    Ok(trace)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::connectivity::AttentionKind;
    use crate::layout::{canonicalize, BBox, SceneObject};

    fn setup() -> (CategoryTable, ModelConfig, ModelParams) {
        let cats = CategoryTable::synthetic_with_novel();
        let cfg = ModelConfig::tiny(cats.len() - 1);
        let p = ModelParams::init(&cfg, 21, 0.3);
        (cats, cfg, p)
    }

    #[test]
    fn extend_copies_superclass() {
        let (_, cfg, p) = setup();
        let m = FewShotModel::extend(p.clone(), cfg, 4).unwrap();
        assert_eq!(m.novel_category, 6);
        assert_eq!(m.novel.embedding, p.category_emb.row(4));
        assert_eq!(&m.novel.layer, p.layers.last().unwrap());
        assert!(FewShotModel::extend(p, cfg, 6).is_err());
    }

    #[test]
    fn novel_free_layouts_match_base_exactly() {
        let (cats, cfg, p) = setup();
        let mut m = FewShotModel::extend(p.clone(), cfg, 4).unwrap();
        m.novel.layer.w_qkv.mapv_inplace(|v| v * 1.5);
        let layout = canonicalize(&Layout::new(vec![
            SceneObject::new(0, BBox::FULL),
            SceneObject::new(4, BBox::new(0.2, 0.2, 0.7, 0.9).unwrap()),
        ]));
        let mask = AttentionKind::FOCAL.build(&layout, cfg.grid, &cats).unwrap();
        let tokens: Vec<usize> = (0..16).map(|i| i % 8).collect();
        let a = crate::model::forward(&p, &layout, &tokens, &mask, &cfg, None).unwrap();
        let b = m.forward(&layout, &tokens, &mask, &cats).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn selection_follows_ownership() {
        let (cats, cfg, _) = setup();
        let layout = canonicalize(&Layout::new(vec![
            SceneObject::new(0, BBox::FULL),
            SceneObject::new(6, BBox::new(0.0, 0.0, 0.5, 0.5).unwrap()),
            SceneObject::new(2, BBox::new(0.25, 0.25, 0.5, 0.5).unwrap()),
        ]));
        let sel = novel_selection(&layout, cfg.grid, &cats, 6);
        let patches: Vec<usize> = (0..16).filter(|&i| sel[layout.len() + i]).collect();
        assert_eq!(patches, vec![0, 1, 4]);
        assert!(sel[..layout.len()].iter().all(|&s| !s));
    }

    #[test]
    fn delta_round_trip() {
        let (_, cfg, p) = setup();
        let m = FewShotModel::extend(p.clone(), cfg, 4).unwrap();
        let back = FewShotModel::from_delta(p, cfg, &m.delta_bytes()).unwrap();
        assert_eq!(back.superclass, 4);
        let a = m.novel.embedding.mapv(|v| v as f32 as f64);
        assert_eq!(back.novel.embedding, a);
    }
}
