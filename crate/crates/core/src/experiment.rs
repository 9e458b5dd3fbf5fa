//! End-to-end desk-scale runs: corpus, codebook, training, evaluation.

use crate::codebook::{fit_codebook, Codebook, TokenSequence};
use crate::connectivity::AttentionKind;
use crate::error::{Error, Result};
use crate::fewshot::{finetune, params_hash, FewShotModel};
use crate::layout::{CategoryKind, CategoryTable, Layout};
use crate::model::{self, Example, ModelConfig, ModelParams, OptimizerConfig, TrainOutput};
use crate::rng::SplitMix64;
use crate::sampler;
use crate::scenegen::{consistency_score, patch_matches, texture_swatches, Corpus, LayoutConstraints, TextureClassifier};

#[derive(Debug, Clone, PartialEq)]
pub struct ExperimentConfig {
    pub seed: u64,
    pub n_train: usize,
    pub n_eval: usize,
    pub patch_px: usize,
    pub constraints: LayoutConstraints,
    pub model: ModelConfig,
    pub opt: OptimizerConfig,
    pub attention: AttentionKind,
    pub init_std: f64,
    /// 0 evaluates greedy decodes.
    pub eval_temperature: f64,
}

/// The category table of every desk run: six base categories plus one held-out
/// instance class. Base models only see ids below [`BASE_CATEGORIES`].
pub fn categories() -> CategoryTable {
    CategoryTable::synthetic_with_novel()
}

pub const BASE_CATEGORIES: usize = 6;

/// Layout constraints drawing instances only from the base categories.
pub fn base_constraints() -> LayoutConstraints {
    let cats = categories();
    let ids = cats.ids_of_kind(CategoryKind::Instance).into_iter().filter(|&c| c < BASE_CATEGORIES).collect();
    LayoutConstraints { instance_categories: Some(ids), ..LayoutConstraints::default() }
}

impl ExperimentConfig {
    pub fn desk() -> Self {
        Self {
            seed: 0,
            n_train: 512,
            n_eval: 64,
            patch_px: 4,
            constraints: base_constraints(),
            model: ModelConfig::desk(BASE_CATEGORIES),
            opt: OptimizerConfig::default(),
            attention: AttentionKind::FOCAL,
            init_std: 0.02,
            eval_temperature: 0.0,
        }
    }
}

/// Everything fixed before training: data, codebook and token sequences.
#[derive(Debug, Clone)]
pub struct Prepared {
    pub train: Corpus,
    pub eval: Corpus,
    pub codebook: Codebook,
    pub examples: Vec<Example>,
}

/// Train scenes use streams `0..n_train` of the seed, eval scenes the next
/// `n_eval`. The codebook is fitted on the train renders plus one swatch of
/// every texture shade.
pub fn prepare(cfg: &ExperimentConfig, categories: &CategoryTable) -> Result<Prepared> {
    let grid = cfg.model.grid;
    let train = Corpus::generate(cfg.seed, 0, cfg.n_train, categories, &cfg.constraints, grid, cfg.patch_px);
    let eval =
        Corpus::generate(cfg.seed, cfg.n_train as u64, cfg.n_eval, categories, &cfg.constraints, grid, cfg.patch_px);
    let mut images = train.images.clone();
    images.extend(texture_swatches(categories, cfg.patch_px));
    let codebook = fit_codebook(&images, cfg.model.vocab_size, cfg.patch_px, SplitMix64::stream(cfg.seed, 4).next_u64())?;
    let examples = train
        .encode_all(&codebook)?
        .into_iter()
        .zip(&train.layouts)
        .map(|(t, l)| Example { layout: l.clone(), tokens: t.0 })
        .collect();
    Ok(Prepared { train, eval, codebook, examples })
}

pub fn init_params(cfg: &ExperimentConfig) -> ModelParams {
    ModelParams::init(&cfg.model, SplitMix64::stream(cfg.seed, 5).next_u64(), cfg.init_std)
}

pub fn train_attention(
    cfg: &ExperimentConfig,
    categories: &CategoryTable,
    prep: &Prepared,
    attention: AttentionKind,
    on_step: &mut dyn FnMut(usize, f64),
) -> Result<TrainOutput> {
    let grid = cfg.model.grid;
    let builder = |l: &Layout| attention.build(l, grid, categories);
    model::train_with(init_params(cfg), &cfg.model, &prep.examples, &builder, &cfg.opt, on_step)
}

/// Tokens generated for every eval layout; sample seeds come from stream 6.
pub fn generate_eval(
    params: &ModelParams,
    cfg: &ExperimentConfig,
    categories: &CategoryTable,
    layouts: &[Layout],
    attention: AttentionKind,
) -> Result<Vec<TokenSequence>> {
    let mut seeds = SplitMix64::stream(cfg.seed, 6);
    layouts
        .iter()
        .map(|l| {
            let mask = attention.build(l, cfg.model.grid, categories)?;
            sampler::sample_sequence(params, l, &mask, &cfg.model, seeds.next_u64(), cfg.eval_temperature)
        })
        .collect()
}

/// Mean consistency score of generated tokens over `layouts`.
pub fn mean_consistency(
    tokens: &[TokenSequence],
    layouts: &[Layout],
    codebook: &Codebook,
    categories: &CategoryTable,
    cfg: &ExperimentConfig,
) -> Result<f64> {
    let mut total = 0.0;
    for (t, l) in tokens.iter().zip(layouts) {
        total += consistency_score(t, l, codebook, categories, cfg.model.grid)?;
    }
    Ok(total / layouts.len().max(1) as f64)
}

pub fn evaluate(
    params: &ModelParams,
    cfg: &ExperimentConfig,
    categories: &CategoryTable,
    prep: &Prepared,
    attention: AttentionKind,
) -> Result<f64> {
    let tokens = generate_eval(params, cfg, categories, &prep.eval.layouts, attention)?;
    mean_consistency(&tokens, &prep.eval.layouts, &prep.codebook, categories, cfg)
}

#[derive(Debug, Clone, PartialEq)]
pub struct FewShotConfig {
    pub novel: String,
    pub superclass: String,
    pub shots: usize,
    pub n_eval: usize,
    pub opt: OptimizerConfig,
    /// Selects which scenes serve as shots.
    pub seed: u64,
}

impl Default for FewShotConfig {
    fn default() -> Self {
        Self {
            novel: "wolf".into(),
            superclass: "dog".into(),
            shots: 2,
            n_eval: 32,
            opt: OptimizerConfig { lr: 3e-3, warmup_steps: 20, steps: 300, batch_size: 2, ..OptimizerConfig::default() },
            seed: 0,
        }
    }
}

#[derive(Debug, Clone)]
pub struct FewShotReport {
    pub base_hash_before: String,
    pub base_hash_after: String,
    pub novel_before: f64,
    pub novel_after: f64,
    pub trace: Vec<f64>,
    pub model: FewShotModel,
}

/// Scenes containing exactly one novel instance. Scene `i` of a set comes
/// from stream `first_index + i` of `seed`.
pub fn novel_corpus(
    cfg: &ExperimentConfig,
    categories: &CategoryTable,
    novel: usize,
    seed: u64,
    first_index: u64,
    count: usize,
) -> Corpus {
    let constraints = LayoutConstraints {
        max_instances: 1,
        instance_categories: Some(vec![novel]),
        ..cfg.constraints.clone()
    };
    Corpus::generate(seed, first_index, count, categories, &constraints, cfg.model.grid, cfg.patch_px)
}

/// Mean consistency over novel-category patches of tokens generated by `model`.
pub fn novel_consistency(
    model: &FewShotModel,
    cfg: &ExperimentConfig,
    categories: &CategoryTable,
    codebook: &crate::codebook::Codebook,
    layouts: &[Layout],
) -> Result<f64> {
    let classifier = TextureClassifier::new(categories, codebook.patch_px());
    let mut seeds = SplitMix64::stream(cfg.seed, 8);
    let mut total = 0.0;
    for l in layouts {
        let mask = cfg.attention.build(l, cfg.model.grid, categories)?;
        let t = model.sample(l, &mask, categories, seeds.next_u64(), cfg.eval_temperature)?;
        let m = patch_matches(&t, l, codebook, categories, cfg.model.grid, &classifier)?;
        total += m.score_where(|c| c == model.novel_category);
    }
    Ok(total / layouts.len().max(1) as f64)
}

/// Extends `base`, fine-tunes on `fs.shots` novel scenes and reports novel
/// consistency before and after, plus base parameter hashes.
///
/// Shots for a given `fs.seed` are nested: the first two scenes of an
/// eight-shot set are the two-shot set. Novel eval scenes do not depend on
/// `fs.seed`.
pub fn run_fewshot(
    base: &ModelParams,
    cfg: &ExperimentConfig,
    fs: &FewShotConfig,
    categories: &CategoryTable,
    prep: &Prepared,
) -> Result<FewShotReport> {
    let novel = categories.id_of(&fs.novel).ok_or_else(|| Error::UnknownCategory(fs.novel.clone()))?;
    let superclass = categories.id_of(&fs.superclass).ok_or_else(|| Error::UnknownCategory(fs.superclass.clone()))?;
    if novel != cfg.model.n_categories {
        return Err(Error::Config(format!(
            "novel category {} must have id {} (the first id unknown to the base model)",
            fs.novel, cfg.model.n_categories
        )));
    }
    let hash_before = params_hash(base, &cfg.model);
    let mut model = FewShotModel::extend(base.clone(), cfg.model, superclass)?;

    let shot_seed = SplitMix64::stream(cfg.seed ^ fs.seed.wrapping_mul(crate::rng::GAMMA), 9).next_u64();
    let shots = novel_corpus(cfg, categories, novel, shot_seed, 0, fs.shots);
    let eval = novel_corpus(cfg, categories, novel, SplitMix64::stream(cfg.seed, 10).next_u64(), 0, fs.n_eval);
    let examples: Vec<Example> = shots
        .encode_all(&prep.codebook)?
        .into_iter()
        .zip(&shots.layouts)
        .map(|(t, l)| Example { layout: l.clone(), tokens: t.0 })
        .collect();

    let novel_before = novel_consistency(&model, cfg, categories, &prep.codebook, &eval.layouts)?;
    let grid = cfg.model.grid;
    let attention = cfg.attention;
    let builder = |l: &Layout| attention.build(l, grid, categories);
    let opt = OptimizerConfig { seed: fs.seed, ..fs.opt.clone() };
    let trace = finetune(&mut model, &examples, categories, &builder, &opt)?;
    let novel_after = novel_consistency(&model, cfg, categories, &prep.codebook, &eval.layouts)?;

    let hash_after = params_hash(model.base(), &cfg.model);
    Ok(FewShotReport {
        base_hash_before: hash_before,
        base_hash_after: hash_after,
        novel_before,
        novel_after,
        trace,
        model,
    })
}

/// Whether logits under teacher forcing and greedy decodes on the novel-free
/// eval scenes match the base model bit for bit.
pub fn base_outputs_match(
    base: &ModelParams,
    model: &FewShotModel,
    cfg: &ExperimentConfig,
    categories: &CategoryTable,
    prep: &Prepared,
) -> Result<bool> {
    let tokens = prep.eval.encode_all(&prep.codebook)?;
    for (l, t) in prep.eval.layouts.iter().zip(&tokens) {
        let mask = cfg.attention.build(l, cfg.model.grid, categories)?;
        let a = model::forward(base, l, &t.0, &mask, &cfg.model, None)?;
        let b = model.forward(l, &t.0, &mask, categories)?;
        if a != b {
            return Ok(false);
        }
        let ga = sampler::greedy_decode(base, l, &mask, &cfg.model)?;
        let gb = model.sample(l, &mask, categories, 0, 0.0)?;
        if ga != gb {
            return Ok(false);
        }
    }
    Ok(true)
}
