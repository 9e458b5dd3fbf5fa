//! Procedural scenes with known ground truth.
//!
//! Every category paints one texture family: a base color (a corner of the
//! RGB cube), a pattern (solid, stripes or checker) and one of [`SHADES`]
//! brightness levels picked per object from its box. All channel values are
//! multiples of `1/255`, so renders survive an 8-bit PPM round trip.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::Path;

use crate::codebook::{decode, encode, Codebook, TokenSequence};
use crate::error::{Error, Result};
use crate::image::SceneImage;
use crate::layout::{canonicalize, patch_categories, BBox, CategoryKind, CategoryTable, Layout, PatchGrid, SceneObject};
use crate::rng::{mix, SplitMix64};

/// Brightness levels per texture family.
pub const SHADES: usize = 12;

const PALETTE: [[f64; 3]; 7] = [
    [0.0, 0.0, 1.0],
    [0.0, 1.0, 0.0],
    [1.0, 0.0, 0.0],
    [1.0, 1.0, 0.0],
    [0.0, 1.0, 1.0],
    [1.0, 0.0, 1.0],
    [1.0, 1.0, 1.0],
];

/// Flattened `patch_px x patch_px` RGB patch for a texture at a shade.
pub fn texture_patch(texture_id: usize, shade: usize, patch_px: usize) -> Vec<f64> {
    let base = PALETTE[texture_id % PALETTE.len()];
    let level = 150 + 9 * (shade % SHADES);
    let fg = level as f64 / 255.0;
    let bg = (level / 2) as f64 / 255.0;
    let mut out = Vec::with_capacity(patch_px * patch_px * 3);
    for y in 0..patch_px {
        for x in 0..patch_px {
            let on = match (texture_id / PALETTE.len() + texture_id) % 3 {
                0 => true,
                1 => y % 2 == 0,
                _ => (x + y) % 2 == 0,
            };
            let v = if on { fg } else { bg };
            out.extend(base.iter().map(|&b| b * v));
        }
    }
    out
}

/// Shade of an object, a fixed hash of its category and box.
pub fn object_shade(obj: &SceneObject) -> usize {
    let mut h = obj.category as u64;
    for c in obj.bbox.corners() {
        h = mix(h ^ c.to_bits());
    }
    (h % SHADES as u64) as usize
}

#[derive(Debug, Clone, PartialEq)]
pub struct LayoutConstraints {
    /// Upper bound on objects including the background.
    pub max_objects: usize,
    pub max_instances: usize,
    pub max_extra_stuff: usize,
    /// Side-length range of instance boxes.
    pub min_size: f64,
    pub max_size: f64,
    /// Side-length range of extra stuff regions.
    pub stuff_min_size: f64,
    pub stuff_max_size: f64,
    /// Instance categories to draw from; `None` means every instance category.
    pub instance_categories: Option<Vec<usize>>,
}

impl Default for LayoutConstraints {
    fn default() -> Self {
        Self {
            max_objects: 7,
            max_instances: 4,
            max_extra_stuff: 2,
            min_size: 0.2,
            max_size: 0.6,
            stuff_min_size: 0.3,
            stuff_max_size: 0.9,
            instance_categories: None,
        }
    }
}

impl LayoutConstraints {
    pub fn to_kv(&self) -> Vec<(String, String)> {
        let mut kv = vec![
            ("max_objects".to_string(), self.max_objects.to_string()),
            ("max_instances".to_string(), self.max_instances.to_string()),
            ("max_extra_stuff".to_string(), self.max_extra_stuff.to_string()),
            ("min_size".to_string(), self.min_size.to_string()),
            ("max_size".to_string(), self.max_size.to_string()),
            ("stuff_min_size".to_string(), self.stuff_min_size.to_string()),
            ("stuff_max_size".to_string(), self.stuff_max_size.to_string()),
        ];
        if let Some(ids) = &self.instance_categories {
            let ids: Vec<String> = ids.iter().map(usize::to_string).collect();
            kv.push(("instance_categories".to_string(), ids.join(",")));
        }
        kv
    }
}

fn random_box(rng: &mut SplitMix64, lo: f64, hi: f64) -> BBox {
    let w = rng.uniform(lo, hi).min(1.0);
    let h = rng.uniform(lo, hi).min(1.0);
    let x1 = rng.uniform(0.0, 1.0 - w);
    let y1 = rng.uniform(0.0, 1.0 - h);
    BBox { x1, y1, x2: (x1 + w).min(1.0), y2: (y1 + h).min(1.0) }
}

/// Seeded random layout: a full-frame background, then 1-4 instances of
/// distinct categories, then 0-2 extra stuff regions, all within
/// `max_objects`. The result is canonical.
pub fn gen_layout(seed: u64, categories: &CategoryTable, constraints: &LayoutConstraints) -> Layout {
    let mut rng = SplitMix64::new(seed);
    let stuff = categories.ids_of_kind(CategoryKind::Stuff);
    let background = stuff[0];
    let mut objects = vec![SceneObject::new(background, BBox::FULL)];
    let mut budget = constraints.max_objects.saturating_sub(1);

    let mut pool = match &constraints.instance_categories {
        Some(ids) => ids.clone(),
        None => categories.ids_of_kind(CategoryKind::Instance),
    };
    let n_inst = (1 + rng.below(constraints.max_instances.max(1) as u64) as usize)
        .min(constraints.max_instances)
        .min(pool.len())
        .min(budget);
    rng.shuffle(&mut pool);
    for &cat in &pool[..n_inst] {
        objects.push(SceneObject::new(cat, random_box(&mut rng, constraints.min_size, constraints.max_size)));
    }
    budget -= n_inst;

    let extra_pool: Vec<usize> = if stuff.len() > 1 { stuff[1..].to_vec() } else { stuff.clone() };
    let n_extra = (rng.below(constraints.max_extra_stuff as u64 + 1) as usize).min(budget);
    for _ in 0..n_extra {
        let cat = extra_pool[rng.below(extra_pool.len() as u64) as usize];
        objects.push(SceneObject::new(
            cat,
            random_box(&mut rng, constraints.stuff_min_size, constraints.stuff_max_size),
        ));
    }
    canonicalize(&Layout::new(objects))
}

/// Paints each patch with the texture of the object it is attributed to
/// (owning instance, else smallest covering stuff). Uncovered patches stay black.
pub fn render(layout: &Layout, grid: PatchGrid, patch_px: usize, categories: &CategoryTable) -> SceneImage {
    let cats = patch_categories(layout, grid, categories);
    let sources = patch_sources(layout, grid, categories);
    let mut img = SceneImage::new(grid.cols * patch_px, grid.rows * patch_px);
    for p in 0..grid.len() {
        if let (Some(cat), Some(src)) = (cats[p], sources[p]) {
            let texture = categories.get(cat).map(|c| c.texture_id).unwrap_or(0);
            let (r, c) = grid.coords(p);
            img.set_patch(patch_px, r, c, &texture_patch(texture, object_shade(&layout.objects[src]), patch_px));
        }
    }
    img
}

/// Object index whose texture each patch shows.
fn patch_sources(layout: &Layout, grid: PatchGrid, categories: &CategoryTable) -> Vec<Option<usize>> {
    let cats = patch_categories(layout, grid, categories);
    let owners = crate::layout::assign_patch_owner(layout, grid, categories);
    (0..grid.len())
        .map(|p| match owners[p] {
            crate::layout::Owner::Instance(j) => Some(j),
            crate::layout::Owner::Stuff => {
                let cat = cats[p]?;
                let (x, y) = grid.center(p);
                // Smallest covering stuff object of that category, latest on ties.
                let mut best: Option<usize> = None;
                for (j, o) in layout.objects.iter().enumerate() {
                    if o.category == cat && o.bbox.contains(x, y) {
                        match best {
                            Some(k) if layout.objects[k].bbox.area() < o.bbox.area() => {}
                            _ => best = Some(j),
                        }
                    }
                }
                best
            }
        })
        .collect()
}

/// One image per category showing every shade of its texture in a row.
pub fn texture_swatches(categories: &CategoryTable, patch_px: usize) -> Vec<SceneImage> {
    categories
        .entries()
        .iter()
        .map(|c| {
            let mut img = SceneImage::new(SHADES * patch_px, patch_px);
            for s in 0..SHADES {
                img.set_patch(patch_px, 0, s, &texture_patch(c.texture_id, s, patch_px));
            }
            img
        })
        .collect()
}

/// Nearest-texture patch classifier over every (category, shade) prototype.
#[derive(Debug, Clone)]
pub struct TextureClassifier {
    prototypes: Vec<(usize, Vec<f64>)>,
}

impl TextureClassifier {
    pub fn new(categories: &CategoryTable, patch_px: usize) -> Self {
        let mut prototypes = Vec::new();
        for (id, c) in categories.entries().iter().enumerate() {
            for s in 0..SHADES {
                prototypes.push((id, texture_patch(c.texture_id, s, patch_px)));
            }
        }
        Self { prototypes }
    }

    pub fn classify(&self, patch: &[f64]) -> usize {
        let mut best = (f64::INFINITY, 0);
        for (cat, proto) in &self.prototypes {
            let d: f64 = proto.iter().zip(patch).map(|(a, b)| (a - b) * (a - b)).sum();
            if d < best.0 {
                best = (d, *cat);
            }
        }
        best.1
    }
}

/// Fraction of covered patches whose decoded texture classifies as the
/// category the layout puts there. Returns 1.0 when no patch is covered.
pub fn consistency_score(
    tokens: &TokenSequence,
    layout: &Layout,
    codebook: &Codebook,
    categories: &CategoryTable,
    grid: PatchGrid,
) -> Result<f64> {
    let classifier = TextureClassifier::new(categories, codebook.patch_px());
    Ok(patch_matches(tokens, layout, codebook, categories, grid, &classifier)?.score())
}

/// Per-patch agreement between decoded tokens and the layout.
#[derive(Debug, Clone, PartialEq)]
pub struct PatchMatches {
    /// `(expected category, matched)` for every covered patch, `None` otherwise.
    pub per_patch: Vec<Option<(usize, bool)>>,
}

impl PatchMatches {
    pub fn score(&self) -> f64 {
        self.score_where(|_| true)
    }

    /// Score restricted to patches whose expected category passes `keep`.
    pub fn score_where(&self, keep: impl Fn(usize) -> bool) -> f64 {
        let mut total = 0usize;
        let mut hit = 0usize;
        for (cat, ok) in self.per_patch.iter().flatten() {
            if keep(*cat) {
                total += 1;
                hit += *ok as usize;
            }
        }
        if total == 0 {
            1.0
        } else {
            hit as f64 / total as f64
        }
    }
}

pub fn patch_matches(
    tokens: &TokenSequence,
    layout: &Layout,
    codebook: &Codebook,
    categories: &CategoryTable,
    grid: PatchGrid,
    classifier: &TextureClassifier,
) -> Result<PatchMatches> {
    let image = decode(tokens, codebook, grid)?;
    let expected = patch_categories(layout, grid, categories);
    let per_patch = expected
        .iter()
        .enumerate()
        .map(|(p, e)| {
            e.map(|cat| {
                let (r, c) = grid.coords(p);
                (cat, classifier.classify(&image.patch(codebook.patch_px(), r, c)) == cat)
            })
        })
        .collect();
    Ok(PatchMatches { per_patch })
}

/// Layouts and renders of a synthetic corpus.
#[derive(Debug, Clone)]
pub struct Corpus {
    pub seed: u64,
    pub grid: PatchGrid,
    pub patch_px: usize,
    pub constraints: LayoutConstraints,
    pub layouts: Vec<Layout>,
    pub images: Vec<SceneImage>,
}

impl Corpus {
    /// Scene `i` is generated from stream `first_index + i` of `seed`.
    pub fn generate(
        seed: u64,
        first_index: u64,
        count: usize,
        categories: &CategoryTable,
        constraints: &LayoutConstraints,
        grid: PatchGrid,
        patch_px: usize,
    ) -> Self {
        let layouts: Vec<Layout> = (0..count as u64)
            .map(|i| gen_layout(SplitMix64::stream(seed, first_index + i).next_u64(), categories, constraints))
            .collect();
        let images = layouts.iter().map(|l| render(l, grid, patch_px, categories)).collect();
        Self { seed, grid, patch_px, constraints: constraints.clone(), layouts, images }
    }

    pub fn len(&self) -> usize {
        self.layouts.len()
    }

    pub fn is_empty(&self) -> bool {
        self.layouts.is_empty()
    }

    pub fn encode_all(&self, codebook: &Codebook) -> Result<Vec<TokenSequence>> {
        self.images.iter().map(|img| encode(img, codebook)).collect()
    }

    /// Writes `layouts/NNN.txt`, `images/NNN.ppm`, `tokens/NNN.txt` (when a
    /// codebook is given) and `manifest.txt`.
    pub fn write_dir(&self, dir: &Path, categories: &CategoryTable, codebook: Option<&Codebook>) -> Result<()> {
        for sub in ["layouts", "images", "tokens"] {
            std::fs::create_dir_all(dir.join(sub))?;
        }
        for (i, (layout, image)) in self.layouts.iter().zip(&self.images).enumerate() {
            std::fs::write(dir.join(format!("layouts/{i:03}.txt")), layout.to_text(categories))?;
            image.write_ppm(dir.join(format!("images/{i:03}.ppm")))?;
            if let Some(cb) = codebook {
                let tokens = encode(image, cb)?;
                std::fs::write(dir.join(format!("tokens/{i:03}.txt")), tokens.to_grid_text(self.grid))?;
            }
        }
        let mut manifest = String::new();
        let _ = writeln!(manifest, "seed = {}", self.seed);
        let _ = writeln!(manifest, "count = {}", self.len());
        let _ = writeln!(manifest, "grid_rows = {}", self.grid.rows);
        let _ = writeln!(manifest, "grid_cols = {}", self.grid.cols);
        let _ = writeln!(manifest, "patch_px = {}", self.patch_px);
        for (k, v) in self.constraints.to_kv() {
            let _ = writeln!(manifest, "{k} = {v}");
        }
        std::fs::write(dir.join("manifest.txt"), manifest)?;
        std::fs::write(dir.join("categories.txt"), categories.to_text())?;
        Ok(())
    }

    /// Reads a directory written by [`Corpus::write_dir`].
    pub fn read_dir(dir: &Path, categories: &CategoryTable) -> Result<Self> {
        let manifest = std::fs::read_to_string(dir.join("manifest.txt"))?;
        let kv: BTreeMap<String, String> = manifest
            .lines()
            .filter_map(|l| l.split_once('='))
            .map(|(k, v)| (k.trim().to_string(), v.trim().to_string()))
            .collect();
        let get = |k: &str| -> Result<usize> {
            kv.get(k)
                .and_then(|v| v.parse().ok())
                .ok_or_else(|| Error::Format(format!("manifest is missing `{k}`")))
        };
        let grid = PatchGrid::new(get("grid_rows")?, get("grid_cols")?)?;
        let patch_px = get("patch_px")?;
        let count = get("count")?;
        let mut layouts = Vec::with_capacity(count);
        let mut images = Vec::with_capacity(count);
        for i in 0..count {
            let text = std::fs::read_to_string(dir.join(format!("layouts/{i:03}.txt")))?;
            layouts.push(canonicalize(&Layout::parse(&text, categories)?));
            images.push(SceneImage::read_ppm(dir.join(format!("images/{i:03}.ppm")))?);
        }
        let f = |k: &str, d: f64| kv.get(k).and_then(|v| v.parse().ok()).unwrap_or(d);
        let defaults = LayoutConstraints::default();
        let constraints = LayoutConstraints {
            max_objects: get("max_objects").unwrap_or(defaults.max_objects),
            max_instances: get("max_instances").unwrap_or(defaults.max_instances),
            max_extra_stuff: get("max_extra_stuff").unwrap_or(defaults.max_extra_stuff),
            min_size: f("min_size", defaults.min_size),
            max_size: f("max_size", defaults.max_size),
            stuff_min_size: f("stuff_min_size", defaults.stuff_min_size),
            stuff_max_size: f("stuff_max_size", defaults.stuff_max_size),
            instance_categories: kv
                .get("instance_categories")
                .map(|v| v.split(',').filter_map(|t| t.trim().parse().ok()).collect()),
        };
        Ok(Self { seed: get("seed")? as u64, grid, patch_px, constraints, layouts, images })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::codebook::fit_codebook;
    use crate::layout::{assign_patch_owner, Owner};

    fn table() -> CategoryTable {
        CategoryTable::synthetic_default()
    }

    #[test]
    fn texture_values_are_8bit() {
        for t in 0..7 {
            for s in 0..SHADES {
                for v in texture_patch(t, s, 4) {
                    let scaled = v * 255.0;
                    assert!((scaled - scaled.round()).abs() < 1e-9);
                }
            }
        }
    }

    #[test]
    fn textures_are_distinct() {
        let mut seen = std::collections::HashSet::new();
        for t in 0..7 {
            for s in 0..SHADES {
                let key: Vec<u64> = texture_patch(t, s, 4).iter().map(|v| v.to_bits()).collect();
                assert!(seen.insert(key));
            }
        }
    }

    #[test]
    fn max_objects_one_gives_background_only() {
        let c = LayoutConstraints { max_objects: 1, ..Default::default() };
        let l = gen_layout(3, &table(), &c);
        assert_eq!(l.objects, vec![SceneObject::new(0, BBox::FULL)]);
    }

    #[test]
    fn layouts_are_deterministic_and_valid() {
        let t = table();
        let c = LayoutConstraints::default();
        assert_eq!(gen_layout(17, &t, &c), gen_layout(17, &t, &c));
        for seed in 0..1000 {
            let l = gen_layout(seed, &t, &c);
            l.validate(&t).unwrap();
            assert!(l.is_canonical());
            assert!(l.len() <= c.max_objects);
            let inst: Vec<usize> = l
                .objects
                .iter()
                .filter(|o| t.kind(o.category) == Some(CategoryKind::Instance))
                .map(|o| o.category)
                .collect();
            assert!((1..=4).contains(&inst.len()));
            let mut uniq = inst.clone();
            uniq.sort();
            uniq.dedup();
            assert_eq!(uniq.len(), inst.len());
            assert!(l.objects.iter().any(|o| o.bbox == BBox::FULL && o.category == 0));
            let extras = l.len() - 1 - inst.len();
            assert!(extras <= 2);
        }
    }

    #[test]
    fn single_stuff_renders_uniform() {
        let t = table();
        let l = Layout::new(vec![SceneObject::new(1, BBox::FULL)]);
        let img = render(&l, PatchGrid::square(4), 4, &t);
        let first = img.patch(4, 0, 0);
        let g = PatchGrid::square(4);
        for p in 0..16 {
            let (r, c) = g.coords(p);
            assert_eq!(img.patch(4, r, c), first);
        }
    }

    #[test]
    fn render_matches_owner_textures() {
        let t = table();
        let g = PatchGrid::square(8);
        for seed in 0..50 {
            let l = gen_layout(seed, &t, &LayoutConstraints::default());
            let img = render(&l, g, 4, &t);
            assert_eq!(img, render(&l, g, 4, &t));
            let owners = assign_patch_owner(&l, g, &t);
            for p in 0..g.len() {
                let (r, c) = g.coords(p);
                let patch = img.patch(4, r, c);
                if let Owner::Instance(j) = owners[p] {
                    let o = &l.objects[j];
                    assert_eq!(patch, texture_patch(t.get(o.category).unwrap().texture_id, object_shade(o), 4));
                } else {
                    // Some stuff object of the right kind painted it.
                    let (x, y) = g.center(p);
                    assert!(l.objects.iter().any(|o| t.kind(o.category) == Some(CategoryKind::Stuff)
                        && o.bbox.contains(x, y)
                        && patch == texture_patch(t.get(o.category).unwrap().texture_id, object_shade(o), 4)));
                }
            }
        }
    }

    fn small_corpus() -> (CategoryTable, Corpus, Codebook) {
        let t = table();
        let corpus = Corpus::generate(5, 0, 40, &t, &LayoutConstraints::default(), PatchGrid::square(8), 4);
        let mut images = corpus.images.clone();
        images.extend(texture_swatches(&t, 4));
        let cb = fit_codebook(&images, 64, 4, 1).unwrap();
        (t, corpus, cb)
    }

    #[test]
    fn corpus_is_self_consistent() {
        let (t, corpus, cb) = small_corpus();
        for (layout, tokens) in corpus.layouts.iter().zip(corpus.encode_all(&cb).unwrap()) {
            assert_eq!(consistency_score(&tokens, layout, &cb, &t, corpus.grid).unwrap(), 1.0);
        }
    }

    #[test]
    fn score_ignores_input_order() {
        let (t, corpus, cb) = small_corpus();
        let layout = &corpus.layouts[3];
        let tokens = encode(&corpus.images[3], &cb).unwrap();
        let mut shuffled = layout.clone();
        shuffled.objects.reverse();
        let a = consistency_score(&tokens, layout, &cb, &t, corpus.grid).unwrap();
        let b = consistency_score(&tokens, &canonicalize(&shuffled), &cb, &t, corpus.grid).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn random_tokens_score_near_chance() {
        let t = table();
        let px = 4;
        // One codebook entry per (texture, shade): a random token is a uniform texture draw.
        let entries: Vec<Vec<f64>> = t
            .entries()
            .iter()
            .flat_map(|c| (0..SHADES).map(move |s| texture_patch(c.texture_id, s, px)))
            .collect();
        let cb = Codebook::from_entries(px, entries).unwrap();
        let g = PatchGrid::square(8);
        let mut rng = SplitMix64::new(99);
        let trials = 1000;
        let mut total = 0.0;
        for i in 0..trials {
            let layout = gen_layout(i, &t, &LayoutConstraints::default());
            let tokens = TokenSequence((0..g.len()).map(|_| rng.below(cb.size() as u64) as usize).collect());
            total += consistency_score(&tokens, &layout, &cb, &t, g).unwrap();
        }
        let mean = total / trials as f64;
        let p = 1.0 / t.len() as f64;
        let sigma = (p * (1.0 - p) / (trials as f64 * g.len() as f64)).sqrt();
        assert!((mean - p).abs() < 3.0 * sigma, "mean {mean} vs {p} (sigma {sigma})");
    }

    #[test]
    fn dataset_dir_round_trip() {
        let (t, corpus, cb) = small_corpus();
        let dir = tempfile::tempdir().unwrap();
        corpus.write_dir(dir.path(), &t, Some(&cb)).unwrap();
        let back = Corpus::read_dir(dir.path(), &t).unwrap();
        assert_eq!(back.layouts, corpus.layouts);
        assert_eq!(back.images, corpus.images);
        assert_eq!(back.constraints, corpus.constraints);
        let tokens = std::fs::read_to_string(dir.path().join("tokens/000.txt")).unwrap();
        assert_eq!(TokenSequence::from_grid_text(&tokens, corpus.grid).unwrap(), encode(&corpus.images[0], &cb).unwrap());
    }
}
