//! Patch vocabulary: k-means vector quantization of image patches.
//!
//! A codebook maps every `p x p` RGB patch to the index of its nearest entry
//! and back. Entries are stored rounded to `f32` so that the on-disk format
//! reproduces the in-memory codebook exactly.

use std::collections::HashMap;
use std::fmt::Write as _;
use std::path::Path;

use crate::error::{Error, Result};
use crate::image::SceneImage;
use crate::layout::PatchGrid;
use crate::rng::SplitMix64;

const MAGIC: &[u8; 4] = b"FGCB";
const VERSION: u32 = 1;

/// Discrete patch tokens in raster order.
#[derive(Debug, Clone, PartialEq, Eq, Hash, Default)]
pub struct TokenSequence(pub Vec<usize>);

impl TokenSequence {
    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    pub fn as_slice(&self) -> &[usize] {
        &self.0
    }

    /// `rows` lines of `cols` space-separated integers.
    pub fn to_grid_text(&self, grid: PatchGrid) -> String {
        let mut out = String::new();
        for row in self.0.chunks(grid.cols) {
            let line: Vec<String> = row.iter().map(usize::to_string).collect();
            let _ = writeln!(out, "{}", line.join(" "));
        }
        out
    }

    pub fn from_grid_text(text: &str, grid: PatchGrid) -> Result<Self> {
        let mut tokens = Vec::with_capacity(grid.len());
        let mut rows = 0;
        for (n, line) in text.lines().enumerate() {
            if line.trim().is_empty() {
                continue;
            }
            let row: Vec<usize> = line
                .split_whitespace()
                .map(|t| t.parse::<usize>())
                .collect::<std::result::Result<_, _>>()
                .map_err(|_| Error::Parse { line: n + 1, msg: "expected integers".into() })?;
            if row.len() != grid.cols {
                return Err(Error::Parse { line: n + 1, msg: format!("expected {} tokens", grid.cols) });
            }
            tokens.extend(row);
            rows += 1;
        }
        if rows != grid.rows {
            return Err(Error::Shape(format!("expected {} token rows, got {rows}", grid.rows)));
        }
        Ok(Self(tokens))
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Codebook {
    patch_px: usize,
    dim: usize,
    entries: Vec<f64>,
}

impl Codebook {
    /// Builds a codebook from explicit entries (each `patch_px^2 * 3` long).
    pub fn from_entries(patch_px: usize, entries: Vec<Vec<f64>>) -> Result<Self> {
        let dim = patch_px * patch_px * 3;
        if patch_px == 0 || entries.is_empty() {
            return Err(Error::Shape("codebook needs a positive patch size and at least one entry".into()));
        }
        let mut flat = Vec::with_capacity(entries.len() * dim);
        for e in &entries {
            if e.len() != dim {
                return Err(Error::Shape(format!("entry of length {} but patch dimension is {dim}", e.len())));
            }
            if e.iter().any(|v| !v.is_finite()) {
                return Err(Error::Format("codebook entries must be finite".into()));
            }
            flat.extend(e.iter().map(|&v| v as f32 as f64));
        }
        Ok(Self { patch_px, dim, entries: flat })
    }

    pub fn size(&self) -> usize {
        self.entries.len() / self.dim
    }

    pub fn patch_px(&self) -> usize {
        self.patch_px
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn entry(&self, k: usize) -> &[f64] {
        &self.entries[k * self.dim..(k + 1) * self.dim]
    }

    /// Index of the nearest entry (squared Euclidean, ties to the lowest index).
    pub fn nearest(&self, v: &[f64]) -> usize {
        let mut best = 0;
        let mut best_d = f64::INFINITY;
        for k in 0..self.size() {
            let d = sq_dist(self.entry(k), v);
            if d < best_d {
                best_d = d;
                best = k;
            }
        }
        best
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::with_capacity(20 + self.entries.len() * 4);
        out.extend_from_slice(MAGIC);
        for v in [VERSION, self.size() as u32, self.dim as u32, self.patch_px as u32] {
            out.extend_from_slice(&v.to_le_bytes());
        }
        for &v in &self.entries {
            out.extend_from_slice(&(v as f32).to_le_bytes());
        }
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        if bytes.len() < 20 || &bytes[..4] != MAGIC {
            return Err(Error::Format("not a codebook file".into()));
        }
        let word = |i: usize| u32::from_le_bytes(bytes[4 + 4 * i..8 + 4 * i].try_into().unwrap()) as usize;
        let (version, k, dim, patch_px) = (word(0), word(1), word(2), word(3));
        if version != VERSION as usize {
            return Err(Error::Format(format!("unsupported codebook version {version}")));
        }
        if dim != patch_px * patch_px * 3 || k == 0 || bytes.len() != 20 + k * dim * 4 {
            return Err(Error::Format("codebook header does not match payload".into()));
        }
        let entries = bytes[20..]
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().unwrap()) as f64)
            .collect();
        Ok(Self { patch_px, dim, entries })
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        std::fs::write(path, self.to_bytes())?;
        Ok(())
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        Self::from_bytes(&std::fs::read(path)?)
    }
}

fn sq_dist(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum()
}

pub fn grid_of(image: &SceneImage, patch_px: usize) -> Result<PatchGrid> {
    if patch_px == 0 || !image.width().is_multiple_of(patch_px) || !image.height().is_multiple_of(patch_px) {
        return Err(Error::Shape(format!(
            "{}x{} image does not tile into {patch_px}px patches",
            image.width(),
            image.height()
        )));
    }
    PatchGrid::new(image.height() / patch_px, image.width() / patch_px)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct KMeansOptions {
    pub max_iter: usize,
}

impl Default for KMeansOptions {
    fn default() -> Self {
        Self { max_iter: 100 }
    }
}

/// Lloyd's k-means over all patches of `images` with k-means++ seeding.
///
/// Identical patch vectors are merged into one weighted point first, which
/// leaves every assignment and weighted mean unchanged. Distinct points are
/// kept in order of first appearance so the result depends only on
/// `(images, k, seed)`.
pub fn fit_codebook(images: &[SceneImage], k: usize, patch_px: usize, seed: u64) -> Result<Codebook> {
    fit_codebook_with(images, k, patch_px, seed, KMeansOptions::default())
}

pub fn fit_codebook_with(
    images: &[SceneImage],
    k: usize,
    patch_px: usize,
    seed: u64,
    opts: KMeansOptions,
) -> Result<Codebook> {
    if k == 0 {
        return Err(Error::Shape("codebook size must be at least 1".into()));
    }
    let mut index: HashMap<Vec<u64>, usize> = HashMap::new();
    let mut points: Vec<Vec<f64>> = Vec::new();
    let mut weights: Vec<f64> = Vec::new();
    for img in images {
        let grid = grid_of(img, patch_px)?;
        for p in 0..grid.len() {
            let (r, c) = grid.coords(p);
            let v = img.patch(patch_px, r, c);
            let key: Vec<u64> = v.iter().map(|x| x.to_bits()).collect();
            match index.get(&key) {
                Some(&i) => weights[i] += 1.0,
                None => {
                    index.insert(key, points.len());
                    points.push(v);
                    weights.push(1.0);
                }
            }
        }
    }
    if points.len() < k {
        return Err(Error::TooFewPatches { needed: k, found: points.len() });
    }

    let mut rng = SplitMix64::new(seed);
    let mut centers: Vec<Vec<f64>> = Vec::with_capacity(k);
    centers.push(points[rng.categorical(&weights)].clone());
    let mut nearest_d: Vec<f64> = points.iter().map(|p| sq_dist(p, &centers[0])).collect();
    while centers.len() < k {
        let w: Vec<f64> = weights.iter().zip(&nearest_d).map(|(w, d)| w * d).collect();
        let pick = rng.categorical(&w);
        centers.push(points[pick].clone());
        let c = centers.last().unwrap();
        for (d, p) in nearest_d.iter_mut().zip(&points) {
            *d = d.min(sq_dist(p, c));
        }
    }

    let dim = points[0].len();
    let mut assign = vec![usize::MAX; points.len()];
    for _ in 0..opts.max_iter {
        let mut changed = false;
        for (i, p) in points.iter().enumerate() {
            let mut best = 0;
            let mut best_d = f64::INFINITY;
            for (j, c) in centers.iter().enumerate() {
                let d = sq_dist(p, c);
                if d < best_d {
                    best_d = d;
                    best = j;
                }
            }
            if assign[i] != best {
                assign[i] = best;
                changed = true;
            }
        }
        if !changed {
            break;
        }
        let mut sums = vec![vec![0.0; dim]; k];
        let mut mass = vec![0.0; k];
        for ((p, &a), &w) in points.iter().zip(&assign).zip(&weights) {
            mass[a] += w;
            for (s, x) in sums[a].iter_mut().zip(p) {
                *s += w * x;
            }
        }
        for j in 0..k {
            // An emptied cluster keeps its previous center.
            if mass[j] > 0.0 {
                centers[j] = sums[j].iter().map(|s| s / mass[j]).collect();
            }
        }
    }
    Codebook::from_entries(patch_px, centers)
}

/// Nearest-entry token for every patch, raster order.
pub fn encode(image: &SceneImage, codebook: &Codebook) -> Result<TokenSequence> {
    let grid = grid_of(image, codebook.patch_px)?;
    let tokens = (0..grid.len())
        .map(|p| {
            let (r, c) = grid.coords(p);
            codebook.nearest(&image.patch(codebook.patch_px, r, c))
        })
        .collect();
    Ok(TokenSequence(tokens))
}

/// Tiles codebook entries into an image.
pub fn decode(tokens: &TokenSequence, codebook: &Codebook, grid: PatchGrid) -> Result<SceneImage> {
    if tokens.len() != grid.len() {
        return Err(Error::Shape(format!("{} tokens for a {}-patch grid", tokens.len(), grid.len())));
    }
    let p = codebook.patch_px;
    let mut img = SceneImage::new(grid.cols * p, grid.rows * p);
    for (i, &t) in tokens.0.iter().enumerate() {
        if t >= codebook.size() {
            return Err(Error::TokenOutOfRange { token: t, vocab: codebook.size() });
        }
        let (r, c) = grid.coords(i);
        img.set_patch(p, r, c, codebook.entry(t));
    }
    Ok(img)
}

/// Mean squared per-channel error between two equally sized images.
pub fn mse(a: &SceneImage, b: &SceneImage) -> f64 {
    let n = a.pixels().len().max(1);
    sq_dist(a.pixels(), b.pixels()) / n as f64
}

#[cfg(test)]
mod tests {
    use super::*;

    fn solid(px: usize, rgb: [f64; 3]) -> Vec<f64> {
        (0..px * px).flat_map(|_| rgb).collect()
    }

    fn tiled(grid: PatchGrid, px: usize, pick: impl Fn(usize) -> Vec<f64>) -> SceneImage {
        let mut img = SceneImage::new(grid.cols * px, grid.rows * px);
        for i in 0..grid.len() {
            let (r, c) = grid.coords(i);
            img.set_patch(px, r, c, &pick(i));
        }
        img
    }

    fn book() -> Codebook {
        let colors = [[0.0, 0.0, 0.0], [1.0, 0.0, 0.0], [0.0, 1.0, 0.0], [0.25, 0.25, 0.75], [0.5, 0.5, 0.5]];
        Codebook::from_entries(2, colors.iter().map(|&c| solid(2, c)).collect()).unwrap()
    }

    #[test]
    fn two_patterns_recovered_exactly() {
        let g = PatchGrid::square(4);
        let a = solid(2, [0.25, 0.5, 0.75]);
        let b = solid(2, [1.0, 0.0, 0.5]);
        let img = tiled(g, 2, |i| if i % 3 == 0 { a.clone() } else { b.clone() });
        let cb = fit_codebook(&[img], 2, 2, 9).unwrap();
        let mut got = vec![cb.entry(0).to_vec(), cb.entry(1).to_vec()];
        got.sort_by(|x, y| x[0].total_cmp(&y[0]));
        assert_eq!(got, vec![a, b]);
    }

    #[test]
    fn single_cluster_is_the_mean() {
        let g = PatchGrid::square(2);
        let vals = [0.0, 0.25, 0.5, 1.0];
        let img = tiled(g, 1, |i| vec![vals[i]; 3]);
        let cb = fit_codebook(&[img], 1, 1, 0).unwrap();
        assert_eq!(cb.entry(0), &[0.4375; 3]);
    }

    #[test]
    fn too_few_distinct_patches() {
        let img = tiled(PatchGrid::square(2), 1, |_| vec![0.5; 3]);
        match fit_codebook(&[img], 3, 1, 0) {
            Err(Error::TooFewPatches { needed: 3, found: 1 }) => {}
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn fit_is_deterministic() {
        let g = PatchGrid::square(4);
        let img = tiled(g, 2, |i| solid(2, [i as f64 / 16.0, 0.5, 1.0 - i as f64 / 16.0]));
        let a = fit_codebook(std::slice::from_ref(&img), 5, 2, 42).unwrap();
        let b = fit_codebook(&[img], 5, 2, 42).unwrap();
        assert_eq!(a.to_bytes(), b.to_bytes());
    }

    #[test]
    fn encode_decode_on_vocabulary() {
        let cb = book();
        let g = PatchGrid::new(2, 3).unwrap();
        let tokens = TokenSequence(vec![4, 0, 3, 3, 1, 2]);
        let img = decode(&tokens, &cb, g).unwrap();
        assert_eq!(encode(&img, &cb).unwrap(), tokens);
        assert_eq!(encode(&img, &cb).unwrap(), encode(&img, &cb).unwrap());
        let zeros = decode(&TokenSequence(vec![0; 6]), &cb, g).unwrap();
        assert!(zeros.pixels().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn uniform_image_maps_to_nearest_entry() {
        let cb = book();
        let color = [0.3, 0.3, 0.7];
        let img = tiled(PatchGrid::square(3), 2, |_| solid(2, color));
        // Distances to every entry, computed directly.
        let dists: Vec<f64> = (0..cb.size()).map(|k| sq_dist(cb.entry(k), &solid(2, color))).collect();
        let best = (0..dists.len()).min_by(|&a, &b| dists[a].total_cmp(&dists[b])).unwrap();
        assert_eq!(best, 3);
        assert!(encode(&img, &cb).unwrap().0.iter().all(|&t| t == 3));
    }

    #[test]
    fn nearest_breaks_ties_low() {
        let cb = Codebook::from_entries(1, vec![vec![0.0; 3], vec![1.0; 3]]).unwrap();
        assert_eq!(cb.nearest(&[0.5; 3]), 0);
    }

    #[test]
    fn encoding_minimizes_error_over_all_assignments() {
        let cb = Codebook::from_entries(1, vec![vec![0.0; 3], vec![0.5; 3], vec![1.0, 0.0, 0.0]]).unwrap();
        let g = PatchGrid::new(1, 3).unwrap();
        let img = SceneImage::from_pixels(3, 1, vec![0.2, 0.1, 0.0, 0.9, 0.1, 0.2, 0.4, 0.6, 0.5]).unwrap();
        let best = mse(&decode(&encode(&img, &cb).unwrap(), &cb, g).unwrap(), &img);
        for a in 0..3 {
            for b in 0..3 {
                for c in 0..3 {
                    let alt = decode(&TokenSequence(vec![a, b, c]), &cb, g).unwrap();
                    assert!(best <= mse(&alt, &img));
                }
            }
        }
    }

    #[test]
    fn decode_rejects_bad_tokens() {
        let cb = book();
        let g = PatchGrid::square(1);
        assert!(matches!(
            decode(&TokenSequence(vec![5]), &cb, g),
            Err(Error::TokenOutOfRange { token: 5, vocab: 5 })
        ));
        assert!(decode(&TokenSequence(vec![0, 0]), &cb, g).is_err());
    }

    #[test]
    fn encode_rejects_misaligned_image() {
        let cb = book();
        assert!(encode(&SceneImage::new(3, 2), &cb).is_err());
    }

    #[test]
    fn bytes_round_trip() {
        let cb = book();
        assert_eq!(Codebook::from_bytes(&cb.to_bytes()).unwrap(), cb);
        let mut bad = cb.to_bytes();
        bad.pop();
        assert!(Codebook::from_bytes(&bad).is_err());
    }

    #[test]
    fn token_grid_text() {
        let g = PatchGrid::new(2, 2).unwrap();
        let t = TokenSequence(vec![1, 2, 3, 4]);
        assert_eq!(t.to_grid_text(g), "1 2\n3 4\n");
        assert_eq!(TokenSequence::from_grid_text("1 2\n3 4\n", g).unwrap(), t);
        assert!(TokenSequence::from_grid_text("1 2 3\n4\n", g).is_err());
    }
}
