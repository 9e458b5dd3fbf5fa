//! Connectivity matrices over the concatenated `[objects; patches]` sequence.
//!
//! Row `i` is a query position and column `j` a key position. A `true` entry
//! means the key takes part in the query's softmax; `false` entries are given
//! a logit of negative infinity.

use std::collections::VecDeque;
use std::fmt;
use std::fmt::Write as _;
use std::str::FromStr;

use crate::error::{Error, Result};
use crate::layout::{assign_patch_owner, CategoryTable, Layout, Owner, PatchGrid};

#[derive(Debug, Clone, PartialEq, Eq, Hash)]
pub struct ConnectivityMask {
    n_objects: usize,
    n_patches: usize,
    allowed: Vec<bool>,
}

impl ConnectivityMask {
    fn blocked(n_objects: usize, n_patches: usize) -> Self {
        let n = n_objects + n_patches;
        Self { n_objects, n_patches, allowed: vec![false; n * n] }
    }

    pub fn n_objects(&self) -> usize {
        self.n_objects
    }

    pub fn n_patches(&self) -> usize {
        self.n_patches
    }

    /// Total sequence length `N + M`.
    pub fn size(&self) -> usize {
        self.n_objects + self.n_patches
    }

    pub fn get(&self, row: usize, col: usize) -> bool {
        self.allowed[row * self.size() + col]
    }

    fn set(&mut self, row: usize, col: usize, value: bool) {
        let n = self.size();
        self.allowed[row * n + col] = value;
    }

    pub fn row(&self, row: usize) -> &[bool] {
        let n = self.size();
        &self.allowed[row * n..(row + 1) * n]
    }

    /// Allowed key positions of a query row, ascending.
    pub fn allowed_keys(&self, row: usize) -> Vec<usize> {
        self.row(row).iter().enumerate().filter(|(_, &a)| a).map(|(j, _)| j).collect()
    }

    pub fn count_allowed(&self) -> usize {
        self.allowed.iter().filter(|&&a| a).count()
    }

    /// Patch-patch block as a flat `M x M` row-major vector.
    pub fn patch_block(&self) -> Vec<bool> {
        let (n, m) = (self.n_objects, self.n_patches);
        let mut out = Vec::with_capacity(m * m);
        for i in 0..m {
            out.extend_from_slice(&self.row(n + i)[n..]);
        }
        out
    }

    /// Whether every key allowed here is also allowed in `other` (same shape).
    pub fn is_subset_of(&self, other: &ConnectivityMask) -> bool {
        self.size() == other.size() && self.allowed.iter().zip(&other.allowed).all(|(&a, &b)| !a || b)
    }

    /// Binary PGM (P5), one byte per cell: 255 allowed, 0 blocked.
    pub fn to_pgm(&self) -> Vec<u8> {
        let n = self.size();
        let mut out = format!("P5\n{n} {n}\n255\n").into_bytes();
        out.extend(self.allowed.iter().map(|&a| if a { 255u8 } else { 0 }));
        out
    }

    /// Text listing of allowed `i j` pairs, one per line, row-major.
    ///
    /// The first line is a header `# objects N patches M`.
    pub fn to_pairs_text(&self) -> String {
        let mut out = format!("# objects {} patches {}\n", self.n_objects, self.n_patches);
        let n = self.size();
        for i in 0..n {
            for j in 0..n {
                if self.get(i, j) {
                    let _ = writeln!(out, "{i} {j}");
                }
            }
        }
        out
    }

    pub fn from_pairs_text(text: &str) -> Result<Self> {
        let mut lines = text.lines().enumerate();
        let header = lines.next().map(|(_, l)| l).unwrap_or("");
        let h: Vec<&str> = header.split_whitespace().collect();
        let bad_header = || Error::Parse { line: 1, msg: "expected `# objects N patches M`".into() };
        if h.len() != 5 || h[0] != "#" || h[1] != "objects" || h[3] != "patches" {
            return Err(bad_header());
        }
        let n_objects: usize = h[2].parse().map_err(|_| bad_header())?;
        let n_patches: usize = h[4].parse().map_err(|_| bad_header())?;
        let mut mask = Self::blocked(n_objects, n_patches);
        let n = mask.size();
        for (k, line) in lines {
            let line = line.trim();
            if line.is_empty() {
                continue;
            }
            let err = || Error::Parse { line: k + 1, msg: format!("bad pair `{line}`") };
            let mut it = line.split_whitespace().map(|t| t.parse::<usize>());
            let (i, j) = match (it.next(), it.next(), it.next()) {
                (Some(Ok(i)), Some(Ok(j)), None) if i < n && j < n => (i, j),
                _ => return Err(err()),
            };
            mask.set(i, j, true);
        }
        Ok(mask)
    }
}

/// Lower-triangular mask over the whole sequence: `allowed[i][j]` iff `j <= i`.
pub fn causal_mask(n_objects: usize, n_patches: usize) -> ConnectivityMask {
    let mut m = ConnectivityMask::blocked(n_objects, n_patches);
    for i in 0..m.size() {
        for j in 0..=i {
            m.set(i, j, true);
        }
    }
    m
}

/// Sliding-window mask: patches see earlier patches within Chebyshev radius
/// `window - 1` and every object; objects are causal among themselves.
pub fn grid_mask(n_objects: usize, grid: PatchGrid, window: usize) -> Result<ConnectivityMask> {
    let max_side = grid.rows.max(grid.cols);
    if window == 0 || window > max_side {
        return Err(Error::Shape(format!("grid window must be in 1..={max_side}, got {window}")));
    }
    let mut m = causal_mask(n_objects, grid.len());
    let n = n_objects;
    let radius = window - 1;
    for i in 0..grid.len() {
        let (ri, ci) = grid.coords(i);
        for j in 0..=i {
            let (rj, cj) = grid.coords(j);
            let near = ri.abs_diff(rj) <= radius && ci.abs_diff(cj) <= radius;
            m.set(n + i, n + j, near);
        }
    }
    Ok(m)
}

/// Which focal blocks are active. A disabled block falls back to the
/// corresponding block of the causal mask.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct FocalBlocks {
    pub object_object: bool,
    pub object_patch: bool,
    pub patch_patch: bool,
}

impl FocalBlocks {
    pub const ALL: FocalBlocks = FocalBlocks { object_object: true, object_patch: true, patch_patch: true };

    pub fn without(block: Block) -> Self {
        let mut b = Self::ALL;
        match block {
            Block::ObjectObject => b.object_object = false,
            Block::ObjectPatch => b.object_patch = false,
            Block::PatchPatch => b.patch_patch = false,
        }
        b
    }
}

impl Default for FocalBlocks {
    fn default() -> Self {
        Self::ALL
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Block {
    ObjectObject,
    ObjectPatch,
    PatchPatch,
}

impl Block {
    pub fn short(self) -> &'static str {
        match self {
            Block::ObjectObject => "oo",
            Block::ObjectPatch => "op",
            Block::PatchPatch => "pp",
        }
    }
}

impl FromStr for Block {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "oo" => Ok(Block::ObjectObject),
            "op" => Ok(Block::ObjectPatch),
            "pp" => Ok(Block::PatchPatch),
            _ => Err(Error::Config(format!("unknown block `{s}` (expected oo, op or pp)"))),
        }
    }
}

/// Focal attention mask with every block enabled.
pub fn focal_mask(layout: &Layout, grid: PatchGrid, categories: &CategoryTable) -> Result<ConnectivityMask> {
    focal_mask_with(layout, grid, categories, FocalBlocks::ALL)
}

/// Focal attention mask with selectable blocks.
///
/// The layout must already be canonical; owners come from
/// [`assign_patch_owner`].
pub fn focal_mask_with(
    layout: &Layout,
    grid: PatchGrid,
    categories: &CategoryTable,
    blocks: FocalBlocks,
) -> Result<ConnectivityMask> {
    if !layout.is_canonical() {
        return Err(Error::NotCanonical);
    }
    layout.validate(categories)?;
    let owners = assign_patch_owner(layout, grid, categories);
    let n = layout.len();
    let mut m = ConnectivityMask::blocked(n, grid.len());

    for i in 0..n {
        for j in 0..n {
            m.set(i, j, blocks.object_object || j <= i);
        }
    }
    for (i, owner) in owners.iter().enumerate() {
        for j in 0..n {
            let allowed = match (blocks.object_patch, owner) {
                (true, Owner::Instance(k)) => *k == j,
                _ => true,
            };
            m.set(n + i, j, allowed);
        }
        for (j, other) in owners.iter().enumerate().take(i + 1) {
            let allowed = !blocks.patch_patch || other == owner;
            m.set(n + i, n + j, allowed);
        }
    }
    Ok(m)
}

/// Attention variant selector used by configs, the CLI and ablations.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum AttentionKind {
    Causal,
    Grid(usize),
    /// Window equal to the longer grid side.
    GridFull,
    Focal(FocalBlocks),
}

impl AttentionKind {
    pub const FOCAL: AttentionKind = AttentionKind::Focal(FocalBlocks::ALL);

    /// The eight variants compared by the ablation command.
    pub fn ablation_set() -> Vec<AttentionKind> {
        vec![
            AttentionKind::Causal,
            AttentionKind::Grid(2),
            AttentionKind::Grid(4),
            AttentionKind::GridFull,
            AttentionKind::FOCAL,
            AttentionKind::Focal(FocalBlocks::without(Block::ObjectObject)),
            AttentionKind::Focal(FocalBlocks::without(Block::ObjectPatch)),
            AttentionKind::Focal(FocalBlocks::without(Block::PatchPatch)),
        ]
    }

    pub fn build(self, layout: &Layout, grid: PatchGrid, categories: &CategoryTable) -> Result<ConnectivityMask> {
        match self {
            AttentionKind::Causal => Ok(causal_mask(layout.len(), grid.len())),
            AttentionKind::Grid(k) => grid_mask(layout.len(), grid, k),
            AttentionKind::GridFull => grid_mask(layout.len(), grid, grid.rows.max(grid.cols)),
            AttentionKind::Focal(blocks) => focal_mask_with(layout, grid, categories, blocks),
        }
    }
}

impl fmt::Display for AttentionKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let name = match self {
            AttentionKind::Causal => "causal".to_string(),
            AttentionKind::Grid(k) => format!("grid:{k}"),
            AttentionKind::GridFull => "grid:full".to_string(),
            AttentionKind::Focal(b) => {
                let mut s = "focal".to_string();
                for (on, block) in [
                    (b.object_object, Block::ObjectObject),
                    (b.object_patch, Block::ObjectPatch),
                    (b.patch_patch, Block::PatchPatch),
                ] {
                    if !on {
                        s.push_str("-minus-");
                        s.push_str(block.short());
                    }
                }
                s
            }
        };
        f.pad(&name)
    }
}

impl FromStr for AttentionKind {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        let s = s.trim();
        if s == "causal" {
            return Ok(AttentionKind::Causal);
        }
        if let Some(k) = s.strip_prefix("grid:") {
            if k == "full" {
                return Ok(AttentionKind::GridFull);
            }
            return k
                .parse::<usize>()
                .map(AttentionKind::Grid)
                .map_err(|_| Error::Config(format!("bad grid window `{k}`")));
        }
        if let Some(rest) = s.strip_prefix("focal") {
            let mut blocks = FocalBlocks::ALL;
            for part in rest.split("-minus-").skip(1) {
                blocks = match part.parse::<Block>()? {
                    Block::ObjectObject => FocalBlocks { object_object: false, ..blocks },
                    Block::ObjectPatch => FocalBlocks { object_patch: false, ..blocks },
                    Block::PatchPatch => FocalBlocks { patch_patch: false, ..blocks },
                };
            }
            if rest.is_empty() || rest.starts_with("-minus-") {
                return Ok(AttentionKind::Focal(blocks));
            }
        }
        Err(Error::Config(format!("unknown attention `{s}` (expected causal, grid:K, grid:full or focal)")))
    }
}

/// Positions that can influence query `position` through at most `depth`
/// attention hops (edge `j -> i` iff `allowed[i][j]`), ascending. The query
/// itself is included.
pub fn reachable_set(mask: &ConnectivityMask, depth: usize, position: usize) -> Vec<usize> {
    let n = mask.size();
    let mut dist = vec![usize::MAX; n];
    let mut queue = VecDeque::from([position]);
    dist[position] = 0;
    while let Some(i) = queue.pop_front() {
        if dist[i] == depth {
            continue;
        }
        for j in 0..n {
            if mask.get(i, j) && dist[j] == usize::MAX {
                dist[j] = dist[i] + 1;
                queue.push_back(j);
            }
        }
    }
    (0..n).filter(|&j| dist[j] != usize::MAX).collect()
}
