//! Layouts, categories and the geometry between boxes and the patch grid.
//!
//! A patch belongs to a box when its center lies in the half-open box
//! `[x1, x2) x [y1, y2)`. When several instance boxes claim a patch, the
//! smallest one owns it; ties go to the object that comes last in canonical
//! order.

use std::cmp::Ordering;
use std::fmt::Write as _;

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum CategoryKind {
    Instance,
    Stuff,
}

impl CategoryKind {
    pub fn as_str(self) -> &'static str {
        match self {
            CategoryKind::Instance => "instance",
            CategoryKind::Stuff => "stuff",
        }
    }
}

impl std::str::FromStr for CategoryKind {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "instance" => Ok(CategoryKind::Instance),
            "stuff" => Ok(CategoryKind::Stuff),
            other => Err(Error::InvalidCategories(format!(
                "kind must be `instance` or `stuff`, got `{other}`"
            ))),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Category {
    pub name: String,
    pub kind: CategoryKind,
    pub texture_id: usize,
}

impl Category {
    pub fn new(name: &str, kind: CategoryKind, texture_id: usize) -> Self {
        Self { name: name.to_string(), kind, texture_id }
    }
}

/// Ordered category list; a category's id is its index.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct CategoryTable {
    entries: Vec<Category>,
}

impl CategoryTable {
    pub fn new(entries: Vec<Category>) -> Result<Self> {
        for (i, a) in entries.iter().enumerate() {
            if a.name.is_empty() || a.name.contains(char::is_whitespace) {
                return Err(Error::InvalidCategories(format!("bad category name `{}`", a.name)));
            }
            if entries[..i].iter().any(|b| b.name == a.name) {
                return Err(Error::InvalidCategories(format!("duplicate name `{}`", a.name)));
            }
        }
        if !entries.iter().any(|c| c.kind == CategoryKind::Stuff) {
            return Err(Error::InvalidCategories("at least one stuff category is required".into()));
        }
        Ok(Self { entries })
    }

    /// Six-category synthetic world: two stuff classes, four instance classes.
    pub fn synthetic_default() -> Self {
        use CategoryKind::*;
        Self::new(vec![
            Category::new("sky", Stuff, 0),
            Category::new("grass", Stuff, 1),
            Category::new("person", Instance, 2),
            Category::new("car", Instance, 3),
            Category::new("dog", Instance, 4),
            Category::new("tree", Instance, 5),
        ])
        .expect("static table is valid")
    }

    /// The default table plus one held-out instance class used for few-shot runs.
    pub fn synthetic_with_novel() -> Self {
        let mut entries = Self::synthetic_default().entries;
        entries.push(Category::new("wolf", CategoryKind::Instance, 6));
        Self::new(entries).expect("static table is valid")
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn get(&self, id: usize) -> Option<&Category> {
        self.entries.get(id)
    }

    pub fn entries(&self) -> &[Category] {
        &self.entries
    }

    pub fn id_of(&self, name: &str) -> Option<usize> {
        self.entries.iter().position(|c| c.name == name)
    }

    pub fn kind(&self, id: usize) -> Option<CategoryKind> {
        self.get(id).map(|c| c.kind)
    }

    pub fn ids_of_kind(&self, kind: CategoryKind) -> Vec<usize> {
        (0..self.len()).filter(|&i| self.entries[i].kind == kind).collect()
    }

    /// Parses `name kind texture_id` lines; `#` starts a comment.
    pub fn parse(text: &str) -> Result<Self> {
        let mut entries = Vec::new();
        for (n, raw) in text.lines().enumerate() {
            let line = strip_comment(raw);
            if line.is_empty() {
                continue;
            }
            let fields: Vec<&str> = line.split_whitespace().collect();
            let err = |msg: String| Error::Parse { line: n + 1, msg };
            if fields.len() != 3 {
                return Err(err(format!("expected `name kind texture_id`, got {} fields", fields.len())));
            }
            let kind = fields[1].parse::<CategoryKind>().map_err(|e| err(e.to_string()))?;
            let texture_id = fields[2]
                .parse::<usize>()
                .map_err(|_| err(format!("bad texture id `{}`", fields[2])))?;
            entries.push(Category::new(fields[0], kind, texture_id));
        }
        Self::new(entries)
    }

    pub fn to_text(&self) -> String {
        let mut out = String::new();
        for c in &self.entries {
            let _ = writeln!(out, "{} {} {}", c.name, c.kind.as_str(), c.texture_id);
        }
        out
    }
}

/// Axis-aligned box in normalized image coordinates, `(x1, y1)` top-left.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct BBox {
    pub x1: f64,
    pub y1: f64,
    pub x2: f64,
    pub y2: f64,
}

impl BBox {
    pub fn new(x1: f64, y1: f64, x2: f64, y2: f64) -> Result<Self> {
        let b = Self { x1, y1, x2, y2 };
        if !b.is_valid() {
            return Err(Error::InvalidLayout(format!("bad box [{x1}, {y1}, {x2}, {y2}]")));
        }
        Ok(b)
    }

    pub const FULL: BBox = BBox { x1: 0.0, y1: 0.0, x2: 1.0, y2: 1.0 };

    pub fn is_valid(&self) -> bool {
        let unit = |v: f64| (0.0..=1.0).contains(&v);
        unit(self.x1) && unit(self.y1) && unit(self.x2) && unit(self.y2) && self.x1 <= self.x2 && self.y1 <= self.y2
    }

    pub fn area(&self) -> f64 {
        (self.x2 - self.x1) * (self.y2 - self.y1)
    }

    /// Half-open containment.
    pub fn contains(&self, x: f64, y: f64) -> bool {
        self.x1 <= x && x < self.x2 && self.y1 <= y && y < self.y2
    }

    pub fn corners(&self) -> [f64; 4] {
        [self.x1, self.y1, self.x2, self.y2]
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SceneObject {
    pub category: usize,
    pub bbox: BBox,
}

impl SceneObject {
    pub fn new(category: usize, bbox: BBox) -> Self {
        Self { category, bbox }
    }
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct Layout {
    pub objects: Vec<SceneObject>,
}

impl Layout {
    pub fn new(objects: Vec<SceneObject>) -> Self {
        Self { objects }
    }

    pub fn len(&self) -> usize {
        self.objects.len()
    }

    pub fn is_empty(&self) -> bool {
        self.objects.is_empty()
    }

    pub fn validate(&self, categories: &CategoryTable) -> Result<()> {
        for (i, o) in self.objects.iter().enumerate() {
            if !o.bbox.is_valid() {
                return Err(Error::InvalidLayout(format!("object {i} has an invalid box")));
            }
            if o.category >= categories.len() {
                return Err(Error::InvalidLayout(format!(
                    "object {i} has category {} but only {} exist",
                    o.category,
                    categories.len()
                )));
            }
        }
        Ok(())
    }

    pub fn is_canonical(&self) -> bool {
        self.objects.windows(2).all(|w| canonical_order(&w[0], &w[1]) != Ordering::Greater)
    }

    /// Parses `category_name x1 y1 x2 y2` lines. The result is not canonicalized.
    pub fn parse(text: &str, categories: &CategoryTable) -> Result<Self> {
        let mut objects = Vec::new();
        for (n, raw) in text.lines().enumerate() {
            let line = strip_comment(raw);
            if line.is_empty() {
                continue;
            }
            let err = |msg: String| Error::Parse { line: n + 1, msg };
            let fields: Vec<&str> = line.split_whitespace().collect();
            if fields.len() != 5 {
                return Err(err(format!("expected `name x1 y1 x2 y2`, got {} fields", fields.len())));
            }
            let category = categories
                .id_of(fields[0])
                .ok_or_else(|| err(format!("unknown category `{}`", fields[0])))?;
            let mut c = [0.0; 4];
            for (slot, f) in c.iter_mut().zip(&fields[1..]) {
                *slot = f.parse::<f64>().map_err(|_| err(format!("bad coordinate `{f}`")))?;
            }
            let bbox = BBox::new(c[0], c[1], c[2], c[3]).map_err(|e| err(e.to_string()))?;
            objects.push(SceneObject::new(category, bbox));
        }
        Ok(Self { objects })
    }

    pub fn to_text(&self, categories: &CategoryTable) -> String {
        let mut out = String::new();
        for o in &self.objects {
            let name = categories.get(o.category).map(|c| c.name.as_str()).unwrap_or("?");
            let b = o.bbox;
            let _ = writeln!(out, "{name} {} {} {} {}", b.x1, b.y1, b.x2, b.y2);
        }
        out
    }
}

fn strip_comment(line: &str) -> &str {
    line.split('#').next().unwrap_or("").trim()
}

fn canonical_order(a: &SceneObject, b: &SceneObject) -> Ordering {
    b.bbox
        .area()
        .total_cmp(&a.bbox.area())
        .then(a.category.cmp(&b.category))
        .then(a.bbox.x1.total_cmp(&b.bbox.x1))
        .then(a.bbox.y1.total_cmp(&b.bbox.y1))
}

/// Sorts objects by descending area, then category id, then `x1`, then `y1`.
pub fn canonicalize(layout: &Layout) -> Layout {
    let mut objects = layout.objects.clone();
    objects.sort_by(canonical_order);
    Layout { objects }
}

/// Row-major grid of patch tokens.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct PatchGrid {
    pub rows: usize,
    pub cols: usize,
}

impl PatchGrid {
    pub fn new(rows: usize, cols: usize) -> Result<Self> {
        if rows == 0 || cols == 0 {
            return Err(Error::Shape(format!("grid must be at least 1x1, got {rows}x{cols}")));
        }
        Ok(Self { rows, cols })
    }

    pub fn square(side: usize) -> Self {
        Self::new(side, side).expect("side must be positive")
    }

    pub fn len(&self) -> usize {
        self.rows * self.cols
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn index(&self, row: usize, col: usize) -> usize {
        row * self.cols + col
    }

    pub fn coords(&self, index: usize) -> (usize, usize) {
        (index / self.cols, index % self.cols)
    }

    /// Normalized `(x, y)` center of a patch.
    pub fn center(&self, index: usize) -> (f64, f64) {
        let (r, c) = self.coords(index);
        ((c as f64 + 0.5) / self.cols as f64, (r as f64 + 0.5) / self.rows as f64)
    }
}

/// Patches whose centers fall inside `bbox`, in ascending raster order.
pub fn patch_membership(bbox: &BBox, grid: PatchGrid) -> Vec<usize> {
    let in_span = |lo: f64, hi: f64, i: usize, n: usize| {
        let c = (i as f64 + 0.5) / n as f64;
        lo <= c && c < hi
    };
    let cols: Vec<usize> = (0..grid.cols).filter(|&c| in_span(bbox.x1, bbox.x2, c, grid.cols)).collect();
    let mut out = Vec::new();
    for r in (0..grid.rows).filter(|&r| in_span(bbox.y1, bbox.y2, r, grid.rows)) {
        out.extend(cols.iter().map(|&c| grid.index(r, c)));
    }
    out
}

/// Per-patch owner label.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Owner {
    /// Index into the layout's object list.
    Instance(usize),
    Stuff,
}

impl Owner {
    pub fn instance(self) -> Option<usize> {
        match self {
            Owner::Instance(j) => Some(j),
            Owner::Stuff => None,
        }
    }
}

fn smallest_cover(layout: &Layout, grid: PatchGrid, keep: impl Fn(&SceneObject) -> bool) -> Vec<Option<usize>> {
    let mut best: Vec<Option<usize>> = vec![None; grid.len()];
    for (j, obj) in layout.objects.iter().enumerate() {
        if !keep(obj) {
            continue;
        }
        let area = obj.bbox.area();
        for p in patch_membership(&obj.bbox, grid) {
            // Later objects win area ties.
            match best[p] {
                Some(k) if layout.objects[k].bbox.area() < area => {}
                _ => best[p] = Some(j),
            }
        }
    }
    best
}

/// Owner of every patch: the smallest covering instance, or `Stuff`.
pub fn assign_patch_owner(layout: &Layout, grid: PatchGrid, categories: &CategoryTable) -> Vec<Owner> {
    smallest_cover(layout, grid, |o| categories.kind(o.category) == Some(CategoryKind::Instance))
        .into_iter()
        .map(|o| o.map_or(Owner::Stuff, Owner::Instance))
        .collect()
}

/// Category painted at every patch: the owning instance's category, or for
/// stuff patches the smallest covering stuff object's category. `None` when no
/// object covers the patch.
pub fn patch_categories(layout: &Layout, grid: PatchGrid, categories: &CategoryTable) -> Vec<Option<usize>> {
    let owners = assign_patch_owner(layout, grid, categories);
    let stuff = smallest_cover(layout, grid, |o| categories.kind(o.category) == Some(CategoryKind::Stuff));
    owners
        .iter()
        .zip(stuff)
        .map(|(owner, s)| match owner {
            Owner::Instance(j) => Some(layout.objects[*j].category),
            Owner::Stuff => s.map(|k| layout.objects[k].category),
        })
        .collect()
}
