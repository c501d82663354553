//! Synthetic attribute-edit retrieval data.
//!
//! An image is a `g × g` grid of cells; each cell holds one colored shape
//! drawn on a `P × P` pixel block over a black background. A modification
//! text names one `(color, shape)` pair and either a new color or a new shape;
//! applying it changes every cell holding that pair and nothing else.
//!
//! Images come in families: a base image plus edited variants of it, each
//! variant being the target of one query whose reference is the base. All
//! grids in a dataset are distinct, so every query has exactly one correct
//! gallery image.

use std::collections::{BTreeMap, HashSet};

use rand::seq::IndexedRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::dataset::{Dataset, DatasetInfo, ManifestEntry, Split};
use crate::error::{Error, Result};
use crate::tensor::Tensor;
use crate::vocab::{Pos, Vocabulary, END_TOKEN, START_TOKEN};

pub const COLORS: &[(&str, [f64; 3])] = &[
    ("red", [1.0, 0.0, 0.0]),
    ("green", [0.0, 1.0, 0.0]),
    ("blue", [0.0, 0.0, 1.0]),
    ("yellow", [1.0, 1.0, 0.0]),
    ("cyan", [0.0, 1.0, 1.0]),
    ("magenta", [1.0, 0.0, 1.0]),
];

pub const SHAPES: &[&str] = &["square", "circle", "diamond", "cross"];

const PLACEHOLDERS: &[&str] = &["color", "shape", "new_color", "new_shape"];

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SyntheticSpec {
    /// Cells per image side.
    pub grid: usize,
    /// Pixels per cell side.
    pub patch: usize,
    pub colors: Vec<String>,
    pub shapes: Vec<String>,
    /// Whitespace-separated words and `{color}`, `{shape}`, `{new_color}`,
    /// `{new_shape}` placeholders.
    pub templates: Vec<String>,
    /// Images per family: one base plus `family_size − 1` edited targets.
    pub family_size: usize,
    pub train_queries: usize,
    pub val_gallery: usize,
    pub test_gallery: usize,
    pub seed: u64,
}

impl Default for SyntheticSpec {
    fn default() -> Self {
        Self {
            grid: 4,
            patch: 4,
            colors: COLORS.iter().map(|(c, _)| c.to_string()).collect(),
            shapes: SHAPES.iter().map(|s| s.to_string()).collect(),
            templates: vec![
                "change {color} {shape} to {new_color}".into(),
                "replace {color} {shape} with {new_shape}".into(),
            ],
            family_size: 20,
            train_queries: 500,
            val_gallery: 100,
            test_gallery: 100,
            seed: 0,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
enum EditKind {
    Color,
    Shape,
}

#[derive(Clone, Debug, PartialEq, Eq)]
enum Piece {
    Word(String),
    Slot(&'static str),
}

#[derive(Clone, Debug)]
struct Template {
    pieces: Vec<Piece>,
    kind: EditKind,
}

impl Template {
    fn parse(text: &str) -> Result<Self> {
        let mut pieces = Vec::new();
        for w in text.split_whitespace() {
            if let Some(name) = w.strip_prefix('{').and_then(|r| r.strip_suffix('}')) {
                let slot = PLACEHOLDERS
                    .iter()
                    .find(|p| **p == name)
                    .ok_or_else(|| Error::invalid(format!("template {text:?} references unknown attribute {{{name}}}")))?;
                pieces.push(Piece::Slot(slot));
            } else if w.contains(['{', '}']) {
                return Err(Error::invalid(format!("malformed placeholder {w:?} in template {text:?}")));
            } else {
                pieces.push(Piece::Word(w.to_string()));
            }
        }
        let has = |s: &str| pieces.contains(&Piece::Slot(PLACEHOLDERS.iter().find(|p| **p == s).unwrap()));
        if !has("color") || !has("shape") {
            return Err(Error::invalid(format!("template {text:?} must name both {{color}} and {{shape}}")));
        }
        let kind = match (has("new_color"), has("new_shape")) {
            (true, false) => EditKind::Color,
            (false, true) => EditKind::Shape,
            _ => {
                return Err(Error::invalid(format!(
                    "template {text:?} must contain exactly one of {{new_color}} and {{new_shape}}"
                )))
            }
        };
        Ok(Self { pieces, kind })
    }
}

/// A cell: `(color index, shape index)` into the spec's attribute lists.
pub type Cell = (usize, usize);

/// Row-major `grid × grid` cells.
pub type CellGrid = Vec<Cell>;

/// Pixel mask of a built-in shape on a `p × p` block, row-major.
pub fn shape_mask(shape: &str, p: usize) -> Result<Vec<bool>> {
    let mut m = Vec::with_capacity(p * p);
    for y in 0..p {
        for x in 0..p {
            let v = (y as f64 + 0.5) / p as f64 - 0.5;
            let u = (x as f64 + 0.5) / p as f64 - 0.5;
            m.push(match shape {
                "square" => true,
                "circle" => u * u + v * v <= 0.16,
                "diamond" => u.abs() + v.abs() <= 0.4,
                "cross" => (u.abs() - v.abs()).abs() < 0.1,
                other => return Err(Error::invalid(format!("unknown shape {other:?}"))),
            });
        }
    }
    Ok(m)
}

pub fn color_rgb(name: &str) -> Result<[f64; 3]> {
    COLORS
        .iter()
        .find(|(c, _)| *c == name)
        .map(|(_, rgb)| *rgb)
        .ok_or_else(|| Error::invalid(format!("unknown color {name:?}")))
}

/// Validated spec with resolved attributes and parsed templates.
pub struct Generator {
    spec: SyntheticSpec,
    rgb: Vec<[f64; 3]>,
    masks: Vec<Vec<bool>>,
    templates: Vec<Template>,
}

impl Generator {
    pub fn new(spec: SyntheticSpec) -> Result<Self> {
        if spec.grid == 0 || spec.patch == 0 {
            return Err(Error::invalid("grid and patch must be positive"));
        }
        if spec.colors.len() < 2 || spec.shapes.len() < 2 {
            return Err(Error::invalid("at least two colors and two shapes are required"));
        }
        if spec.family_size < 2 {
            return Err(Error::invalid("family_size must be >= 2"));
        }
        let rgb = spec.colors.iter().map(|c| color_rgb(c)).collect::<Result<Vec<_>>>()?;
        let masks = spec
            .shapes
            .iter()
            .map(|s| shape_mask(s, spec.patch))
            .collect::<Result<Vec<_>>>()?;
        for i in 0..masks.len() {
            for j in 0..i {
                if masks[i] == masks[j] {
                    return Err(Error::invalid(format!(
                        "shapes {:?} and {:?} render identically at patch size {}",
                        spec.shapes[i], spec.shapes[j], spec.patch
                    )));
                }
            }
        }
        let templates = spec
            .templates
            .iter()
            .map(|t| Template::parse(t))
            .collect::<Result<Vec<_>>>()?;
        for kind in [EditKind::Color, EditKind::Shape] {
            if !templates.iter().any(|t| t.kind == kind) {
                return Err(Error::invalid(format!("no template covers {kind:?} edits")));
            }
        }
        Ok(Self {
            spec,
            rgb,
            masks,
            templates,
        })
    }

    pub fn spec(&self) -> &SyntheticSpec {
        &self.spec
    }

    /// `[CLS]`, `[END]`, template words in first-seen order, colors (ADJ),
    /// shapes (NOUN).
    pub fn vocabulary(&self) -> Result<Vocabulary> {
        let mut entries = vec![
            (START_TOKEN.to_string(), Pos::Other),
            (END_TOKEN.to_string(), Pos::Other),
        ];
        for t in &self.templates {
            for p in &t.pieces {
                if let Piece::Word(w) = p {
                    if !entries.iter().any(|(e, _)| e == w) {
                        entries.push((w.clone(), Pos::Other));
                    }
                }
            }
        }
        entries.extend(self.spec.colors.iter().map(|c| (c.clone(), Pos::Adjective)));
        entries.extend(self.spec.shapes.iter().map(|s| (s.clone(), Pos::Noun)));
        Vocabulary::new(entries)
    }

    pub fn render(&self, grid: &CellGrid) -> Tensor {
        let (g, p) = (self.spec.grid, self.spec.patch);
        let side = g * p;
        let mut data = vec![0.0; side * side * 3];
        for (k, &(c, s)) in grid.iter().enumerate() {
            let (gr, gc) = (k / g, k % g);
            for y in 0..p {
                for x in 0..p {
                    if self.masks[s][y * p + x] {
                        let px = ((gr * p + y) * side + gc * p + x) * 3;
                        data[px..px + 3].copy_from_slice(&self.rgb[c]);
                    }
                }
            }
        }
        Tensor::from_parts(vec![side, side, 3], data)
    }

    fn random_grid(&self, rng: &mut ChaCha8Rng) -> CellGrid {
        let n = self.spec.grid * self.spec.grid;
        (0..n)
            .map(|_| {
                (
                    rng.random_range(0..self.spec.colors.len()),
                    rng.random_range(0..self.spec.shapes.len()),
                )
            })
            .collect()
    }

    /// Draws one edit of `grid`: the edited grid and its text.
    fn random_edit(&self, grid: &CellGrid, rng: &mut ChaCha8Rng) -> (CellGrid, String) {
        let (c, s) = grid[rng.random_range(0..grid.len())];
        let t = self.templates.choose(rng).expect("templates nonempty");
        let (nc, ns) = match t.kind {
            EditKind::Color => (other_index(c, self.spec.colors.len(), rng), s),
            EditKind::Shape => (c, other_index(s, self.spec.shapes.len(), rng)),
        };
        let edited = grid
            .iter()
            .map(|&cell| if cell == (c, s) { (nc, ns) } else { cell })
            .collect();
        let words: Vec<&str> = t
            .pieces
            .iter()
            .map(|p| match p {
                Piece::Word(w) => w.as_str(),
                Piece::Slot("color") => &self.spec.colors[c],
                Piece::Slot("shape") => &self.spec.shapes[s],
                Piece::Slot("new_color") => &self.spec.colors[nc],
                Piece::Slot(_) => &self.spec.shapes[ns],
            })
            .collect();
        (edited, words.join(" "))
    }

    /// One family: the base grid and `family_size − 1` `(target grid, text)`
    /// edits, all grids unseen so far (recorded into `seen`).
    fn family(&self, rng: &mut ChaCha8Rng, seen: &mut HashSet<CellGrid>) -> Result<(CellGrid, Vec<(CellGrid, String)>)> {
        const ATTEMPTS: usize = 10_000;
        let base = (0..ATTEMPTS)
            .map(|_| self.random_grid(rng))
            .find(|g| !seen.contains(g))
            .ok_or_else(|| Error::invalid("could not draw an unused base grid"))?;
        seen.insert(base.clone());
        let mut edits = Vec::with_capacity(self.spec.family_size - 1);
        let mut attempts = 0;
        while edits.len() < self.spec.family_size - 1 {
            attempts += 1;
            if attempts > ATTEMPTS {
                return Err(Error::invalid(format!(
                    "could not find {} distinct edits of a base grid; lower family_size",
                    self.spec.family_size - 1
                )));
            }
            let (g, text) = self.random_edit(&base, rng);
            if seen.insert(g.clone()) {
                edits.push((g, text));
            }
        }
        Ok((base, edits))
    }

    pub fn generate(&self) -> Result<Dataset> {
        let spec = &self.spec;
        let vocab = self.vocabulary()?;
        let per_family = spec.family_size - 1;
        let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
        let mut seen = HashSet::new();
        let mut images = Vec::new();
        let mut queries = Vec::new();
        let mut galleries = BTreeMap::new();

        let plan = [
            (Split::Train, spec.train_queries.div_ceil(per_family), Some(spec.train_queries)),
            (Split::Val, spec.val_gallery / spec.family_size, None),
            (Split::Test, spec.test_gallery / spec.family_size, None),
        ];
        for (split, families, query_cap) in plan {
            if split != Split::Train && !spec_gallery(spec, split).is_multiple_of(spec.family_size) {
                return Err(Error::invalid(format!(
                    "{split} gallery size must be a multiple of family_size {}",
                    spec.family_size
                )));
            }
            let mut gallery = Vec::new();
            let mut split_queries = 0;
            for _ in 0..families {
                let (base, edits) = self.family(&mut rng, &mut seen)?;
                let base_id = images.len();
                images.push(self.render(&base));
                gallery.push(base_id);
                for (grid, text) in edits {
                    let target_id = images.len();
                    images.push(self.render(&grid));
                    gallery.push(target_id);
                    if query_cap.is_some_and(|cap| split_queries >= cap) {
                        continue;
                    }
                    let tokens = vocab.encode(&text)?;
                    queries.push(ManifestEntry {
                        query_id: queries.len(),
                        split,
                        reference_id: base_id,
                        target_id,
                        text,
                        tokens: tokens.ids().to_vec(),
                    });
                    split_queries += 1;
                }
            }
            galleries.insert(split, gallery);
        }

        let side = spec.grid * spec.patch;
        Ok(Dataset {
            vocab,
            images,
            queries,
            info: DatasetInfo {
                image_shape: [side, side, 3],
                patch: spec.patch,
                galleries,
                spec: Some(spec.clone()),
            },
        })
    }
}

fn spec_gallery(spec: &SyntheticSpec, split: Split) -> usize {
    match split {
        Split::Train => 0,
        Split::Val => spec.val_gallery,
        Split::Test => spec.test_gallery,
    }
}

fn other_index(current: usize, n: usize, rng: &mut ChaCha8Rng) -> usize {
    let k = rng.random_range(0..n - 1);
    if k >= current {
        k + 1
    } else {
        k
    }
}

pub fn generate_synthetic(spec: SyntheticSpec) -> Result<Dataset> {
    Generator::new(spec)?.generate()
}
