//! The synthetic scene world: object catalog, prompt grammar and the
//! conditional Gaussian-mixture image distribution.
//!
//! A prompt names up to three target objects. Each object materializes
//! independently with its faithfulness probability `q_o`, at one of its
//! candidate positions chosen uniformly. Every presence/position combination
//! becomes one isotropic Gaussian component whose mean is the sum of the
//! placed blob templates. Omitted objects are the hallucinations the
//! detector has to anticipate.

use std::collections::HashSet;
use std::fmt;

use crate::error::{Error, Result};
use crate::grid::Grid;

pub const DEFAULT_GRID: usize = 16;
pub const DEFAULT_COMPONENT_STD: f64 = 0.05;
pub const MAX_TARGETS: usize = 3;

/// Pixel coordinates of a template center.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Position {
    pub row: usize,
    pub col: usize,
}

impl Position {
    pub const fn new(row: usize, col: usize) -> Self {
        Self { row, col }
    }
}

impl fmt::Display for Position {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}:{}", self.row, self.col)
    }
}

/// One catalog entry: an isotropic Gaussian blob that may appear at any of
/// its candidate positions.
#[derive(Debug, Clone, PartialEq)]
pub struct ObjectSpec {
    pub id: String,
    pub sigma: f64,
    pub positions: Vec<Position>,
}

impl ObjectSpec {
    /// The blob centered at `pos`, peak normalized to exactly 1.
    pub fn placed_template(&self, pos: Position, size: usize) -> Grid {
        let two_var = 2.0 * self.sigma * self.sigma;
        let raw = Grid::from_fn(size, size, |r, c| {
            let dr = r as f64 - pos.row as f64;
            let dc = c as f64 - pos.col as f64;
            (-(dr * dr + dc * dc) / two_var).exp()
        });
        let peak = raw.max();
        if peak > 0.0 {
            raw.map(|v| v / peak)
        } else {
            raw
        }
    }

    fn validate(&self, size: usize) -> Result<()> {
        if !(self.sigma.is_finite() && self.sigma > 0.0) {
            return Err(Error::InvalidConfig(format!(
                "object `{}` has non-positive sigma",
                self.id
            )));
        }
        if self.positions.is_empty() {
            return Err(Error::InvalidConfig(format!(
                "object `{}` has no candidate positions",
                self.id
            )));
        }
        if let Some(p) = self
            .positions
            .iter()
            .find(|p| p.row >= size || p.col >= size)
        {
            return Err(Error::InvalidConfig(format!(
                "object `{}` position {p} outside a {size}x{size} grid",
                self.id
            )));
        }
        Ok(())
    }
}

/// Closed vocabulary of objects.
#[derive(Debug, Clone, PartialEq)]
pub struct Catalog {
    objects: Vec<ObjectSpec>,
}

const DEFAULT_SUBJECTS: [&str; 10] = [
    "cat", "dog", "horse", "dolphin", "bear", "rabbit", "fox", "owl", "zebra", "lion",
];
const DEFAULT_ITEMS: [&str; 6] = ["bench", "umbrella", "clock", "kite", "bicycle", "vase"];
const BLOB_SIGMAS: [f64; 3] = [1.0, 1.5, 2.0];

impl Catalog {
    pub fn new(objects: Vec<ObjectSpec>) -> Result<Self> {
        if objects.is_empty() {
            return Err(Error::EmptyCatalog);
        }
        let mut seen = HashSet::new();
        for o in &objects {
            if !seen.insert(o.id.as_str()) {
                return Err(Error::InvalidConfig(format!("duplicate object `{}`", o.id)));
            }
            if o.id.is_empty() || o.id.chars().any(|c| !c.is_ascii_alphanumeric() && c != '_') {
                return Err(Error::InvalidConfig(format!("bad object id `{}`", o.id)));
            }
        }
        Ok(Self { objects })
    }

    /// Built-in vocabulary: ten subjects that live in the left half of the
    /// frame and six items that live in the right half, two candidate
    /// positions each, blob widths cycling through 1.0, 1.5 and 2.0 px.
    pub fn builtin() -> Self {
        let subject_slots = [
            [Position::new(4, 4), Position::new(11, 4)],
            [Position::new(3, 4), Position::new(11, 3)],
            [Position::new(4, 3), Position::new(12, 4)],
        ];
        let item_slots = [
            [Position::new(4, 11), Position::new(11, 11)],
            [Position::new(4, 12), Position::new(12, 11)],
            [Position::new(3, 11), Position::new(11, 12)],
        ];
        let mut objects = Vec::new();
        for (i, id) in DEFAULT_SUBJECTS.iter().enumerate() {
            objects.push(ObjectSpec {
                id: (*id).to_string(),
                sigma: BLOB_SIGMAS[objects.len() % BLOB_SIGMAS.len()],
                positions: subject_slots[i % subject_slots.len()].to_vec(),
            });
        }
        for (i, id) in DEFAULT_ITEMS.iter().enumerate() {
            objects.push(ObjectSpec {
                id: (*id).to_string(),
                sigma: BLOB_SIGMAS[objects.len() % BLOB_SIGMAS.len()],
                positions: item_slots[i % item_slots.len()].to_vec(),
            });
        }
        Self { objects }
    }

    pub fn default_subjects() -> Vec<String> {
        DEFAULT_SUBJECTS.iter().map(|s| s.to_string()).collect()
    }

    pub fn default_items() -> Vec<String> {
        DEFAULT_ITEMS.iter().map(|s| s.to_string()).collect()
    }

    /// Parses the plain-text table: `id sigma row:col,row:col,...` per line.
    /// Blank lines and `#` comments are skipped.
    pub fn parse(text: &str) -> Result<Self> {
        let mut objects = Vec::new();
        for (idx, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let err = |reason: &str| Error::CatalogParse {
                line: idx + 1,
                reason: reason.to_string(),
            };
            let cols: Vec<&str> = line.split_whitespace().collect();
            if cols.len() != 3 {
                return Err(err("expected `id sigma positions`"));
            }
            let sigma: f64 = cols[1].parse().map_err(|_| err("sigma is not a number"))?;
            let mut positions = Vec::new();
            for p in cols[2].split(',') {
                let (r, c) = p.split_once(':').ok_or_else(|| err("position must be row:col"))?;
                let row = r.trim().parse().map_err(|_| err("bad position row"))?;
                let col = c.trim().parse().map_err(|_| err("bad position column"))?;
                positions.push(Position { row, col });
            }
            objects.push(ObjectSpec {
                id: cols[0].to_string(),
                sigma,
                positions,
            });
        }
        Self::new(objects)
    }

    pub fn to_table(&self) -> String {
        let mut out = String::from("# id sigma positions(row:col)\n");
        for o in &self.objects {
            let pos: Vec<String> = o.positions.iter().map(|p| p.to_string()).collect();
            out.push_str(&format!("{} {} {}\n", o.id, o.sigma, pos.join(",")));
        }
        out
    }

    pub fn objects(&self) -> &[ObjectSpec] {
        &self.objects
    }

    pub fn get(&self, id: &str) -> Option<&ObjectSpec> {
        self.objects.iter().find(|o| o.id == id)
    }

    pub fn require(&self, id: &str) -> Result<&ObjectSpec> {
        self.get(id).ok_or_else(|| Error::UnknownObject(id.to_string()))
    }
}

/// A prompt and its ordered target set.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Prompt {
    pub text: String,
    pub targets: Vec<String>,
}

impl Prompt {
    pub fn parse(text: &str, catalog: &Catalog) -> Result<Self> {
        let targets = extract_targets(text, catalog)?;
        Ok(Self {
            text: text.to_string(),
            targets,
        })
    }

    /// Canonical rendering `a X and a Y [and a Z]`.
    pub fn render(targets: &[String]) -> String {
        targets
            .iter()
            .map(|t| format!("a {t}"))
            .collect::<Vec<_>>()
            .join(" and ")
    }
}

/// Target object extraction over the closed grammar
/// `a {X} [and a {Y} [and a {Z}]]` (articles `a`/`an`, case-insensitive).
pub fn extract_targets(text: &str, catalog: &Catalog) -> Result<Vec<String>> {
    let tokens: Vec<String> = text
        .split_whitespace()
        .map(|t| t.to_ascii_lowercase())
        .collect();
    if tokens.is_empty() {
        return Err(Error::Grammar("empty prompt".into()));
    }
    let mut targets: Vec<String> = Vec::new();
    let mut i = 0;
    loop {
        if i > 0 {
            if tokens.get(i).map(String::as_str) != Some("and") {
                return Err(Error::Grammar(format!("expected `and` in `{text}`")));
            }
            i += 1;
        }
        match tokens.get(i).map(String::as_str) {
            Some("a") | Some("an") => i += 1,
            _ => return Err(Error::Grammar(format!("expected an article in `{text}`"))),
        }
        let id = tokens
            .get(i)
            .ok_or_else(|| Error::Grammar(format!("missing object after article in `{text}`")))?;
        catalog.require(id)?;
        if targets.contains(id) {
            return Err(Error::Grammar(format!("duplicate target `{id}`")));
        }
        targets.push(id.clone());
        i += 1;
        if i == tokens.len() {
            break;
        }
        if targets.len() == MAX_TARGETS {
            return Err(Error::Grammar(format!(
                "at most {MAX_TARGETS} targets are supported"
            )));
        }
    }
    Ok(targets)
}

/// One presence/position combination of the conditional distribution.
#[derive(Debug, Clone, PartialEq)]
pub struct SceneComponent {
    /// Per target object, the chosen candidate position when present.
    pub placement: Vec<Option<usize>>,
    pub weight: f64,
    pub mean_image: Grid,
}

impl SceneComponent {
    pub fn is_present(&self, object: usize) -> bool {
        self.placement[object].is_some()
    }

    pub fn presence_pattern(&self) -> Vec<bool> {
        self.placement.iter().map(Option::is_some).collect()
    }

    pub fn all_present(&self) -> bool {
        self.placement.iter().all(Option::is_some)
    }
}

/// Conditional image distribution `p(x | prompt)`: an equal-variance
/// isotropic Gaussian mixture over rendered scenes.
#[derive(Debug, Clone, PartialEq)]
pub struct MixtureSpec {
    objects: Vec<ObjectSpec>,
    faithfulness: Vec<f64>,
    components: Vec<SceneComponent>,
    size: usize,
    variance: f64,
    /// `templates[o][j]`: object `o` placed at its candidate `j`.
    templates: Vec<Vec<Grid>>,
}

impl MixtureSpec {
    /// A free-form mixture with arbitrary component means and no target
    /// objects. Weights must be positive and sum to 1.
    pub fn custom(size: usize, variance: f64, components: Vec<(f64, Grid)>) -> Result<Self> {
        if components.is_empty() {
            return Err(Error::InvalidConfig("mixture needs at least one component".into()));
        }
        if !(variance.is_finite() && variance > 0.0) {
            return Err(Error::InvalidConfig("component variance must be positive".into()));
        }
        let total: f64 = components.iter().map(|c| c.0).sum();
        if components.iter().any(|c| !(c.0 > 0.0)) || (total - 1.0).abs() > 1e-12 {
            return Err(Error::InvalidConfig("weights must be positive and sum to 1".into()));
        }
        if components.iter().any(|c| c.1.height() != size || c.1.width() != size) {
            return Err(Error::InvalidConfig("component mean has the wrong shape".into()));
        }
        Ok(Self {
            objects: Vec::new(),
            faithfulness: Vec::new(),
            components: components
                .into_iter()
                .map(|(weight, mean_image)| SceneComponent {
                    placement: Vec::new(),
                    weight,
                    mean_image,
                })
                .collect(),
            size,
            variance,
            templates: Vec::new(),
        })
    }

    pub fn components(&self) -> &[SceneComponent] {
        &self.components
    }

    pub fn objects(&self) -> &[ObjectSpec] {
        &self.objects
    }

    pub fn targets(&self) -> Vec<String> {
        self.objects.iter().map(|o| o.id.clone()).collect()
    }

    pub fn object_index(&self, id: &str) -> Result<usize> {
        self.objects
            .iter()
            .position(|o| o.id == id)
            .ok_or_else(|| Error::UnknownObject(id.to_string()))
    }

    pub fn faithfulness(&self) -> &[f64] {
        &self.faithfulness
    }

    pub fn size(&self) -> usize {
        self.size
    }

    /// Per-pixel component variance `s²`.
    pub fn variance(&self) -> f64 {
        self.variance
    }

    pub fn template(&self, object: usize, position: usize) -> &Grid {
        &self.templates[object][position]
    }

    pub fn templates(&self, object: usize) -> &[Grid] {
        &self.templates[object]
    }
}

/// Builds the mixture with the default 16×16 grid and `s = 0.05`.
pub fn build_conditional_mixture(
    targets: &[String],
    faithfulness: &[f64],
    catalog: &Catalog,
) -> Result<MixtureSpec> {
    build_mixture_with(
        targets,
        faithfulness,
        catalog,
        DEFAULT_GRID,
        DEFAULT_COMPONENT_STD * DEFAULT_COMPONENT_STD,
    )
}

/// Enumerates every presence/position combination. Components are ordered
/// in mixed radix with the first target most significant and "absent"
/// before each candidate position; zero-weight combinations (an object with
/// `q = 1` being absent) are dropped.
pub fn build_mixture_with(
    targets: &[String],
    faithfulness: &[f64],
    catalog: &Catalog,
    size: usize,
    variance: f64,
) -> Result<MixtureSpec> {
    if targets.is_empty() {
        return Err(Error::EmptyTargets);
    }
    if faithfulness.len() != targets.len() {
        return Err(Error::InvalidConfig(format!(
            "{} faithfulness values for {} targets",
            faithfulness.len(),
            targets.len()
        )));
    }
    if let Some(&q) = faithfulness.iter().find(|q| !(**q > 0.0 && **q <= 1.0)) {
        return Err(Error::InvalidFaithfulness(q));
    }
    if !(variance.is_finite() && variance > 0.0) {
        return Err(Error::InvalidConfig("component variance must be positive".into()));
    }
    let mut objects = Vec::with_capacity(targets.len());
    for id in targets {
        let spec = catalog.require(id)?;
        spec.validate(size)?;
        if objects.iter().any(|o: &ObjectSpec| &o.id == id) {
            return Err(Error::Grammar(format!("duplicate target `{id}`")));
        }
        objects.push(spec.clone());
    }
    let templates: Vec<Vec<Grid>> = objects
        .iter()
        .map(|o| {
            o.positions
                .iter()
                .map(|&p| o.placed_template(p, size))
                .collect()
        })
        .collect();

    let mut components = Vec::new();
    let mut placement = vec![None; objects.len()];
    enumerate(
        0,
        &objects,
        faithfulness,
        &templates,
        size,
        1.0,
        &mut placement,
        &mut components,
    );
    Ok(MixtureSpec {
        objects,
        faithfulness: faithfulness.to_vec(),
        components,
        size,
        variance,
        templates,
    })
}

#[allow(clippy::too_many_arguments)]
fn enumerate(
    depth: usize,
    objects: &[ObjectSpec],
    q: &[f64],
    templates: &[Vec<Grid>],
    size: usize,
    weight: f64,
    placement: &mut Vec<Option<usize>>,
    out: &mut Vec<SceneComponent>,
) {
    if depth == objects.len() {
        if weight > 0.0 {
            let mean_image = compose(templates, placement, size);
            out.push(SceneComponent {
                placement: placement.clone(),
                weight,
                mean_image,
            });
        }
        return;
    }
    let n_pos = objects[depth].positions.len();
    placement[depth] = None;
    enumerate(
        depth + 1,
        objects,
        q,
        templates,
        size,
        weight * (1.0 - q[depth]),
        placement,
        out,
    );
    for j in 0..n_pos {
        placement[depth] = Some(j);
        enumerate(
            depth + 1,
            objects,
            q,
            templates,
            size,
            weight * q[depth] / n_pos as f64,
            placement,
            out,
        );
    }
    placement[depth] = None;
}

fn compose(templates: &[Vec<Grid>], placement: &[Option<usize>], size: usize) -> Grid {
    let mut image = Grid::zeros(size, size);
    let mut ceiling = 0.0;
    for (o, choice) in placement.iter().enumerate() {
        if let Some(j) = choice {
            image.add_scaled(&templates[o][*j], 1.0);
            ceiling += 1.0;
        }
    }
    image.map(|v| v.clamp(0.0, ceiling))
}

/// Mean image of a component: the pixelwise sum of its placed templates.
pub fn render_mean_image(mixture: &MixtureSpec, component: &SceneComponent) -> Grid {
    compose(&mixture.templates, &component.placement, mixture.size)
}

/// Probability that every target materializes.
pub fn completeness_probability(mixture: &MixtureSpec) -> f64 {
    mixture
        .components
        .iter()
        .filter(|c| c.all_present())
        .map(|c| c.weight)
        .sum()
}

/// Per-object faithfulness that yields completeness `p` for `n` independent
/// objects.
pub fn faithfulness_for_completeness(p: f64, n: usize) -> f64 {
    p.powf(1.0 / n as f64)
}
