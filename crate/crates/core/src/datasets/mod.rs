//! Biased / shifted splits of procedurally rendered images and the emulated
//! human feedback set.

mod io;
pub mod render;

use std::fmt;
use std::str::FromStr;

use rand::seq::SliceRandom;
use rand::{Rng, RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::{Error, Result};

pub use io::{read_dataset, read_feedback, write_dataset, write_feedback, IMAGES_MAGIC};
pub use render::{nearest_palette, palette, palette_oracle, render_sample, render_with_mask, Rgb};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Family {
    Glyphs10,
    Sprites,
    Scene,
    /// Pre-rendered data imported in the on-disk format; has no renderer.
    External,
}

impl Family {
    pub fn has_renderer(self) -> bool {
        self != Family::External
    }
}

impl FromStr for Family {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "glyphs10" => Ok(Family::Glyphs10),
            "sprites" => Ok(Family::Sprites),
            "scene" => Ok(Family::Scene),
            "external" => Ok(Family::External),
            other => Err(Error::invalid(format!(
                "unknown family `{other}` (expected glyphs10, sprites or scene)"
            ))),
        }
    }
}

impl fmt::Display for Family {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let s = match self {
            Family::Glyphs10 => "glyphs10",
            Family::Sprites => "sprites",
            Family::Scene => "scene",
            Family::External => "external",
        };
        f.write_str(s)
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Factor {
    pub name: String,
    pub cardinality: usize,
    pub is_target: bool,
}

impl Factor {
    fn new(name: &str, cardinality: usize, is_target: bool) -> Self {
        Factor { name: name.to_string(), cardinality, is_target }
    }
}

/// Named discrete factors of variation plus image geometry.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct FactorSpec {
    pub family: Family,
    pub factors: Vec<Factor>,
    /// (height, width, channels)
    pub image_dims: (usize, usize, usize),
    /// Permutes the color palette of the glyph and sprite families.
    #[serde(default)]
    pub palette_seed: u64,
    /// Maximum per-sample pixel shift of glyphs, drawn from the render seed.
    #[serde(default)]
    pub jitter: u32,
}

impl FactorSpec {
    pub fn new(
        family: Family,
        factors: Vec<Factor>,
        image_dims: (usize, usize, usize),
        palette_seed: u64,
    ) -> Result<Self> {
        let spec = FactorSpec { family, factors, image_dims, palette_seed, jitter: 0 };
        spec.validate()?;
        Ok(spec)
    }

    pub fn glyphs10(palette_seed: u64) -> Self {
        FactorSpec {
            family: Family::Glyphs10,
            factors: vec![Factor::new("shape", 10, true), Factor::new("color", 10, true)],
            image_dims: (28, 28, 3),
            palette_seed,
            jitter: 0,
        }
    }

    pub fn sprites(palette_seed: u64) -> Self {
        FactorSpec {
            family: Family::Sprites,
            factors: vec![
                Factor::new("shape", 3, true),
                Factor::new("color", 3, true),
                Factor::new("x", 8, false),
                Factor::new("y", 8, false),
                Factor::new("scale", 4, false),
            ],
            image_dims: (64, 64, 3),
            palette_seed,
            jitter: 0,
        }
    }

    pub fn scene() -> Self {
        FactorSpec {
            family: Family::Scene,
            factors: vec![
                Factor::new("shape", 4, true),
                Factor::new("color", 4, true),
                Factor::new("wall", 4, false),
                Factor::new("floor", 4, false),
                Factor::new("scale", 4, false),
            ],
            image_dims: (64, 64, 3),
            palette_seed: 0,
            jitter: 0,
        }
    }

    pub fn for_family(family: Family, palette_seed: u64) -> Result<Self> {
        match family {
            Family::Glyphs10 => Ok(Self::glyphs10(palette_seed)),
            Family::Sprites => Ok(Self::sprites(palette_seed)),
            Family::Scene => Ok(Self::scene()),
            Family::External => Err(Error::invalid("external specs come from imported meta.json")),
        }
    }

    pub fn validate(&self) -> Result<()> {
        let targets = self.factors.iter().filter(|f| f.is_target).count();
        if targets < 2 {
            return Err(Error::invalid(format!("need at least 2 target factors, got {targets}")));
        }
        for (i, f) in self.factors.iter().enumerate() {
            if f.cardinality < 2 {
                return Err(Error::invalid(format!("factor `{}` has cardinality < 2", f.name)));
            }
            if self.factors[..i].iter().any(|g| g.name == f.name) {
                return Err(Error::invalid(format!("duplicate factor name `{}`", f.name)));
            }
        }
        let (h, w, c) = self.image_dims;
        if h == 0 || w == 0 || c == 0 {
            return Err(Error::invalid("image dimensions must be positive"));
        }
        Ok(())
    }

    pub fn index_of(&self, name: &str) -> Option<usize> {
        self.factors.iter().position(|f| f.name == name)
    }

    pub fn require_index(&self, name: &str) -> Result<usize> {
        self.index_of(name).ok_or_else(|| Error::invalid(format!("unknown factor `{name}`")))
    }

    pub fn cardinality(&self, name: &str) -> Result<usize> {
        Ok(self.factors[self.require_index(name)?].cardinality)
    }

    pub fn target_names(&self) -> Vec<String> {
        self.factors.iter().filter(|f| f.is_target).map(|f| f.name.clone()).collect()
    }

    pub fn num_factors(&self) -> usize {
        self.factors.len()
    }

    pub fn pixels_per_image(&self) -> usize {
        let (h, w, c) = self.image_dims;
        h * w * c
    }

    pub fn channels(&self) -> usize {
        self.image_dims.2
    }

    /// One uniform draw of every factor.
    pub fn sample_values<R: Rng>(&self, rng: &mut R) -> Vec<usize> {
        self.factors.iter().map(|f| rng.random_range(0..f.cardinality)).collect()
    }
}

/// Injective coupling `b = mapping[(a + offset) mod K]` between two target
/// factors of equal cardinality K.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct BiasRule {
    pub factor_a: String,
    pub factor_b: String,
    pub mapping: Vec<usize>,
    pub offset: i64,
}

impl BiasRule {
    pub fn new(factor_a: &str, factor_b: &str, mapping: Vec<usize>, offset: i64) -> Result<Self> {
        let rule = BiasRule {
            factor_a: factor_a.to_string(),
            factor_b: factor_b.to_string(),
            mapping,
            offset,
        };
        rule.check_bijection()?;
        Ok(rule)
    }

    /// Identity coupling (value k of `a` always appears with value k of `b`).
    pub fn diagonal(spec: &FactorSpec, factor_a: &str, factor_b: &str) -> Result<Self> {
        let k = spec.cardinality(factor_a)?;
        let rule = Self::new(factor_a, factor_b, (0..k).collect(), 0)?;
        rule.check_against(spec)?;
        Ok(rule)
    }

    /// `b = K - 1 - a` composed with this rule's mapping.
    pub fn reversed(&self) -> Self {
        let k = self.mapping.len();
        let mapping = (0..k).map(|a| self.value_for(k - 1 - a)).collect();
        BiasRule { mapping, offset: 0, ..self.clone() }
    }

    pub fn shifted(&self, by: i64) -> Self {
        BiasRule { offset: self.offset + by, ..self.clone() }
    }

    pub fn value_for(&self, a: usize) -> usize {
        let k = self.mapping.len() as i64;
        self.mapping[((a as i64 + self.offset).rem_euclid(k)) as usize]
    }

    /// Every (a, b) pair this rule admits.
    pub fn combinations(&self) -> Vec<(usize, usize)> {
        (0..self.mapping.len()).map(|a| (a, self.value_for(a))).collect()
    }

    fn check_bijection(&self) -> Result<()> {
        let k = self.mapping.len();
        let mut seen = vec![false; k];
        for &m in &self.mapping {
            if m >= k || seen[m] {
                return Err(Error::invalid("bias rule mapping is not a bijection"));
            }
            seen[m] = true;
        }
        Ok(())
    }

    pub fn check_against(&self, spec: &FactorSpec) -> Result<()> {
        self.check_bijection()?;
        let ka = spec.cardinality(&self.factor_a)?;
        let kb = spec.cardinality(&self.factor_b)?;
        if ka != kb || ka != self.mapping.len() {
            return Err(Error::invalid(format!(
                "bias rule cardinality mismatch: `{}` has {ka}, `{}` has {kb}, mapping has {}",
                self.factor_a,
                self.factor_b,
                self.mapping.len()
            )));
        }
        if self.factor_a == self.factor_b {
            return Err(Error::invalid("bias rule must couple two distinct factors"));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum SplitTag {
    Train,
    Test,
    /// Unbiased full-spectrum data for the disentanglement metrics.
    Eval,
    /// Image pool referenced by a feedback set.
    Feedback,
}

/// N images (row-major H×W×C bytes) with their integer factor codes.
#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub spec: FactorSpec,
    pub images: Vec<u8>,
    /// N × num_factors, row-major.
    pub factors: Vec<u32>,
    pub split_tag: SplitTag,
    pub rule: Option<BiasRule>,
    pub seed: u64,
}

impl Dataset {
    pub fn len(&self) -> usize {
        self.factors.len() / self.spec.num_factors()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn image(&self, n: usize) -> &[u8] {
        let p = self.spec.pixels_per_image();
        &self.images[n * p..(n + 1) * p]
    }

    pub fn factor_row(&self, n: usize) -> &[u32] {
        let f = self.spec.num_factors();
        &self.factors[n * f..(n + 1) * f]
    }

    pub fn factor_value(&self, n: usize, factor: usize) -> usize {
        self.factors[n * self.spec.num_factors() + factor] as usize
    }

    /// Rows whose every factor is in range and that satisfy the bias rule.
    pub fn check_invariants(&self) -> Result<()> {
        let nf = self.spec.num_factors();
        if self.factors.len() % nf != 0 || self.images.len() != self.len() * self.spec.pixels_per_image() {
            return Err(Error::invalid("dataset arrays have inconsistent sizes"));
        }
        for n in 0..self.len() {
            for (i, f) in self.spec.factors.iter().enumerate() {
                if self.factor_value(n, i) >= f.cardinality {
                    return Err(Error::invalid(format!("row {n}: factor `{}` out of range", f.name)));
                }
            }
        }
        if let Some(rule) = &self.rule {
            let a = self.spec.require_index(&rule.factor_a)?;
            let b = self.spec.require_index(&rule.factor_b)?;
            for n in 0..self.len() {
                if self.factor_value(n, b) != rule.value_for(self.factor_value(n, a)) {
                    return Err(Error::invalid(format!("row {n} violates the bias rule")));
                }
            }
        }
        Ok(())
    }

    /// Subset of rows in the given order.
    pub fn select(&self, rows: &[usize]) -> Dataset {
        let p = self.spec.pixels_per_image();
        let mut images = Vec::with_capacity(rows.len() * p);
        let mut factors = Vec::with_capacity(rows.len() * self.spec.num_factors());
        for &r in rows {
            images.extend_from_slice(self.image(r));
            factors.extend_from_slice(self.factor_row(r));
        }
        Dataset { images, factors, ..self.clone() }
    }
}

/// Renders `n` samples. Every factor is drawn uniformly and independently,
/// except `rule.factor_b`, which the rule forces. `rule = None` yields the
/// unbiased full spectrum.
pub fn generate_split(
    spec: &FactorSpec,
    rule: Option<&BiasRule>,
    n: usize,
    seed: u64,
    split_tag: SplitTag,
) -> Result<Dataset> {
    spec.validate()?;
    if n == 0 {
        return Err(Error::invalid("cannot generate an empty split (n = 0)"));
    }
    let coupling = match rule {
        Some(r) => {
            r.check_against(spec)?;
            Some((spec.require_index(&r.factor_a)?, spec.require_index(&r.factor_b)?))
        }
        None => None,
    };
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut images = Vec::with_capacity(n * spec.pixels_per_image());
    let mut factors = Vec::with_capacity(n * spec.num_factors());
    for _ in 0..n {
        let mut values = spec.sample_values(&mut rng);
        if let (Some((a, b)), Some(r)) = (coupling, rule) {
            values[b] = r.value_for(values[a]);
        }
        let sample_seed = rng.next_u64();
        images.extend(render_sample(spec, &values, sample_seed)?);
        factors.extend(values.iter().map(|&v| v as u32));
    }
    Ok(Dataset {
        spec: spec.clone(),
        images,
        factors,
        split_tag,
        rule: rule.cloned(),
        seed,
    })
}

/// How shared values are chosen for feedback pairs.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum FeedbackGeometry {
    /// One fixed anchor value per target factor: the first target is pinned
    /// to value 0 (a row of the shape × color grid), every other target to
    /// its last value (a column).
    #[default]
    Anchor,
    /// Shared value drawn uniformly per pair.
    Random,
}

impl FromStr for FeedbackGeometry {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "anchor" => Ok(FeedbackGeometry::Anchor),
            "random" => Ok(FeedbackGeometry::Random),
            other => Err(Error::invalid(format!("unknown feedback geometry `{other}`"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct MatchPair {
    pub idx_a: usize,
    pub idx_b: usize,
    pub shared_factor: String,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct FactorLabel {
    pub idx: usize,
    pub factor: String,
    pub value: usize,
}

/// Match pairs and sparse labels over a pool of feedback images.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct FeedbackSet {
    pub pairs: Vec<MatchPair>,
    pub labels: Vec<FactorLabel>,
    pub source_dataset_id: String,
}

impl FeedbackSet {
    pub fn empty() -> Self {
        FeedbackSet { pairs: Vec::new(), labels: Vec::new(), source_dataset_id: String::new() }
    }

    pub fn is_empty(&self) -> bool {
        self.pairs.is_empty() && self.labels.is_empty()
    }

    pub fn referenced_samples(&self) -> usize {
        let mut idx: Vec<usize> = self
            .pairs
            .iter()
            .flat_map(|p| [p.idx_a, p.idx_b])
            .chain(self.labels.iter().map(|l| l.idx))
            .collect();
        idx.sort_unstable();
        idx.dedup();
        idx.len()
    }

    pub fn pairs_for<'a>(&'a self, factor: &'a str) -> impl Iterator<Item = &'a MatchPair> + 'a {
        self.pairs.iter().filter(move |p| p.shared_factor == factor)
    }
}

/// The feedback set together with the images it indexes.
#[derive(Debug, Clone, PartialEq)]
pub struct Feedback {
    pub set: FeedbackSet,
    pub pool: Dataset,
}

impl Feedback {
    /// Every pair agrees on its shared factor and every label matches the
    /// generating ground truth.
    pub fn check_invariants(&self) -> Result<()> {
        let spec = &self.pool.spec;
        let n = self.pool.len();
        for p in &self.set.pairs {
            let f = spec.require_index(&p.shared_factor)?;
            if p.idx_a >= n || p.idx_b >= n {
                return Err(Error::invalid("pair index out of range"));
            }
            if self.pool.factor_value(p.idx_a, f) != self.pool.factor_value(p.idx_b, f) {
                return Err(Error::invalid(format!(
                    "pair ({}, {}) disagrees on `{}`",
                    p.idx_a, p.idx_b, p.shared_factor
                )));
            }
        }
        for l in &self.set.labels {
            let f = spec.require_index(&l.factor)?;
            if l.idx >= n || self.pool.factor_value(l.idx, f) != l.value {
                return Err(Error::invalid(format!("label for sample {} is wrong", l.idx)));
            }
        }
        Ok(())
    }
}

/// Emulates a human annotator: for every target factor, `budget / (2·|targets|)`
/// pairs that share that factor while every other factor is drawn
/// independently for both members, plus a label of every target factor for
/// each pair member.
pub fn build_feedback(
    spec: &FactorSpec,
    budget: usize,
    targets: &[String],
    seed: u64,
    geometry: FeedbackGeometry,
) -> Result<Feedback> {
    spec.validate()?;
    if targets.is_empty() {
        return Err(Error::invalid("feedback needs at least one target factor"));
    }
    if budget < 2 * targets.len() {
        return Err(Error::invalid(format!(
            "feedback budget {budget} too small for {} targets (need ≥ {})",
            targets.len(),
            2 * targets.len()
        )));
    }
    let target_idx: Vec<usize> =
        targets.iter().map(|t| spec.require_index(t)).collect::<Result<_>>()?;
    let all_targets: Vec<usize> = spec
        .factors
        .iter()
        .enumerate()
        .filter(|(_, f)| f.is_target)
        .map(|(i, _)| i)
        .collect();
    let pairs_per_target = budget / (2 * targets.len());

    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut images = Vec::new();
    let mut factors = Vec::new();
    let mut pairs = Vec::new();
    let mut labels = Vec::new();
    let mut next = 0usize;
    for (t, (&fi, name)) in target_idx.iter().zip(targets).enumerate() {
        let card = spec.factors[fi].cardinality;
        let anchor = if t == 0 { 0 } else { card - 1 };
        for _ in 0..pairs_per_target {
            let shared = match geometry {
                FeedbackGeometry::Anchor => anchor,
                FeedbackGeometry::Random => rng.random_range(0..card),
            };
            for _ in 0..2 {
                let mut values = spec.sample_values(&mut rng);
                values[fi] = shared;
                let sample_seed = rng.next_u64();
                images.extend(render_sample(spec, &values, sample_seed)?);
                factors.extend(values.iter().map(|&v| v as u32));
                for &ti in &all_targets {
                    labels.push(FactorLabel {
                        idx: next,
                        factor: spec.factors[ti].name.clone(),
                        value: values[ti],
                    });
                }
                next += 1;
            }
            pairs.push(MatchPair { idx_a: next - 2, idx_b: next - 1, shared_factor: name.clone() });
        }
    }
    let pool = Dataset {
        spec: spec.clone(),
        images,
        factors,
        split_tag: SplitTag::Feedback,
        rule: None,
        seed,
    };
    let set = FeedbackSet {
        pairs,
        labels,
        source_dataset_id: format!("{}-feedback-{seed}", spec.family),
    };
    Ok(Feedback { set, pool })
}

/// Deterministic shuffled index order for a dataset of size `n`.
pub fn shuffled_indices<R: Rng>(n: usize, rng: &mut R) -> Vec<usize> {
    let mut idx: Vec<usize> = (0..n).collect();
    idx.shuffle(rng);
    idx
}
