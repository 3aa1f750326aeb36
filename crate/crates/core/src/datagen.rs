//! Synthetic expressions and datasets.
//!
//! One draw from the expression distribution is
//!
//! 1. a unary-binary tree shape ([`sample_skeleton`]),
//! 2. operators and variables assigned uniformly ([`decorate_template`]),
//!    giving a constant-free *template*,
//! 3. multiplicative constants on unary sites and affine constants on
//!    variable sites ([`inject_constants`]).
//!
//! Datasets draw each input coordinate uniformly from its support interval
//! and evaluate the expression ([`sample_dataset`]).

use alloc::boxed::Box;
use alloc::collections::BTreeMap;
use alloc::string::String;
use alloc::vec;
use alloc::vec::Vec;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::expr::{BinaryOp, Expr, ExprError, KeyMode, UnaryOp, Vocabulary, VocabularyError};
use crate::math;
use crate::rng;

/// Closed interval `[low, high]`.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Interval {
    pub low: f64,
    pub high: f64,
}

impl Interval {
    pub const fn new(low: f64, high: f64) -> Self {
        Interval { low, high }
    }

    pub fn contains(&self, x: f64) -> bool {
        self.low <= x && x <= self.high
    }

    pub fn width(&self) -> f64 {
        self.high - self.low
    }

    fn sample<R: Rng + ?Sized>(&self, rng: &mut R) -> f64 {
        if self.low == self.high {
            self.low
        } else {
            rng.gen_range(self.low..self.high)
        }
    }

    fn sample_log<R: Rng + ?Sized>(&self, rng: &mut R) -> f64 {
        let (a, b) = (math::ln(self.low), math::ln(self.high));
        let v = math::exp(rng.gen_range(a..b));
        // exp(ln) can round just past an end point.
        v.clamp(self.low, self.high)
    }
}

/// Upper support bound: `x_max ~ U(x_min + min_width, max)`.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct SupportHighRule {
    pub min_width: f64,
    pub max: f64,
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum TreeSampler {
    /// Lample–Charton recurrence: uniform over decorated trees with a given
    /// number of operators.
    #[default]
    LampleCharton,
    /// Uniform over all unary-binary shapes of bounded depth.
    UniformShapes,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct GenConfig {
    /// Operators, variable count `d` and the constant interval.
    pub vocabulary: Vocabulary,
    pub max_depth: usize,
    /// Operator count is drawn from `1..=max_ops` (capped by depth).
    pub max_ops: usize,
    pub max_constants: usize,
    /// Inclusive bounds on the number of points per dataset.
    pub n_range: [usize; 2],
    /// Log-uniform bounds for multiplicative constants.
    pub mul_dist: Interval,
    /// Uniform bounds for additive constants.
    pub add_dist: Interval,
    pub support_low_dist: Interval,
    pub support_high_rule: SupportHighRule,
    pub constant_site_prob: f64,
    pub tree_sampler: TreeSampler,
    pub seed: u64,
}

impl Default for GenConfig {
    fn default() -> Self {
        GenConfig {
            vocabulary: Vocabulary::full(5),
            max_depth: 6,
            max_ops: 5,
            max_constants: 6,
            n_range: [1, 1000],
            mul_dist: Interval::new(0.05, 10.0),
            add_dist: Interval::new(-10.0, 10.0),
            support_low_dist: Interval::new(-10.0, 9.0),
            support_high_rule: SupportHighRule { min_width: 1.0, max: 10.0 },
            constant_site_prob: 0.5,
            tree_sampler: TreeSampler::LampleCharton,
            seed: 0,
        }
    }
}

impl GenConfig {
    pub fn simplified(n_vars: usize) -> Self {
        GenConfig { vocabulary: Vocabulary::simplified(n_vars), ..GenConfig::default() }
    }

    pub fn d(&self) -> usize {
        self.vocabulary.n_vars
    }

    pub fn validate(&self) -> Result<(), DatagenError> {
        self.vocabulary.validate()?;
        let bad = |what: &'static str| Err(DatagenError::InvalidConfig(what));
        if self.max_depth == 0 {
            return bad("max_depth must be at least 1");
        }
        if self.max_depth > 1 && self.max_ops == 0 {
            return bad("max_ops must be positive when max_depth > 1");
        }
        if self.n_range[0] == 0 || self.n_range[0] > self.n_range[1] {
            return bad("n_range must be 1 <= low <= high");
        }
        if !(self.mul_dist.low > 0.0 && self.mul_dist.low < self.mul_dist.high) {
            return bad("mul_dist must satisfy 0 < low < high");
        }
        if !(self.add_dist.low <= self.add_dist.high) {
            return bad("add_dist must satisfy low <= high");
        }
        let r = self.support_high_rule;
        if !(r.min_width > 0.0 && self.support_low_dist.high + r.min_width <= r.max) {
            return bad("support rule must leave room above every lower bound");
        }
        if !(0.0..=1.0).contains(&self.constant_site_prob) {
            return bad("constant_site_prob must lie in [0, 1]");
        }
        Ok(())
    }

    fn effective_max_ops(&self) -> usize {
        if self.max_depth <= 1 {
            0
        } else {
            self.max_ops
        }
    }
}

#[derive(Clone, Debug, PartialEq, thiserror::Error)]
pub enum DatagenError {
    #[error("invalid generator config: {0}")]
    InvalidConfig(&'static str),
    #[error(transparent)]
    Vocabulary(#[from] VocabularyError),
    #[error(transparent)]
    Expr(#[from] ExprError),
    #[error("expression is non-finite on too much of its support ({rejected} rejected points)")]
    SupportIncompatible { rejected: usize },
    #[error("gave up after {attempts} attempts with {found} of {wanted} items")]
    AttemptCeiling { attempts: usize, found: usize, wanted: usize },
}

/// Unary-binary tree without labels.
#[derive(Clone, Debug, PartialEq, Eq)]
pub enum Shape {
    Leaf,
    Unary(Box<Shape>),
    Binary(Box<Shape>, Box<Shape>),
}

impl Shape {
    pub fn depth(&self) -> usize {
        match self {
            Shape::Leaf => 1,
            Shape::Unary(c) => 1 + c.depth(),
            Shape::Binary(l, r) => 1 + l.depth().max(r.depth()),
        }
    }

    pub fn operator_count(&self) -> usize {
        match self {
            Shape::Leaf => 0,
            Shape::Unary(c) => 1 + c.operator_count(),
            Shape::Binary(l, r) => 1 + l.operator_count() + r.operator_count(),
        }
    }

    /// Builds a shape from a prefix list of arities.
    fn from_arities(arities: &[usize]) -> Shape {
        fn go(a: &[usize], pos: &mut usize) -> Shape {
            let k = a[*pos];
            *pos += 1;
            match k {
                0 => Shape::Leaf,
                1 => Shape::Unary(Box::new(go(a, pos))),
                _ => {
                    let l = go(a, pos);
                    let r = go(a, pos);
                    Shape::Binary(Box::new(l), Box::new(r))
                }
            }
        }
        let mut pos = 0;
        go(arities, &mut pos)
    }
}

/// `D(e, n)`: decorated trees with `n` more operators that can hang from
/// `e` empty slots, for `L` leaf labels, `p1` unary and `p2` binary
/// operators.
struct TreeCounts {
    table: Vec<Vec<f64>>,
    leaves: f64,
    p1: f64,
    p2: f64,
}

impl TreeCounts {
    fn new(max_ops: usize, leaves: usize, p1: usize, p2: usize) -> Self {
        let (leaves, p1, p2) = (leaves as f64, p1 as f64, p2 as f64);
        let max_e = 2 * max_ops + 2;
        let mut table = vec![vec![0.0; max_ops + 1]; max_e + 1];
        for (e, row) in table.iter_mut().enumerate() {
            row[0] = math::powi(leaves, e as i32);
        }
        for n in 1..=max_ops {
            for e in 1..max_e {
                table[e][n] =
                    leaves * table[e - 1][n] + p1 * table[e][n - 1] + p2 * table[e + 1][n - 1];
            }
        }
        TreeCounts { table, leaves, p1, p2 }
    }

    fn d(&self, e: usize, n: usize) -> f64 {
        self.table[e][n]
    }

    /// Prefix arity sequence of a tree with exactly `n` operators.
    fn sample<R: Rng + ?Sized>(&self, rng: &mut R, n: usize) -> Vec<usize> {
        let mut out = Vec::with_capacity(2 * n + 1);
        let mut e = 1usize;
        let mut left = n;
        while left > 0 {
            let total = self.d(e, left);
            let mut u = rng.gen::<f64>() * total;
            let mut chosen = None;
            let mut lk = 1.0;
            'scan: for k in 0..e {
                for (arity, p) in [(1usize, self.p1), (2usize, self.p2)] {
                    let w = lk * p * self.d(e - k + arity - 1, left - 1);
                    if u < w {
                        chosen = Some((k, arity));
                        break 'scan;
                    }
                    u -= w;
                }
                lk *= self.leaves;
            }
            // Rounding can leave u marginally above the last weight.
            let (k, arity) = chosen.unwrap_or_else(|| self.last_nonzero(e, left));
            out.extend(core::iter::repeat_n(0, k));
            out.push(arity);
            e = e - k - 1 + arity;
            left -= 1;
        }
        out.extend(core::iter::repeat_n(0, e));
        out
    }

    fn last_nonzero(&self, e: usize, left: usize) -> (usize, usize) {
        for k in (0..e).rev() {
            for (arity, p) in [(2usize, self.p2), (1usize, self.p1)] {
                if p * self.d(e - k + arity - 1, left - 1) > 0.0 {
                    return (k, arity);
                }
            }
        }
        unreachable!("D(e, n) > 0 implies some admissible move")
    }
}

/// Number of shapes of depth at most `h` (index `h`).
fn uniform_shape_counts(max_depth: usize, unary: bool, binary: bool) -> Vec<f64> {
    let mut s = vec![0.0; max_depth + 1];
    if max_depth >= 1 {
        s[1] = 1.0;
    }
    for h in 2..=max_depth {
        let prev = s[h - 1];
        s[h] = 1.0 + if unary { prev } else { 0.0 } + if binary { prev * prev } else { 0.0 };
    }
    s
}

fn sample_uniform_shape<R: Rng + ?Sized>(
    rng: &mut R,
    counts: &[f64],
    h: usize,
    unary: bool,
    binary: bool,
) -> Shape {
    if h <= 1 {
        return Shape::Leaf;
    }
    let prev = counts[h - 1];
    let mut u = rng.gen::<f64>() * counts[h];
    if u < 1.0 {
        return Shape::Leaf;
    }
    u -= 1.0;
    if unary && (u < prev || !binary) {
        return Shape::Unary(Box::new(sample_uniform_shape(rng, counts, h - 1, unary, binary)));
    }
    let l = sample_uniform_shape(rng, counts, h - 1, unary, binary);
    let r = sample_uniform_shape(rng, counts, h - 1, unary, binary);
    Shape::Binary(Box::new(l), Box::new(r))
}

/// Random tree shape with depth at most `cfg.max_depth`.
pub fn sample_skeleton<R: Rng + ?Sized>(rng: &mut R, cfg: &GenConfig) -> Shape {
    let voc = &cfg.vocabulary;
    let (has_un, has_bin) = (!voc.unary.is_empty(), !voc.binary.is_empty());
    match cfg.tree_sampler {
        TreeSampler::UniformShapes => {
            let counts = uniform_shape_counts(cfg.max_depth, has_un, has_bin);
            sample_uniform_shape(rng, &counts, cfg.max_depth, has_un, has_bin)
        }
        TreeSampler::LampleCharton => {
            let max_ops = cfg.effective_max_ops();
            if max_ops == 0 {
                return Shape::Leaf;
            }
            let counts = TreeCounts::new(max_ops, voc.n_vars, voc.unary.len(), voc.binary.len());
            loop {
                let n = rng.gen_range(1..=max_ops);
                let shape = Shape::from_arities(&counts.sample(rng, n));
                if shape.depth() <= cfg.max_depth {
                    return shape;
                }
            }
        }
    }
}

/// Assigns operators (uniform per arity) and variables (uniform) to a shape.
pub fn decorate_template<R: Rng + ?Sized>(shape: &Shape, rng: &mut R, cfg: &GenConfig) -> Expr {
    let voc = &cfg.vocabulary;
    match shape {
        Shape::Leaf => Expr::Var(rng.gen_range(1..=voc.n_vars)),
        Shape::Unary(c) => {
            let op: UnaryOp = voc.unary[rng.gen_range(0..voc.unary.len())];
            Expr::unary(op, decorate_template(c, rng, cfg))
        }
        Shape::Binary(l, r) => {
            let op: BinaryOp = voc.binary[rng.gen_range(0..voc.binary.len())];
            let l = decorate_template(l, rng, cfg);
            let r = decorate_template(r, rng, cfg);
            Expr::binary(op, l, r)
        }
    }
}

/// Injects `c_mul * u(..)` at unary sites and `c_mul * x + c_add` at
/// variable sites, each with probability `constant_site_prob`, visiting
/// sites in pre-order and skipping any site that would exceed
/// `max_constants`.
pub fn inject_constants<R: Rng + ?Sized>(templ: &Expr, rng: &mut R, cfg: &GenConfig) -> Expr {
    let mut budget = cfg.max_constants;
    inject(templ, rng, cfg, &mut budget)
}

fn inject<R: Rng + ?Sized>(e: &Expr, rng: &mut R, cfg: &GenConfig, budget: &mut usize) -> Expr {
    match e {
        Expr::Var(i) => {
            if rng.gen_bool(cfg.constant_site_prob) && *budget >= 2 {
                *budget -= 2;
                let m = cfg.mul_dist.sample_log(rng);
                let a = cfg.add_dist.sample(rng);
                Expr::add(Expr::mul(Expr::Const(m), Expr::Var(*i)), Expr::Const(a))
            } else {
                Expr::Var(*i)
            }
        }
        Expr::Unary(op, c) => {
            if rng.gen_bool(cfg.constant_site_prob) && *budget >= 1 {
                *budget -= 1;
                let m = cfg.mul_dist.sample_log(rng);
                Expr::mul(Expr::Const(m), Expr::unary(*op, inject(c, rng, cfg, budget)))
            } else {
                Expr::unary(*op, inject(c, rng, cfg, budget))
            }
        }
        Expr::Binary(op, l, r) => {
            let l = inject(l, rng, cfg, budget);
            let r = inject(r, rng, cfg, budget);
            Expr::binary(*op, l, r)
        }
        Expr::Const(_) | Expr::Placeholder => e.clone(),
    }
}

/// One draw from the full expression distribution.
#[derive(Clone, Debug, PartialEq)]
pub struct ExprSample {
    pub template: Expr,
    pub expr: Expr,
}

pub fn sample_expression<R: Rng + ?Sized>(rng: &mut R, cfg: &GenConfig) -> ExprSample {
    let shape = sample_skeleton(rng, cfg);
    let template = decorate_template(&shape, rng, cfg);
    let expr = inject_constants(&template, rng, cfg);
    ExprSample { template, expr }
}

/// `d` support intervals: `x_min ~ U(low dist)`, `x_max ~ U(x_min + w, max)`.
pub fn sample_support<R: Rng + ?Sized>(rng: &mut R, cfg: &GenConfig) -> Vec<Interval> {
    let rule = cfg.support_high_rule;
    (0..cfg.d())
        .map(|_| {
            let low = cfg.support_low_dist.sample(rng);
            let high = Interval::new(low + rule.min_width, rule.max).sample(rng);
            Interval::new(low, high)
        })
        .collect()
}

pub fn sample_point_count<R: Rng + ?Sized>(rng: &mut R, cfg: &GenConfig) -> usize {
    rng.gen_range(cfg.n_range[0]..=cfg.n_range[1])
}

/// Input points with finite targets.
#[derive(Clone, Debug, PartialEq)]
pub struct Dataset {
    pub inputs: Vec<Vec<f64>>,
    pub targets: Vec<f64>,
    pub support: Vec<Interval>,
}

impl Dataset {
    /// Checks shapes, support membership and target finiteness.
    pub fn new(
        inputs: Vec<Vec<f64>>,
        targets: Vec<f64>,
        support: Vec<Interval>,
    ) -> Result<Self, DatasetError> {
        if inputs.len() != targets.len() {
            return Err(DatasetError::LengthMismatch { inputs: inputs.len(), targets: targets.len() });
        }
        for (i, row) in inputs.iter().enumerate() {
            if row.len() != support.len() {
                return Err(DatasetError::Dimension { row: i, expected: support.len(), got: row.len() });
            }
            if row.iter().zip(&support).any(|(x, s)| !s.contains(*x)) {
                return Err(DatasetError::OutsideSupport { row: i });
            }
        }
        if let Some(i) = targets.iter().position(|y| !y.is_finite()) {
            return Err(DatasetError::NonFiniteTarget { row: i });
        }
        Ok(Dataset { inputs, targets, support })
    }

    /// Dataset whose support is the bounding box of the inputs.
    pub fn from_points(inputs: Vec<Vec<f64>>, targets: Vec<f64>) -> Result<Self, DatasetError> {
        let d = inputs.first().map_or(0, Vec::len);
        let mut support = vec![Interval::new(f64::INFINITY, f64::NEG_INFINITY); d];
        for row in &inputs {
            for (s, &x) in support.iter_mut().zip(row) {
                s.low = s.low.min(x);
                s.high = s.high.max(x);
            }
        }
        Dataset::new(inputs, targets, support)
    }

    pub fn len(&self) -> usize {
        self.targets.len()
    }

    pub fn is_empty(&self) -> bool {
        self.targets.is_empty()
    }

    pub fn dims(&self) -> usize {
        self.support.len()
    }

    /// Stable 64-bit fingerprint of the points.
    pub fn fingerprint(&self) -> u64 {
        let mut h = rng::mix64(self.len() as u64 ^ ((self.dims() as u64) << 32));
        for (row, y) in self.inputs.iter().zip(&self.targets) {
            for x in row {
                h = rng::mix64(h ^ x.to_bits());
            }
            h = rng::mix64(h ^ y.to_bits());
        }
        h
    }
}

#[derive(Clone, Debug, PartialEq, thiserror::Error)]
pub enum DatasetError {
    #[error("{inputs} input rows but {targets} targets")]
    LengthMismatch { inputs: usize, targets: usize },
    #[error("row {row} has {got} coordinates, expected {expected}")]
    Dimension { row: usize, expected: usize, got: usize },
    #[error("row {row} lies outside the support")]
    OutsideSupport { row: usize },
    #[error("target in row {row} is not finite")]
    NonFiniteTarget { row: usize },
}

/// Samples `n` points uniformly on `support`, rejecting non-finite targets
/// with a budget of `100 * n` rejections.
pub fn sample_dataset<R: Rng + ?Sized>(
    e: &Expr,
    support: &[Interval],
    n: usize,
    rng: &mut R,
) -> Result<Dataset, DatagenError> {
    if e.placeholder_count() > 0 {
        return Err(ExprError::PlaceholderPresent.into());
    }
    let m = e.max_var();
    if m > support.len() {
        return Err(ExprError::VariableOutOfRange { index: m, dims: support.len() }.into());
    }
    let budget = 100 * n;
    let mut rejected = 0usize;
    let mut inputs = Vec::with_capacity(n);
    let mut targets = Vec::with_capacity(n);
    while targets.len() < n {
        let x: Vec<f64> = support.iter().map(|s| s.sample(rng)).collect();
        let y = e.eval_with(&x, &[]);
        if y.is_finite() {
            inputs.push(x);
            targets.push(y);
        } else {
            rejected += 1;
            if rejected > budget {
                return Err(DatagenError::SupportIncompatible { rejected });
            }
        }
    }
    Ok(Dataset { inputs, targets, support: support.to_vec() })
}

/// Training templates with lookup indices.
///
/// Entries are stored in placeholder form. Plain template corpora hold
/// constant-free trees; corpora of full expressions keep `C` where the
/// stored expressions had constants.
#[derive(Clone, Debug, Default)]
pub struct Corpus {
    entries: Vec<Expr>,
    entry_index: BTreeMap<String, usize>,
    strict_index: BTreeMap<String, usize>,
    commutative_index: BTreeMap<String, usize>,
}

impl Corpus {
    pub fn new() -> Self {
        Corpus::default()
    }

    /// Adds an entry; returns `false` when an identical entry exists.
    pub fn insert(&mut self, e: &Expr) -> Result<bool, ExprError> {
        let entry = e.to_placeholders();
        let key = entry.structure_key();
        if self.entry_index.contains_key(&key) {
            return Ok(false);
        }
        let strict = entry.canonical_key(KeyMode::Strict)?;
        let commutative = entry.canonical_key(KeyMode::CommutativeNormalized)?;
        let id = self.entries.len();
        self.entries.push(entry);
        self.entry_index.insert(key, id);
        self.strict_index.entry(strict).or_insert(id);
        self.commutative_index.entry(commutative).or_insert(id);
        Ok(true)
    }

    pub fn from_exprs<'a, I: IntoIterator<Item = &'a Expr>>(exprs: I) -> Result<Self, ExprError> {
        let mut c = Corpus::new();
        for e in exprs {
            c.insert(e)?;
        }
        Ok(c)
    }

    pub fn templates(&self) -> &[Expr] {
        &self.entries
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    /// Template lookup by canonical key.
    pub fn contains_template_key(&self, key: &str, mode: KeyMode) -> bool {
        match mode {
            KeyMode::Strict => self.strict_index.contains_key(key),
            KeyMode::CommutativeNormalized => self.commutative_index.contains_key(key),
        }
    }

    /// Lookup of the placeholder-preserving form.
    pub fn contains_entry_key(&self, key: &str) -> bool {
        self.entry_index.contains_key(key)
    }

    pub fn template_keys(&self, mode: KeyMode) -> impl Iterator<Item = &String> {
        match mode {
            KeyMode::Strict => self.strict_index.keys(),
            KeyMode::CommutativeNormalized => self.commutative_index.keys(),
        }
    }
}

/// Generates `count` distinct templates (strict keys).
pub fn build_corpus(cfg: &GenConfig, count: usize) -> Result<Corpus, DatagenError> {
    build_corpus_with_ceiling(cfg, count, 1000 + 100 * count)
}

pub fn build_corpus_with_ceiling(
    cfg: &GenConfig,
    count: usize,
    max_attempts: usize,
) -> Result<Corpus, DatagenError> {
    cfg.validate()?;
    if count == 0 {
        return Err(DatagenError::InvalidConfig("corpus count must be at least 1"));
    }
    let mut rng = rng::stream(cfg.seed, "corpus", 0);
    let mut corpus = Corpus::new();
    let mut attempts = 0;
    while corpus.len() < count {
        if attempts == max_attempts {
            return Err(DatagenError::AttemptCeiling { attempts, found: corpus.len(), wanted: count });
        }
        attempts += 1;
        let shape = sample_skeleton(&mut rng, cfg);
        let templ = decorate_template(&shape, &mut rng, cfg);
        corpus.insert(&templ)?;
    }
    Ok(corpus)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::stream;

    fn cfg() -> GenConfig {
        GenConfig::default()
    }

    #[test]
    fn depth_one_is_a_leaf() {
        let mut c = cfg();
        c.max_depth = 1;
        let mut rng = stream(1, "t", 0);
        for sampler in [TreeSampler::LampleCharton, TreeSampler::UniformShapes] {
            c.tree_sampler = sampler;
            for _ in 0..50 {
                assert_eq!(sample_skeleton(&mut rng, &c), Shape::Leaf);
            }
        }
    }

    #[test]
    fn depth_bound_holds() {
        let mut rng = stream(2, "t", 0);
        for sampler in [TreeSampler::LampleCharton, TreeSampler::UniformShapes] {
            let c = GenConfig { tree_sampler: sampler, ..cfg() };
            for _ in 0..10_000 {
                assert!(sample_skeleton(&mut rng, &c).depth() <= 6);
            }
        }
    }

    #[test]
    fn skeletons_are_deterministic() {
        let c = cfg();
        let a: Vec<Shape> = {
            let mut r = stream(3, "t", 0);
            (0..100).map(|_| sample_skeleton(&mut r, &c)).collect()
        };
        let mut r = stream(3, "t", 0);
        let b: Vec<Shape> = (0..100).map(|_| sample_skeleton(&mut r, &c)).collect();
        assert_eq!(a, b);
    }

    /// Exhaustive enumeration of decorated trees with `n` operators.
    fn brute_count(e: usize, n: usize, l: f64, p1: f64, p2: f64) -> f64 {
        if n == 0 {
            return math::powi(l, e as i32);
        }
        if e == 0 {
            return 0.0;
        }
        // The first empty slot is a leaf, a unary node or a binary node.
        l * brute_count(e - 1, n, l, p1, p2)
            + p1 * brute_count(e, n - 1, l, p1, p2)
            + p2 * brute_count(e + 1, n - 1, l, p1, p2)
    }

    #[test]
    fn tree_counts_match_enumeration() {
        let t = TreeCounts::new(5, 5, 4, 2);
        for n in 0..=5 {
            assert_eq!(t.d(1, n), brute_count(1, n, 5.0, 4.0, 2.0));
        }
        // Single operator, one slot: p1*L + p2*L^2 = 4*5 + 2*25.
        assert_eq!(t.d(1, 1), 70.0);
    }

    #[test]
    fn lample_charton_shape_frequencies() {
        // With one operator the shape is unary w.p. p1*L/(p1*L + p2*L^2).
        let c = GenConfig { max_ops: 1, ..GenConfig::simplified(5) };
        let mut rng = stream(4, "t", 0);
        let trials = 20_000;
        let unary = (0..trials)
            .filter(|_| matches!(sample_skeleton(&mut rng, &c), Shape::Unary(_)))
            .count();
        let p = 20.0 / 70.0;
        let sigma = (p * (1.0 - p) / trials as f64).sqrt();
        assert!((unary as f64 / trials as f64 - p).abs() < 4.0 * sigma);
    }

    #[test]
    fn uniform_shape_counts_small() {
        let s = uniform_shape_counts(4, true, true);
        assert_eq!(&s[1..], &[1.0, 3.0, 13.0, 183.0]);
    }

    #[test]
    fn uniform_shapes_are_uniform_at_depth_two() {
        // Depth <= 2 shapes: leaf, unary(leaf), binary(leaf, leaf).
        let c = GenConfig { max_depth: 2, tree_sampler: TreeSampler::UniformShapes, ..cfg() };
        let mut rng = stream(5, "t", 0);
        let mut hist = [0usize; 3];
        let trials = 30_000;
        for _ in 0..trials {
            let k = match sample_skeleton(&mut rng, &c) {
                Shape::Leaf => 0,
                Shape::Unary(_) => 1,
                Shape::Binary(..) => 2,
            };
            hist[k] += 1;
        }
        let p = 1.0 / 3.0;
        let sigma = (p * (1.0 - p) / trials as f64).sqrt();
        for h in hist {
            assert!((h as f64 / trials as f64 - p).abs() < 4.0 * sigma);
        }
    }

    #[test]
    fn decorated_templates_are_constant_free() {
        let c = cfg();
        let mut rng = stream(6, "t", 0);
        for _ in 0..1000 {
            let t = decorate_template(&sample_skeleton(&mut rng, &c), &mut rng, &c);
            assert_eq!(t.constant_count(), 0);
            assert_eq!(t.strip_constants().unwrap(), t);
            assert!(t.max_var() <= 5);
        }
    }

    #[test]
    fn zero_site_probability_leaves_template() {
        let c = GenConfig { constant_site_prob: 0.0, ..cfg() };
        let mut rng = stream(7, "t", 0);
        for _ in 0..200 {
            let t = decorate_template(&sample_skeleton(&mut rng, &c), &mut rng, &c);
            assert_eq!(inject_constants(&t, &mut rng, &c), t);
        }
    }

    #[test]
    fn injection_respects_cap_and_strip() {
        let c = GenConfig { constant_site_prob: 1.0, ..cfg() };
        let mut rng = stream(8, "t", 0);
        for _ in 0..2000 {
            let s = sample_expression(&mut rng, &c);
            assert!(s.expr.constant_count() <= 6);
            assert_eq!(s.expr.strip_constants().unwrap(), s.template);
        }
    }

    #[test]
    fn cap_applies_in_preorder() {
        // Four variable sites with p = 1 and a cap of 6: the last is untouched.
        let c = GenConfig { constant_site_prob: 1.0, ..cfg() };
        let t = Expr::add(
            Expr::add(Expr::var(1), Expr::var(2)),
            Expr::add(Expr::var(3), Expr::var(4)),
        );
        let e = inject_constants(&t, &mut stream(9, "t", 0), &c);
        assert_eq!(e.constant_count(), 6);
        match &e {
            Expr::Binary(_, _, r) => match r.as_ref() {
                Expr::Binary(_, _, last) => assert_eq!(**last, Expr::var(4)),
                _ => panic!(),
            },
            _ => panic!(),
        }
    }

    #[test]
    fn supports_follow_rule() {
        let c = cfg();
        let mut rng = stream(10, "t", 0);
        for _ in 0..2000 {
            for s in sample_support(&mut rng, &c) {
                assert!((-10.0..=9.0).contains(&s.low));
                assert!(s.high > s.low && s.high <= 10.0 && s.high >= s.low + 1.0);
            }
        }
        let a = sample_support(&mut stream(1, "s", 0), &c);
        assert_eq!(a, sample_support(&mut stream(1, "s", 0), &c));
    }

    #[test]
    fn dataset_of_identity() {
        let support = [Interval::new(0.0, 1.0)];
        let d = sample_dataset(&Expr::var(1), &support, 3, &mut stream(11, "t", 0)).unwrap();
        assert_eq!(d.len(), 3);
        for (x, y) in d.inputs.iter().zip(&d.targets) {
            assert_eq!(x[0], *y);
            assert!((0.0..=1.0).contains(y));
        }
    }

    #[test]
    fn dataset_overflow_everywhere() {
        let e = Expr::unary(UnaryOp::Exp, Expr::var(1));
        let support = [Interval::new(800.0, 801.0)];
        assert!(matches!(
            sample_dataset(&e, &support, 10, &mut stream(12, "t", 0)),
            Err(DatagenError::SupportIncompatible { .. })
        ));
    }

    #[test]
    fn dataset_mean_monte_carlo() {
        // y = x1 + x2 on [-2, 2] x [-1, 3]: E[y] = 0 + 1, Var = 16/12 + 16/12.
        let support = [Interval::new(-2.0, 2.0), Interval::new(-1.0, 3.0)];
        let e = Expr::add(Expr::var(1), Expr::var(2));
        let n = 20_000;
        let d = sample_dataset(&e, &support, n, &mut stream(13, "t", 0)).unwrap();
        let mean = d.targets.iter().sum::<f64>() / n as f64;
        let sigma = (32.0 / 12.0 / n as f64).sqrt();
        assert!((mean - 1.0).abs() < 5.0 * sigma, "mean {mean}");
    }

    #[test]
    fn corpus_basics() {
        let c = GenConfig::simplified(5);
        let corpus = build_corpus(&c, 1).unwrap();
        assert_eq!(corpus.len(), 1);
        assert_eq!(corpus.template_keys(KeyMode::Strict).count(), 1);
        let big = build_corpus(&c, 500).unwrap();
        assert_eq!(big.len(), 500);
        assert_eq!(big.template_keys(KeyMode::Strict).count(), 500);
        let again = build_corpus(&c, 500).unwrap();
        assert_eq!(big.templates(), again.templates());
    }

    #[test]
    fn corpus_attempt_ceiling() {
        let mut c = GenConfig::simplified(1);
        c.max_depth = 1;
        // Only one template (x_1) exists.
        assert!(matches!(
            build_corpus_with_ceiling(&c, 2, 50),
            Err(DatagenError::AttemptCeiling { found: 1, wanted: 2, .. })
        ));
    }

    #[test]
    fn config_validation() {
        assert!(cfg().validate().is_ok());
        let bad = GenConfig { constant_site_prob: 1.5, ..cfg() };
        assert!(bad.validate().is_err());
        let bad = GenConfig { max_depth: 0, ..cfg() };
        assert!(bad.validate().is_err());
        let bad = GenConfig { n_range: [0, 3], ..cfg() };
        assert!(bad.validate().is_err());
    }

    #[test]
    fn dataset_validation() {
        let s = alloc::vec![Interval::new(0.0, 1.0)];
        assert!(Dataset::new(alloc::vec![alloc::vec![2.0]], alloc::vec![1.0], s.clone()).is_err());
        assert!(Dataset::new(alloc::vec![alloc::vec![0.5]], alloc::vec![f64::NAN], s.clone()).is_err());
        assert!(Dataset::new(alloc::vec![alloc::vec![0.5]], alloc::vec![], s).is_err());
        let d = Dataset::from_points(alloc::vec![alloc::vec![1.0], alloc::vec![3.0]], alloc::vec![0.0, 1.0]).unwrap();
        assert_eq!(d.support, alloc::vec![Interval::new(1.0, 3.0)]);
    }
}
