//! Reproduction audits.
//!
//! A prediction reproduces the corpus when its constant-stripped template
//! (template mode) or its placeholder form (with-constants mode) is indexed
//! in the corpus. Reports add held-out R² threshold counts and the
//! novelty × accuracy breakdown.

use alloc::vec::Vec;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::datagen::{
    sample_dataset, sample_expression, sample_support, Corpus, DatagenError, Dataset, GenConfig, Interval,
};
use crate::decoding::Prediction;
use crate::expr::{deserialize_with_constants, Expr, ExprError, KeyMode, Token};
use crate::fitting::{predict, r2_score};
use crate::rng;

/// R² thresholds of the report.
pub const R2_THRESHOLDS: [f64; 7] = [0.5, 0.9, 0.95, 0.99, 0.999, 0.9999, 0.99999];

/// Accuracy cut for the novelty × accuracy breakdown.
pub const BREAKDOWN_THRESHOLD: f64 = 0.99;

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ReproductionMode {
    /// Stripped template against the template index.
    #[default]
    Template,
    /// Placeholder form against the entry index.
    WithConstants,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Lookup {
    pub reproduction: bool,
    /// Set when the expression has a constant that stripping cannot remove;
    /// such expressions count as non-reproductions.
    pub irreducible: bool,
}

pub fn is_reproduction(e: &Expr, corpus: &Corpus, mode: ReproductionMode, key_mode: KeyMode) -> Lookup {
    match mode {
        ReproductionMode::Template => match e.canonical_key(key_mode) {
            Ok(key) => Lookup { reproduction: corpus.contains_template_key(&key, key_mode), irreducible: false },
            Err(ExprError::IrreducibleConstant) => Lookup { reproduction: false, irreducible: true },
            Err(_) => Lookup { reproduction: false, irreducible: false },
        },
        ReproductionMode::WithConstants => {
            Lookup { reproduction: corpus.contains_entry_key(&e.to_placeholders().structure_key()), irreducible: false }
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum TestSetKind {
    /// Templates absent from the corpus.
    NotIncluded,
    /// Unfiltered draws.
    Baseline,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TestSetConfig {
    pub count: usize,
    /// Points given to the model.
    pub n_fit: usize,
    /// Held-out points for evaluation.
    pub n_eval: usize,
    pub key_mode: KeyMode,
    pub max_attempts: usize,
}

impl Default for TestSetConfig {
    fn default() -> Self {
        TestSetConfig { count: 150, n_fit: 100, n_eval: 100, key_mode: KeyMode::Strict, max_attempts: 1_000_000 }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct TestCase {
    pub id: usize,
    pub expr: Expr,
    pub template: Expr,
    pub support: Vec<Interval>,
    pub fit_data: Dataset,
    pub eval_data: Dataset,
}

/// Test expressions whose templates are absent from `corpus`.
pub fn build_not_included(gen: &GenConfig, corpus: &Corpus, cfg: &TestSetConfig) -> Result<Vec<TestCase>, DatagenError> {
    build_test_set(gen, Some(corpus), cfg)
}

/// Test expressions drawn without filtering.
pub fn build_baseline(gen: &GenConfig, cfg: &TestSetConfig) -> Result<Vec<TestCase>, DatagenError> {
    build_test_set(gen, None, cfg)
}

/// Rejection sampler shared by both test sets; `exclude` enables the
/// corpus filter. Draws whose expression is non-finite on most of its
/// support are also rejected.
pub fn build_test_set(gen: &GenConfig, exclude: Option<&Corpus>, cfg: &TestSetConfig) -> Result<Vec<TestCase>, DatagenError> {
    gen.validate()?;
    let mut rng = rng::stream(gen.seed, "test-set", u64::from(exclude.is_some()));
    let mut out = Vec::with_capacity(cfg.count);
    let mut attempts = 0;
    while out.len() < cfg.count {
        if attempts == cfg.max_attempts {
            return Err(DatagenError::AttemptCeiling { attempts, found: out.len(), wanted: cfg.count });
        }
        attempts += 1;
        let s = sample_expression(&mut rng, gen);
        if let Some(corpus) = exclude {
            let key = s.template.canonical_key(cfg.key_mode)?;
            if corpus.contains_template_key(&key, cfg.key_mode) {
                continue;
            }
        }
        let support = sample_support(&mut rng, gen);
        let fit = sample_dataset(&s.expr, &support, cfg.n_fit, &mut rng);
        let eval = sample_dataset(&s.expr, &support, cfg.n_eval, &mut rng);
        let (Ok(fit_data), Ok(eval_data)) = (fit, eval) else {
            continue;
        };
        out.push(TestCase { id: out.len(), expr: s.expr, template: s.template, support, fit_data, eval_data });
    }
    Ok(out)
}

/// One generated expression to audit.
#[derive(Clone, Debug, PartialEq)]
pub struct AuditInput {
    pub id: usize,
    pub tokens: Vec<Token>,
    /// Values for the `C` tokens; empty leaves them as placeholders.
    pub constants: Vec<f64>,
}

impl From<&Prediction> for AuditInput {
    fn from(p: &Prediction) -> Self {
        AuditInput { id: 0, tokens: p.tokens.clone(), constants: p.constants.clone() }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AuditRow {
    pub id: usize,
    pub tokens: Vec<Token>,
    pub novel_structure: bool,
    pub novel_with_constants: bool,
    /// Stripping hit an irreducible constant.
    pub warning: bool,
    /// Held-out R²; `None` when not finite.
    pub r2: Option<f64>,
    /// One flag per entry of [`R2_THRESHOLDS`].
    pub passes: Vec<bool>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ThresholdPass {
    pub threshold: f64,
    pub count: usize,
    pub percent: f64,
}

/// Percentages of rows in each novelty × accuracy cell.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Breakdown {
    pub threshold: f64,
    pub novel_accurate: f64,
    pub novel_inaccurate: f64,
    pub reproduced_accurate: f64,
    pub reproduced_inaccurate: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AuditReport {
    pub mode: ReproductionMode,
    pub key_mode: KeyMode,
    pub count: usize,
    pub novelty_percent: f64,
    pub novelty_with_constants_percent: f64,
    pub warnings: usize,
    pub thresholds: Vec<ThresholdPass>,
    pub breakdown: Breakdown,
    pub rows: Vec<AuditRow>,
}

#[derive(Clone, Debug, PartialEq, thiserror::Error)]
pub enum AuditError {
    #[error("{predictions} predictions but {datasets} evaluation datasets")]
    LengthMismatch { predictions: usize, datasets: usize },
}

fn percent(count: usize, total: usize) -> f64 {
    if total == 0 {
        0.0
    } else {
        100.0 * count as f64 / total as f64
    }
}

fn exceeds(r2: Option<f64>, threshold: f64) -> bool {
    r2.is_some_and(|v| v > threshold)
}

/// Scores every prediction on its held-out data and aggregates.
pub fn audit_run(
    predictions: &[AuditInput],
    eval: &[Dataset],
    corpus: &Corpus,
    mode: ReproductionMode,
    key_mode: KeyMode,
) -> Result<AuditReport, AuditError> {
    if predictions.len() != eval.len() {
        return Err(AuditError::LengthMismatch { predictions: predictions.len(), datasets: eval.len() });
    }
    let rows = predictions.iter().zip(eval).map(|(p, d)| audit_row(p, d, corpus, key_mode)).collect();
    Ok(AuditReport::from_rows(rows, mode, key_mode))
}

fn audit_row(p: &AuditInput, data: &Dataset, corpus: &Corpus, key_mode: KeyMode) -> AuditRow {
    let consts: Vec<f64> = if p.constants.is_empty() {
        alloc::vec![f64::NAN; p.tokens.iter().filter(|t| **t == Token::Const).count()]
    } else {
        p.constants.clone()
    };
    let expr = deserialize_with_constants(&p.tokens, &consts).ok();
    let (structure, with_constants) = match &expr {
        Some(e) => (
            is_reproduction(e, corpus, ReproductionMode::Template, key_mode),
            is_reproduction(e, corpus, ReproductionMode::WithConstants, key_mode),
        ),
        None => {
            let miss = Lookup { reproduction: false, irreducible: false };
            (miss, miss)
        }
    };
    let r2 = expr
        .as_ref()
        .and_then(|e| predict(e, data).ok())
        .map(|yh| r2_score(&data.targets, &yh))
        .filter(|v| v.is_finite());
    AuditRow {
        id: p.id,
        tokens: p.tokens.clone(),
        novel_structure: !structure.reproduction,
        novel_with_constants: !with_constants.reproduction,
        warning: structure.irreducible,
        r2,
        passes: R2_THRESHOLDS.iter().map(|t| exceeds(r2, *t)).collect(),
    }
}

impl AuditReport {
    /// Aggregates over `rows`; the novelty headline follows `mode`.
    pub fn from_rows(rows: Vec<AuditRow>, mode: ReproductionMode, key_mode: KeyMode) -> Self {
        let n = rows.len();
        let novel = |r: &AuditRow| match mode {
            ReproductionMode::Template => r.novel_structure,
            ReproductionMode::WithConstants => r.novel_with_constants,
        };
        let thresholds = R2_THRESHOLDS
            .iter()
            .enumerate()
            .map(|(i, &threshold)| {
                let count = rows.iter().filter(|r| r.passes[i]).count();
                ThresholdPass { threshold, count, percent: percent(count, n) }
            })
            .collect();
        let cell = |nov: bool, acc: bool| {
            percent(rows.iter().filter(|r| novel(r) == nov && exceeds(r.r2, BREAKDOWN_THRESHOLD) == acc).count(), n)
        };
        let breakdown = Breakdown {
            threshold: BREAKDOWN_THRESHOLD,
            novel_accurate: cell(true, true),
            novel_inaccurate: cell(true, false),
            reproduced_accurate: cell(false, true),
            reproduced_inaccurate: cell(false, false),
        };
        AuditReport {
            mode,
            key_mode,
            count: n,
            novelty_percent: percent(rows.iter().filter(|r| r.novel_structure).count(), n),
            novelty_with_constants_percent: percent(rows.iter().filter(|r| r.novel_with_constants).count(), n),
            warnings: rows.iter().filter(|r| r.warning).count(),
            thresholds,
            breakdown,
            rows,
        }
    }
}

/// Replaces one random leaf of `e` with a unary or binary node over it,
/// for building labeled non-member sets.
pub fn mutate<R: Rng + ?Sized>(e: &Expr, rng: &mut R, gen: &GenConfig) -> Expr {
    let leaves = e.node_count();
    let target = rng.gen_range(0..leaves);
    let mut i = 0;
    grow(e, target, &mut i, rng, gen)
}

fn grow<R: Rng + ?Sized>(e: &Expr, target: usize, i: &mut usize, rng: &mut R, gen: &GenConfig) -> Expr {
    let here = *i;
    *i += 1;
    let rebuilt = match e {
        Expr::Unary(op, c) => Expr::unary(*op, grow(c, target, i, rng, gen)),
        Expr::Binary(op, l, r) => {
            let l = grow(l, target, i, rng, gen);
            let r = grow(r, target, i, rng, gen);
            Expr::binary(*op, l, r)
        }
        leaf => leaf.clone(),
    };
    if here != target {
        return rebuilt;
    }
    let voc = &gen.vocabulary;
    let var = Expr::var(rng.gen_range(1..=voc.n_vars));
    if !voc.binary.is_empty() && (voc.unary.is_empty() || rng.gen_bool(0.5)) {
        Expr::binary(voc.binary[rng.gen_range(0..voc.binary.len())], rebuilt, var)
    } else {
        Expr::unary(voc.unary[rng.gen_range(0..voc.unary.len())], rebuilt)
    }
}
