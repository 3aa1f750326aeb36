//! Constructive checks of the hardness reduction and the PAC bound.
//!
//! Boolean formulas map to last-token prediction instances whose optimal
//! leaf encodes the formula's value; a brute-force solver confirms the
//! loss separations. The PAC simulator draws burn-in and post-phase rounds
//! over an abstract hypothesis class of `u` items.

use alloc::boxed::Box;
use alloc::string::String;
use alloc::vec;
use alloc::vec::Vec;
use core::fmt;

use rand::seq::SliceRandom;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::datagen::{Dataset, Interval};
use crate::expr::{deserialize, BinaryOp, Token};
use crate::fitting::{fit_expr, mse, predict, FitConfig};
use crate::math;
use crate::rng;

#[derive(Clone, Debug, PartialEq, Eq, Hash)]
pub enum BoolFormula {
    Lit(bool),
    Not(Box<BoolFormula>),
    And(Box<BoolFormula>, Box<BoolFormula>),
    Or(Box<BoolFormula>, Box<BoolFormula>),
}

#[allow(clippy::should_implement_trait)]
impl BoolFormula {
    pub fn not(f: BoolFormula) -> Self {
        BoolFormula::Not(Box::new(f))
    }

    pub fn and(l: BoolFormula, r: BoolFormula) -> Self {
        BoolFormula::And(Box::new(l), Box::new(r))
    }

    pub fn or(l: BoolFormula, r: BoolFormula) -> Self {
        BoolFormula::Or(Box::new(l), Box::new(r))
    }

    pub fn depth(&self) -> usize {
        match self {
            BoolFormula::Lit(_) => 1,
            BoolFormula::Not(c) => 1 + c.depth(),
            BoolFormula::And(l, r) | BoolFormula::Or(l, r) => 1 + l.depth().max(r.depth()),
        }
    }

    pub fn size(&self) -> usize {
        match self {
            BoolFormula::Lit(_) => 1,
            BoolFormula::Not(c) => 1 + c.size(),
            BoolFormula::And(l, r) | BoolFormula::Or(l, r) => 1 + l.size() + r.size(),
        }
    }
}

/// Fully parenthesized form over `{0, 1, ∧, ∨, ¬, (, )}`.
impl fmt::Display for BoolFormula {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            BoolFormula::Lit(b) => write!(f, "{}", u8::from(*b)),
            BoolFormula::Not(c) => write!(f, "(¬{c})"),
            BoolFormula::And(l, r) => write!(f, "({l}∧{r})"),
            BoolFormula::Or(l, r) => write!(f, "({l}∨{r})"),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Eq, thiserror::Error)]
pub enum ParseError {
    #[error("unexpected character {found:?} at offset {offset}")]
    Unexpected { offset: usize, found: char },
    #[error("unexpected end of input")]
    UnexpectedEnd,
    #[error("trailing input at offset {0}")]
    Trailing(usize),
}

/// Parses the fully parenthesized grammar: `0`, `1`, `(¬t)`, `(t∧t)`,
/// `(t∨t)`. Whitespace is ignored; `!`, `&` and `|` are accepted as ASCII
/// spellings of `¬`, `∧` and `∨`.
pub fn parse_formula(s: &str) -> Result<BoolFormula, ParseError> {
    let chars: Vec<(usize, char)> = s.char_indices().filter(|(_, c)| !c.is_whitespace()).collect();
    let mut pos = 0;
    let f = parse_at(&chars, &mut pos)?;
    match chars.get(pos) {
        None => Ok(f),
        Some(&(offset, _)) => Err(ParseError::Trailing(offset)),
    }
}

fn next(chars: &[(usize, char)], pos: &mut usize) -> Result<(usize, char), ParseError> {
    let c = *chars.get(*pos).ok_or(ParseError::UnexpectedEnd)?;
    *pos += 1;
    Ok(c)
}

fn expect(chars: &[(usize, char)], pos: &mut usize, want: char) -> Result<(), ParseError> {
    let (offset, c) = next(chars, pos)?;
    if c == want {
        Ok(())
    } else {
        Err(ParseError::Unexpected { offset, found: c })
    }
}

fn parse_at(chars: &[(usize, char)], pos: &mut usize) -> Result<BoolFormula, ParseError> {
    let (offset, c) = next(chars, pos)?;
    match c {
        '0' => Ok(BoolFormula::Lit(false)),
        '1' => Ok(BoolFormula::Lit(true)),
        '(' => {
            let &(_, peek) = chars.get(*pos).ok_or(ParseError::UnexpectedEnd)?;
            let f = if peek == '¬' || peek == '!' {
                *pos += 1;
                BoolFormula::not(parse_at(chars, pos)?)
            } else {
                let l = parse_at(chars, pos)?;
                let (offset, op) = next(chars, pos)?;
                let r = parse_at(chars, pos)?;
                match op {
                    '∧' | '&' => BoolFormula::and(l, r),
                    '∨' | '|' => BoolFormula::or(l, r),
                    found => return Err(ParseError::Unexpected { offset, found }),
                }
            };
            expect(chars, pos, ')')?;
            Ok(f)
        }
        found => Err(ParseError::Unexpected { offset, found }),
    }
}

pub fn eval_bool(f: &BoolFormula) -> bool {
    match f {
        BoolFormula::Lit(b) => *b,
        BoolFormula::Not(c) => !eval_bool(c),
        BoolFormula::And(l, r) => eval_bool(l) && eval_bool(r),
        BoolFormula::Or(l, r) => eval_bool(l) || eval_bool(r),
    }
}

pub fn contains_or(f: &BoolFormula) -> bool {
    match f {
        BoolFormula::Lit(_) => false,
        BoolFormula::Not(c) => contains_or(c),
        BoolFormula::And(l, r) => contains_or(l) || contains_or(r),
        BoolFormula::Or(..) => true,
    }
}

/// Rewrites `a ∨ b` to `¬(¬a ∧ ¬b)` bottom-up.
pub fn eliminate_or(f: &BoolFormula) -> BoolFormula {
    match f {
        BoolFormula::Lit(b) => BoolFormula::Lit(*b),
        BoolFormula::Not(c) => BoolFormula::not(eliminate_or(c)),
        BoolFormula::And(l, r) => BoolFormula::and(eliminate_or(l), eliminate_or(r)),
        BoolFormula::Or(l, r) => BoolFormula::not(BoolFormula::and(
            BoolFormula::not(eliminate_or(l)),
            BoolFormula::not(eliminate_or(r)),
        )),
    }
}

/// Random formula of depth at most `max_depth`. Internal nodes are drawn
/// with probability 3/4 at every level above the floor.
pub fn random_formula<R: Rng + ?Sized>(rng: &mut R, max_depth: usize) -> BoolFormula {
    if max_depth <= 1 || rng.gen_bool(0.25) {
        return BoolFormula::Lit(rng.gen());
    }
    match rng.gen_range(0..3) {
        0 => BoolFormula::not(random_formula(rng, max_depth - 1)),
        1 => BoolFormula::and(random_formula(rng, max_depth - 1), random_formula(rng, max_depth - 1)),
        _ => BoolFormula::or(random_formula(rng, max_depth - 1), random_formula(rng, max_depth - 1)),
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, thiserror::Error)]
#[error("formula contains a disjunction")]
pub struct OrPresent;

const X1: Token = Token::Var(1);
const X2: Token = Token::Var(2);

/// Prefix emission: `0 → mul x_1 x_2`, `1 → sub x_1 x_2`, `∧ → mul`,
/// `¬ → sub sub x_1 x_2`.
pub fn bool_to_tokens(f: &BoolFormula) -> Result<Vec<Token>, OrPresent> {
    let mut out = Vec::new();
    emit(f, &mut out)?;
    Ok(out)
}

fn emit(f: &BoolFormula, out: &mut Vec<Token>) -> Result<(), OrPresent> {
    let mul = Token::Binary(BinaryOp::Mul);
    let sub = Token::Binary(BinaryOp::Sub);
    match f {
        BoolFormula::Lit(false) => out.extend([mul, X1, X2]),
        BoolFormula::Lit(true) => out.extend([sub, X1, X2]),
        BoolFormula::Not(c) => {
            out.extend([sub, sub, X1, X2]);
            emit(c, out)?;
        }
        BoolFormula::And(l, r) => {
            out.push(mul);
            emit(l, out)?;
            emit(r, out)?;
        }
        BoolFormula::Or(..) => return Err(OrPresent),
    }
    Ok(())
}

/// Incomplete sequence plus data; the metric is mean squared error.
#[derive(Clone, Debug, PartialEq)]
pub struct LtpInstance {
    pub prefix: Vec<Token>,
    pub data: Dataset,
}

pub fn reduction_data() -> Dataset {
    Dataset::from_points(vec![vec![1.0, 0.0], vec![0.0, -1.0]], vec![1.0, 0.0]).expect("fixed points are finite")
}

pub fn build_ltp_instance(f: &BoolFormula) -> LtpInstance {
    let mut prefix = vec![Token::Binary(BinaryOp::Add)];
    prefix.extend(bool_to_tokens(&eliminate_or(f)).expect("eliminate_or output has no disjunction"));
    LtpInstance { prefix, data: reduction_data() }
}

/// Range searched for the `C` completion.
pub const CONSTANT_INTERVAL: Interval = Interval { low: -10.0, high: 10.0 };

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LeafLoss {
    pub token: Token,
    pub loss: f64,
    /// Fitted value for `C`, clamped to [`CONSTANT_INTERVAL`].
    pub constant: Option<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LtpSolution {
    pub best: Token,
    /// In candidate order `x_1, …, x_d, C`.
    pub losses: Vec<LeafLoss>,
}

/// Completes the prefix with each of `x_1..x_d, C` and returns the strict
/// argmin of MSE; ties keep the earlier candidate.
pub fn solve_last_token(inst: &LtpInstance) -> LtpSolution {
    let dims = inst.data.dims();
    let candidates = (1..=dims).map(Token::Var).chain(core::iter::once(Token::Const));
    let mut losses = Vec::with_capacity(dims + 1);
    for token in candidates {
        let mut seq = inst.prefix.clone();
        seq.push(token);
        losses.push(leaf_loss(&seq, token, &inst.data));
    }
    let mut best = 0;
    for (i, l) in losses.iter().enumerate() {
        if l.loss < losses[best].loss {
            best = i;
        }
    }
    LtpSolution { best: losses[best].token, losses }
}

fn leaf_loss(seq: &[Token], token: Token, data: &Dataset) -> LeafLoss {
    let Ok(e) = deserialize(seq) else {
        return LeafLoss { token, loss: f64::INFINITY, constant: None };
    };
    let n_consts = e.placeholder_count();
    if n_consts == 0 {
        let loss = predict(&e, data).map(|yh| mse(&data.targets, &yh)).unwrap_or(f64::INFINITY);
        return LeafLoss { token, loss: finite_or_inf(loss), constant: None };
    }
    let Ok(fit) = fit_expr(&e, data, &FitConfig::default()) else {
        return LeafLoss { token, loss: f64::INFINITY, constant: None };
    };
    let consts: Vec<f64> =
        fit.constants.iter().map(|c| c.clamp(CONSTANT_INTERVAL.low, CONSTANT_INTERVAL.high)).collect();
    let loss = e
        .fill_placeholders(&consts)
        .ok()
        .and_then(|filled| predict(&filled, data).ok())
        .map(|yh| mse(&data.targets, &yh))
        .unwrap_or(f64::INFINITY);
    LeafLoss { token, loss: finite_or_inf(loss), constant: consts.last().copied() }
}

fn finite_or_inf(v: f64) -> f64 {
    if v.is_finite() {
        v
    } else {
        f64::INFINITY
    }
}

pub const LOSS_TOL: f64 = 1e-9;
pub const CONSTANT_FLOOR: f64 = 0.25 - 1e-6;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Verdict {
    pub formula: String,
    pub value: bool,
    pub tokens: Vec<Token>,
    pub losses: Vec<LeafLoss>,
    pub answer: Token,
    pub pass: bool,
    pub failures: Vec<String>,
}

/// Solves the reduced instance and checks the answer and loss separations.
pub fn check_reduction(f: &BoolFormula) -> Verdict {
    let inst = build_ltp_instance(f);
    let sol = solve_last_token(&inst);
    let value = eval_bool(f);
    let mut failures = Vec::new();
    let (win, lose) = if value { (1, 0) } else { (0, 1) };
    let expected = if value { X2 } else { X1 };
    if sol.best != expected {
        failures.push(alloc::format!("answer {} but formula evaluates to {}", sol.best, u8::from(value)));
    }
    let loss = |i: usize| sol.losses.get(i).map_or(f64::NAN, |l| l.loss);
    if !(math::abs(loss(win)) <= LOSS_TOL) {
        failures.push(alloc::format!("winning loss {} is not 0", loss(win)));
    }
    if !(math::abs(1.0 - loss(lose)) <= LOSS_TOL) {
        failures.push(alloc::format!("runner-up loss {} is not 1", loss(lose)));
    }
    if !(loss(2) >= CONSTANT_FLOOR) {
        failures.push(alloc::format!("constant loss {} is below 1/4", loss(2)));
    }
    Verdict {
        formula: alloc::format!("{f}"),
        value,
        tokens: inst.prefix,
        losses: sol.losses,
        answer: sol.best,
        pass: failures.is_empty(),
        failures,
    }
}

/// Formula `index` of a seeded batch.
pub fn batch_formula(seed: u64, index: u64, max_depth: usize) -> BoolFormula {
    random_formula(&mut rng::stream(seed, "theory-formula", index), max_depth)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct PacConfig {
    /// Hypothesis-class size.
    pub u: usize,
    /// Items drawn per burn-in round.
    pub r: usize,
    pub d0: u32,
    /// Target items that must all be drawn during burn-in.
    pub k: usize,
    pub beta: f64,
    pub delta: f64,
    pub trials: usize,
    pub seed: u64,
}

impl Default for PacConfig {
    fn default() -> Self {
        PacConfig { u: 100, r: 5, d0: 3, k: 8, beta: 0.3, delta: 0.1, trials: 10_000, seed: 0 }
    }
}

#[derive(Clone, Debug, PartialEq, thiserror::Error)]
#[error("invalid PAC configuration: {0}")]
pub struct PacConfigError(pub String);

impl PacConfig {
    /// Checks `K ≤ 2^D0 ≤ U`, `r ≥ 1`, `β ∈ (0,1]` and `δ ∈ (0,1)`.
    /// `K = 0` is admitted.
    pub fn validate(&self) -> Result<(), PacConfigError> {
        let err = |m: &str| Err(PacConfigError(m.into()));
        if self.d0 >= 63 {
            return err("d0 must be below 63");
        }
        let cap = 1usize << self.d0;
        if self.k > cap {
            return err("k exceeds 2^d0");
        }
        if cap > self.u {
            return err("2^d0 exceeds u");
        }
        if self.r == 0 {
            return err("r must be positive");
        }
        if !(self.beta > 0.0 && self.beta <= 1.0) {
            return err("beta must lie in (0, 1]");
        }
        if !(self.delta > 0.0 && self.delta < 1.0) {
            return err("delta must lie in (0, 1)");
        }
        Ok(())
    }

    /// Burn-in rounds `⌈(U/r)·ln(2^D0/(δ/2))⌉`.
    pub fn burn_in(&self) -> usize {
        let v = (self.u as f64 / self.r as f64) * (self.d0 as f64 * core::f64::consts::LN_2 - math::ln(self.delta / 2.0));
        math::ceil(v) as usize
    }

    /// Post-phase rounds `⌈ln(2/δ)/β⌉`.
    pub fn post_rounds(&self) -> usize {
        math::ceil(math::ln(2.0 / self.delta) / self.beta) as usize
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum TrialOutcome {
    Success,
    BurnInFailure,
    PostFailure,
}

/// One trial on its own RNG stream. Items `0..k` are the targets; burn-in
/// draws `r` unseen items per round without replacement, so after `B`
/// rounds the seen set is a uniform subset of size `min(U, rB)`.
pub fn pac_trial(cfg: &PacConfig, trial: u64) -> TrialOutcome {
    let mut rng = rng::stream(cfg.seed, "pac-trial", trial);
    let mut items: Vec<usize> = (0..cfg.u).collect();
    let seen = cfg.r.saturating_mul(cfg.burn_in()).min(cfg.u);
    let (drawn, _) = items.partial_shuffle(&mut rng, seen);
    let hits = drawn.iter().filter(|&&i| i < cfg.k).count();
    if hits < cfg.k {
        return TrialOutcome::BurnInFailure;
    }
    for _ in 0..cfg.post_rounds() {
        if rng.gen_bool(cfg.beta) {
            return TrialOutcome::Success;
        }
    }
    TrialOutcome::PostFailure
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PacStats {
    pub config: PacConfig,
    pub burn_in: usize,
    pub post_rounds: usize,
    pub trials: usize,
    pub burn_in_failures: usize,
    pub post_failures: usize,
    pub failure_rate: f64,
    /// Every trial runs all `B + R` rounds.
    pub mean_oracle_calls: f64,
}

impl PacStats {
    pub fn from_outcomes(cfg: &PacConfig, outcomes: &[TrialOutcome]) -> Self {
        let burn = outcomes.iter().filter(|o| **o == TrialOutcome::BurnInFailure).count();
        let post = outcomes.iter().filter(|o| **o == TrialOutcome::PostFailure).count();
        let n = outcomes.len();
        PacStats {
            config: cfg.clone(),
            burn_in: cfg.burn_in(),
            post_rounds: cfg.post_rounds(),
            trials: n,
            burn_in_failures: burn,
            post_failures: post,
            failure_rate: if n == 0 { 0.0 } else { (burn + post) as f64 / n as f64 },
            mean_oracle_calls: (cfg.burn_in() + cfg.post_rounds()) as f64,
        }
    }
}

pub fn pac_simulate(cfg: &PacConfig) -> Result<PacStats, PacConfigError> {
    cfg.validate()?;
    let outcomes: Vec<TrialOutcome> = (0..cfg.trials as u64).map(|t| pac_trial(cfg, t)).collect();
    Ok(PacStats::from_outcomes(cfg, &outcomes))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::expr::{deficit_after, format_tokens, parse_tokens};
    use alloc::string::ToString;
    use proptest::prelude::*;

    fn p(s: &str) -> BoolFormula {
        parse_formula(s).unwrap()
    }

    fn toks(s: &str) -> Vec<Token> {
        parse_tokens(s.split_whitespace()).unwrap()
    }

    #[test]
    fn eval_examples() {
        assert!(!eval_bool(&p("(0∧1)")));
        assert!(eval_bool(&p("(¬0)")));
        assert!(eval_bool(&p("(0∨1)")));
    }

    #[test]
    fn parser_is_strict() {
        assert_eq!(p("( (1 & 0) | (!0) )"), p("((1∧0)∨(¬0))"));
        for bad in ["", "0∧1", "(0)", "(¬0", "(0∧1))", "(0+1)", "2", "¬0"] {
            assert!(parse_formula(bad).is_err(), "{bad}");
        }
        let f = p("((1∧0)∨(¬0))");
        assert_eq!(p(&f.to_string()), f);
    }

    #[test]
    fn or_elimination() {
        assert_eq!(eliminate_or(&p("(0∨1)")), p("(¬((¬0)∧(¬1)))"));
        let f = p("((¬1)∧0)");
        assert_eq!(eliminate_or(&f), f);
    }

    #[test]
    fn token_examples() {
        assert_eq!(bool_to_tokens(&p("(0∧1)")).unwrap(), toks("mul mul x_1 x_2 sub x_1 x_2"));
        assert_eq!(bool_to_tokens(&p("(¬0)")).unwrap(), toks("sub sub x_1 x_2 mul x_1 x_2"));
        assert_eq!(bool_to_tokens(&p("1")).unwrap(), toks("sub x_1 x_2"));
        assert_eq!(bool_to_tokens(&p("(0∨1)")), Err(OrPresent));
        let inst = build_ltp_instance(&p("(0∧1)"));
        assert_eq!(format_tokens(&inst.prefix), "add mul mul x_1 x_2 sub x_1 x_2");
        assert_eq!(inst.data.inputs, vec![vec![1.0, 0.0], vec![0.0, -1.0]]);
        assert_eq!(inst.data.targets, vec![1.0, 0.0]);
    }

    #[test]
    fn verdict_examples() {
        let v = check_reduction(&p("(0∧1)"));
        assert!(v.pass, "{:?}", v.failures);
        assert_eq!(v.answer, X1);
        assert!(v.losses[0].loss.abs() < 1e-12 && (v.losses[1].loss - 1.0).abs() < 1e-12);
        assert!((v.losses[2].loss - 0.25).abs() < 1e-6);
        let v = check_reduction(&p("(¬0)"));
        assert!(v.pass);
        assert_eq!(v.answer, X2);
        assert!((v.losses[0].loss - 1.0).abs() < 1e-12 && v.losses[1].loss.abs() < 1e-12);
    }

    // Independent solver: closed-form losses for a constant-valued body.
    fn closed_form_losses(inst: &LtpInstance) -> [f64; 3] {
        let seq = |t| {
            let mut s = inst.prefix.clone();
            s.push(t);
            deserialize(&s).unwrap()
        };
        let d = &inst.data;
        let direct = |t| {
            let e = seq(t);
            d.inputs.iter().zip(&d.targets).map(|(x, y)| (y - e.evaluate(x).unwrap()).powi(2)).sum::<f64>() / 2.0
        };
        // add(body, C): the best c is mean(y - body).
        let zero = seq(Token::Const).fill_placeholders(&[0.0]).unwrap();
        let resid: Vec<f64> = d.inputs.iter().zip(&d.targets).map(|(x, y)| y - zero.evaluate(x).unwrap()).collect();
        let c = (resid[0] + resid[1]) / 2.0;
        let cl = resid.iter().map(|r| (r - c).powi(2)).sum::<f64>() / 2.0;
        [direct(X1), direct(X2), cl]
    }

    #[test]
    fn solver_matches_closed_form() {
        for i in 0..200 {
            let f = batch_formula(11, i, 6);
            let inst = build_ltp_instance(&f);
            let sol = solve_last_token(&inst);
            let cf = closed_form_losses(&inst);
            for (l, c) in sol.losses.iter().zip(cf) {
                assert!((l.loss - c).abs() < 1e-6, "{f}: {} vs {c}", l.loss);
            }
        }
    }

    #[test]
    fn solver_on_generic_instance() {
        let data = Dataset::from_points(
            vec![vec![0.5, 2.0, -1.0], vec![1.5, -3.0, 0.0], vec![-2.0, 1.0, 4.0]],
            vec![1.0, -2.0, 2.0],
        )
        .unwrap();
        let inst = LtpInstance { prefix: toks("add x_1"), data };
        let sol = solve_last_token(&inst);
        assert_eq!(sol.losses.len(), 4);
        // x_1 + x_3 gives residuals (1.5, -3.5, 0); x_1 + x_2 gives (-1.5, -2.5, 3).
        let by_hand = [
            ((1.0f64 - 1.0).powi(2) + (-2.0f64 - 3.0).powi(2) + (2.0f64 + 4.0).powi(2)) / 3.0,
            ((1.0f64 - 2.5).powi(2) + (-2.0f64 + 1.5).powi(2) + (2.0f64 + 1.0).powi(2)) / 3.0,
            ((1.0f64 + 0.5).powi(2) + (-2.0f64 - 1.5).powi(2) + (2.0f64 - 2.0).powi(2)) / 3.0,
        ];
        for (l, h) in sol.losses.iter().zip(by_hand) {
            assert!((l.loss - h).abs() < 1e-12);
        }
        let best = sol.losses.iter().map(|l| l.loss).fold(f64::INFINITY, f64::min);
        assert_eq!(sol.losses.iter().find(|l| l.loss == best).unwrap().token, sol.best);
    }

    #[test]
    fn pac_bounds() {
        let cfg = PacConfig::default();
        assert_eq!(cfg.burn_in(), 102);
        assert_eq!(cfg.post_rounds(), 10);
        let ok = PacConfig { k: 0, beta: 1.0, trials: 500, ..cfg.clone() };
        assert_eq!(pac_simulate(&ok).unwrap().failure_rate, 0.0);
        for bad in [
            PacConfig { k: 9, ..cfg.clone() },
            PacConfig { u: 7, ..cfg.clone() },
            PacConfig { beta: 0.0, ..cfg.clone() },
            PacConfig { delta: 1.0, ..cfg.clone() },
            PacConfig { r: 0, ..cfg.clone() },
        ] {
            assert!(bad.validate().is_err());
        }
    }

    #[test]
    fn burn_in_covers_the_class() {
        // (U/r)·ln(2^(D0+1)/δ) ≥ (U/r)·ln 4 > U/r, so without-replacement
        // draws always exhaust the class.
        for u in [4usize, 16, 100, 1000] {
            for r in [1usize, 3, 7, 50] {
                let cfg = PacConfig { u, r, d0: 2, k: 4, beta: 0.5, delta: 0.99, trials: 50, seed: 1 };
                assert!(cfg.r * cfg.burn_in() >= cfg.u);
                assert_eq!(pac_simulate(&cfg).unwrap().burn_in_failures, 0);
            }
        }
    }

    fn arb_formula() -> impl Strategy<Value = BoolFormula> {
        let leaf = any::<bool>().prop_map(BoolFormula::Lit);
        leaf.prop_recursive(10, 256, 2, |inner| {
            prop_oneof![
                inner.clone().prop_map(BoolFormula::not),
                (inner.clone(), inner.clone()).prop_map(|(l, r)| BoolFormula::and(l, r)),
                (inner.clone(), inner).prop_map(|(l, r)| BoolFormula::or(l, r)),
            ]
        })
    }

    fn subst_len(f: &BoolFormula) -> usize {
        match f {
            BoolFormula::Lit(_) => 3,
            BoolFormula::Not(c) => 4 + subst_len(c),
            BoolFormula::And(l, r) => 1 + subst_len(l) + subst_len(r),
            BoolFormula::Or(..) => unreachable!(),
        }
    }

    proptest! {
        #[test]
        fn eliminate_or_preserves_value(f in arb_formula()) {
            let g = eliminate_or(&f);
            prop_assert!(!contains_or(&g));
            prop_assert_eq!(eval_bool(&f), eval_bool(&g));
        }

        #[test]
        fn display_round_trips(f in arb_formula()) {
            prop_assert_eq!(parse_formula(&f.to_string()).unwrap(), f);
        }

        #[test]
        fn instance_is_one_leaf_short(f in arb_formula()) {
            let g = eliminate_or(&f);
            let inst = build_ltp_instance(&f);
            prop_assert_eq!(inst.prefix.len(), 1 + subst_len(&g));
            prop_assert_eq!(deficit_after(&inst.prefix).unwrap(), 1);
            let mut done = inst.prefix.clone();
            done.push(X1);
            prop_assert!(deserialize(&done).is_ok());
        }

        #[test]
        fn reduction_sound(f in arb_formula()) {
            let v = check_reduction(&f);
            prop_assert!(v.pass, "{:?}", v.failures);
        }

        #[test]
        fn pac_failure_within_delta(u in 8usize..60, r in 1usize..6, d0 in 1u32..3, beta in 0.2f64..1.0, delta in 0.05f64..0.5) {
            let k = 1usize << d0;
            let cfg = PacConfig { u, r, d0, k, beta, delta, trials: 400, seed: u as u64 };
            let s = pac_simulate(&cfg).unwrap();
            let slack = 3.0 * (delta * (1.0 - delta) / 400.0).sqrt();
            prop_assert!(s.failure_rate <= delta + slack);
        }
    }
}
