//! Beam search and MCTS decoding with constant fitting.
//!
//! Both decoders score completed sequences by fitting their constants on
//! the query data. Cost is reported as the number of candidate expressions
//! generated: `b` for beam search, `simulations · b` for MCTS.

use alloc::collections::{BTreeMap, BTreeSet, BinaryHeap};
use alloc::vec;
use alloc::vec::Vec;
use core::cmp::Ordering;
use core::fmt;

use serde::{Deserialize, Serialize};

use crate::datagen::Dataset;
use crate::expr::{deficit_after, deserialize, Expr, ExprError, Token};
use crate::fitting::{fit_expr, nmse, predict, r2_score, FitConfig};
use crate::math;
use crate::policy::{Policy, PolicyError};

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum BeamMode {
    /// Position `k` of each step is the best unchosen extension of the top
    /// `k + 1` parents. The top `w` items of a width-`W` search equal the
    /// width-`w` search, so candidate sets are nested in the width and
    /// width 1 is greedy decoding.
    #[default]
    Nested,
    /// Keeps the `b` best extensions over all parents.
    Standard,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct BeamConfig {
    pub beam_size: usize,
    pub max_len: usize,
    pub mode: BeamMode,
    pub fit: FitConfig,
}

impl Default for BeamConfig {
    fn default() -> Self {
        BeamConfig { beam_size: 5, max_len: 60, mode: BeamMode::Nested, fit: FitConfig::default() }
    }
}

impl BeamConfig {
    pub fn validate(&self) -> Result<(), DecodeError> {
        if self.beam_size == 0 {
            return Err(DecodeError::InvalidConfig("beam size must be at least 1"));
        }
        if self.max_len == 0 {
            return Err(DecodeError::InvalidConfig("max_len must be at least 1"));
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum Strategy {
    #[serde(rename = "greedy")]
    Greedy,
    #[serde(rename = "beam")]
    Beam,
    #[serde(rename = "mcts")]
    Mcts,
    #[serde(rename = "gvs")]
    Gvs,
    #[serde(rename = "gvs+mcts")]
    GvsMcts,
}

impl fmt::Display for Strategy {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Strategy::Greedy => "greedy",
            Strategy::Beam => "beam",
            Strategy::Mcts => "mcts",
            Strategy::Gvs => "gvs",
            Strategy::GvsMcts => "gvs+mcts",
        })
    }
}

#[derive(Clone, Debug, PartialEq, thiserror::Error)]
pub enum DecodeError {
    /// Every candidate failed to fit or scored a non-finite R².
    /// `best_tokens` is the highest log-probability candidate, if any.
    #[error("no candidate could be ranked")]
    NoFiniteCandidate { best_tokens: Vec<Token> },
    #[error(transparent)]
    Policy(#[from] PolicyError),
    #[error("invalid decoder config: {0}")]
    InvalidConfig(&'static str),
}

/// A completed token sequence with its log-probability under the policy.
#[derive(Clone, Debug, PartialEq)]
pub struct Candidate {
    pub tokens: Vec<Token>,
    pub log_prob: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Prediction {
    /// Fitted expression (no placeholders).
    pub expr: Expr,
    /// Generated sequence, constants as `C`.
    pub tokens: Vec<Token>,
    /// Fitted values of the `C` tokens in order.
    pub constants: Vec<f64>,
    /// R² on the data the constants were fitted to.
    pub r2_fit: f64,
    pub log_prob: f64,
    pub strategy: Strategy,
    pub novelty: Option<bool>,
    pub candidates_generated: usize,
    /// Completed sequences considered by the final selection.
    pub candidate_set: Vec<Vec<Token>>,
}

/// Fit outcome of one candidate sequence.
#[derive(Clone, Debug, PartialEq)]
pub struct Scored {
    pub tokens: Vec<Token>,
    pub log_prob: f64,
    pub expr: Option<Expr>,
    pub constants: Vec<f64>,
    /// R² of the fitted expression; `-inf` when unrankable.
    pub r2: f64,
}

/// Fits a completed sequence and computes its R² on `data`.
pub fn score_sequence(tokens: &[Token], log_prob: f64, data: &Dataset, fit: &FitConfig) -> Scored {
    let fitted = deserialize(tokens).ok().and_then(|e| fit_expr(&e, data, fit).ok());
    match fitted {
        Some(f) => {
            let r2 = predict(&f.fitted, data).map_or(f64::NEG_INFINITY, |yh| r2_score(&data.targets, &yh));
            Scored { tokens: tokens.to_vec(), log_prob, expr: Some(f.fitted), constants: f.constants, r2 }
        }
        None => Scored { tokens: tokens.to_vec(), log_prob, expr: None, constants: Vec::new(), r2: f64::NEG_INFINITY },
    }
}

/// Selection order: higher R², higher log-probability, shorter, then
/// lexicographic tokens. `Less` means `a` is preferred.
pub fn compare_scored(a: &Scored, b: &Scored) -> Ordering {
    b.r2.total_cmp(&a.r2)
        .then(b.log_prob.total_cmp(&a.log_prob))
        .then(a.tokens.len().cmp(&b.tokens.len()))
        .then(a.tokens.cmp(&b.tokens))
}

fn is_rankable(s: &Scored) -> bool {
    s.expr.is_some() && s.r2.is_finite()
}

/// Picks the best rankable candidate.
pub fn select_best(scored: &[Scored]) -> Result<&Scored, DecodeError> {
    scored.iter().filter(|s| is_rankable(s)).min_by(|a, b| compare_scored(a, b)).ok_or_else(|| {
        let best_tokens = scored
            .iter()
            .min_by(|a, b| b.log_prob.total_cmp(&a.log_prob).then(a.tokens.cmp(&b.tokens)))
            .map(|s| s.tokens.clone())
            .unwrap_or_default();
        DecodeError::NoFiniteCandidate { best_tokens }
    })
}

fn to_prediction(s: &Scored, strategy: Strategy, cost: usize, candidate_set: Vec<Vec<Token>>) -> Prediction {
    Prediction {
        expr: s.expr.clone().expect("rankable"),
        tokens: s.tokens.clone(),
        constants: s.constants.clone(),
        r2_fit: s.r2,
        log_prob: s.log_prob,
        strategy,
        novelty: None,
        candidates_generated: cost,
        candidate_set,
    }
}

/// Extensions of `prefix` that keep completion within `max_len` possible,
/// as `(token, log-prob)`; `End` after a complete prefix.
fn feasible_extensions<P: Policy + ?Sized>(
    policy: &P,
    prefix: &[Token],
    data: &Dataset,
    prompt: &[Token],
    max_len: usize,
) -> Result<Vec<(Token, f64)>, DecodeError> {
    let dist = policy.next_token_dist(prefix, data, prompt)?;
    let deficit = deficit_after(prefix).map_err(|_| PolicyError::IllegalPrefix("not a partial serialization"))?;
    Ok(dist
        .ranked()
        .into_iter()
        .filter(|(t, _)| match t.arity() {
            None => *t == Token::End && deficit == 0,
            Some(a) => deficit > 0 && prefix.len() + 1 + (deficit - 1 + a) <= max_len,
        })
        .map(|(t, p)| (t, math::ln(p)))
        .collect())
}

#[derive(Clone, Debug)]
struct Item {
    tokens: Vec<Token>,
    log_prob: f64,
    complete: bool,
}

/// Heap order: best score first, ties to the lexicographically smaller
/// sequence.
struct Ranked(Item);

impl PartialEq for Ranked {
    fn eq(&self, other: &Self) -> bool {
        self.cmp(other) == Ordering::Equal
    }
}
impl Eq for Ranked {}
impl PartialOrd for Ranked {
    fn partial_cmp(&self, other: &Self) -> Option<Ordering> {
        Some(self.cmp(other))
    }
}
impl Ord for Ranked {
    fn cmp(&self, other: &Self) -> Ordering {
        self.0.log_prob.total_cmp(&other.0.log_prob).then(other.0.tokens.cmp(&self.0.tokens))
    }
}

fn extend<P: Policy + ?Sized>(
    policy: &P,
    item: &Item,
    data: &Dataset,
    prompt: &[Token],
    max_len: usize,
) -> Result<Vec<Item>, DecodeError> {
    if item.complete {
        return Ok(vec![item.clone()]);
    }
    let exts = feasible_extensions(policy, &item.tokens, data, prompt, max_len)?;
    Ok(exts
        .into_iter()
        .map(|(t, lp)| {
            let mut tokens = item.tokens.clone();
            tokens.push(t);
            let complete = deficit_after(&tokens) == Ok(0);
            Item { tokens, log_prob: item.log_prob + lp, complete }
        })
        .collect())
}

/// Length-capped beam search from `start`. Returns the completed
/// sequences of the final beam, best first under the beam order.
pub fn beam_search<P: Policy + ?Sized>(
    policy: &P,
    data: &Dataset,
    prompt: &[Token],
    start: &[Token],
    width: usize,
    max_len: usize,
    mode: BeamMode,
) -> Result<Vec<Candidate>, DecodeError> {
    if width == 0 {
        return Err(DecodeError::InvalidConfig("beam size must be at least 1"));
    }
    let complete = deficit_after(start).map_err(|_| PolicyError::IllegalPrefix("not a partial serialization"))? == 0;
    if !complete && start.len() + deficit_after(start).unwrap_or(1) > max_len {
        return Ok(Vec::new());
    }
    let mut beam = vec![Item { tokens: start.to_vec(), log_prob: 0.0, complete }];
    while beam.iter().any(|i| !i.complete) {
        beam = match mode {
            BeamMode::Nested => {
                let mut heap = BinaryHeap::new();
                let mut next = Vec::with_capacity(width);
                for k in 0..width {
                    if let Some(parent) = beam.get(k) {
                        for e in extend(policy, parent, data, prompt, max_len)? {
                            heap.push(Ranked(e));
                        }
                    }
                    match heap.pop() {
                        Some(Ranked(best)) => next.push(best),
                        None => break,
                    }
                }
                next
            }
            BeamMode::Standard => {
                let mut all = Vec::new();
                for parent in &beam {
                    all.extend(extend(policy, parent, data, prompt, max_len)?.into_iter().map(Ranked));
                }
                all.sort_by(|a, b| b.cmp(a));
                all.truncate(width);
                all.into_iter().map(|r| r.0).collect()
            }
        };
    }
    Ok(beam.into_iter().map(|i| Candidate { tokens: i.tokens, log_prob: i.log_prob }).collect())
}

/// Token-wise argmax path (ties in token order).
pub fn greedy_decode<P: Policy + ?Sized>(
    policy: &P,
    data: &Dataset,
    prompt: &[Token],
    max_len: usize,
) -> Result<Option<Candidate>, DecodeError> {
    let mut tokens = Vec::new();
    let mut log_prob = 0.0;
    while deficit_after(&tokens) != Ok(0) {
        let exts = feasible_extensions(policy, &tokens, data, prompt, max_len)?;
        let Some(&(t, lp)) = exts.first() else {
            return Ok(None);
        };
        tokens.push(t);
        log_prob += lp;
    }
    Ok(Some(Candidate { tokens, log_prob }))
}

/// Beam search, constant fitting of every candidate, selection by R².
pub fn beam_decode<P: Policy + ?Sized>(
    policy: &P,
    data: &Dataset,
    prompt: &[Token],
    cfg: &BeamConfig,
) -> Result<Prediction, DecodeError> {
    cfg.validate()?;
    let cands = beam_search(policy, data, prompt, &[], cfg.beam_size, cfg.max_len, cfg.mode)?;
    let scored: Vec<Scored> = cands.iter().map(|c| score_sequence(&c.tokens, c.log_prob, data, &cfg.fit)).collect();
    let best = select_best(&scored)?;
    let set = cands.into_iter().map(|c| c.tokens).collect();
    Ok(to_prediction(best, Strategy::Beam, cfg.beam_size, set))
}

/// `1 / (1 + NMSE) + λ · exp(-|seq| / L)`; 0 when any prediction is
/// non-finite.
pub fn reward(e: &Expr, data: &Dataset, lambda: f64, max_len: usize) -> Result<f64, ExprError> {
    let yhat = predict(e, data)?;
    if yhat.iter().any(|v| !v.is_finite()) {
        return Ok(0.0);
    }
    let fit = 1.0 / (1.0 + nmse(&data.targets, &yhat));
    Ok(fit + lambda * math::exp(-(e.token_len() as f64) / max_len as f64))
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case", tag = "kind", content = "value")]
pub enum RolloutBudget {
    /// `r` simulations before committing each token.
    PerToken(usize),
    /// Total simulations, all from the root.
    PerExpression(usize),
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct MctsConfig {
    pub budget: RolloutBudget,
    pub k_max: usize,
    /// Completion beam width.
    pub beam_size: usize,
    pub lambda: f64,
    pub max_len: usize,
    pub c_puct: f64,
    pub fit: FitConfig,
}

impl Default for MctsConfig {
    fn default() -> Self {
        MctsConfig {
            budget: RolloutBudget::PerToken(3),
            k_max: 3,
            beam_size: 1,
            lambda: 0.01,
            max_len: 60,
            c_puct: 1.0,
            fit: FitConfig::default(),
        }
    }
}

impl MctsConfig {
    pub fn validate(&self) -> Result<(), DecodeError> {
        let bad = |m| Err(DecodeError::InvalidConfig(m));
        match self.budget {
            RolloutBudget::PerToken(0) | RolloutBudget::PerExpression(0) => return bad("rollout budget must be positive"),
            _ => {}
        }
        if self.k_max == 0 || self.beam_size == 0 || self.max_len == 0 {
            return bad("k_max, beam size and max_len must be positive");
        }
        if !(self.lambda >= 0.0 && self.c_puct >= 0.0) {
            return bad("lambda and c_puct must be non-negative");
        }
        Ok(())
    }
}

/// One Q update, for auditing max-backpropagation.
#[derive(Clone, Debug, PartialEq)]
pub struct QUpdate {
    pub simulation: usize,
    pub prefix: Vec<Token>,
    pub q: f64,
    pub visits: u64,
}

#[derive(Clone, Debug)]
pub struct MctsOutcome {
    pub prediction: Prediction,
    pub simulations: usize,
    pub q_log: Vec<QUpdate>,
    /// Every completed sequence produced by a simulation.
    pub explored: BTreeSet<Vec<Token>>,
}

#[derive(Clone, Debug)]
struct Node {
    tokens: Vec<Token>,
    prior: f64,
    log_prob: f64,
    visits: u64,
    q: f64,
    children: Vec<usize>,
    expanded: bool,
}

struct Mcts<'a, P: ?Sized> {
    policy: &'a P,
    data: &'a Dataset,
    prompt: &'a [Token],
    cfg: &'a MctsConfig,
    nodes: Vec<Node>,
    cache: BTreeMap<Vec<Token>, (Scored, f64)>,
    best: Option<(Scored, f64)>,
    simulations: usize,
    q_log: Vec<QUpdate>,
    explored: BTreeSet<Vec<Token>>,
}

impl<P: Policy + ?Sized> Mcts<'_, P> {
    fn select(&self, root: usize) -> Vec<usize> {
        let mut path = vec![root];
        let mut node = root;
        while self.nodes[node].expanded && !self.nodes[node].children.is_empty() {
            let parent_n = math::sqrt(self.nodes[node].visits as f64);
            let mut best: Option<(f64, usize)> = None;
            for &c in &self.nodes[node].children {
                let ch = &self.nodes[c];
                let score = ch.q + self.cfg.c_puct * ch.prior * parent_n / (1.0 + ch.visits as f64);
                // Children are in token order, so strict `>` keeps the first on ties.
                if best.is_none_or(|(s, _)| score > s) {
                    best = Some((score, c));
                }
            }
            node = best.expect("non-empty children").1;
            path.push(node);
        }
        path
    }

    fn expand(&mut self, node: usize) -> Result<(), DecodeError> {
        self.nodes[node].expanded = true;
        let tokens = self.nodes[node].tokens.clone();
        if deficit_after(&tokens) == Ok(0) {
            return Ok(());
        }
        let dist = self.policy.next_token_dist(&tokens, self.data, self.prompt)?;
        let feasible = feasible_extensions(self.policy, &tokens, self.data, self.prompt, self.cfg.max_len)?;
        let mut top: Vec<(Token, f64)> = feasible.into_iter().take(self.cfg.k_max).collect();
        top.sort_by_key(|a| a.0);
        for (t, lp) in top {
            let mut child = tokens.clone();
            child.push(t);
            let id = self.nodes.len();
            self.nodes.push(Node {
                tokens: child,
                prior: dist.prob(t),
                log_prob: self.nodes[node].log_prob + lp,
                visits: 0,
                q: 0.0,
                children: Vec::new(),
                expanded: false,
            });
            self.nodes[node].children.push(id);
        }
        Ok(())
    }

    fn evaluate(&mut self, tokens: &[Token], log_prob: f64) -> f64 {
        self.explored.insert(tokens.to_vec());
        let (scored, value) = match self.cache.get(tokens) {
            Some(hit) => hit.clone(),
            None => {
                let s = score_sequence(tokens, log_prob, self.data, &self.cfg.fit);
                let v = match &s.expr {
                    Some(e) if s.r2.is_finite() => reward(e, self.data, self.cfg.lambda, self.cfg.max_len).unwrap_or(0.0),
                    _ => 0.0,
                };
                self.cache.insert(tokens.to_vec(), (s.clone(), v));
                (s, v)
            }
        };
        if is_rankable(&scored) {
            let better = match &self.best {
                None => true,
                Some((b, bv)) => value > *bv || (value == *bv && compare_scored(&scored, b) == Ordering::Less),
            };
            if better {
                self.best = Some((scored, value));
            }
        }
        value
    }

    /// One selection, expansion, simulation and backpropagation pass.
    fn iterate(&mut self, root: usize) -> Result<(), DecodeError> {
        let path = self.select(root);
        let leaf = *path.last().expect("non-empty path");
        if !self.nodes[leaf].expanded {
            self.expand(leaf)?;
        }
        let start = self.nodes[leaf].tokens.clone();
        let base_lp = self.nodes[leaf].log_prob;
        let completions =
            beam_search(self.policy, self.data, self.prompt, &start, self.cfg.beam_size, self.cfg.max_len, BeamMode::Nested)?;
        self.simulations += 1;
        let mut value: f64 = 0.0;
        for c in completions {
            value = value.max(self.evaluate(&c.tokens, base_lp + c.log_prob));
        }
        for &n in &path {
            let node = &mut self.nodes[n];
            node.visits += 1;
            node.q = node.q.max(value);
            self.q_log.push(QUpdate {
                simulation: self.simulations,
                prefix: node.tokens.clone(),
                q: node.q,
                visits: node.visits,
            });
        }
        Ok(())
    }

    /// Child with the highest Q; ties to more visits, then token order.
    fn commit(&self, node: usize) -> Option<usize> {
        let mut best: Option<usize> = None;
        for &c in &self.nodes[node].children {
            let ch = &self.nodes[c];
            best = match best {
                Some(b) if (self.nodes[b].q, self.nodes[b].visits) >= (ch.q, ch.visits) => Some(b),
                _ => Some(c),
            };
        }
        best
    }
}

/// Search state after an MCTS run, successful or not.
#[derive(Clone, Debug)]
pub struct MctsSearch {
    /// `None` when no simulated expression was rankable.
    pub prediction: Option<Prediction>,
    /// Highest log-probability simulated sequence.
    pub best_tokens: Vec<Token>,
    pub simulations: usize,
    pub candidates_generated: usize,
    pub q_log: Vec<QUpdate>,
    pub explored: BTreeSet<Vec<Token>>,
}

/// Token-level MCTS guided by P-UCB.
pub fn mcts_decode<P: Policy + ?Sized>(
    policy: &P,
    data: &Dataset,
    prompt: &[Token],
    cfg: &MctsConfig,
) -> Result<MctsOutcome, DecodeError> {
    let s = mcts_search(policy, data, prompt, cfg)?;
    match s.prediction {
        Some(prediction) => {
            Ok(MctsOutcome { prediction, simulations: s.simulations, q_log: s.q_log, explored: s.explored })
        }
        None => Err(DecodeError::NoFiniteCandidate { best_tokens: s.best_tokens }),
    }
}

/// [`mcts_decode`] without turning an unrankable outcome into an error.
pub fn mcts_search<P: Policy + ?Sized>(
    policy: &P,
    data: &Dataset,
    prompt: &[Token],
    cfg: &MctsConfig,
) -> Result<MctsSearch, DecodeError> {
    cfg.validate()?;
    let mut m = Mcts {
        policy,
        data,
        prompt,
        cfg,
        nodes: vec![Node {
            tokens: Vec::new(),
            prior: 1.0,
            log_prob: 0.0,
            visits: 0,
            q: 0.0,
            children: Vec::new(),
            expanded: false,
        }],
        cache: BTreeMap::new(),
        best: None,
        simulations: 0,
        q_log: Vec::new(),
        explored: BTreeSet::new(),
    };
    match cfg.budget {
        RolloutBudget::PerExpression(total) => {
            for _ in 0..total {
                m.iterate(0)?;
            }
        }
        RolloutBudget::PerToken(r) => {
            let mut root = 0;
            while deficit_after(&m.nodes[root].tokens) != Ok(0) {
                for _ in 0..r {
                    m.iterate(root)?;
                }
                match m.commit(root) {
                    Some(c) => root = c,
                    None => break,
                }
            }
        }
    }
    let cost = m.simulations * cfg.beam_size;
    let best_tokens = m
        .cache
        .values()
        .map(|(s, _)| s)
        .min_by(|a, b| b.log_prob.total_cmp(&a.log_prob).then(a.tokens.cmp(&b.tokens)))
        .map(|s| s.tokens.clone())
        .unwrap_or_default();
    let explored_set: Vec<Vec<Token>> = m.explored.iter().cloned().collect();
    let prediction = m.best.as_ref().map(|(s, _)| to_prediction(s, Strategy::Mcts, cost, explored_set));
    Ok(MctsSearch {
        prediction,
        best_tokens,
        simulations: m.simulations,
        candidates_generated: cost,
        q_log: m.q_log,
        explored: m.explored,
    })
}
