//! Iterated generation with verified-subtree prompts.
//!
//! Each iteration builds a prompt from the candidate pool and from subtrees
//! of fresh random expressions, decodes with that prompt, scores the
//! prediction by R² on the query data and folds the score into the pool
//! entry of every subtree of the prediction.

use alloc::collections::BTreeMap;
use alloc::string::String;
use alloc::vec::Vec;

use rand::seq::SliceRandom;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::datagen::{sample_expression, Dataset, GenConfig};
use crate::decoding::{beam_decode, mcts_search, BeamConfig, DecodeError, MctsConfig, Prediction, Strategy};
use crate::expr::{deserialize, Expr, Token};
use crate::math;
use crate::policy::Policy;
use crate::rng;

/// One pool entry: `z` is the mean score of the `c` predictions that
/// contained `subtree`.
#[derive(Clone, Debug, PartialEq)]
pub struct PoolEntry {
    pub subtree: Expr,
    pub key: String,
    pub z: f64,
    pub c: u64,
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct CandidatePool {
    entries: Vec<PoolEntry>,
    index: BTreeMap<String, usize>,
}

impl CandidatePool {
    pub fn new() -> Self {
        CandidatePool::default()
    }

    pub fn entries(&self) -> &[PoolEntry] {
        &self.entries
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn get(&self, subtree: &Expr) -> Option<&PoolEntry> {
        self.index.get(&subtree.to_placeholders().structure_key()).map(|&i| &self.entries[i])
    }

    /// Inserts or overwrites an entry directly.
    pub fn seed(&mut self, subtree: &Expr, z: f64, c: u64) {
        let subtree = subtree.to_placeholders();
        let key = subtree.structure_key();
        match self.index.get(&key) {
            Some(&i) => {
                self.entries[i].z = z;
                self.entries[i].c = c;
            }
            None => {
                self.index.insert(key.clone(), self.entries.len());
                self.entries.push(PoolEntry { subtree, key, z, c });
            }
        }
    }

    /// Folds score `r` into every subtree of `prediction`. Non-finite
    /// scores count as 0.
    pub fn update(&mut self, prediction: &Expr, r: f64) {
        let r = if r.is_finite() { r } else { 0.0 };
        for sub in prediction.to_placeholders().subtrees() {
            let key = sub.structure_key();
            match self.index.get(&key) {
                Some(&i) => {
                    let e = &mut self.entries[i];
                    e.z = (e.c as f64 * e.z + r) / (e.c as f64 + 1.0);
                    e.c += 1;
                }
                None => {
                    self.index.insert(key.clone(), self.entries.len());
                    self.entries.push(PoolEntry { subtree: sub, key, z: r, c: 1 });
                }
            }
        }
    }

    /// Top `k` entries by `z`, ties to higher `c` then smaller key.
    pub fn top_k(&self, k: usize) -> Vec<&PoolEntry> {
        let mut v: Vec<&PoolEntry> = self.entries.iter().collect();
        v.sort_by(|a, b| b.z.total_cmp(&a.z).then(b.c.cmp(&a.c)).then(a.key.cmp(&b.key)));
        v.truncate(k);
        v
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case", tag = "kind")]
pub enum InnerDecoder {
    Beam(BeamConfig),
    Mcts(MctsConfig),
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct GvsConfig {
    pub k: usize,
    pub k_rand: usize,
    pub z_thres: f64,
    pub l_max: usize,
    /// `l_t ~ U{0, ..., floor(l_t_intercept + l_t_slope · t)}`.
    pub l_t_intercept: f64,
    pub l_t_slope: f64,
    pub iterations: usize,
    pub decoder: InnerDecoder,
    /// Source of the random subtrees.
    pub gen: GenConfig,
    pub seed: u64,
}

impl Default for GvsConfig {
    fn default() -> Self {
        GvsConfig {
            k: 39,
            k_rand: 9,
            z_thres: 0.213,
            l_max: 9,
            l_t_intercept: 15.58,
            l_t_slope: 0.42,
            iterations: 30,
            decoder: InnerDecoder::Beam(BeamConfig::default()),
            gen: GenConfig::default(),
            seed: 0,
        }
    }
}

impl GvsConfig {
    /// Upper end of the prompt-length draw at iteration `t`.
    pub fn l_t_bound(&self, t: usize) -> usize {
        let v = math::floor(self.l_t_intercept + self.l_t_slope * t as f64);
        if v > 0.0 {
            v as usize
        } else {
            0
        }
    }

    /// Candidates generated by one iteration with the beam decoder.
    fn beam_width(&self) -> usize {
        match &self.decoder {
            InnerDecoder::Beam(b) => b.beam_size,
            InnerDecoder::Mcts(m) => m.beam_size,
        }
    }
}

/// Uniform sample without replacement of `count` subtrees of `e` whose
/// serialization has at most `l_max` tokens.
pub fn extract_subtrees<R: Rng + ?Sized>(e: &Expr, rng: &mut R, count: usize, l_max: usize) -> Vec<Expr> {
    let eligible: Vec<Expr> = e.to_placeholders().subtrees().into_iter().filter(|s| s.token_len() <= l_max).collect();
    let n = count.min(eligible.len());
    rand::seq::index::sample(rng, eligible.len(), n).into_iter().map(|i| eligible[i].clone()).collect()
}

/// Prompt for iteration `t` (1-based); empty at `t = 1`.
///
/// Blocks `<p> subtree </p>` are appended from the shuffled union of the
/// filtered top-k pool entries and `k_rand` random subtrees while the
/// subtree tokens emitted so far number fewer than `l_t`; the block that
/// crosses `l_t` is kept.
pub fn build_prompt<R: Rng + ?Sized>(pool: &CandidatePool, rng: &mut R, t: usize, cfg: &GvsConfig) -> Vec<Token> {
    if t <= 1 {
        return Vec::new();
    }
    let mut merged: Vec<Expr> =
        pool.top_k(cfg.k).into_iter().filter(|e| e.z >= cfg.z_thres).map(|e| e.subtree.clone()).collect();
    for _ in 0..cfg.k_rand {
        let fresh = sample_expression(rng, &cfg.gen).expr;
        merged.extend(extract_subtrees(&fresh, rng, 1, cfg.l_max));
    }
    merged.shuffle(rng);
    let l_t = rng.gen_range(0..=cfg.l_t_bound(t));
    let mut prompt = Vec::new();
    let mut seen = alloc::collections::BTreeSet::new();
    let mut total = 0;
    for sub in merged {
        if total >= l_t {
            break;
        }
        let tokens = sub.tokens();
        if tokens.len() > cfg.l_max || !seen.insert(tokens.clone()) {
            continue;
        }
        total += tokens.len();
        prompt.push(Token::PromptStart);
        prompt.extend(tokens);
        prompt.push(Token::PromptEnd);
    }
    prompt
}

/// One iteration of the loop, for replay and audit.
#[derive(Clone, Debug, PartialEq)]
pub struct ReplayRecord {
    pub t: usize,
    pub prompt: Vec<Token>,
    /// Prediction tokens (the top log-probability sequence on failure).
    pub tokens: Vec<Token>,
    /// R² of the prediction; `-inf` on failure.
    pub r2: f64,
}

#[derive(Clone, Debug)]
pub struct GvsOutcome {
    pub prediction: Prediction,
    pub log: Vec<ReplayRecord>,
    pub pool: CandidatePool,
    /// Best R² after each iteration.
    pub best_trace: Vec<f64>,
}

/// Rebuilds the pool from a replay log.
pub fn replay_pool(log: &[ReplayRecord]) -> CandidatePool {
    let mut pool = CandidatePool::new();
    for rec in log {
        if let Ok(e) = deserialize(&rec.tokens) {
            pool.update(&e, rec.r2);
        }
    }
    pool
}

/// Runs `cfg.iterations` rounds starting from an empty pool.
pub fn run_gvs<P: Policy + ?Sized>(policy: &P, data: &Dataset, cfg: &GvsConfig) -> Result<GvsOutcome, DecodeError> {
    run_gvs_from(policy, data, cfg, CandidatePool::new())
}

/// Runs `cfg.iterations` rounds starting from `pool`.
pub fn run_gvs_from<P: Policy + ?Sized>(
    policy: &P,
    data: &Dataset,
    cfg: &GvsConfig,
    mut pool: CandidatePool,
) -> Result<GvsOutcome, DecodeError> {
    if cfg.iterations == 0 {
        return Err(DecodeError::InvalidConfig("at least one iteration is required"));
    }
    let strategy = match cfg.decoder {
        InnerDecoder::Beam(_) => Strategy::Gvs,
        InnerDecoder::Mcts(_) => Strategy::GvsMcts,
    };
    let mut log = Vec::with_capacity(cfg.iterations);
    let mut best: Option<Prediction> = None;
    let mut best_trace = Vec::with_capacity(cfg.iterations);
    let mut first_failure: Option<Vec<Token>> = None;
    let mut cost = 0;
    let mut candidate_set = Vec::new();
    for t in 1..=cfg.iterations {
        let mut prng = rng::stream(cfg.seed, "gvs-prompt", t as u64);
        let prompt = build_prompt(&pool, &mut prng, t, cfg);
        let outcome = match &cfg.decoder {
            InnerDecoder::Beam(b) => {
                cost += b.beam_size;
                match beam_decode(policy, data, &prompt, b) {
                    Ok(p) => Ok(p),
                    Err(DecodeError::NoFiniteCandidate { best_tokens }) => Err(best_tokens),
                    Err(e) => return Err(e),
                }
            }
            InnerDecoder::Mcts(m) => {
                let s = mcts_search(policy, data, &prompt, m)?;
                cost += s.candidates_generated;
                s.prediction.ok_or(s.best_tokens)
            }
        };
        let (tokens, r2) = match outcome {
            Ok(p) => {
                let rec = (p.tokens.clone(), p.r2_fit);
                if best.as_ref().is_none_or(|b| p.r2_fit > b.r2_fit) {
                    best = Some(p);
                }
                rec
            }
            Err(tokens) => {
                if first_failure.is_none() {
                    first_failure = Some(tokens.clone());
                }
                (tokens, f64::NEG_INFINITY)
            }
        };
        if let Ok(e) = deserialize(&tokens) {
            pool.update(&e, r2);
        }
        candidate_set.push(tokens.clone());
        best_trace.push(best.as_ref().map_or(f64::NEG_INFINITY, |b| b.r2_fit));
        log.push(ReplayRecord { t, prompt, tokens, r2 });
    }
    let mut prediction = best.ok_or_else(|| DecodeError::NoFiniteCandidate {
        best_tokens: first_failure.unwrap_or_default(),
    })?;
    prediction.strategy = strategy;
    prediction.candidates_generated = cost;
    prediction.candidate_set = candidate_set;
    debug_assert!(matches!(cfg.decoder, InnerDecoder::Mcts(_)) || cost == cfg.iterations * cfg.beam_width());
    Ok(GvsOutcome { prediction, log, pool, best_trace })
}
