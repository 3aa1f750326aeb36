//! Next-token distributions.
//!
//! A [`Policy`] maps `(prefix, dataset, prompt)` to a distribution over the
//! tokens that are legal after `prefix`. Two in-process backends are
//! provided: [`TemplateMemoryPolicy`], a smoothed trie over corpus
//! templates, and [`PromptSplicingPolicy`], which wraps another policy and
//! copies prompted subtrees verbatim.

use alloc::string::String;
use alloc::vec;
use alloc::vec::Vec;

use crate::datagen::{Corpus, Dataset};
use crate::expr::{deficit_after, Token, Vocabulary};
use crate::fitting::{r2_score, Compiled};
use crate::math;
use crate::rng;

#[derive(Clone, Debug, PartialEq, thiserror::Error)]
pub enum PolicyError {
    #[error("illegal prefix: {0}")]
    IllegalPrefix(&'static str),
    #[error("malformed prompt: {0}")]
    MalformedPrompt(&'static str),
    #[error("token {0} is not in the vocabulary")]
    OutOfVocabulary(Token),
    #[error("invalid policy parameter: {0}")]
    InvalidParameter(&'static str),
    #[error("protocol error: {0}")]
    ProtocolError(String),
    #[error("policy call timed out")]
    Timeout,
    #[error("response is not a distribution (mass {mass})")]
    NonDistributionResponse { mass: f64 },
}

/// Normalized distribution over tokens with positive mass, sorted by token.
#[derive(Clone, Debug, PartialEq)]
pub struct TokenDist {
    probs: Vec<(Token, f64)>,
}

impl TokenDist {
    /// Normalizes non-negative weights. Zero weights are dropped.
    pub fn from_weights(mut weights: Vec<(Token, f64)>) -> Result<Self, PolicyError> {
        if weights.iter().any(|(_, w)| !(w.is_finite() && *w >= 0.0)) {
            return Err(PolicyError::NonDistributionResponse { mass: f64::NAN });
        }
        weights.retain(|(_, w)| *w > 0.0);
        weights.sort_by_key(|a| a.0);
        if weights.windows(2).any(|w| w[0].0 == w[1].0) {
            return Err(PolicyError::ProtocolError("duplicate token in distribution".into()));
        }
        let total: f64 = weights.iter().map(|(_, w)| w).sum();
        if !(total > 0.0 && total.is_finite()) {
            return Err(PolicyError::NonDistributionResponse { mass: total });
        }
        for (_, w) in &mut weights {
            *w /= total;
        }
        Ok(TokenDist { probs: weights })
    }

    pub fn point(t: Token) -> Self {
        TokenDist { probs: vec![(t, 1.0)] }
    }

    pub fn uniform(tokens: &[Token]) -> Self {
        let p = 1.0 / tokens.len() as f64;
        let mut probs: Vec<(Token, f64)> = tokens.iter().map(|t| (*t, p)).collect();
        probs.sort_by_key(|a| a.0);
        TokenDist { probs }
    }

    pub fn prob(&self, t: Token) -> f64 {
        self.probs.binary_search_by(|(u, _)| u.cmp(&t)).map_or(0.0, |i| self.probs[i].1)
    }

    pub fn log_prob(&self, t: Token) -> f64 {
        math::ln(self.prob(t))
    }

    pub fn iter(&self) -> impl Iterator<Item = (Token, f64)> + '_ {
        self.probs.iter().copied()
    }

    pub fn len(&self) -> usize {
        self.probs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.probs.is_empty()
    }

    pub fn total(&self) -> f64 {
        self.probs.iter().map(|(_, p)| p).sum()
    }

    /// Tokens by descending probability; ties in token order.
    pub fn ranked(&self) -> Vec<(Token, f64)> {
        let mut v = self.probs.clone();
        v.sort_by(|a, b| b.1.total_cmp(&a.1).then(a.0.cmp(&b.0)));
        v
    }

    pub fn argmax(&self) -> Option<Token> {
        self.ranked().first().map(|(t, _)| *t)
    }

    pub fn top_k(&self, k: usize) -> Vec<(Token, f64)> {
        let mut v = self.ranked();
        v.truncate(k);
        v
    }
}

/// The next-token contract.
pub trait Policy {
    fn vocabulary(&self) -> &Vocabulary;

    /// Distribution over tokens legal after `prefix`.
    fn next_token_dist(
        &self,
        prefix: &[Token],
        data: &Dataset,
        prompt: &[Token],
    ) -> Result<TokenDist, PolicyError>;
}

impl<P: Policy + ?Sized> Policy for &P {
    fn vocabulary(&self) -> &Vocabulary {
        (**self).vocabulary()
    }
    fn next_token_dist(&self, prefix: &[Token], data: &Dataset, prompt: &[Token]) -> Result<TokenDist, PolicyError> {
        (**self).next_token_dist(prefix, data, prompt)
    }
}

impl<P: Policy + ?Sized> Policy for alloc::boxed::Box<P> {
    fn vocabulary(&self) -> &Vocabulary {
        (**self).vocabulary()
    }
    fn next_token_dist(&self, prefix: &[Token], data: &Dataset, prompt: &[Token]) -> Result<TokenDist, PolicyError> {
        (**self).next_token_dist(prefix, data, prompt)
    }
}

/// Tokens legal after `prefix`: `End` alone once the expression is
/// complete, every expression token of the vocabulary otherwise.
pub fn legal_tokens(vocab: &Vocabulary, prefix: &[Token]) -> Result<Vec<Token>, PolicyError> {
    match prefix_deficit(vocab, prefix)? {
        0 => Ok(vec![Token::End]),
        _ => Ok(vocab.expression_tokens()),
    }
}

/// Deficit of a partial serialization, rejecting anything that is not one.
pub fn prefix_deficit(vocab: &Vocabulary, prefix: &[Token]) -> Result<usize, PolicyError> {
    if let Some(t) = prefix.iter().find(|t| !vocab.contains(**t)) {
        return Err(PolicyError::OutOfVocabulary(*t));
    }
    deficit_after(prefix).map_err(|_| PolicyError::IllegalPrefix("not a partial serialization"))
}

/// Checks normalization (within `1e-9`) and legality of a distribution.
pub fn check_contract(vocab: &Vocabulary, prefix: &[Token], dist: &TokenDist) -> Result<(), PolicyError> {
    let legal = legal_tokens(vocab, prefix)?;
    let total = dist.total();
    if (total - 1.0).abs() > 1e-9 {
        return Err(PolicyError::NonDistributionResponse { mass: total });
    }
    match dist.iter().find(|(t, _)| !legal.contains(t)) {
        Some((t, _)) => Err(PolicyError::OutOfVocabulary(t)),
        None => Ok(()),
    }
}

/// Splits a prompt into its `<p> ... </p>` blocks.
///
/// Every block must hold one complete serialization.
pub fn parse_prompt(prompt: &[Token]) -> Result<Vec<Vec<Token>>, PolicyError> {
    let mut blocks = Vec::new();
    let mut i = 0;
    while i < prompt.len() {
        if prompt[i] != Token::PromptStart {
            return Err(PolicyError::MalformedPrompt("expected <p>"));
        }
        let end = prompt[i + 1..]
            .iter()
            .position(|t| *t == Token::PromptEnd)
            .ok_or(PolicyError::MalformedPrompt("unterminated block"))?
            + i
            + 1;
        let body = &prompt[i + 1..end];
        if body.is_empty() || deficit_after(body) != Ok(0) {
            return Err(PolicyError::MalformedPrompt("block is not a complete expression"));
        }
        blocks.push(body.to_vec());
        i = end + 1;
    }
    Ok(blocks)
}

#[derive(Clone, Debug, Default)]
struct TrieNode {
    children: Vec<(Token, usize)>,
    count: f64,
}

/// Dataset-aware retrieval: templates are weighted by `softmax(R²/τ)` of
/// their best affine fit `a·t(x) + b`, keeping the `top_m` best.
#[derive(Clone, Copy, Debug, PartialEq, serde::Serialize, serde::Deserialize)]
#[serde(default)]
pub struct DatasetAware {
    pub top_m: usize,
    pub tau: f64,
}

impl Default for DatasetAware {
    fn default() -> Self {
        DatasetAware { top_m: 32, tau: 0.1 }
    }
}

/// Smoothed prefix trie over corpus templates.
///
/// `P(t | prefix) = (c_t + α) / (N + α·|legal|)` where `c_t` counts the
/// templates continuing `prefix` with `t` and `N` those passing through
/// `prefix`. Prefixes that no template passes through get the uniform
/// distribution over legal tokens.
#[derive(Clone, Debug)]
pub struct TemplateMemoryPolicy {
    vocab: Vocabulary,
    alpha: f64,
    templates: Vec<Vec<Token>>,
    nodes: Vec<TrieNode>,
    dataset_aware: Option<DatasetAware>,
}

impl TemplateMemoryPolicy {
    pub fn train(corpus: &Corpus, vocab: Vocabulary, alpha: f64) -> Result<Self, PolicyError> {
        let templates = corpus.templates().iter().map(|e| e.tokens()).collect();
        Self::from_templates(vocab, templates, alpha)
    }

    pub fn from_templates(vocab: Vocabulary, templates: Vec<Vec<Token>>, alpha: f64) -> Result<Self, PolicyError> {
        if templates.is_empty() {
            return Err(PolicyError::InvalidParameter("corpus is empty"));
        }
        if !(alpha >= 0.0 && alpha.is_finite()) {
            return Err(PolicyError::InvalidParameter("alpha must be finite and non-negative"));
        }
        vocab.validate().map_err(|_| PolicyError::InvalidParameter("invalid vocabulary"))?;
        let mut nodes = vec![TrieNode::default()];
        for t in &templates {
            if deficit_after(t) != Ok(0) || t.is_empty() {
                return Err(PolicyError::IllegalPrefix("template is not a complete serialization"));
            }
            if let Some(bad) = t.iter().find(|tok| !vocab.contains(**tok)) {
                return Err(PolicyError::OutOfVocabulary(*bad));
            }
            let mut node = 0;
            nodes[0].count += 1.0;
            for tok in t {
                node = match nodes[node].children.binary_search_by(|(u, _)| u.cmp(tok)) {
                    Ok(i) => nodes[node].children[i].1,
                    Err(i) => {
                        let id = nodes.len();
                        nodes.push(TrieNode::default());
                        nodes[node].children.insert(i, (*tok, id));
                        id
                    }
                };
                nodes[node].count += 1.0;
            }
        }
        Ok(TemplateMemoryPolicy { vocab, alpha, templates, nodes, dataset_aware: None })
    }

    pub fn with_dataset_aware(mut self, cfg: DatasetAware) -> Self {
        self.dataset_aware = Some(cfg);
        self
    }

    pub fn alpha(&self) -> f64 {
        self.alpha
    }

    pub fn templates(&self) -> &[Vec<Token>] {
        &self.templates
    }

    pub fn dataset_aware(&self) -> Option<DatasetAware> {
        self.dataset_aware
    }

    fn walk(&self, prefix: &[Token]) -> Option<usize> {
        let mut node = 0;
        for tok in prefix {
            let ch = &self.nodes[node].children;
            node = ch[ch.binary_search_by(|(u, _)| u.cmp(tok)).ok()?].1;
        }
        Some(node)
    }

    fn dist_with(&self, prefix: &[Token], weights: Option<&[f64]>) -> Result<TokenDist, PolicyError> {
        let legal = legal_tokens(&self.vocab, prefix)?;
        if legal == [Token::End] {
            return Ok(TokenDist::point(Token::End));
        }
        let count = |id: usize| weights.map_or(self.nodes[id].count, |w| w[id]);
        let node = self.walk(prefix);
        let total = node.map_or(0.0, count);
        if total <= 0.0 {
            return Ok(TokenDist::uniform(&legal));
        }
        let children = &self.nodes[node.expect("total > 0")].children;
        let w = legal
            .iter()
            .map(|t| {
                let c = children.binary_search_by(|(u, _)| u.cmp(t)).map_or(0.0, |i| count(children[i].1));
                (*t, c + self.alpha)
            })
            .collect();
        TokenDist::from_weights(w)
    }

    /// Per-node weights for the dataset-aware mode; `None` when no template
    /// has a finite fit.
    fn node_weights(&self, data: &Dataset, cfg: DatasetAware) -> Option<Vec<f64>> {
        let mut scored: Vec<(f64, usize)> = self
            .templates
            .iter()
            .enumerate()
            .filter_map(|(i, t)| {
                let r = affine_r2(t, data);
                r.is_finite().then_some((r, i))
            })
            .collect();
        if scored.is_empty() {
            return None;
        }
        scored.sort_by(|a, b| b.0.total_cmp(&a.0).then(a.1.cmp(&b.1)));
        scored.truncate(cfg.top_m.max(1));
        let best = scored[0].0;
        let mut w = vec![0.0; self.nodes.len()];
        for (r, i) in scored {
            let weight = math::exp((r - best) / cfg.tau);
            let mut node = 0;
            w[0] += weight;
            for tok in &self.templates[i] {
                let ch = &self.nodes[node].children;
                node = ch[ch.binary_search_by(|(u, _)| u.cmp(tok)).expect("template path")].1;
                w[node] += weight;
            }
        }
        Some(w)
    }

    /// Precomputes dataset-aware weights for repeated queries on `data`.
    pub fn conditioned<'a>(&'a self, data: &Dataset) -> ConditionedMemory<'a> {
        let weights = self.dataset_aware.and_then(|cfg| self.node_weights(data, cfg));
        ConditionedMemory { policy: self, fingerprint: data.fingerprint(), weights }
    }
}

/// R² of the least-squares fit `a·t(x) + b`; placeholders in `t` are bound
/// to 1.
fn affine_r2(template: &[Token], data: &Dataset) -> f64 {
    let Ok(e) = crate::expr::deserialize(template) else {
        return f64::NEG_INFINITY;
    };
    if e.max_var() > data.dims() {
        return f64::NEG_INFINITY;
    }
    let prog = Compiled::new(&e);
    let ones = vec![1.0; prog.n_params()];
    let t = prog.predict(data, &ones);
    if t.iter().any(|v| !v.is_finite()) {
        return f64::NEG_INFINITY;
    }
    let n = t.len() as f64;
    let (tm, ym) = (t.iter().sum::<f64>() / n, data.targets.iter().sum::<f64>() / n);
    let stt: f64 = t.iter().map(|v| (v - tm) * (v - tm)).sum();
    let sty: f64 = t.iter().zip(&data.targets).map(|(a, b)| (a - tm) * (b - ym)).sum();
    let a = if stt > 0.0 { sty / stt } else { 0.0 };
    let b = ym - a * tm;
    let yhat: Vec<f64> = t.iter().map(|v| a * v + b).collect();
    r2_score(&data.targets, &yhat)
}

impl Policy for TemplateMemoryPolicy {
    fn vocabulary(&self) -> &Vocabulary {
        &self.vocab
    }

    fn next_token_dist(&self, prefix: &[Token], data: &Dataset, _prompt: &[Token]) -> Result<TokenDist, PolicyError> {
        let weights = self.dataset_aware.and_then(|cfg| self.node_weights(data, cfg));
        self.dist_with(prefix, weights.as_deref())
    }
}

/// A [`TemplateMemoryPolicy`] with dataset-aware weights cached for one
/// dataset. Other datasets fall back to recomputation.
#[derive(Clone, Debug)]
pub struct ConditionedMemory<'a> {
    policy: &'a TemplateMemoryPolicy,
    fingerprint: u64,
    weights: Option<Vec<f64>>,
}

impl Policy for ConditionedMemory<'_> {
    fn vocabulary(&self) -> &Vocabulary {
        &self.policy.vocab
    }

    fn next_token_dist(&self, prefix: &[Token], data: &Dataset, prompt: &[Token]) -> Result<TokenDist, PolicyError> {
        if data.fingerprint() != self.fingerprint {
            return self.policy.next_token_dist(prefix, data, prompt);
        }
        self.policy.dist_with(prefix, self.weights.as_deref())
    }
}

/// Wraps a base policy and copies prompted subtrees.
///
/// At each position of a sequence, the prompt's subtrees are considered in
/// prompt order. A subtree that was not spliced earlier in the sequence and
/// fits (the sequence can still be completed within `max_len`) is committed
/// when a hash of `(seed, prefix, subtree index)` falls below
/// `splice_prob`. A committed subtree is then emitted token by token with
/// probability 1. Outside commitments the base distribution is returned.
#[derive(Clone, Debug)]
pub struct PromptSplicingPolicy<P> {
    pub base: P,
    pub splice_prob: f64,
    pub seed: u64,
    pub max_len: usize,
}

impl<P: Policy> PromptSplicingPolicy<P> {
    pub fn new(base: P, splice_prob: f64, seed: u64, max_len: usize) -> Result<Self, PolicyError> {
        if !(0.0..=1.0).contains(&splice_prob) {
            return Err(PolicyError::InvalidParameter("splice_prob must lie in [0, 1]"));
        }
        Ok(PromptSplicingPolicy { base, splice_prob, seed, max_len })
    }

    fn commits(&self, head: &[Token], j: usize) -> bool {
        let mut h = rng::mix64(self.seed ^ 0x5bd1_e995);
        for t in head {
            h = rng::mix64(h ^ t.code());
        }
        h = rng::mix64(h ^ (j as u64).wrapping_mul(0x9e37_79b9));
        rng::unit_from_hash(h) < self.splice_prob
    }

    fn commitment(&self, head: &[Token], blocks: &[Vec<Token>], used: &[bool]) -> Option<usize> {
        let deficit = deficit_after(head).ok()?;
        if deficit == 0 {
            return None;
        }
        blocks.iter().enumerate().position(|(j, b)| {
            !used[j]
                && b.iter().all(|t| self.base.vocabulary().contains(*t))
                && head.len() + b.len() + deficit - 1 <= self.max_len
                && self.commits(head, j)
        })
    }

    /// The committed subtree and the offset of its next token, if `prefix`
    /// ends inside (or right at the start of) a commitment.
    pub fn active_splice(&self, prefix: &[Token], blocks: &[Vec<Token>]) -> Option<(usize, usize)> {
        let mut used = vec![false; blocks.len()];
        let mut pos = 0;
        loop {
            if let Some(j) = self.commitment(&prefix[..pos], blocks, &used) {
                used[j] = true;
                let b = &blocks[j];
                let rest = &prefix[pos..];
                let k = b.iter().zip(rest).take_while(|(a, c)| a == c).count();
                if k == b.len() {
                    pos += k;
                    continue;
                }
                if k == rest.len() {
                    return Some((j, k));
                }
                // The prefix left the commitment; resume after the mismatch.
                pos += k + 1;
                continue;
            }
            if pos >= prefix.len() {
                return None;
            }
            pos += 1;
        }
    }

    /// Indices of subtrees whose splice completed within `tokens`.
    pub fn completed_splices(&self, tokens: &[Token], prompt: &[Token]) -> Result<Vec<usize>, PolicyError> {
        let blocks = parse_prompt(prompt)?;
        let mut used = vec![false; blocks.len()];
        let mut done = Vec::new();
        let mut pos = 0;
        while pos <= tokens.len() {
            if let Some(j) = self.commitment(&tokens[..pos], &blocks, &used) {
                used[j] = true;
                let b = &blocks[j];
                let k = b.iter().zip(&tokens[pos..]).take_while(|(a, c)| a == c).count();
                if k == b.len() {
                    done.push(j);
                    pos += k;
                } else {
                    pos += k + 1;
                }
                continue;
            }
            pos += 1;
        }
        Ok(done)
    }
}

impl<P: Policy> Policy for PromptSplicingPolicy<P> {
    fn vocabulary(&self) -> &Vocabulary {
        self.base.vocabulary()
    }

    fn next_token_dist(&self, prefix: &[Token], data: &Dataset, prompt: &[Token]) -> Result<TokenDist, PolicyError> {
        prefix_deficit(self.vocabulary(), prefix)?;
        let blocks = parse_prompt(prompt)?;
        match self.active_splice(prefix, &blocks) {
            Some((j, k)) => Ok(TokenDist::point(blocks[j][k])),
            None => self.base.next_token_dist(prefix, data, prompt),
        }
    }
}
