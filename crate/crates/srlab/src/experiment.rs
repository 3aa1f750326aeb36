//! Experiment specs, the policy file, per-query execution and run manifests.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use srlab_core::decoding::{
    beam_decode, mcts_search, BeamConfig, BeamMode, DecodeError, MctsConfig, Prediction, RolloutBudget,
};
use srlab_core::fitting::FitConfig;
use srlab_core::gvs::{run_gvs, GvsConfig, InnerDecoder, ReplayRecord};
use srlab_core::policy::{DatasetAware, Policy, PromptSplicingPolicy, TemplateMemoryPolicy};
use srlab_core::rng::mix64;
use srlab_core::{Dataset, GenConfig, Token, Vocabulary};

use crate::error::{Error, Result};
use crate::external::ExternalPolicy;
use crate::formats::{read_json, PredictionRecord};

/// Trained policy on disk.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case")]
pub enum PolicyFile {
    Memory {
        alpha: f64,
        #[serde(default)]
        dataset_aware: Option<DatasetAware>,
        vocabulary: Vocabulary,
        templates: Vec<Vec<Token>>,
    },
}

impl PolicyFile {
    pub fn from_policy(p: &TemplateMemoryPolicy) -> Self {
        PolicyFile::Memory {
            alpha: p.alpha(),
            dataset_aware: p.dataset_aware(),
            vocabulary: p.vocabulary().clone(),
            templates: p.templates().to_vec(),
        }
    }

    pub fn load(path: &Path) -> Result<TemplateMemoryPolicy> {
        let PolicyFile::Memory { alpha, dataset_aware, vocabulary, templates } = read_json(path)?;
        let p = TemplateMemoryPolicy::from_templates(vocabulary, templates, alpha)?;
        Ok(match dataset_aware {
            Some(cfg) => p.with_dataset_aware(cfg),
            None => p,
        })
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case")]
pub enum PolicySpec {
    Memory { path: PathBuf },
    /// Memory policy wrapped in prompt splicing.
    Splicing { path: PathBuf, splice_prob: f64 },
    External { endpoint: String, vocabulary: Vocabulary },
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize, clap::ValueEnum)]
pub enum StrategyKind {
    #[serde(rename = "beam")]
    #[value(name = "beam")]
    Beam,
    #[serde(rename = "mcts")]
    #[value(name = "mcts")]
    Mcts,
    #[serde(rename = "gvs")]
    #[value(name = "gvs")]
    Gvs,
    #[serde(rename = "gvs+mcts")]
    #[value(name = "gvs+mcts")]
    GvsMcts,
}

impl StrategyKind {
    pub fn name(self) -> &'static str {
        match self {
            StrategyKind::Beam => "beam",
            StrategyKind::Mcts => "mcts",
            StrategyKind::Gvs => "gvs",
            StrategyKind::GvsMcts => "gvs+mcts",
        }
    }

    /// Widths swept by `tradeoff`.
    pub fn tradeoff_widths(self) -> &'static [usize] {
        match self {
            StrategyKind::Beam => &[1, 5, 50, 100, 150],
            StrategyKind::Mcts | StrategyKind::Gvs => &[1, 3, 5],
            StrategyKind::GvsMcts => &[1],
        }
    }
}

/// Decoder settings shared by every strategy.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StrategySpec {
    pub kind: StrategyKind,
    /// Beam width `b`.
    pub b: usize,
    pub max_len: usize,
    /// MCTS simulations per committed token.
    pub rollouts: usize,
    pub k_max: usize,
    pub lambda: f64,
    pub c_puct: f64,
    /// gvs iterations `T`.
    pub iterations: usize,
    pub fit: FitConfig,
}

impl StrategySpec {
    pub fn beam(&self) -> BeamConfig {
        BeamConfig { beam_size: self.b, max_len: self.max_len, mode: BeamMode::Nested, fit: self.fit.clone() }
    }

    pub fn mcts(&self) -> MctsConfig {
        MctsConfig {
            budget: RolloutBudget::PerToken(self.rollouts),
            k_max: self.k_max,
            beam_size: self.b,
            lambda: self.lambda,
            max_len: self.max_len,
            c_puct: self.c_puct,
            fit: self.fit.clone(),
        }
    }

    pub fn gvs(&self, gen: &GenConfig, seed: u64) -> GvsConfig {
        let decoder = match self.kind {
            StrategyKind::GvsMcts => InnerDecoder::Mcts(self.mcts()),
            _ => InnerDecoder::Beam(self.beam()),
        };
        GvsConfig { iterations: self.iterations, decoder, gen: gen.clone(), seed, ..GvsConfig::default() }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::Invalid(m.into()));
        if self.b == 0 {
            return bad("--b must be at least 1");
        }
        if self.max_len == 0 {
            return bad("--max-len must be at least 1");
        }
        if matches!(self.kind, StrategyKind::Mcts | StrategyKind::GvsMcts) && self.rollouts == 0 {
            return bad("--rollouts must be at least 1");
        }
        if matches!(self.kind, StrategyKind::Gvs | StrategyKind::GvsMcts) && self.iterations == 0 {
            return bad("--iterations must be at least 1");
        }
        Ok(())
    }
}

/// Everything that determines the bytes of an `infer` run.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ExperimentSpec {
    /// Source of random gvs subtrees.
    pub gen: GenConfig,
    pub policy: PolicySpec,
    pub strategy: StrategySpec,
    pub tests: PathBuf,
    pub out: PathBuf,
    pub seed: u64,
}

impl ExperimentSpec {
    pub fn validate(&self) -> Result<()> {
        self.strategy.validate()?;
        let mut files = vec![self.tests.as_path()];
        match &self.policy {
            PolicySpec::Memory { path } => files.push(path),
            PolicySpec::Splicing { path, splice_prob } => {
                files.push(path);
                if !(0.0..=1.0).contains(splice_prob) {
                    return Err(Error::Invalid(format!("splice probability {splice_prob} is outside [0, 1]")));
                }
            }
            PolicySpec::External { .. } => {}
        }
        match files.into_iter().find(|f| !f.exists()) {
            Some(f) => Err(Error::Invalid(format!("{} does not exist", f.display()))),
            None => Ok(()),
        }
    }
}

/// Seed of the per-query stream `id` under `root`.
pub fn query_seed(root: u64, id: usize) -> u64 {
    mix64(root ^ mix64(id as u64 ^ 0x9e37_79b9_7f4a_7c15))
}

/// A loaded policy backend.
pub enum Backend {
    Memory(TemplateMemoryPolicy),
    Splicing(TemplateMemoryPolicy, f64),
    External(ExternalPolicy),
}

impl Backend {
    pub fn open(spec: &PolicySpec) -> Result<Self> {
        Ok(match spec {
            PolicySpec::Memory { path } => Backend::Memory(PolicyFile::load(path)?),
            PolicySpec::Splicing { path, splice_prob } => Backend::Splicing(PolicyFile::load(path)?, *splice_prob),
            PolicySpec::External { endpoint, vocabulary } => {
                Backend::External(ExternalPolicy::connect(endpoint, vocabulary.clone())?)
            }
        })
    }
}

/// Result of one query: the prediction or the error with whatever was
/// produced before it.
pub struct QueryOutput {
    pub record: PredictionRecord,
    pub replay: Vec<ReplayRecord>,
    /// The policy or decoder failed, as opposed to no candidate fitting.
    pub fatal: bool,
}

fn decode<P: Policy + ?Sized>(
    policy: &P,
    data: &Dataset,
    strategy: &StrategySpec,
    gen: &GenConfig,
    seed: u64,
) -> Result<(Prediction, Vec<ReplayRecord>), DecodeError> {
    match strategy.kind {
        StrategyKind::Beam => beam_decode(policy, data, &[], &strategy.beam()).map(|p| (p, Vec::new())),
        StrategyKind::Mcts => {
            let s = mcts_search(policy, data, &[], &strategy.mcts())?;
            match s.prediction {
                Some(p) => Ok((p, Vec::new())),
                None => Err(DecodeError::NoFiniteCandidate { best_tokens: s.best_tokens }),
            }
        }
        StrategyKind::Gvs | StrategyKind::GvsMcts => {
            run_gvs(policy, data, &strategy.gvs(gen, seed)).map(|o| (o.prediction, o.log))
        }
    }
}

/// Nominal cost of a failed query: what the strategy would have charged.
fn nominal_cost(s: &StrategySpec) -> usize {
    match s.kind {
        StrategyKind::Beam => s.b,
        StrategyKind::Mcts => 0,
        StrategyKind::Gvs => s.iterations * s.b,
        StrategyKind::GvsMcts => 0,
    }
}

pub fn run_query(
    backend: &Backend,
    id: usize,
    data: &Dataset,
    strategy: &StrategySpec,
    gen: &GenConfig,
    root_seed: u64,
) -> QueryOutput {
    let seed = query_seed(root_seed, id);
    let mut strategy = strategy.clone();
    strategy.fit.seed = seed;
    let out = match backend {
        Backend::Memory(p) => decode(&p.conditioned(data), data, &strategy, gen, seed),
        Backend::Splicing(p, prob) => {
            let max_len = strategy.max_len;
            match PromptSplicingPolicy::new(p.conditioned(data), *prob, seed, max_len) {
                Ok(sp) => decode(&sp, data, &strategy, gen, seed),
                Err(e) => Err(e.into()),
            }
        }
        Backend::External(p) => decode(p, data, &strategy, gen, seed),
    };
    match out {
        Ok((p, replay)) => QueryOutput { record: PredictionRecord::from_prediction(id, &p), replay, fatal: false },
        Err(e) => {
            let (tokens, fatal) = match &e {
                DecodeError::NoFiniteCandidate { best_tokens } => (best_tokens.clone(), false),
                _ => (Vec::new(), true),
            };
            let record = PredictionRecord::failed(id, strategy.kind.name(), nominal_cost(&strategy), tokens, e.to_string());
            QueryOutput { record, replay: Vec::new(), fatal }
        }
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum RunStatus {
    Complete,
    /// Some rows carry an `error` field.
    Partial,
}

/// Written next to every artifact set. Contains no timestamps so that
/// reruns are byte-identical.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub command: String,
    pub argv: Vec<String>,
    /// SHA-256 of the canonical config JSON.
    pub config_hash: String,
    pub config: serde_json::Value,
    pub seed: u64,
    pub versions: Versions,
    pub outputs: Vec<String>,
    pub status: RunStatus,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub errors: Vec<String>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Versions {
    pub srlab: String,
    pub format: u32,
}

impl Default for Versions {
    fn default() -> Self {
        Versions { srlab: env!("CARGO_PKG_VERSION").into(), format: 1 }
    }
}

pub fn config_hash<T: Serialize>(config: &T) -> String {
    let bytes = serde_json::to_vec(config).expect("configs serialize");
    Sha256::digest(&bytes).iter().map(|b| format!("{b:02x}")).collect()
}

impl Manifest {
    pub fn new<T: Serialize>(command: &str, argv: &[String], config: &T, seed: u64) -> Self {
        Manifest {
            command: command.into(),
            argv: argv.to_vec(),
            config_hash: config_hash(config),
            config: serde_json::to_value(config).expect("configs serialize"),
            seed,
            versions: Versions::default(),
            outputs: Vec::new(),
            status: RunStatus::Complete,
            errors: Vec::new(),
        }
    }
}

/// `<out>.manifest.json`, or `<dir>/manifest.json` for directory outputs.
pub fn manifest_path(out: &Path, is_dir: bool) -> PathBuf {
    if is_dir {
        out.join("manifest.json")
    } else {
        let mut s = out.as_os_str().to_owned();
        s.push(".manifest.json");
        PathBuf::from(s)
    }
}
