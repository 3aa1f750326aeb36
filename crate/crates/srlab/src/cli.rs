//! Command-line grammar.

use std::path::PathBuf;

use clap::{Args, Parser, Subcommand, ValueEnum};

use srlab_core::audit::{ReproductionMode, TestSetKind};
use srlab_core::expr::KeyMode;

use crate::experiment::StrategyKind;
use crate::external::ENDPOINT_ENV;

#[derive(Debug, Parser)]
#[command(name = "srlab", version, about = "Symbolic-regression search, reproduction audits and theory checks")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Build a template corpus and a test set.
    Gen(GenArgs),
    /// Train a template-memory policy on a corpus.
    Train(TrainArgs),
    /// Decode every test query with one strategy.
    Infer(InferArgs),
    /// Check predictions for reproduction and accuracy.
    Audit(AuditArgs),
    /// Reduction certificates and the PAC simulator.
    Theory {
        #[command(subcommand)]
        command: TheoryCommand,
    },
    /// Cost-versus-accuracy table over beam widths.
    Tradeoff(TradeoffArgs),
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
pub enum VocabKind {
    Full,
    Simplified,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
pub enum KeyModeArg {
    Strict,
    Commutative,
}

impl From<KeyModeArg> for KeyMode {
    fn from(k: KeyModeArg) -> Self {
        match k {
            KeyModeArg::Strict => KeyMode::Strict,
            KeyModeArg::Commutative => KeyMode::CommutativeNormalized,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
pub enum TestSetArg {
    NotIncluded,
    Baseline,
}

impl From<TestSetArg> for TestSetKind {
    fn from(k: TestSetArg) -> Self {
        match k {
            TestSetArg::NotIncluded => TestSetKind::NotIncluded,
            TestSetArg::Baseline => TestSetKind::Baseline,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
pub enum ModeArg {
    Template,
    WithConstants,
}

impl From<ModeArg> for ReproductionMode {
    fn from(m: ModeArg) -> Self {
        match m {
            ModeArg::Template => ReproductionMode::Template,
            ModeArg::WithConstants => ReproductionMode::WithConstants,
        }
    }
}

#[derive(Debug, Args)]
pub struct GenArgs {
    /// Generator config JSON; flags below override its fields.
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[arg(long, value_enum)]
    pub vocab: Option<VocabKind>,
    #[arg(long)]
    pub n_vars: Option<usize>,
    #[arg(long, default_value_t = 1000)]
    pub corpus_size: usize,
    /// Number of test queries.
    #[arg(long, default_value_t = 150)]
    pub tests: usize,
    #[arg(long, value_enum, default_value = "not-included")]
    pub test_set: TestSetArg,
    #[arg(long, default_value_t = 100)]
    pub n_fit: usize,
    #[arg(long, default_value_t = 100)]
    pub n_eval: usize,
    #[arg(long, value_enum, default_value = "strict")]
    pub key_mode: KeyModeArg,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    /// Output directory.
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Args)]
pub struct TrainArgs {
    #[arg(long)]
    pub corpus: PathBuf,
    /// Defaults to `gen_config.json` next to the corpus.
    #[arg(long)]
    pub gen_config: Option<PathBuf>,
    /// Lidstone smoothing; 0 reproduces corpus templates only.
    #[arg(long, default_value_t = 0.0)]
    pub alpha: f64,
    /// Weight templates by their fit to each query's data.
    #[arg(long)]
    pub dataset_aware: bool,
    #[arg(long, default_value_t = 32)]
    pub top_m: usize,
    #[arg(long, default_value_t = 0.1)]
    pub tau: f64,
    #[arg(long)]
    pub out: PathBuf,
}

/// Policy and decoder flags shared by `infer` and `tradeoff`.
#[derive(Clone, Debug, Args)]
pub struct DecodeArgs {
    /// Test records (`tests.jsonl`) or a single CSV dataset.
    #[arg(long)]
    pub tests: PathBuf,
    /// Trained policy file; takes precedence over `--endpoint`.
    #[arg(long, required_unless_present = "endpoint")]
    pub policy: Option<PathBuf>,
    /// External model: `host:port`, `tcp://host:port` or `stdio:<command>`.
    #[arg(long, env = ENDPOINT_ENV)]
    pub endpoint: Option<String>,
    /// Wrap the memory policy in prompt splicing with this probability.
    #[arg(long)]
    pub splice_prob: Option<f64>,
    /// Generator config; defaults to `gen_config.json` next to the tests.
    #[arg(long)]
    pub gen_config: Option<PathBuf>,
    #[arg(long, default_value_t = 60)]
    pub max_len: usize,
    /// MCTS simulations per committed token.
    #[arg(long, default_value_t = 3)]
    pub rollouts: usize,
    #[arg(long, default_value_t = 3)]
    pub k_max: usize,
    #[arg(long, default_value_t = 0.01)]
    pub lambda: f64,
    #[arg(long, default_value_t = 1.0)]
    pub c_puct: f64,
    /// gvs iterations.
    #[arg(long, default_value_t = 30)]
    pub iterations: usize,
    /// Constant-fitting starts per candidate.
    #[arg(long, default_value_t = 10)]
    pub restarts: usize,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    /// Worker threads; defaults to all cores.
    #[arg(long)]
    pub threads: Option<usize>,
}

#[derive(Debug, Args)]
pub struct InferArgs {
    #[command(flatten)]
    pub decode: DecodeArgs,
    #[arg(long, value_enum, default_value = "beam")]
    pub strategy: StrategyKind,
    /// Beam width.
    #[arg(long, default_value_t = 5)]
    pub b: usize,
    /// Prediction JSON-lines output.
    #[arg(long)]
    pub out: PathBuf,
    /// Directory for per-query gvs replay logs.
    #[arg(long)]
    pub replay_dir: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct AuditArgs {
    #[arg(long)]
    pub predictions: PathBuf,
    #[arg(long)]
    pub tests: PathBuf,
    #[arg(long)]
    pub corpus: PathBuf,
    #[arg(long, value_enum, default_value = "template")]
    pub mode: ModeArg,
    #[arg(long, value_enum, default_value = "strict")]
    pub key_mode: KeyModeArg,
    /// Report JSON.
    #[arg(long)]
    pub out: PathBuf,
    /// Per-row CSV; defaults to the report path with a `.csv` extension.
    #[arg(long)]
    pub scatter: Option<PathBuf>,
}

#[derive(Debug, Subcommand)]
pub enum TheoryCommand {
    /// Reduce random (or given) Boolean formulas and certify the solver.
    Check(CheckArgs),
    /// Monte Carlo check of the self-verification bound.
    Pac(PacArgs),
}

#[derive(Debug, Args)]
pub struct CheckArgs {
    #[arg(long, default_value_t = 1000)]
    pub count: usize,
    #[arg(long, default_value_t = 8)]
    pub max_depth: usize,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    /// Check these formulas instead of random ones, e.g. `((1∨0)∧(¬1))`.
    #[arg(long = "formula")]
    pub formulas: Vec<String>,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Args)]
pub struct PacArgs {
    #[arg(long, default_value_t = 100)]
    pub u: usize,
    #[arg(long, default_value_t = 5)]
    pub r: usize,
    #[arg(long, default_value_t = 3)]
    pub d0: u32,
    #[arg(long, default_value_t = 8)]
    pub k: usize,
    #[arg(long, default_value_t = 0.3)]
    pub beta: f64,
    #[arg(long, default_value_t = 0.1)]
    pub delta: f64,
    #[arg(long, default_value_t = 10_000)]
    pub trials: usize,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Args)]
pub struct TradeoffArgs {
    #[command(flatten)]
    pub decode: DecodeArgs,
    /// Corpus for the novelty column.
    #[arg(long)]
    pub corpus: PathBuf,
    /// Strategies to sweep; defaults to all four.
    #[arg(long = "strategy", value_enum)]
    pub strategies: Vec<StrategyKind>,
    /// Override the default width list.
    #[arg(long = "b", value_delimiter = ',')]
    pub widths: Vec<usize>,
    #[arg(long, value_enum, default_value = "strict")]
    pub key_mode: KeyModeArg,
    /// Table CSV.
    #[arg(long)]
    pub out: PathBuf,
}
