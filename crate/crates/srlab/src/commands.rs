//! Subcommand implementations. Each writes its artifacts atomically and a
//! manifest beside them.

use std::path::{Path, PathBuf};

use rayon::prelude::*;
use serde::Serialize;

use srlab_core::audit::{
    audit_run, build_test_set, AuditInput, AuditReport, TestCase, TestSetConfig, TestSetKind, R2_THRESHOLDS,
    BREAKDOWN_THRESHOLD,
};
use srlab_core::datagen::build_corpus;
use srlab_core::expr::{serialize, ConstantMode, KeyMode};
use srlab_core::fitting::FitConfig;
use srlab_core::policy::{DatasetAware, TemplateMemoryPolicy};
use srlab_core::theory::{
    batch_formula, check_reduction, pac_trial, parse_formula, PacConfig, PacStats, TrialOutcome, Verdict,
};
use srlab_core::{Dataset, GenConfig, Vocabulary};

use crate::cli::{
    AuditArgs, CheckArgs, Cli, Command, DecodeArgs, GenArgs, InferArgs, PacArgs, TheoryCommand, TradeoffArgs,
    TrainArgs, VocabKind,
};
use crate::error::{Error, Result};
use crate::experiment::{
    manifest_path, run_query, Backend, ExperimentSpec, Manifest, PolicyFile, PolicySpec, RunStatus, StrategyKind,
    StrategySpec,
};
use crate::formats::{
    dataset_csv, read_corpus, read_dataset, read_json, read_jsonl, read_queries, scatter_csv, to_jsonl,
    write_atomic, write_corpus, write_json, write_jsonl, PredictionRecord, Query, ReplayLine, TestRecord,
};

pub fn run(cli: Cli, argv: &[String]) -> Result<()> {
    match cli.command {
        Command::Gen(a) => gen(a, argv),
        Command::Train(a) => train(a, argv),
        Command::Infer(a) => infer(a, argv),
        Command::Audit(a) => audit(a, argv),
        Command::Theory { command: TheoryCommand::Check(a) } => theory_check(a, argv),
        Command::Theory { command: TheoryCommand::Pac(a) } => theory_pac(a, argv),
        Command::Tradeoff(a) => tradeoff(a, argv),
    }
}

fn finish(mut manifest: Manifest, path: &Path, outputs: &[&Path]) -> Result<()> {
    manifest.outputs = outputs.iter().map(|p| p.display().to_string()).collect();
    let status = manifest.status.clone();
    let errors = manifest.errors.len();
    write_json(path, &manifest)?;
    match status {
        RunStatus::Complete => Ok(()),
        RunStatus::Partial => Err(Error::Incomplete(format!(
            "{errors} item(s) failed; see {} (artifacts are marked partial)",
            path.display()
        ))),
    }
}

fn sibling(path: &Path, name: &str) -> PathBuf {
    path.parent().unwrap_or(Path::new(".")).join(name)
}

fn pool(threads: Option<usize>) -> Result<rayon::ThreadPool> {
    let mut b = rayon::ThreadPoolBuilder::new();
    if let Some(n) = threads {
        b = b.num_threads(n);
    }
    b.build().map_err(|e| Error::Invalid(format!("thread pool: {e}")))
}

#[derive(Serialize)]
struct GenRun<'a> {
    gen: &'a GenConfig,
    corpus_size: usize,
    test_set: TestSetKind,
    tests: &'a TestSetConfig,
}

fn gen(a: GenArgs, argv: &[String]) -> Result<()> {
    let mut cfg: GenConfig = match &a.config {
        Some(p) => read_json(p)?,
        None => GenConfig::default(),
    };
    let n_vars = a.n_vars.unwrap_or(cfg.vocabulary.n_vars);
    match a.vocab {
        Some(VocabKind::Full) => cfg.vocabulary = Vocabulary { n_vars, ..Vocabulary::full(n_vars) },
        Some(VocabKind::Simplified) => cfg.vocabulary = Vocabulary::simplified(n_vars),
        None => cfg.vocabulary.n_vars = n_vars,
    }
    cfg.seed = a.seed;
    let tcfg = TestSetConfig {
        count: a.tests,
        n_fit: a.n_fit,
        n_eval: a.n_eval,
        key_mode: a.key_mode.into(),
        ..TestSetConfig::default()
    };
    let kind: TestSetKind = a.test_set.into();
    let corpus = build_corpus(&cfg, a.corpus_size)?;
    let cases = match kind {
        TestSetKind::NotIncluded => build_test_set(&cfg, Some(&corpus), &tcfg)?,
        TestSetKind::Baseline => build_test_set(&cfg, None, &tcfg)?,
    };

    let dir = &a.out;
    let cfg_path = dir.join("gen_config.json");
    let corpus_path = dir.join("corpus.jsonl");
    let tests_path = dir.join("tests.jsonl");
    write_json(&cfg_path, &cfg)?;
    write_corpus(&corpus_path, &corpus)?;
    let mut records = Vec::with_capacity(cases.len());
    for c in &cases {
        let fit = format!("data/{:04}.fit.csv", c.id);
        let eval = format!("data/{:04}.eval.csv", c.id);
        write_atomic(&dir.join(&fit), &dataset_csv(&c.fit_data))?;
        write_atomic(&dir.join(&eval), &dataset_csv(&c.eval_data))?;
        records.push(test_record(c, fit, eval));
    }
    write_jsonl(&tests_path, &records)?;
    let run = GenRun { gen: &cfg, corpus_size: a.corpus_size, test_set: kind, tests: &tcfg };
    let m = Manifest::new("gen", argv, &run, a.seed);
    finish(m, &manifest_path(dir, true), &[&cfg_path, &corpus_path, &tests_path, &dir.join("data")])
}

fn test_record(c: &TestCase, fit: String, eval: String) -> TestRecord {
    let s = serialize(&c.expr, ConstantMode::KeepValues);
    TestRecord {
        id: c.id,
        prefix: s.tokens,
        constants: s.constants,
        template: c.template.tokens(),
        support: c.support.iter().map(|i| [i.low, i.high]).collect(),
        fit,
        eval,
    }
}

fn train(a: TrainArgs, argv: &[String]) -> Result<()> {
    let cfg_path = a.gen_config.clone().unwrap_or_else(|| sibling(&a.corpus, "gen_config.json"));
    let cfg: GenConfig = read_json(&cfg_path)?;
    let corpus = read_corpus(&a.corpus)?;
    let mut policy = TemplateMemoryPolicy::train(&corpus, cfg.vocabulary.clone(), a.alpha)?;
    if a.dataset_aware {
        policy = policy.with_dataset_aware(DatasetAware { top_m: a.top_m, tau: a.tau });
    }
    let file = PolicyFile::from_policy(&policy);
    write_json(&a.out, &file)?;
    let m = Manifest::new("train", argv, &file, cfg.seed);
    finish(m, &manifest_path(&a.out, false), &[&a.out])
}

/// Test records, or one query from a CSV file (fit and eval share data).
fn load_queries(path: &Path) -> Result<Vec<Query>> {
    if path.extension().is_some_and(|e| e.eq_ignore_ascii_case("csv")) {
        let data = read_dataset(path, None)?;
        return Ok(vec![Query { id: 0, fit: data.clone(), eval: data }]);
    }
    read_queries(path)
}

fn policy_spec(d: &DecodeArgs, gen: &GenConfig) -> Result<PolicySpec> {
    match (&d.policy, &d.endpoint, d.splice_prob) {
        (Some(path), _, None) => Ok(PolicySpec::Memory { path: path.clone() }),
        (Some(path), _, Some(p)) => Ok(PolicySpec::Splicing { path: path.clone(), splice_prob: p }),
        (None, Some(endpoint), None) => {
            Ok(PolicySpec::External { endpoint: endpoint.clone(), vocabulary: gen.vocabulary.clone() })
        }
        (None, Some(_), Some(_)) => Err(Error::Invalid("--splice-prob needs a --policy file".into())),
        (None, None, _) => Err(Error::Invalid("one of --policy or --endpoint is required".into())),
    }
}

/// Generator config for random gvs subtrees and external vocabularies.
fn decode_gen(d: &DecodeArgs) -> Result<GenConfig> {
    if let Some(p) = &d.gen_config {
        return read_json(p);
    }
    let near = sibling(&d.tests, "gen_config.json");
    if near.exists() {
        return read_json(&near);
    }
    if let Some(p) = &d.policy {
        let PolicyFile::Memory { vocabulary, .. } = read_json(p)?;
        return Ok(GenConfig { vocabulary, ..GenConfig::default() });
    }
    Err(Error::Invalid("--gen-config is required with --endpoint when no gen_config.json sits next to the tests".into()))
}

fn strategy_spec(d: &DecodeArgs, kind: StrategyKind, b: usize) -> StrategySpec {
    StrategySpec {
        kind,
        b,
        max_len: d.max_len,
        rollouts: d.rollouts,
        k_max: d.k_max,
        lambda: d.lambda,
        c_puct: d.c_puct,
        iterations: d.iterations,
        fit: FitConfig { restarts: d.restarts, ..FitConfig::default() },
    }
}

struct InferResult {
    records: Vec<PredictionRecord>,
    /// Ids of queries whose policy or decoder failed.
    fatal: Vec<usize>,
    replays: Vec<(usize, Vec<ReplayLine>)>,
}

fn run_spec(spec: &ExperimentSpec, backend: &Backend, queries: &[Query], threads: Option<usize>) -> Result<InferResult> {
    let outs: Vec<_> = pool(threads)?.install(|| {
        queries
            .par_iter()
            .map(|q| run_query(backend, q.id, &q.fit, &spec.strategy, &spec.gen, spec.seed))
            .collect()
    });
    let mut records = Vec::with_capacity(outs.len());
    let mut replays = Vec::new();
    let mut fatal = Vec::new();
    for (q, o) in queries.iter().zip(outs) {
        if o.fatal {
            fatal.push(q.id);
        }
        if !o.replay.is_empty() {
            replays.push((q.id, o.replay.iter().map(ReplayLine::from).collect()));
        }
        records.push(o.record);
    }
    Ok(InferResult { records, fatal, replays })
}

/// Input files must exist before any of them is read.
fn require_inputs(d: &DecodeArgs) -> Result<()> {
    let files = [Some(&d.tests), d.policy.as_ref(), d.gen_config.as_ref()];
    match files.into_iter().flatten().find(|f| !f.exists()) {
        Some(f) => Err(Error::Invalid(format!("{} does not exist", f.display()))),
        None => Ok(()),
    }
}

fn infer(a: InferArgs, argv: &[String]) -> Result<()> {
    let d = &a.decode;
    require_inputs(d)?;
    let gen = decode_gen(d)?;
    let spec = ExperimentSpec {
        policy: policy_spec(d, &gen)?,
        strategy: strategy_spec(d, a.strategy, a.b),
        gen,
        tests: d.tests.clone(),
        out: a.out.clone(),
        seed: d.seed,
    };
    spec.validate()?;
    let queries = load_queries(&spec.tests)?;
    let backend = Backend::open(&spec.policy)?;
    let res = run_spec(&spec, &backend, &queries, d.threads)?;

    let mut m = Manifest::new("infer", argv, &spec, spec.seed);
    m.errors = res
        .records
        .iter()
        .filter(|r| res.fatal.contains(&r.id))
        .filter_map(|r| r.error.as_ref().map(|e| format!("query {}: {e}", r.id)))
        .collect();
    if !m.errors.is_empty() {
        m.status = RunStatus::Partial;
    }
    write_atomic(&a.out, &to_jsonl(&res.records))?;
    let mut outputs = vec![a.out.clone()];
    if let Some(dir) = &a.replay_dir {
        for (id, lines) in &res.replays {
            let p = dir.join(format!("{id:04}.jsonl"));
            write_jsonl(&p, lines)?;
        }
        outputs.push(dir.clone());
    }
    let refs: Vec<&Path> = outputs.iter().map(PathBuf::as_path).collect();
    finish(m, &manifest_path(&a.out, false), &refs)
}

/// Rows without tokens are dropped; their ids are returned.
fn audit_inputs(records: &[PredictionRecord]) -> (Vec<AuditInput>, Vec<usize>) {
    let mut inputs = Vec::new();
    let mut skipped = Vec::new();
    for r in records {
        if r.tokens.is_empty() {
            skipped.push(r.id);
        } else {
            inputs.push(AuditInput { id: r.id, tokens: r.tokens.clone(), constants: r.constants.clone() });
        }
    }
    (inputs, skipped)
}

fn eval_for(inputs: &[AuditInput], queries: &[Query]) -> Result<Vec<Dataset>> {
    inputs
        .iter()
        .map(|p| {
            queries
                .iter()
                .find(|q| q.id == p.id)
                .map(|q| q.eval.clone())
                .ok_or_else(|| Error::Invalid(format!("prediction {} has no test query", p.id)))
        })
        .collect()
}

#[derive(Serialize)]
struct AuditRun<'a> {
    predictions: &'a Path,
    tests: &'a Path,
    corpus: &'a Path,
    mode: srlab_core::audit::ReproductionMode,
    key_mode: KeyMode,
}

fn audit(a: AuditArgs, argv: &[String]) -> Result<()> {
    let records: Vec<PredictionRecord> = read_jsonl(&a.predictions)?;
    let queries = load_queries(&a.tests)?;
    let corpus = read_corpus(&a.corpus)?;
    let (inputs, skipped) = audit_inputs(&records);
    let eval = eval_for(&inputs, &queries)?;
    let report = audit_run(&inputs, &eval, &corpus, a.mode.into(), a.key_mode.into())?;
    let scatter = a.scatter.clone().unwrap_or_else(|| a.out.with_extension("csv"));
    write_json(&a.out, &report)?;
    write_atomic(&scatter, &scatter_csv(&report))?;
    let run = AuditRun {
        predictions: &a.predictions,
        tests: &a.tests,
        corpus: &a.corpus,
        mode: a.mode.into(),
        key_mode: a.key_mode.into(),
    };
    let mut m = Manifest::new("audit", argv, &run, 0);
    m.errors = skipped.iter().map(|id| format!("prediction {id} has no tokens and was not audited")).collect();
    if !m.errors.is_empty() {
        m.status = RunStatus::Partial;
    }
    finish(m, &manifest_path(&a.out, false), &[&a.out, &scatter])
}

/// Output of `theory check`.
#[derive(Clone, Debug, PartialEq, Serialize, serde::Deserialize)]
pub struct Certificate {
    pub count: usize,
    pub max_depth: usize,
    pub seed: u64,
    pub passes: usize,
    pub verdicts: Vec<Verdict>,
}

fn theory_check(a: CheckArgs, argv: &[String]) -> Result<()> {
    let verdicts: Vec<Verdict> = if a.formulas.is_empty() {
        (0..a.count as u64).into_par_iter().map(|i| check_reduction(&batch_formula(a.seed, i, a.max_depth))).collect()
    } else {
        let parsed = a.formulas.iter().map(|s| parse_formula(s)).collect::<Result<Vec<_>, _>>()?;
        parsed.par_iter().map(check_reduction).collect()
    };
    let passes = verdicts.iter().filter(|v| v.pass).count();
    let cert = Certificate { count: verdicts.len(), max_depth: a.max_depth, seed: a.seed, passes, verdicts };
    write_json(&a.out, &cert)?;
    let run = serde_json::json!({"count": cert.count, "max_depth": a.max_depth, "seed": a.seed, "formulas": a.formulas});
    let mut m = Manifest::new("theory check", argv, &run, a.seed);
    m.errors = cert.verdicts.iter().filter(|v| !v.pass).map(|v| format!("{}: {}", v.formula, v.failures.join("; "))).collect();
    if !m.errors.is_empty() {
        m.status = RunStatus::Partial;
    }
    finish(m, &manifest_path(&a.out, false), &[&a.out])
}

fn theory_pac(a: PacArgs, argv: &[String]) -> Result<()> {
    let cfg = PacConfig { u: a.u, r: a.r, d0: a.d0, k: a.k, beta: a.beta, delta: a.delta, trials: a.trials, seed: a.seed };
    cfg.validate()?;
    let outcomes: Vec<TrialOutcome> = (0..cfg.trials as u64).into_par_iter().map(|t| pac_trial(&cfg, t)).collect();
    let stats = PacStats::from_outcomes(&cfg, &outcomes);
    write_json(&a.out, &stats)?;
    let m = Manifest::new("theory pac", argv, &cfg, cfg.seed);
    finish(m, &manifest_path(&a.out, false), &[&a.out])
}

/// One line of the cost-versus-accuracy table.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct TradeoffRow {
    pub strategy: &'static str,
    pub b: usize,
    pub mean_cost: f64,
    pub novelty_percent: f64,
    /// Share of queries whose held-out R² exceeds the breakdown threshold.
    pub accuracy_percent: f64,
    /// Queries without a ranked prediction.
    pub failures: usize,
}

fn accuracy(report: &AuditReport) -> f64 {
    let i = R2_THRESHOLDS.iter().position(|t| *t == BREAKDOWN_THRESHOLD).expect("threshold listed");
    report.thresholds[i].percent
}

pub fn tradeoff_csv(rows: &[TradeoffRow]) -> Vec<u8> {
    let mut s = String::from("strategy,b,mean_cost,novelty_percent,accuracy_percent,failures\n");
    for r in rows {
        s.push_str(&format!(
            "{},{},{:?},{:?},{:?},{}\n",
            r.strategy, r.b, r.mean_cost, r.novelty_percent, r.accuracy_percent, r.failures
        ));
    }
    s.into_bytes()
}

fn tradeoff(a: TradeoffArgs, argv: &[String]) -> Result<()> {
    let d = &a.decode;
    require_inputs(d)?;
    let gen = decode_gen(d)?;
    let policy = policy_spec(d, &gen)?;
    let queries = load_queries(&d.tests)?;
    let corpus = read_corpus(&a.corpus)?;
    let backend = Backend::open(&policy)?;
    let kinds = if a.strategies.is_empty() {
        vec![StrategyKind::Beam, StrategyKind::Mcts, StrategyKind::Gvs, StrategyKind::GvsMcts]
    } else {
        a.strategies.clone()
    };
    let mut rows = Vec::new();
    let mut specs = Vec::new();
    let mut errors = Vec::new();
    for kind in kinds {
        let widths = if a.widths.is_empty() { kind.tradeoff_widths().to_vec() } else { a.widths.clone() };
        for b in widths {
            let spec = ExperimentSpec {
                gen: gen.clone(),
                policy: policy.clone(),
                strategy: strategy_spec(d, kind, b),
                tests: d.tests.clone(),
                out: a.out.clone(),
                seed: d.seed,
            };
            spec.validate()?;
            let res = run_spec(&spec, &backend, &queries, d.threads)?;
            for r in res.records.iter().filter(|r| res.fatal.contains(&r.id)) {
                errors.push(format!("{} b={b} query {}: {}", kind.name(), r.id, r.error.as_deref().unwrap_or("")));
            }
            let (inputs, _) = audit_inputs(&res.records);
            let eval = eval_for(&inputs, &queries)?;
            let report = audit_run(&inputs, &eval, &corpus, Default::default(), a.key_mode.into())?;
            let n = res.records.len().max(1) as f64;
            rows.push(TradeoffRow {
                strategy: kind.name(),
                b,
                mean_cost: res.records.iter().map(|r| r.cost as f64).sum::<f64>() / n,
                novelty_percent: report.novelty_percent,
                accuracy_percent: accuracy(&report),
                failures: res.records.iter().filter(|r| r.error.is_some()).count(),
            });
            specs.push(spec);
        }
    }
    write_atomic(&a.out, &tradeoff_csv(&rows))?;
    let mut m = Manifest::new("tradeoff", argv, &specs, d.seed);
    if !errors.is_empty() {
        m.status = RunStatus::Partial;
        m.errors = errors;
    }
    finish(m, &manifest_path(&a.out, false), &[&a.out])
}
