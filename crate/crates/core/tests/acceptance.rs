//! Acceptance suite: one PASS/FAIL line per criterion, nonzero exit on
//! any failure.

use std::collections::{BTreeMap, BTreeSet};
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::process::ExitCode;
use std::time::{Duration, Instant};

use srlab_core::audit::{audit_run, build_not_included, AuditInput, ReproductionMode, TestCase, TestSetConfig};
use srlab_core::datagen::{build_corpus, sample_dataset, sample_expression, sample_support, Corpus};
use srlab_core::decoding::{
    beam_decode, beam_search, greedy_decode, mcts_decode, reward, BeamConfig, BeamMode, DecodeError, MctsConfig,
    RolloutBudget,
};
use srlab_core::expr::{
    deserialize, deserialize_with_constants, parse_tokens, serialize, ConstantMode, KeyMode, Token,
};
use srlab_core::fitting::{fit_constants, r2, FitConfig};
use srlab_core::gvs::{run_gvs, GvsConfig, InnerDecoder};
use srlab_core::policy::{DatasetAware, PromptSplicingPolicy, TemplateMemoryPolicy};
use srlab_core::rng::stream;
use srlab_core::theory::{batch_formula, check_reduction, pac_simulate, PacConfig};
use srlab_core::{Dataset, Expr, GenConfig, Interval};

// Pinned tolerances.
const LOSS_TOL: f64 = 1e-9;
const CONST_FLOOR: f64 = 0.25 - 1e-6;
const REPLAY_TOL: f64 = 1e-12;
const REWARD_TOL: f64 = 1e-12;
const FIT_TOL: f64 = 1e-4;
const R2_FLOOR: f64 = 1.0 - 1e-8;
const TIME_LIMIT: Duration = Duration::from_secs(60);

type Check = Result<String, String>;

fn ensure(cond: bool, msg: impl FnOnce() -> String) -> Result<(), String> {
    if cond {
        Ok(())
    } else {
        Err(msg())
    }
}

fn toks(s: &str) -> Vec<Token> {
    parse_tokens(s.split_whitespace()).expect("valid tokens")
}

/// Shared fixture for criteria 5, 6, 8 and 10.
struct Fixture {
    gen: GenConfig,
    corpus: Corpus,
    tests: Vec<TestCase>,
}

fn fixture() -> Fixture {
    let gen = GenConfig { seed: 2024, ..GenConfig::simplified(2) };
    let corpus = build_corpus(&gen, 1000).expect("corpus");
    let cfg = TestSetConfig { count: 150, ..TestSetConfig::default() };
    let tests = build_not_included(&gen, &corpus, &cfg).expect("test set");
    Fixture { gen, corpus, tests }
}

fn c1_reduction() -> Check {
    let start = Instant::now();
    let mut worst = (0.0f64, 0.0f64, f64::INFINITY);
    for i in 0..1000 {
        let f = batch_formula(7, i, 8);
        ensure(f.depth() <= 8, || format!("formula {i} deeper than 8"))?;
        let v = check_reduction(&f);
        ensure(v.pass, || format!("formula {i} {}: {:?}", v.formula, v.failures))?;
        let (win, lose) = if v.value { (1, 0) } else { (0, 1) };
        let expected = if v.value { Token::Var(2) } else { Token::Var(1) };
        ensure(v.answer == expected, || format!("formula {i}: answer {}", v.answer))?;
        let (w, l, c) = (v.losses[win].loss, v.losses[lose].loss, v.losses[2].loss);
        ensure(w.abs() <= LOSS_TOL && (1.0 - l).abs() <= LOSS_TOL && c >= CONST_FLOOR, || {
            format!("formula {i}: losses ({w}, {l}, {c})")
        })?;
        worst = (worst.0.max(w.abs()), worst.1.max((1.0 - l).abs()), worst.2.min(c));
    }
    let t = start.elapsed();
    ensure(t <= TIME_LIMIT, || format!("took {t:?}"))?;
    Ok(format!(
        "1000/1000 pass; max |win| {:.1e}, max |1-runner-up| {:.1e}, min C loss {:.6}; {:.2?}",
        worst.0, worst.1, worst.2, t
    ))
}

fn c2_pac() -> Check {
    let start = Instant::now();
    let cfg = PacConfig { u: 100, r: 5, d0: 3, k: 8, beta: 0.3, delta: 0.1, trials: 10_000, seed: 1 };
    ensure(cfg.burn_in() == 102, || format!("B = {}", cfg.burn_in()))?;
    ensure(cfg.post_rounds() == 10, || format!("R = {}", cfg.post_rounds()))?;
    let stats = pac_simulate(&cfg).map_err(|e| e.to_string())?;
    let bound = 0.1 + 3.0 * (0.1f64 * 0.9 / 10_000.0).sqrt();
    ensure(stats.failure_rate <= bound, || format!("failure rate {} > {bound}", stats.failure_rate))?;
    let t = start.elapsed();
    ensure(t <= TIME_LIMIT, || format!("took {t:?}"))?;
    Ok(format!("B=102 R=10; failure rate {:.4} <= {bound:.4}; {:.2?}", stats.failure_rate, t))
}

/// Multiplicative constants sit in `Mul(C, _)`, additive ones in `Add(_, C)`.
fn constant_violations(e: &Expr, gen: &GenConfig, out: &mut Vec<String>) {
    match e {
        Expr::Binary(op, l, r) => {
            if let (srlab_core::BinaryOp::Mul, Expr::Const(c)) = (op, &**l) {
                if !(gen.mul_dist.low..=gen.mul_dist.high).contains(c) {
                    out.push(format!("mul constant {c}"));
                }
            }
            if let (srlab_core::BinaryOp::Add, Expr::Const(c)) = (op, &**r) {
                if !(gen.add_dist.low..=gen.add_dist.high).contains(c) {
                    out.push(format!("add constant {c}"));
                }
            }
            if matches!(&**r, Expr::Const(_)) && *op != srlab_core::BinaryOp::Add
                || matches!(&**l, Expr::Const(_)) && *op != srlab_core::BinaryOp::Mul
            {
                out.push(format!("constant in unexpected position {e}"));
            }
            constant_violations(l, gen, out);
            constant_violations(r, gen, out);
        }
        Expr::Unary(_, c) => {
            if matches!(&**c, Expr::Const(_)) {
                out.push(format!("constant under a unary operator {e}"));
            }
            constant_violations(c, gen, out);
        }
        _ => {}
    }
}

fn c3_datagen() -> Check {
    let gen = GenConfig { seed: 3, ..GenConfig::default() };
    let mut rng = stream(gen.seed, "acceptance-datagen", 0);
    let mut violations = Vec::new();
    let mut max_depth = 0;
    let mut max_consts = 0;
    for _ in 0..10_000 {
        let s = sample_expression(&mut rng, &gen);
        max_depth = max_depth.max(s.template.depth());
        max_consts = max_consts.max(s.expr.constant_count());
        if s.template.depth() > 6 {
            violations.push(format!("template depth {}", s.template.depth()));
        }
        if s.expr.constant_count() > 6 {
            violations.push(format!("{} constants", s.expr.constant_count()));
        }
        constant_violations(&s.expr, &gen, &mut violations);
        for iv in sample_support(&mut rng, &gen) {
            let ok = (-10.0..=9.0).contains(&iv.low) && iv.high >= iv.low + 1.0 && iv.high <= 10.0;
            if !ok {
                violations.push(format!("support [{}, {}]", iv.low, iv.high));
            }
        }
    }
    ensure(violations.is_empty(), || format!("{} violations, first: {}", violations.len(), violations[0]))?;
    Ok(format!("10000 samples, 0 violations; max template depth {max_depth}, max constants {max_consts}"))
}

fn c4_round_trip() -> Check {
    let gen = GenConfig { seed: 4, ..GenConfig::default() };
    let mut rng = stream(gen.seed, "acceptance-roundtrip", 0);
    let mut failures = 0;
    for _ in 0..10_000 {
        let s = sample_expression(&mut rng, &gen);
        let ser = serialize(&s.expr, ConstantMode::KeepValues);
        if deserialize_with_constants(&ser.tokens, &ser.constants).as_ref() != Ok(&s.expr) {
            failures += 1;
        }
        let ph = s.expr.to_placeholders();
        if deserialize(&ph.tokens()).as_ref() != Ok(&ph) {
            failures += 1;
        }
        match s.expr.strip_constants() {
            Ok(st) => {
                if st != s.template || st.strip_constants().as_ref() != Ok(&st) {
                    failures += 1;
                }
            }
            Err(_) => failures += 1,
        }
    }
    ensure(failures == 0, || format!("{failures} failures"))?;
    Ok("10000 samples, 0 failures".into())
}

/// Decodes every query with the dataset-aware memory policy.
fn decode_all(p: &TemplateMemoryPolicy, tests: &[TestCase], cfg: &BeamConfig) -> Result<Vec<AuditInput>, String> {
    tests
        .iter()
        .map(|t| match beam_decode(&p.conditioned(&t.fit_data), &t.fit_data, &[], cfg) {
            Ok(pred) => Ok(AuditInput { id: t.id, tokens: pred.tokens, constants: pred.constants }),
            Err(DecodeError::NoFiniteCandidate { best_tokens }) => {
                Ok(AuditInput { id: t.id, tokens: best_tokens, constants: Vec::new() })
            }
            Err(e) => Err(e.to_string()),
        })
        .collect()
}

/// Linear-scan lookup, independent of the corpus index.
fn oracle_reproduction(input: &AuditInput, templates: &[Vec<Token>]) -> bool {
    let consts = vec![f64::NAN; input.tokens.iter().filter(|t| **t == Token::Const).count()];
    let stripped = deserialize_with_constants(&input.tokens, &consts).and_then(|e| e.strip_constants());
    match stripped {
        Ok(s) => {
            let t = s.tokens();
            templates.contains(&t)
        }
        Err(_) => false,
    }
}

fn c5_reproduction(fx: &Fixture) -> Check {
    let cfg = BeamConfig { beam_size: 5, ..BeamConfig::default() };
    let eval: Vec<Dataset> = fx.tests.iter().map(|t| t.eval_data.clone()).collect();
    let templates: Vec<Vec<Token>> = fx.corpus.templates().iter().map(Expr::tokens).collect();
    ensure(fx.corpus.len() == 1000 && fx.tests.len() == 150, || "fixture size".into())?;

    let strict = TemplateMemoryPolicy::train(&fx.corpus, fx.gen.vocabulary.clone(), 0.0)
        .map_err(|e| e.to_string())?
        .with_dataset_aware(DatasetAware::default());
    let inputs = decode_all(&strict, &fx.tests, &cfg)?;
    let rep = audit_run(&inputs, &eval, &fx.corpus, ReproductionMode::Template, KeyMode::Strict)
        .map_err(|e| e.to_string())?;
    ensure(rep.novelty_percent == 0.0, || format!("alpha=0 novelty {}%", rep.novelty_percent))?;

    let smooth = TemplateMemoryPolicy::train(&fx.corpus, fx.gen.vocabulary.clone(), 0.05)
        .map_err(|e| e.to_string())?
        .with_dataset_aware(DatasetAware::default());
    let inputs = decode_all(&smooth, &fx.tests, &cfg)?;
    let rep2 = audit_run(&inputs, &eval, &fx.corpus, ReproductionMode::Template, KeyMode::Strict)
        .map_err(|e| e.to_string())?;
    ensure(rep2.novelty_percent > 0.0, || "alpha=0.05 novelty is 0%".into())?;
    let mut agree = 0;
    for (row, input) in rep2.rows.iter().zip(&inputs) {
        if row.novel_structure == !oracle_reproduction(input, &templates) {
            agree += 1;
        }
    }
    ensure(agree == inputs.len(), || format!("oracle agreement {agree}/{}", inputs.len()))?;
    Ok(format!(
        "alpha=0 novelty 0.0%; alpha=0.05 novelty {:.1}% with oracle agreement {agree}/{}",
        rep2.novelty_percent,
        inputs.len()
    ))
}

fn gvs_config(fx: &Fixture, seed: u64, beam: usize) -> GvsConfig {
    GvsConfig {
        iterations: 30,
        decoder: InnerDecoder::Beam(BeamConfig {
            beam_size: beam,
            max_len: 40,
            fit: FitConfig { restarts: 3, ..FitConfig::default() },
            ..BeamConfig::default()
        }),
        gen: fx.gen.clone(),
        seed,
        ..GvsConfig::default()
    }
}

fn splicing(fx: &Fixture, seed: u64) -> Result<PromptSplicingPolicy<TemplateMemoryPolicy>, String> {
    let base = TemplateMemoryPolicy::train(&fx.corpus, fx.gen.vocabulary.clone(), 0.05).map_err(|e| e.to_string())?;
    PromptSplicingPolicy::new(base, 0.3, seed, 40).map_err(|e| e.to_string())
}

fn c6_gvs(fx: &Fixture) -> Check {
    let mut worst = 0.0f64;
    let mut entries = 0;
    let runs = 5;
    for q in 0..runs {
        let policy = splicing(fx, q as u64)?;
        let out = run_gvs(&policy, &fx.tests[q].fit_data, &gvs_config(fx, q as u64, 5)).map_err(|e| e.to_string())?;
        ensure(out.log.len() == 30, || format!("run {q}: {} log records", out.log.len()))?;
        let replayed = srlab_core::gvs::replay_pool(&out.log);
        ensure(replayed.len() == out.pool.len(), || format!("run {q}: pool sizes differ"))?;
        // Direct oracle: mean score over the log records containing each subtree.
        let mut direct: BTreeMap<String, (f64, u64)> = BTreeMap::new();
        for rec in &out.log {
            let Ok(e) = deserialize(&rec.tokens) else { continue };
            let r = if rec.r2.is_finite() { rec.r2 } else { 0.0 };
            for s in e.subtrees() {
                let slot = direct.entry(s.structure_key()).or_insert((0.0, 0));
                slot.0 += r;
                slot.1 += 1;
            }
        }
        for e in out.pool.entries() {
            let r = replayed.get(&e.subtree).ok_or_else(|| format!("run {q}: {} missing on replay", e.key))?;
            let (sum, c) = direct.get(&e.key).copied().ok_or_else(|| format!("run {q}: {} missing", e.key))?;
            ensure(r.c == e.c && c == e.c, || format!("run {q}: count mismatch for {}", e.key))?;
            let dz = (r.z - e.z).abs().max((sum / c as f64 - e.z).abs());
            ensure(dz <= REPLAY_TOL, || format!("run {q}: z off by {dz} for {}", e.key))?;
            worst = worst.max(dz);
            entries += 1;
        }
        ensure(out.best_trace.windows(2).all(|w| w[1] >= w[0]), || format!("run {q}: best-so-far decreased"))?;
    }
    Ok(format!("{runs} runs x 30 iterations; {entries} entries replayed, max |dz| {worst:.1e}; best-so-far monotone"))
}

fn c7_reward(fx: &Fixture) -> Check {
    let e = deserialize(&toks("add mul x_1 x_2 sub sin x_1 exp cos x_2")).map_err(|e| e.to_string())?;
    ensure(e.token_len() == 10, || "fixture length".into())?;
    let support = [Interval::new(-1.0, 1.0), Interval::new(-1.0, 1.0)];
    let data = sample_dataset(&e, &support, 100, &mut stream(7, "acceptance-reward", 0)).map_err(|e| e.to_string())?;
    let got = reward(&e, &data, 0.01, 60).map_err(|e| e.to_string())?;
    let want = 1.0 + 0.01 * (-1.0f64 / 6.0).exp();
    ensure((got - want).abs() <= REWARD_TOL, || format!("reward {got} vs {want}"))?;

    let base = TemplateMemoryPolicy::train(&fx.corpus, fx.gen.vocabulary.clone(), 0.05).map_err(|e| e.to_string())?;
    let cfg = MctsConfig {
        budget: RolloutBudget::PerToken(4),
        beam_size: 2,
        max_len: 30,
        fit: FitConfig { restarts: 3, ..FitConfig::default() },
        ..MctsConfig::default()
    };
    let out = mcts_decode(&base, &fx.tests[0].fit_data, &[], &cfg).map_err(|e| e.to_string())?;
    let mut last: BTreeMap<Vec<Token>, f64> = BTreeMap::new();
    for u in &out.q_log {
        if let Some(prev) = last.insert(u.prefix.clone(), u.q) {
            ensure(u.q >= prev, || format!("Q decreased at {:?}", u.prefix))?;
        }
    }
    Ok(format!("reward |diff| {:.1e}; {} Q updates monotone", (got - want).abs(), out.q_log.len()))
}

fn c8_beam(fx: &Fixture) -> Check {
    let policy = TemplateMemoryPolicy::train(&fx.corpus, fx.gen.vocabulary.clone(), 0.05)
        .map_err(|e| e.to_string())?
        .with_dataset_aware(DatasetAware::default());
    let mut nonempty = 0;
    for t in fx.tests.iter().take(100) {
        let p = policy.conditioned(&t.fit_data);
        let d = &t.fit_data;
        let g = greedy_decode(&p, d, &[], 60).map_err(|e| e.to_string())?;
        let b1 = beam_search(&p, d, &[], &[], 1, 60, BeamMode::Nested).map_err(|e| e.to_string())?;
        ensure(g.as_ref().map(|c| &c.tokens) == b1.first().map(|c| &c.tokens) && b1.len() <= 1, || {
            format!("query {}: b=1 differs from greedy", t.id)
        })?;
        let b5: BTreeSet<Vec<Token>> = beam_search(&p, d, &[], &[], 5, 60, BeamMode::Nested)
            .map_err(|e| e.to_string())?
            .into_iter()
            .map(|c| c.tokens)
            .collect();
        let b50: BTreeSet<Vec<Token>> = beam_search(&p, d, &[], &[], 50, 60, BeamMode::Nested)
            .map_err(|e| e.to_string())?
            .into_iter()
            .map(|c| c.tokens)
            .collect();
        ensure(b5.is_subset(&b50), || format!("query {}: b=5 not within b=50", t.id))?;
        nonempty += usize::from(!b5.is_empty());
    }
    Ok(format!("100 queries: b=1 == greedy, b=5 within b=50 ({nonempty} non-empty)"))
}

fn c9_fit() -> Check {
    let xs: Vec<f64> = (0..100).map(|i| -2.0 + 4.0 * i as f64 / 99.0).collect();
    let data = Dataset::new(
        xs.iter().map(|x| vec![*x]).collect(),
        xs.iter().map(|x| 3.0 * x).collect(),
        vec![Interval::new(-2.0, 2.0)],
    )
    .map_err(|e| format!("{e:?}"))?;
    let fit = fit_constants(&toks("mul C x_1"), &data, &FitConfig::default()).map_err(|e| e.to_string())?;
    let oracle = xs.iter().map(|x| x * 3.0 * x).sum::<f64>() / xs.iter().map(|x| x * x).sum::<f64>();
    let c = fit.constants[0];
    ensure((c - oracle).abs() <= FIT_TOL, || format!("constant {c} vs {oracle}"))?;
    let yhat: Vec<f64> = xs.iter().map(|x| c * x).collect();
    let score = r2(&data.targets, &yhat).map_err(|e| e.to_string())?;
    ensure(score >= R2_FLOOR, || format!("R2 {score}"))?;
    Ok(format!("constant {c:.10} (oracle {oracle}), R2 {score}"))
}

fn c10_cost(fx: &Fixture) -> Check {
    let policy = TemplateMemoryPolicy::train(&fx.corpus, fx.gen.vocabulary.clone(), 0.05).map_err(|e| e.to_string())?;
    let d = &fx.tests[1].fit_data;
    for b in [1, 3, 7] {
        let cfg = BeamConfig { beam_size: b, fit: FitConfig { restarts: 2, ..FitConfig::default() }, ..BeamConfig::default() };
        let p = beam_decode(&policy, d, &[], &cfg).map_err(|e| e.to_string())?;
        ensure(p.candidates_generated == b && p.candidate_set.len() <= b, || {
            format!("beam b={b}: cost {}", p.candidates_generated)
        })?;
    }
    for (sims, b) in [(25, 1), (40, 2), (30, 4)] {
        let cfg = MctsConfig {
            budget: RolloutBudget::PerExpression(sims),
            beam_size: b,
            max_len: 30,
            fit: FitConfig { restarts: 2, ..FitConfig::default() },
            ..MctsConfig::default()
        };
        let out = mcts_decode(&policy, d, &[], &cfg).map_err(|e| e.to_string())?;
        // Count simulations from the backpropagation log.
        let logged: BTreeSet<usize> = out.q_log.iter().map(|u| u.simulation).collect();
        ensure(logged.len() == sims && out.simulations == sims, || format!("mcts: {} simulations logged", logged.len()))?;
        ensure(out.prediction.candidates_generated == sims * b, || {
            format!("mcts sims={sims} b={b}: cost {}", out.prediction.candidates_generated)
        })?;
    }
    for (t_iter, b) in [(4, 2), (6, 3)] {
        let policy = splicing(fx, 9)?;
        let cfg = GvsConfig { iterations: t_iter, ..gvs_config(fx, 9, b) };
        let out = run_gvs(&policy, d, &cfg).map_err(|e| e.to_string())?;
        ensure(out.log.len() == t_iter && out.prediction.candidates_generated == t_iter * b, || {
            format!("gvs T={t_iter} b={b}: cost {}", out.prediction.candidates_generated)
        })?;
    }
    Ok("beam b, MCTS sims*b, gvs T*b all exact".into())
}

fn run(n: usize, name: &str, f: impl FnOnce() -> Check) -> bool {
    let start = Instant::now();
    let result = catch_unwind(AssertUnwindSafe(f)).unwrap_or_else(|p| {
        let msg = p
            .downcast_ref::<String>()
            .cloned()
            .or_else(|| p.downcast_ref::<&str>().map(|s| s.to_string()))
            .unwrap_or_default();
        Err(format!("panicked: {msg}"))
    });
    let t = start.elapsed();
    match &result {
        Ok(detail) => println!("PASS {n:>2} {name}: {detail} [{t:.2?}]"),
        Err(detail) => println!("FAIL {n:>2} {name}: {detail} [{t:.2?}]"),
    }
    result.is_ok()
}

fn main() -> ExitCode {
    let fx = fixture();
    let results = [
        run(1, "reduction soundness", c1_reduction),
        run(2, "PAC simulation", c2_pac),
        run(3, "datagen conformance", c3_datagen),
        run(4, "round-trip and strip", c4_round_trip),
        run(5, "reproduction by construction", || c5_reproduction(&fx)),
        run(6, "gvs pool replay", || c6_gvs(&fx)),
        run(7, "reward and Q monotonicity", || c7_reward(&fx)),
        run(8, "beam degeneracy and nesting", || c8_beam(&fx)),
        run(9, "constant fitting", c9_fit),
        run(10, "cost accounting", || c10_cost(&fx)),
    ];
    let failed = results.iter().filter(|r| !**r).count();
    println!("{} passed, {failed} failed", results.len() - failed);
    if failed == 0 {
        ExitCode::SUCCESS
    } else {
        ExitCode::FAILURE
    }
}
