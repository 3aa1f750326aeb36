use std::collections::BTreeMap;
use std::fs;
use std::io::{BufRead, BufReader, Write};
use std::net::TcpListener;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};
use std::thread;

use serde_json::{json, Value};

use srlab::commands::Certificate;
use srlab::experiment::Manifest;
use srlab::formats::{read_json, read_jsonl, PredictionRecord, ReplayLine};
use srlab_core::audit::AuditReport;
use srlab_core::expr::{Token, Vocabulary};
use srlab_core::policy::legal_tokens;

fn srlab(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_srlab")).args(args).output().unwrap()
}

fn ok(args: &[&str]) {
    let out = srlab(args);
    assert!(out.status.success(), "{args:?}: {}", String::from_utf8_lossy(&out.stderr));
}

fn p(path: &Path) -> &str {
    path.to_str().unwrap()
}

fn stderr_json(out: &Output) -> Value {
    serde_json::from_slice(out.stderr.trim_ascii()).unwrap()
}

/// Corpus, tests and an α = 0 memory policy in a temp directory.
struct Fixture {
    _tmp: tempfile::TempDir,
    dir: PathBuf,
}

impl Fixture {
    fn new(tests: usize) -> Self {
        let tmp = tempfile::tempdir().unwrap();
        let dir = tmp.path().to_path_buf();
        let data = dir.join("data");
        let n = tests.to_string();
        ok(&["gen", "--vocab", "simplified", "--n-vars", "2", "--corpus-size", "300", "--tests", &n, "--seed", "5", "--out", p(&data)]);
        ok(&["train", "--corpus", p(&data.join("corpus.jsonl")), "--out", p(&dir.join("policy.json"))]);
        Fixture { _tmp: tmp, dir }
    }

    fn path(&self, rel: &str) -> PathBuf {
        self.dir.join(rel)
    }

    fn tests(&self) -> String {
        p(&self.path("data/tests.jsonl")).to_string()
    }

    fn infer(&self, strategy: &str, b: usize, out: &str, extra: &[&str]) -> Vec<PredictionRecord> {
        let b = b.to_string();
        let out = self.path(out);
        let tests = self.tests();
        let policy = self.path("policy.json");
        let mut args = vec!["infer", "--tests", &tests, "--policy", p(&policy), "--strategy", strategy, "--b", &b, "--out", p(&out)];
        args.extend_from_slice(extra);
        ok(&args);
        read_jsonl(&out).unwrap()
    }
}

#[test]
fn theory_check_certifies_a_thousand_formulas() {
    let tmp = tempfile::tempdir().unwrap();
    let out = tmp.path().join("cert.json");
    ok(&["theory", "check", "--count", "1000", "--max-depth", "8", "--seed", "7", "--out", p(&out)]);
    let cert: Certificate = read_json(&out).unwrap();
    assert_eq!((cert.count, cert.passes, cert.verdicts.len()), (1000, 1000, 1000));
    assert!(cert.verdicts.iter().all(|v| v.failures.is_empty() && v.losses.len() == 3));
    let v: Value = read_json(&out).unwrap();
    for key in ["formula", "tokens", "losses", "pass"] {
        assert!(v["verdicts"][0].get(key).is_some(), "{key}");
    }
    let m: Manifest = read_json(&tmp.path().join("cert.json.manifest.json")).unwrap();
    assert_eq!(m.command, "theory check");
    assert_eq!(m.seed, 7);
    assert_eq!(m.config_hash.len(), 64);
}

#[test]
fn theory_check_given_formulas() {
    let tmp = tempfile::tempdir().unwrap();
    let out = tmp.path().join("cert.json");
    ok(&["theory", "check", "--formula", "((1∨0)∧(¬1))", "--formula", "(¬0)", "--out", p(&out)]);
    let cert: Certificate = read_json(&out).unwrap();
    assert_eq!(cert.passes, 2);
    assert_eq!(cert.verdicts[0].answer, Token::Var(1));
    assert_eq!(cert.verdicts[1].answer, Token::Var(2));

    let bad = srlab(&["theory", "check", "--formula", "(1∨", "--out", p(&out)]);
    assert_eq!(bad.status.code(), Some(1));
    assert_eq!(stderr_json(&bad)["error"]["kind"], "formula");
}

#[test]
fn theory_pac_bounds_and_rate() {
    let tmp = tempfile::tempdir().unwrap();
    let out = tmp.path().join("pac.json");
    ok(&["theory", "pac", "--trials", "10000", "--seed", "1", "--out", p(&out)]);
    let v: Value = read_json(&out).unwrap();
    assert_eq!(v["burn_in"], 102);
    assert_eq!(v["post_rounds"], 10);
    assert_eq!(v["mean_oracle_calls"], 112.0);
    let bound = 0.1 + 3.0 * (0.1f64 * 0.9 / 10_000.0).sqrt();
    assert!(v["failure_rate"].as_f64().unwrap() <= bound);

    let zero = tmp.path().join("zero.json");
    ok(&["theory", "pac", "--beta", "1", "--k", "0", "--trials", "500", "--out", p(&zero)]);
    let v: Value = read_json(&zero).unwrap();
    assert_eq!(v["failure_rate"], 0.0);

    let bad = srlab(&["theory", "pac", "--k", "9", "--out", p(&zero)]);
    assert_eq!(bad.status.code(), Some(1));
    assert_eq!(stderr_json(&bad)["error"]["kind"], "pac-config");
}

#[test]
fn beam_width_one_output_is_among_width_five_candidates() {
    let fx = Fixture::new(12);
    let b1 = fx.infer("beam", 1, "b1.jsonl", &["--seed", "11"]);
    let b5 = fx.infer("beam", 5, "b5.jsonl", &["--seed", "11"]);
    assert_eq!(b1.len(), 12);
    for (one, five) in b1.iter().zip(&b5) {
        assert_eq!(one.id, five.id);
        assert!(five.candidates.contains(&one.tokens), "query {}", one.id);
        assert_eq!((one.cost, five.cost), (1, 5));
    }
}

#[test]
fn audit_of_memory_policy_reports_zero_novelty() {
    let fx = Fixture::new(15);
    fx.infer("beam", 5, "preds.jsonl", &[]);
    let report = fx.path("report.json");
    ok(&[
        "audit",
        "--predictions",
        p(&fx.path("preds.jsonl")),
        "--tests",
        &fx.tests(),
        "--corpus",
        p(&fx.path("data/corpus.jsonl")),
        "--out",
        p(&report),
    ]);
    let r: AuditReport = read_json(&report).unwrap();
    assert_eq!(r.count, 15);
    assert_eq!(r.novelty_percent, 0.0);
    assert_eq!(r.thresholds.len(), 7);
    let csv = fs::read_to_string(fx.path("report.csv")).unwrap();
    let mut lines = csv.lines();
    assert_eq!(lines.next(), Some("id,novel_structure,novel_with_constants,warning,r2"));
    assert_eq!(lines.count(), 15);
}

#[test]
fn smoothed_dataset_aware_policy_can_be_novel() {
    let fx = Fixture::new(20);
    let policy = fx.path("smooth.json");
    ok(&[
        "train",
        "--corpus",
        p(&fx.path("data/corpus.jsonl")),
        "--alpha",
        "0.05",
        "--dataset-aware",
        "--out",
        p(&policy),
    ]);
    let out = fx.path("smooth.jsonl");
    ok(&["infer", "--tests", &fx.tests(), "--policy", p(&policy), "--b", "5", "--out", p(&out)]);
    let report = fx.path("smooth_report.json");
    ok(&[
        "audit",
        "--predictions",
        p(&out),
        "--tests",
        &fx.tests(),
        "--corpus",
        p(&fx.path("data/corpus.jsonl")),
        "--out",
        p(&report),
    ]);
    let r: AuditReport = read_json(&report).unwrap();
    let corpus: Vec<Value> = read_jsonl(&fx.path("data/corpus.jsonl")).unwrap();
    let templates: Vec<Vec<Token>> =
        corpus.iter().map(|v| serde_json::from_value(v["prefix"].clone()).unwrap()).collect();
    for row in r.rows.iter().filter(|row| !row.tokens.contains(&Token::Const)) {
        assert_eq!(row.novel_structure, !templates.contains(&row.tokens), "row {}", row.id);
    }
}

#[test]
fn cost_fields_follow_the_accounting() {
    let fx = Fixture::new(4);
    for r in fx.infer("gvs", 3, "gvs.jsonl", &["--iterations", "4"]) {
        assert_eq!(r.cost, 12);
        assert_eq!(r.strategy, "gvs");
    }
    for r in fx.infer("mcts", 2, "mcts.jsonl", &["--rollouts", "2"]) {
        assert!(r.cost > 0 && r.cost % 2 == 0, "{}", r.cost);
        assert_eq!(r.strategy, "mcts");
    }
    for r in fx.infer("gvs+mcts", 1, "gm.jsonl", &["--iterations", "2", "--rollouts", "1"]) {
        assert_eq!(r.strategy, "gvs+mcts");
        assert!(r.cost >= 2);
    }
}

#[test]
fn gvs_replay_logs() {
    let fx = Fixture::new(3);
    let replay = fx.path("replay");
    let recs = fx.infer("gvs", 2, "gvs.jsonl", &["--iterations", "6", "--splice-prob", "0.5", "--replay-dir", p(&replay)]);
    for r in &recs {
        let log: Vec<ReplayLine> = read_jsonl(&replay.join(format!("{:04}.jsonl", r.id))).unwrap();
        assert_eq!(log.iter().map(|l| l.t).collect::<Vec<_>>(), (1..=6).collect::<Vec<_>>());
        assert!(log[0].prompt.is_empty());
        let best = log.iter().filter_map(|l| l.r2).fold(f64::NEG_INFINITY, f64::max);
        assert_eq!(r.r2, Some(best));
    }
}

#[test]
fn reruns_are_byte_identical() {
    let fx = Fixture::new(6);
    let files = ["data/corpus.jsonl", "data/tests.jsonl", "data/gen_config.json", "data/data/0003.eval.csv"];
    let before: Vec<Vec<u8>> = files.iter().map(|f| fs::read(fx.path(f)).unwrap()).collect();
    let again = fx.path("again");
    ok(&["gen", "--vocab", "simplified", "--n-vars", "2", "--corpus-size", "300", "--tests", "6", "--seed", "5", "--out", p(&again)]);
    for (f, b) in files.iter().zip(&before) {
        let rel = f.strip_prefix("data/").unwrap();
        assert_eq!(&fs::read(again.join(rel)).unwrap(), b, "{f}");
    }

    let args = ["--iterations", "3", "--seed", "4"];
    fx.infer("gvs", 2, "run.jsonl", &args);
    let first = fs::read(fx.path("run.jsonl")).unwrap();
    let manifest = fs::read(fx.path("run.jsonl.manifest.json")).unwrap();
    fx.infer("gvs", 2, "run.jsonl", &[args.as_slice(), &["--threads", "1"]].concat());
    assert_eq!(fs::read(fx.path("run.jsonl")).unwrap(), first);
    // Only the recorded argv differs.
    let m1: Manifest = serde_json::from_slice(&manifest).unwrap();
    let m2: Manifest = read_json(&fx.path("run.jsonl.manifest.json")).unwrap();
    assert_eq!(m1.config_hash, m2.config_hash);
    fx.infer("gvs", 2, "run.jsonl", &args);
    assert_eq!(fs::read(fx.path("run.jsonl.manifest.json")).unwrap(), manifest);
}

#[test]
fn csv_import_and_tradeoff_table() {
    let fx = Fixture::new(3);
    let csv = fx.path("points.csv");
    let mut s = String::from("x_1,x_2,y\n");
    for i in 0..20 {
        let (a, b) = (i as f64 * 0.1, 1.0 - i as f64 * 0.05);
        s.push_str(&format!("{a},{b},{}\n", a + b.sin()));
    }
    fs::write(&csv, s).unwrap();
    let out = fx.path("csv.jsonl");
    ok(&["infer", "--tests", p(&csv), "--policy", p(&fx.path("policy.json")), "--b", "3", "--out", p(&out)]);
    let recs: Vec<PredictionRecord> = read_jsonl(&out).unwrap();
    assert_eq!(recs.len(), 1);
    assert_eq!(recs[0].id, 0);

    let table = fx.path("tradeoff.csv");
    ok(&[
        "tradeoff",
        "--tests",
        &fx.tests(),
        "--policy",
        p(&fx.path("policy.json")),
        "--corpus",
        p(&fx.path("data/corpus.jsonl")),
        "--strategy",
        "beam",
        "--b",
        "1,5",
        "--out",
        p(&table),
    ]);
    let text = fs::read_to_string(&table).unwrap();
    let lines: Vec<&str> = text.lines().collect();
    assert_eq!(lines[0], "strategy,b,mean_cost,novelty_percent,accuracy_percent,failures");
    assert!(lines[1].starts_with("beam,1,1.0,0.0,"));
    assert!(lines[2].starts_with("beam,5,5.0,0.0,"));
    assert_eq!(lines.len(), 3);
}

#[test]
fn errors_are_structured() {
    let tmp = tempfile::tempdir().unwrap();
    let out = srlab(&["infer", "--tests", "missing.jsonl", "--policy", "missing.json", "--out", p(&tmp.path().join("x"))]);
    assert_eq!(out.status.code(), Some(1));
    assert_eq!(stderr_json(&out)["error"]["kind"], "invalid-argument");

    let out = srlab(&["frobnicate"]);
    assert_eq!(out.status.code(), Some(2));
    assert_eq!(stderr_json(&out)["error"]["kind"], "usage");

    let bad = tmp.path().join("bad.csv");
    fs::write(&bad, "x_1,y\n1,2\n3\n").unwrap();
    let policy = tmp.path().join("policy.json");
    fs::write(&policy, json!({"kind": "memory", "alpha": 0.0, "vocabulary": Vocabulary::simplified(1), "templates": [["x_1"]]}).to_string()).unwrap();
    let out = srlab(&["infer", "--tests", p(&bad), "--policy", p(&policy), "--out", p(&tmp.path().join("y"))]);
    let e = stderr_json(&out);
    assert_eq!(e["error"]["kind"], "parse");
    assert!(e["error"]["message"].as_str().unwrap().contains(":3:"));
}

/// Serves uniform legal distributions; closes each connection after
/// `limit` replies when given.
fn uniform_server(limit: Option<usize>) -> String {
    let listener = TcpListener::bind("127.0.0.1:0").unwrap();
    let addr = listener.local_addr().unwrap().to_string();
    thread::spawn(move || {
        let vocab = Vocabulary::simplified(2);
        for stream in listener.incoming() {
            let stream = stream.unwrap();
            let vocab = vocab.clone();
            thread::spawn(move || {
                let mut out = stream.try_clone().unwrap();
                for (n, line) in BufReader::new(stream).lines().enumerate() {
                    if limit.is_some_and(|l| n >= l) {
                        return;
                    }
                    let req: Value = serde_json::from_str(&line.unwrap()).unwrap();
                    let reply = if req["op"] == "next" {
                        let prefix: Vec<Token> = serde_json::from_value(req["prefix"].clone()).unwrap();
                        let legal = legal_tokens(&vocab, &prefix).unwrap();
                        let probs: BTreeMap<String, f64> =
                            legal.iter().map(|t| (t.to_string(), 1.0 / legal.len() as f64)).collect();
                        json!({ "probs": probs })
                    } else {
                        json!({"ok": true})
                    };
                    let _ = writeln!(out, "{reply}");
                }
            });
        }
    });
    addr
}

#[test]
fn external_endpoint_from_environment() {
    let fx = Fixture::new(3);
    let addr = uniform_server(None);
    let out = fx.path("ext.jsonl");
    let cmd = Command::new(env!("CARGO_BIN_EXE_srlab"))
        .args(["infer", "--tests", &fx.tests(), "--b", "2", "--max-len", "9", "--out", p(&out)])
        .env("SRLAB_POLICY_ENDPOINT", format!("tcp://{addr}"))
        .output()
        .unwrap();
    assert!(cmd.status.success(), "{}", String::from_utf8_lossy(&cmd.stderr));
    let recs: Vec<PredictionRecord> = read_jsonl(&out).unwrap();
    assert_eq!(recs.len(), 3);
    assert!(recs.iter().all(|r| r.cost == 2));
}

#[test]
fn dropped_endpoint_marks_the_run_partial() {
    let fx = Fixture::new(3);
    let addr = uniform_server(Some(1));
    let out = fx.path("ext.jsonl");
    let cmd = Command::new(env!("CARGO_BIN_EXE_srlab"))
        .args(["infer", "--tests", &fx.tests(), "--endpoint", &addr, "--b", "2", "--out", p(&out), "--threads", "1"])
        .output()
        .unwrap();
    assert_eq!(cmd.status.code(), Some(1));
    assert_eq!(stderr_json(&cmd)["error"]["kind"], "incomplete");
    let recs: Vec<PredictionRecord> = read_jsonl(&out).unwrap();
    assert!(recs.iter().all(|r| r.error.as_deref() == Some("policy call timed out")), "{recs:?}");
    let m: Value = read_json(&fx.path("ext.jsonl.manifest.json")).unwrap();
    assert_eq!(m["status"], "partial");
    assert_eq!(m["errors"].as_array().unwrap().len(), 3);
}
