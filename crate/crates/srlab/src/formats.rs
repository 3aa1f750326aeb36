//! On-disk artifacts: corpus and prediction JSON-lines, dataset CSV,
//! JSON reports. Every writer goes through [`write_atomic`].

use std::fs;
use std::io::{BufRead, BufReader, Write};
use std::path::{Path, PathBuf};

use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};

use srlab_core::audit::AuditReport;
use srlab_core::datagen::Corpus;
use srlab_core::decoding::Prediction;
use srlab_core::expr::{deserialize, Token};
use srlab_core::gvs::ReplayRecord;
use srlab_core::{Dataset, Interval};

use crate::error::{Error, Result};

/// Suffix of files whose writer has not finished.
pub const PARTIAL_SUFFIX: &str = ".partial";

pub fn partial_path(path: &Path) -> PathBuf {
    let mut s = path.as_os_str().to_owned();
    s.push(PARTIAL_SUFFIX);
    PathBuf::from(s)
}

/// Writes `<path>.partial`, then renames it over `path`. A failed write
/// leaves only the `.partial` file behind.
pub fn write_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    let tmp = partial_path(path);
    let mut f = fs::File::create(&tmp).map_err(|e| Error::io(&tmp, e))?;
    f.write_all(bytes).and_then(|_| f.sync_all()).map_err(|e| Error::io(&tmp, e))?;
    fs::rename(&tmp, path).map_err(|e| Error::io(path, e))
}

pub fn to_json_pretty<T: Serialize + ?Sized>(value: &T) -> Vec<u8> {
    let mut v = serde_json::to_vec_pretty(value).expect("artifact types serialize");
    v.push(b'\n');
    v
}

pub fn to_jsonl<T: Serialize>(rows: &[T]) -> Vec<u8> {
    let mut out = Vec::new();
    for r in rows {
        serde_json::to_writer(&mut out, r).expect("artifact types serialize");
        out.push(b'\n');
    }
    out
}

pub fn write_json<T: Serialize + ?Sized>(path: &Path, value: &T) -> Result<()> {
    write_atomic(path, &to_json_pretty(value))
}

pub fn write_jsonl<T: Serialize>(path: &Path, rows: &[T]) -> Result<()> {
    write_atomic(path, &to_jsonl(rows))
}

pub fn read_json<T: DeserializeOwned>(path: &Path) -> Result<T> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    serde_json::from_slice(&bytes).map_err(|e| Error::Parse { path: path.into(), line: e.line(), message: e.to_string() })
}

/// Blank lines are skipped.
pub fn read_jsonl<T: DeserializeOwned>(path: &Path) -> Result<Vec<T>> {
    let f = fs::File::open(path).map_err(|e| Error::io(path, e))?;
    let mut out = Vec::new();
    for (i, line) in BufReader::new(f).lines().enumerate() {
        let line = line.map_err(|e| Error::io(path, e))?;
        if line.trim().is_empty() {
            continue;
        }
        let v = serde_json::from_str(&line)
            .map_err(|e| Error::Parse { path: path.into(), line: i + 1, message: e.to_string() })?;
        out.push(v);
    }
    Ok(out)
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct CorpusRecord {
    pub id: usize,
    pub prefix: Vec<Token>,
}

pub fn corpus_records(corpus: &Corpus) -> Vec<CorpusRecord> {
    corpus.templates().iter().enumerate().map(|(id, e)| CorpusRecord { id, prefix: e.tokens() }).collect()
}

pub fn write_corpus(path: &Path, corpus: &Corpus) -> Result<()> {
    write_jsonl(path, &corpus_records(corpus))
}

pub fn read_corpus(path: &Path) -> Result<Corpus> {
    let mut corpus = Corpus::new();
    for (i, rec) in read_jsonl::<CorpusRecord>(path)?.into_iter().enumerate() {
        let e = deserialize(&rec.prefix)
            .map_err(|e| Error::Parse { path: path.into(), line: i + 1, message: e.to_string() })?;
        corpus.insert(&e)?;
    }
    Ok(corpus)
}

/// Header `x_1,...,x_d,y`; values in shortest round-trip form.
pub fn dataset_csv(data: &Dataset) -> Vec<u8> {
    let d = data.dims();
    let mut s = String::new();
    for j in 1..=d {
        s.push_str(&format!("x_{j},"));
    }
    s.push_str("y\n");
    for (x, y) in data.inputs.iter().zip(&data.targets) {
        for v in x {
            s.push_str(&format!("{v:?},"));
        }
        s.push_str(&format!("{y:?}\n"));
    }
    s.into_bytes()
}

pub fn write_dataset(path: &Path, data: &Dataset) -> Result<()> {
    write_atomic(path, &dataset_csv(data))
}

/// Reads `x_1,...,x_d,y`. The support is the bounding box of the inputs
/// unless `support` is given.
pub fn read_dataset(path: &Path, support: Option<Vec<Interval>>) -> Result<Dataset> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    parse_dataset_csv(&text, support).map_err(|(line, message)| Error::Parse { path: path.into(), line, message })
}

pub fn parse_dataset_csv(text: &str, support: Option<Vec<Interval>>) -> Result<Dataset, (usize, String)> {
    let mut lines = text.lines().enumerate().filter(|(_, l)| !l.trim().is_empty());
    let (_, header) = lines.next().ok_or((1, "empty file".to_string()))?;
    let cols: Vec<&str> = header.split(',').map(str::trim).collect();
    let d = cols.len().checked_sub(1).filter(|d| *d >= 1).ok_or((1, "need at least one x column".to_string()))?;
    for (j, c) in cols[..d].iter().enumerate() {
        if *c != format!("x_{}", j + 1) {
            return Err((1, format!("column {} should be x_{}, found {c:?}", j + 1, j + 1)));
        }
    }
    if cols[d] != "y" {
        return Err((1, format!("last column should be y, found {:?}", cols[d])));
    }
    let mut inputs = Vec::new();
    let mut targets = Vec::new();
    for (i, line) in lines {
        let vals: Vec<f64> = line
            .split(',')
            .map(|v| v.trim().parse::<f64>())
            .collect::<Result<_, _>>()
            .map_err(|e| (i + 1, e.to_string()))?;
        if vals.len() != d + 1 {
            return Err((i + 1, format!("expected {} values, found {}", d + 1, vals.len())));
        }
        targets.push(vals[d]);
        inputs.push(vals[..d].to_vec());
    }
    let data = match support {
        Some(s) => Dataset::new(inputs, targets, s),
        None => Dataset::from_points(inputs, targets),
    };
    data.map_err(|e| (0, e.to_string()))
}

/// One test-set entry; the data live in sibling CSV files.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TestRecord {
    pub id: usize,
    /// Ground-truth expression, constants as `C`.
    pub prefix: Vec<Token>,
    pub constants: Vec<f64>,
    pub template: Vec<Token>,
    pub support: Vec<[f64; 2]>,
    /// Paths relative to the record file.
    pub fit: String,
    pub eval: String,
}

impl TestRecord {
    pub fn support_intervals(&self) -> Vec<Interval> {
        self.support.iter().map(|[lo, hi]| Interval::new(*lo, *hi)).collect()
    }
}

/// A test query with its data loaded.
#[derive(Clone, Debug)]
pub struct Query {
    pub id: usize,
    pub fit: Dataset,
    pub eval: Dataset,
}

pub fn read_queries(path: &Path) -> Result<Vec<Query>> {
    let base = path.parent().unwrap_or(Path::new("."));
    read_jsonl::<TestRecord>(path)?
        .into_iter()
        .map(|r| {
            let s = r.support_intervals();
            Ok(Query {
                id: r.id,
                fit: read_dataset(&base.join(&r.fit), Some(s.clone()))?,
                eval: read_dataset(&base.join(&r.eval), Some(s))?,
            })
        })
        .collect()
}

/// One line of an `infer` output file.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PredictionRecord {
    pub id: usize,
    pub tokens: Vec<Token>,
    pub constants: Vec<f64>,
    /// R² on the fitting data; `null` when not finite.
    pub r2: Option<f64>,
    pub strategy: String,
    /// Candidate expressions generated.
    pub cost: usize,
    #[serde(default)]
    pub candidates: Vec<Vec<Token>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub error: Option<String>,
}

impl PredictionRecord {
    pub fn from_prediction(id: usize, p: &Prediction) -> Self {
        PredictionRecord {
            id,
            tokens: p.tokens.clone(),
            constants: p.constants.clone(),
            r2: p.r2_fit.is_finite().then_some(p.r2_fit),
            strategy: p.strategy.to_string(),
            cost: p.candidates_generated,
            candidates: p.candidate_set.clone(),
            error: None,
        }
    }

    pub fn failed(id: usize, strategy: &str, cost: usize, tokens: Vec<Token>, error: String) -> Self {
        PredictionRecord {
            id,
            tokens,
            constants: Vec::new(),
            r2: None,
            strategy: strategy.into(),
            cost,
            candidates: Vec::new(),
            error: Some(error),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ReplayLine {
    pub t: usize,
    pub prompt: Vec<Token>,
    pub tokens: Vec<Token>,
    pub r2: Option<f64>,
}

impl From<&ReplayRecord> for ReplayLine {
    fn from(r: &ReplayRecord) -> Self {
        ReplayLine { t: r.t, prompt: r.prompt.clone(), tokens: r.tokens.clone(), r2: r.r2.is_finite().then_some(r.r2) }
    }
}

impl From<&ReplayLine> for ReplayRecord {
    fn from(r: &ReplayLine) -> Self {
        ReplayRecord { t: r.t, prompt: r.prompt.clone(), tokens: r.tokens.clone(), r2: r.r2.unwrap_or(f64::NEG_INFINITY) }
    }
}

/// Per-row CSV for novelty-versus-accuracy scatter plots.
pub fn scatter_csv(report: &AuditReport) -> Vec<u8> {
    let mut s = String::from("id,novel_structure,novel_with_constants,warning,r2\n");
    for r in &report.rows {
        let r2 = r.r2.map(|v| format!("{v:?}")).unwrap_or_default();
        s.push_str(&format!("{},{},{},{},{}\n", r.id, r.novel_structure, r.novel_with_constants, r.warning, r2));
    }
    s.into_bytes()
}
