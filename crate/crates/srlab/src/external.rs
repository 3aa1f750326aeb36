//! Policy adapter for an external model speaking newline-delimited JSON.
//!
//! Requests:
//! `{"op":"register","dataset_id":..,"inputs":[[..]],"targets":[..]}` once
//! per dataset, then `{"op":"next","dataset_id":..,"prefix":[..],"prompt":[..]}`.
//! Responses: `{"probs":{token: p}}` or `{"error": msg}`.

use std::collections::{BTreeMap, BTreeSet};
use std::io::{BufRead, BufReader, Read, Write};
use std::net::TcpStream;
use std::process::{Child, Command, Stdio};
use std::sync::mpsc::{self, Receiver, RecvTimeoutError};
use std::sync::Mutex;
use std::thread;
use std::time::Duration;

use serde::Serialize;
use serde_json::Value;

use srlab_core::expr::{Token, Vocabulary};
use srlab_core::policy::{legal_tokens, Policy, PolicyError, TokenDist};
use srlab_core::Dataset;

/// Environment variable naming the default endpoint.
pub const ENDPOINT_ENV: &str = "SRLAB_POLICY_ENDPOINT";
pub const DEFAULT_TIMEOUT: Duration = Duration::from_secs(30);
/// Responses whose mass is within this of 1 are renormalized.
pub const MASS_TOLERANCE: f64 = 1e-3;

#[derive(Serialize)]
#[serde(tag = "op", rename_all = "lowercase")]
enum Request<'a> {
    Register { dataset_id: &'a str, inputs: &'a [Vec<f64>], targets: &'a [f64] },
    Next { dataset_id: &'a str, prefix: &'a [Token], prompt: &'a [Token] },
}

struct Connection {
    writer: Box<dyn Write + Send>,
    lines: Receiver<String>,
    child: Option<Child>,
    registered: BTreeSet<String>,
    /// Set after a timeout; a late reply would desynchronize the stream.
    broken: bool,
}

impl Drop for Connection {
    fn drop(&mut self) {
        if let Some(c) = &mut self.child {
            let _ = c.kill();
            let _ = c.wait();
        }
    }
}

/// Calls are serialized over one connection. A closed or silent peer
/// surfaces as [`PolicyError::Timeout`].
pub struct ExternalPolicy {
    vocab: Vocabulary,
    timeout: Duration,
    conn: Mutex<Connection>,
}

impl ExternalPolicy {
    /// Wraps an established byte stream.
    pub fn from_streams<R, W>(reader: R, writer: W, vocab: Vocabulary) -> Self
    where
        R: Read + Send + 'static,
        W: Write + Send + 'static,
    {
        Self::build(reader, Box::new(writer), None, vocab)
    }

    fn build<R: Read + Send + 'static>(
        reader: R,
        writer: Box<dyn Write + Send>,
        child: Option<Child>,
        vocab: Vocabulary,
    ) -> Self {
        let (tx, rx) = mpsc::channel();
        thread::spawn(move || {
            for line in BufReader::new(reader).lines() {
                let Ok(line) = line else { break };
                if tx.send(line).is_err() {
                    break;
                }
            }
        });
        ExternalPolicy {
            vocab,
            timeout: DEFAULT_TIMEOUT,
            conn: Mutex::new(Connection { writer, lines: rx, child, registered: BTreeSet::new(), broken: false }),
        }
    }

    /// `tcp://host:port`, `host:port`, or `stdio:<command> [args..]`.
    pub fn connect(endpoint: &str, vocab: Vocabulary) -> Result<Self, PolicyError> {
        if let Some(cmd) = endpoint.strip_prefix("stdio:") {
            let mut parts = cmd.split_whitespace();
            let prog = parts.next().ok_or_else(|| PolicyError::ProtocolError("empty stdio command".into()))?;
            let mut child = Command::new(prog)
                .args(parts)
                .stdin(Stdio::piped())
                .stdout(Stdio::piped())
                .spawn()
                .map_err(|e| PolicyError::ProtocolError(format!("spawn {prog}: {e}")))?;
            let stdin = child.stdin.take().expect("piped stdin");
            let stdout = child.stdout.take().expect("piped stdout");
            return Ok(Self::build(stdout, Box::new(stdin), Some(child), vocab));
        }
        let addr = endpoint.strip_prefix("tcp://").unwrap_or(endpoint);
        let stream = TcpStream::connect(addr).map_err(|e| PolicyError::ProtocolError(format!("connect {addr}: {e}")))?;
        let _ = stream.set_nodelay(true);
        let reader = stream.try_clone().map_err(|e| PolicyError::ProtocolError(e.to_string()))?;
        Ok(Self::build(reader, Box::new(stream), None, vocab))
    }

    /// Uses the endpoint in `SRLAB_POLICY_ENDPOINT`, if set.
    pub fn from_env(vocab: Vocabulary) -> Option<Result<Self, PolicyError>> {
        std::env::var(ENDPOINT_ENV).ok().map(|e| Self::connect(&e, vocab))
    }

    pub fn with_timeout(mut self, timeout: Duration) -> Self {
        self.timeout = timeout;
        self
    }

    fn call(&self, conn: &mut Connection, req: &Request<'_>) -> Result<Value, PolicyError> {
        if conn.broken {
            return Err(PolicyError::Timeout);
        }
        let reply = self.exchange(conn, req);
        if reply == Err(PolicyError::Timeout) {
            conn.broken = true;
        }
        reply
    }

    fn exchange(&self, conn: &mut Connection, req: &Request<'_>) -> Result<Value, PolicyError> {
        let mut line = serde_json::to_vec(req).map_err(|e| PolicyError::ProtocolError(e.to_string()))?;
        line.push(b'\n');
        if conn.writer.write_all(&line).and_then(|_| conn.writer.flush()).is_err() {
            return Err(PolicyError::Timeout);
        }
        let reply = match conn.lines.recv_timeout(self.timeout) {
            Ok(l) => l,
            Err(RecvTimeoutError::Timeout | RecvTimeoutError::Disconnected) => return Err(PolicyError::Timeout),
        };
        let v: Value = serde_json::from_str(&reply).map_err(|e| PolicyError::ProtocolError(format!("bad reply: {e}")))?;
        if let Some(msg) = v.get("error") {
            return Err(PolicyError::ProtocolError(msg.as_str().map_or_else(|| msg.to_string(), String::from)));
        }
        Ok(v)
    }
}

/// Dataset ids are content fingerprints, so a dataset is registered once.
pub fn dataset_id(data: &Dataset) -> String {
    format!("{:016x}", data.fingerprint())
}

/// Validates a `probs` object against the legal set at `prefix`.
pub fn parse_probs(v: &Value, legal: &[Token]) -> Result<TokenDist, PolicyError> {
    let obj = v
        .get("probs")
        .and_then(Value::as_object)
        .ok_or_else(|| PolicyError::ProtocolError("reply has no probs object".into()))?;
    let mut weights = BTreeMap::new();
    for (k, p) in obj {
        let tok: Token = k.parse().map_err(|_| PolicyError::ProtocolError(format!("unknown token {k:?}")))?;
        let p = p.as_f64().ok_or_else(|| PolicyError::ProtocolError(format!("probability for {k} is not a number")))?;
        if !(p.is_finite() && p >= 0.0) {
            return Err(PolicyError::ProtocolError(format!("probability for {k} is {p}")));
        }
        if p > 0.0 && !legal.contains(&tok) {
            return Err(PolicyError::ProtocolError(format!("illegal token {k} has mass {p}")));
        }
        weights.insert(tok, p);
    }
    let mass: f64 = weights.values().sum();
    if (mass - 1.0).abs() > MASS_TOLERANCE {
        return Err(PolicyError::NonDistributionResponse { mass });
    }
    TokenDist::from_weights(weights.into_iter().collect())
}

impl Policy for ExternalPolicy {
    fn vocabulary(&self) -> &Vocabulary {
        &self.vocab
    }

    fn next_token_dist(&self, prefix: &[Token], data: &Dataset, prompt: &[Token]) -> Result<TokenDist, PolicyError> {
        let legal = legal_tokens(&self.vocab, prefix)?;
        let id = dataset_id(data);
        let mut conn = self.conn.lock().unwrap_or_else(|p| p.into_inner());
        if !conn.registered.contains(&id) {
            let req = Request::Register { dataset_id: &id, inputs: &data.inputs, targets: &data.targets };
            self.call(&mut conn, &req)?;
            conn.registered.insert(id.clone());
        }
        let v = self.call(&mut conn, &Request::Next { dataset_id: &id, prefix, prompt })?;
        parse_probs(&v, &legal)
    }
}
