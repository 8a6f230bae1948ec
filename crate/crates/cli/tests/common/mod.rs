#![allow(dead_code)]

use std::path::{Path, PathBuf};
use std::process::{Command, Output};
use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::Arc;

use serde_json::{json, Value};
use sha2::{Digest, Sha256};

pub fn fixtures() -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("tests/fixtures")
}

pub fn golden_config() -> PathBuf {
    fixtures().join("golden/config.toml")
}

/// Run the binary with `--config`, an output dir override and extra `--set`s.
pub fn crscore(config: &Path, out: &Path, sets: &[&str], command: &str) -> Output {
    let mut cmd = Command::new(env!("CARGO_BIN_EXE_crscore"));
    cmd.arg("--config").arg(config);
    cmd.arg("--set").arg(format!("output_dir={}", out.display()));
    for s in sets {
        cmd.arg("--set").arg(s);
    }
    cmd.arg(command);
    cmd.output().expect("binary runs")
}

pub fn stderr(o: &Output) -> String {
    String::from_utf8_lossy(&o.stderr).into_owned()
}

pub fn read_jsonl(path: &Path) -> Vec<Value> {
    std::fs::read_to_string(path)
        .unwrap_or_else(|e| panic!("{}: {e}", path.display()))
        .lines()
        .map(|l| serde_json::from_str(l).unwrap())
        .collect()
}

pub fn write_jsonl(path: &Path, rows: &[Value]) {
    let body: String = rows.iter().map(|r| format!("{r}\n")).collect();
    std::fs::write(path, body).unwrap();
}

// ------------------------------------------------------------------ oracle
//
// A second implementation of the deterministic embedding and the three
// scores, for texts made of plain words without stopwords.

fn direction(seed: u64, token: &str) -> Vec<f64> {
    let mut v = Vec::with_capacity(256);
    for block in 0u32..64 {
        let mut input = b"crscore-hashbag\0".to_vec();
        input.extend(seed.to_le_bytes());
        input.extend(block.to_le_bytes());
        input.extend(token.as_bytes());
        let d = Sha256::digest(&input);
        for i in 0..4 {
            let mut b = [0u8; 8];
            b.copy_from_slice(&d[8 * i..8 * i + 8]);
            v.push((u64::from_le_bytes(b) >> 11) as f64 / 9007199254740992.0 * 2.0 - 1.0);
        }
    }
    let n = v.iter().map(|x| x * x).sum::<f64>().sqrt();
    v.into_iter().map(|x| x / n).collect()
}

pub fn embed(seed: u64, text: &str) -> Vec<f64> {
    let mut s = vec![0.0; 256];
    for t in text.split_whitespace() {
        let t = t.trim_matches(|c: char| !c.is_alphanumeric()).to_lowercase();
        for (a, b) in s.iter_mut().zip(direction(seed, &t)) {
            *a += b;
        }
    }
    s
}

pub fn cos(a: &[f64], b: &[f64]) -> f64 {
    let dot: f64 = a.iter().zip(b).map(|(x, y)| x * y).sum();
    dot / (a.iter().map(|x| x * x).sum::<f64>().sqrt() * b.iter().map(|x| x * x).sum::<f64>().sqrt())
}

pub fn sentences(review: &str) -> Vec<String> {
    review
        .split('.')
        .map(str::trim)
        .filter(|s| !s.is_empty())
        .map(str::to_string)
        .collect()
}

#[derive(Debug, Clone, PartialEq)]
pub struct OracleScore {
    pub con: f64,
    pub comp: f64,
    pub rel: f64,
    pub n_prefs: usize,
    pub n_sents: usize,
    pub flags: Vec<&'static str>,
}

pub fn oracle_score(seed: u64, prefs: &[String], review: &str, tau: f64) -> OracleScore {
    let sents = sentences(review);
    let sim: Vec<Vec<f64>> = prefs
        .iter()
        .map(|p| sents.iter().map(|s| cos(&embed(seed, p), &embed(seed, s))).collect())
        .collect();
    let mut flags = Vec::new();
    if prefs.is_empty() {
        flags.push("empty_prefs");
    }
    if sents.is_empty() {
        flags.push("empty_sents");
    }
    let con = if sents.is_empty() {
        0.0
    } else {
        (0..sents.len()).filter(|&j| sim.iter().any(|row| row[j] > tau)).count() as f64 / sents.len() as f64
    };
    let comp = if prefs.is_empty() {
        0.0
    } else {
        sim.iter().filter(|row| row.iter().any(|&v| v > tau)).count() as f64 / prefs.len() as f64
    };
    let rel = if con + comp == 0.0 { 0.0 } else { 2.0 * con * comp / (con + comp) };
    OracleScore {
        con,
        comp,
        rel,
        n_prefs: prefs.len(),
        n_sents: sents.len(),
        flags,
    }
}

// ---------------------------------------------------------------- mock LLM

pub struct MockLlm {
    pub endpoint: String,
    pub hits: Arc<AtomicUsize>,
    _server: mockito::ServerGuard,
}

fn user_prompt(req: &mockito::Request) -> String {
    let v: Value = serde_json::from_slice(req.body().map(Vec::as_slice).unwrap_or_default()).unwrap_or(Value::Null);
    v["messages"]
        .as_array()
        .and_then(|m| m.iter().rev().find(|m| m["role"] == "user"))
        .and_then(|m| m["content"].as_str())
        .unwrap_or_default()
        .to_string()
}

/// Chat-completions stand-in. `reply` maps the user prompt to either a
/// completion or an HTTP status to fail with.
pub fn mock_llm<F>(reply: F) -> MockLlm
where
    F: Fn(&str) -> Result<String, u16> + Send + Sync + 'static,
{
    let mut server = mockito::Server::new();
    let endpoint = format!("{}/v1/chat/completions", server.url());
    let hits = Arc::new(AtomicUsize::new(0));
    let reply = Arc::new(reply);

    // one mock per failure status plus one for successes
    for status in [500u16, 503] {
        let (r, h) = (reply.clone(), hits.clone());
        server
            .mock("POST", "/v1/chat/completions")
            .match_request(move |req| r(&user_prompt(req)) == Err(status))
            .with_status(status as usize)
            .with_body_from_request(move |_| {
                h.fetch_add(1, Ordering::SeqCst);
                b"{\"error\": \"mock failure\"}".to_vec()
            })
            .expect_at_least(0)
            .create();
    }
    let (r, h) = (reply.clone(), hits.clone());
    server
        .mock("POST", "/v1/chat/completions")
        .match_request({
            let r = reply.clone();
            move |req| r(&user_prompt(req)).is_ok()
        })
        .with_header("content-type", "application/json")
        .with_body_from_request(move |req| {
            h.fetch_add(1, Ordering::SeqCst);
            let text = r(&user_prompt(req)).unwrap_or_default();
            json!({"choices": [{"message": {"role": "assistant", "content": text}}]})
                .to_string()
                .into_bytes()
        })
        .expect_at_least(0)
        .create();
    MockLlm {
        endpoint,
        hits,
        _server: server,
    }
}
