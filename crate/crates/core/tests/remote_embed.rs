use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::{Arc, Mutex};
use std::thread::JoinHandle;
use std::time::Duration;

use crscore::embed::{
    cosine, CachedProvider, EmbeddingProvider, Embedder, ProviderConfig, ProviderKind, RemoteProvider,
};
use crscore::Error;
use serde_json::{json, Value};

const SCHEMA: &str = include_str!("../assets/embed_wire.schema.json");

fn validator(def: &str) -> jsonschema::Validator {
    let mut schema: Value = serde_json::from_str(SCHEMA).unwrap();
    let defs = schema["$defs"].clone();
    schema = json!({ "$defs": defs, "$ref": format!("#/$defs/{def}") });
    jsonschema::validator_for(&schema).unwrap()
}

type Handler = dyn Fn(&str, &Value) -> (u16, Value) + Send + Sync;

struct Mock {
    url: String,
    requests: Arc<Mutex<Vec<Value>>>,
    hits: Arc<AtomicUsize>,
    _thread: JoinHandle<()>,
}

fn mock(handler: Box<Handler>) -> Mock {
    let server = tiny_http::Server::http("127.0.0.1:0").unwrap();
    let url = format!("http://{}", server.server_addr().to_ip().unwrap());
    let requests = Arc::new(Mutex::new(Vec::new()));
    let hits = Arc::new(AtomicUsize::new(0));
    let (r, h) = (requests.clone(), hits.clone());
    let thread = std::thread::spawn(move || {
        for mut req in server.incoming_requests() {
            h.fetch_add(1, Ordering::SeqCst);
            let mut body = String::new();
            req.as_reader().read_to_string(&mut body).unwrap();
            let parsed: Value = serde_json::from_str(&body).unwrap_or(Value::Null);
            if !parsed.is_null() {
                r.lock().unwrap().push(parsed.clone());
            }
            let (status, reply) = handler(req.url(), &parsed);
            let resp = tiny_http::Response::from_string(reply.to_string())
                .with_status_code(status)
                .with_header("Content-Type: application/json".parse::<tiny_http::Header>().unwrap());
            let _ = req.respond(resp);
        }
    });
    Mock {
        url,
        requests,
        hits,
        _thread: thread,
    }
}

/// A toy sidecar: 3-dim vectors from text length and vowel counts.
fn toy(model: &'static str) -> Box<Handler> {
    Box::new(move |url, body| {
        if url == "/health" {
            return (200, json!({"status": "ok", "model": model, "dim": 3}));
        }
        let texts = body["texts"].as_array().cloned().unwrap_or_default();
        let embeddings: Vec<Value> = texts
            .iter()
            .map(|t| {
                let s = t.as_str().unwrap();
                let vowels = s.chars().filter(|c| "aeiou".contains(*c)).count() as f64;
                json!([s.len() as f64 + 1.0, vowels, 1.0])
            })
            .collect();
        (200, json!({"model": model, "dim": 3, "embeddings": embeddings}))
    })
}

fn remote(url: &str, model: &str, attempts: u32) -> RemoteProvider {
    RemoteProvider::new(url, model, attempts, Duration::from_secs(5)).unwrap()
}

fn texts(v: &[&str]) -> Vec<String> {
    v.iter().map(|s| s.to_string()).collect()
}

#[test]
fn embeds_in_order_and_speaks_the_schema() {
    let m = mock(toy("m1"));
    let p = remote(&m.url, "m1", 1);
    assert_eq!(p.tag(), "remote:m1");
    let h = p.health().unwrap();
    assert_eq!((h.status.as_str(), h.model.as_str(), h.dim), ("ok", "m1", Some(3)));

    let out = p.embed_batch(&texts(&["ab", "aeiou"])).unwrap();
    assert_eq!(out, vec![vec![3.0, 1.0, 1.0], vec![6.0, 5.0, 1.0]]);

    let req = validator("embed_request");
    for r in m.requests.lock().unwrap().iter() {
        assert!(req.is_valid(r), "{r}");
    }
    let resp = toy("m1")("/embed", &json!({"texts": ["x", "yy"]})).1;
    assert!(validator("embed_response").is_valid(&resp));
    assert!(validator("health_response").is_valid(&toy("m1")("/health", &Value::Null).1));
    assert!(!validator("embed_response").is_valid(&json!({"model": "m1", "embeddings": []})));
}

#[test]
fn self_similarity_through_embedder() {
    let m = mock(toy("m1"));
    let cfg = ProviderConfig {
        kind: ProviderKind::Remote {
            url: m.url.clone(),
            model: "m1".into(),
        },
        batch_size: 2,
        ..ProviderConfig::default()
    };
    let e = Embedder::from_config(&cfg).unwrap();
    let v = e.embed(&texts(&["same text", "other", "same text"])).unwrap();
    assert!((cosine(&v[0], &v[2]).unwrap() - 1.0).abs() < 1e-6);
    assert!((v[1].norm() - 1.0).abs() < 1e-12);
    assert_eq!(v[0].provider_tag(), "remote:m1");
}

#[test]
fn model_mismatch_is_a_protocol_error() {
    let m = mock(toy("other-model"));
    let err = remote(&m.url, "m1", 3).embed_batch(&texts(&["a"])).unwrap_err();
    assert!(matches!(err, Error::Protocol(ref s) if s.contains("other-model")), "{err}");
    // not retried
    assert_eq!(m.hits.load(Ordering::SeqCst), 1);
}

#[test]
fn ragged_dimensions_are_rejected() {
    let m = mock(Box::new(|_, _| {
        (200, json!({"model": "m1", "dim": 3, "embeddings": [[1.0, 2.0]]}))
    }));
    let err = remote(&m.url, "m1", 1).embed_batch(&texts(&["a"])).unwrap_err();
    assert!(matches!(err, Error::Protocol(_)), "{err}");

    let m = mock(Box::new(|_, _| (200, json!({"model": "m1", "dim": 1, "embeddings": [[1.0]]}))));
    let err = remote(&m.url, "m1", 1).embed_batch(&texts(&["a", "b"])).unwrap_err();
    assert!(matches!(err, Error::Protocol(ref s) if s.contains("1 embeddings for 2 texts")), "{err}");
}

#[test]
fn transient_failures_are_retried() {
    let calls = Arc::new(AtomicUsize::new(0));
    let c = calls.clone();
    let inner = toy("m1");
    let m = mock(Box::new(move |url, body| {
        if c.fetch_add(1, Ordering::SeqCst) == 0 {
            (503, json!({"error": "warming up"}))
        } else {
            inner(url, body)
        }
    }));
    let out = remote(&m.url, "m1", 3).embed_batch(&texts(&["ab"])).unwrap();
    assert_eq!(out, vec![vec![3.0, 1.0, 1.0]]);
    assert_eq!(m.hits.load(Ordering::SeqCst), 2);
}

#[test]
fn persistent_failure_reports_attempts() {
    let m = mock(Box::new(|_, _| (500, json!({}))));
    let err = remote(&m.url, "m1", 2).embed_batch(&texts(&["a"])).unwrap_err();
    assert!(matches!(err, Error::Transport { attempts: 2, .. }), "{err}");
    assert_eq!(m.hits.load(Ordering::SeqCst), 2);
}

#[test]
fn unreachable_sidecar_is_external() {
    let err = remote("http://127.0.0.1:9", "m1", 1).embed_batch(&texts(&["a"])).unwrap_err();
    assert_eq!(err.class(), crscore::ErrorClass::External);
}

#[test]
fn disk_cache_spares_the_sidecar() {
    let m = mock(toy("m1"));
    let dir = tempfile::tempdir().unwrap();
    let first = CachedProvider::new(Box::new(remote(&m.url, "m1", 1)), Some(dir.path().to_path_buf()));
    let a = first.embed_batch(&texts(&["x", "y", "x"])).unwrap();
    assert_eq!(first.inner_calls(), 2);
    assert_eq!(m.hits.load(Ordering::SeqCst), 1);

    let second = CachedProvider::new(Box::new(remote(&m.url, "m1", 1)), Some(dir.path().to_path_buf()));
    let b = second.embed_batch(&texts(&["y", "x"])).unwrap();
    assert_eq!(second.inner_calls(), 0);
    assert_eq!(m.hits.load(Ordering::SeqCst), 1);
    assert_eq!(b, vec![a[1].clone(), a[0].clone()]);
}
