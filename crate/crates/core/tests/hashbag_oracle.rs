use std::sync::Arc;

use crscore::embed::{DeterministicProvider, Embedder};
use crscore::metric::{score, similarity_matrix, ThresholdConfig};
use crscore::pseudoref::{PseudoRef, RefKind, RefSource};
use crscore::textproc::{SentenceSet, StopwordLexicon};
use proptest::prelude::*;
use sha2::{Digest, Sha256};

// Written from the construction alone: sha256 over a domain tag, seed, block
// index and token; each 8-byte chunk becomes a 53-bit uniform in [-1, 1).
fn oracle_direction(seed: u64, token: &str, dim: usize) -> Vec<f64> {
    let mut v = Vec::new();
    for block in 0..(dim / 4) as u32 {
        let mut input = b"crscore-hashbag\0".to_vec();
        input.extend(seed.to_le_bytes());
        input.extend(block.to_le_bytes());
        input.extend(token.as_bytes());
        let d = Sha256::digest(&input);
        for i in 0..4 {
            let mut b = [0u8; 8];
            b.copy_from_slice(&d[8 * i..8 * i + 8]);
            let u = u64::from_le_bytes(b) >> 11;
            v.push(u as f64 / 9007199254740992.0 * 2.0 - 1.0);
        }
    }
    let n = v.iter().map(|x| x * x).sum::<f64>().sqrt();
    v.into_iter().map(|x| x / n).collect()
}

fn oracle_embed(seed: u64, text: &str) -> Vec<f64> {
    let mut toks: Vec<String> = text.split_whitespace().map(str::to_lowercase).collect();
    toks.sort();
    let mut s = vec![0.0; 256];
    for t in toks {
        for (a, b) in s.iter_mut().zip(oracle_direction(seed, &t, 256)) {
            *a += b;
        }
    }
    s
}

fn oracle_cos(a: &[f64], b: &[f64]) -> f64 {
    let dot: f64 = a.iter().zip(b).map(|(x, y)| x * y).sum();
    let na = a.iter().map(|x| x * x).sum::<f64>().sqrt();
    let nb = b.iter().map(|x| x * x).sum::<f64>().sqrt();
    dot / (na * nb)
}

#[test]
fn golden_token_directions() {
    // computed separately with Python's hashlib and struct
    let p = DeterministicProvider::new(0);
    let hello = [0.06572193170609647, 0.0030601967459408523, -0.012565979336305879, 0.021249912598637302];
    let review = [-0.006970985736573942, 0.05081208434224877, -0.05369735804342493, -0.10028100613269365];
    for (tok, want) in [("hello", hello), ("review", review)] {
        let got = p.token_direction(tok);
        assert_eq!(got.len(), 256);
        for (g, w) in got.iter().zip(want) {
            assert!((g - w).abs() < 1e-15, "{tok}: {g} vs {w}");
        }
        assert_eq!(got, oracle_direction(0, tok, 256));
    }
}

#[test]
fn golden_text_similarities() {
    let p = DeterministicProvider::new(7);
    let c = |a: &str, b: &str| oracle_cos(&p.embed_text(a), &p.embed_text(b));
    assert!((c("null check missing", "missing null pointer check") - 0.869248970641139).abs() < 1e-9);
    assert!((c("rename variable", "missing null pointer check") - 0.07113836702425239).abs() < 1e-9);
    assert_eq!(p.embed_text("Check NULL"), p.embed_text("null check"));
}

const VOCAB: &[&str] = &[
    "null", "check", "missing", "rename", "variable", "cache", "parser", "pointer", "loop", "index", "test", "error",
    "handling", "buffer", "overflow",
];

fn phrase() -> impl Strategy<Value = Vec<&'static str>> {
    proptest::collection::vec(prop::sample::select(VOCAB), 1..5)
}

fn pref(i: usize, words: &[&str]) -> PseudoRef {
    PseudoRef {
        id: format!("c#{i}"),
        change_id: "c".into(),
        kind: RefKind::Claim,
        text: words.join(" "),
        source: RefSource::Llm("test".into()),
        verdict: None,
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn pipeline_matches_brute_force(
        prefs in proptest::collection::vec(phrase(), 0..5),
        sents in proptest::collection::vec(phrase(), 0..5),
        seed in 0u64..4,
        tau in prop::sample::select(vec![0.3, 0.5, 0.7314]),
    ) {
        let lex = StopwordLexicon::english();
        let embedder = Embedder::new(Arc::new(DeterministicProvider::new(seed)), 3, true).unwrap();
        let prefs: Vec<PseudoRef> = prefs.iter().enumerate().map(|(i, w)| pref(i, w)).collect();
        let review: String = sents.iter().map(|w| format!("{}. ", w.join(" "))).collect();
        let set = SentenceSet::build("r", &review, lex);
        prop_assert_eq!(set.len(), sents.len());

        let m = similarity_matrix("c", "s", &prefs, &set, &embedder, lex).unwrap();
        prop_assert_eq!(m.n_prefs(), prefs.len());
        prop_assert_eq!(m.n_sents(), sents.len());
        for (i, p) in prefs.iter().enumerate() {
            for (j, s) in sents.iter().enumerate() {
                let want = oracle_cos(&oracle_embed(seed, &p.text), &oracle_embed(seed, &s.join(" ")));
                prop_assert!((m.values[i][j] - want).abs() < 1e-9, "{} vs {}", m.values[i][j], want);
            }
        }

        // brute force over the matrix
        let th = ThresholdConfig::fixed(tau).unwrap();
        let s = score(&m, &th);
        let covered_sents = (0..m.n_sents()).filter(|&j| (0..m.n_prefs()).any(|i| m.values[i][j] > tau)).count();
        let covered_prefs = (0..m.n_prefs()).filter(|&i| (0..m.n_sents()).any(|j| m.values[i][j] > tau)).count();
        let con = if m.n_sents() == 0 { 0.0 } else { covered_sents as f64 / m.n_sents() as f64 };
        let comp = if m.n_prefs() == 0 { 0.0 } else { covered_prefs as f64 / m.n_prefs() as f64 };
        let rel = if con + comp == 0.0 { 0.0 } else { 2.0 * con * comp / (con + comp) };
        prop_assert_eq!((s.con, s.comp, s.rel), (con, comp, rel));
    }
}
