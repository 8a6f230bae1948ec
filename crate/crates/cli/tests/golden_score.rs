mod common;

use std::collections::BTreeMap;
use std::path::Path;

use common::*;

const EXPECTED: [&str; 2] = ["score-latest.csv", "score-latest.jsonl"];

fn expected_dir() -> std::path::PathBuf {
    fixtures().join("golden/expected")
}

fn run_score(out: &Path) {
    let o = crscore(&golden_config(), out, &[], "score");
    assert!(o.status.success(), "{}", stderr(&o));
}

/// Set CRSCORE_BLESS=1 to rewrite the committed outputs.
#[test]
fn score_matches_committed_golden() {
    let out = tempfile::tempdir().unwrap();
    run_score(out.path());
    if std::env::var("CRSCORE_BLESS").is_ok_and(|v| v == "1") {
        std::fs::create_dir_all(expected_dir()).unwrap();
        for f in EXPECTED {
            std::fs::copy(out.path().join(f), expected_dir().join(f)).unwrap();
        }
    }
    for f in EXPECTED {
        let got = std::fs::read(out.path().join(f)).unwrap();
        let want = std::fs::read(expected_dir().join(f)).unwrap();
        assert!(got == want, "{f} differs from the golden copy");
    }
}

#[test]
fn golden_agrees_with_oracle() {
    let dir = fixtures().join("golden");
    let mut prefs: BTreeMap<String, Vec<String>> = BTreeMap::new();
    for p in read_jsonl(&dir.join("pseudorefs.jsonl")) {
        prefs
            .entry(p["change_id"].as_str().unwrap().into())
            .or_default()
            .push(p["text"].as_str().unwrap().into());
    }
    let reviews = read_jsonl(&dir.join("reviews.jsonl"));
    let golden = read_jsonl(&expected_dir().join("score-latest.jsonl"));
    assert_eq!(golden.len(), reviews.len());
    for g in &golden {
        let (c, s) = (g["change_id"].as_str().unwrap(), g["system_id"].as_str().unwrap());
        let review = reviews
            .iter()
            .find(|r| r["change_id"] == c && r["system_id"] == s)
            .unwrap();
        let want = oracle_score(0, prefs.get(c).map(Vec::as_slice).unwrap_or(&[]), review["text"].as_str().unwrap(), 0.7314);
        for (k, v) in [("con", want.con), ("comp", want.comp), ("rel", want.rel)] {
            assert!((g[k].as_f64().unwrap() - v).abs() < 1e-12, "{c}/{s} {k}: {} vs {v}", g[k]);
        }
        assert_eq!(g["n_prefs"], want.n_prefs);
        assert_eq!(g["n_sents"], want.n_sents);
        assert_eq!(g["tau"], 0.7314);
        assert_eq!(g["provider_tag"], "hashbag-v1-s0-d256");
        let flags: Vec<&str> = g["flags"].as_array().unwrap().iter().map(|f| f.as_str().unwrap()).collect();
        assert_eq!(flags, want.flags, "{c}/{s}");
    }
}

#[test]
fn degenerate_rows() {
    let golden = read_jsonl(&expected_dir().join("score-latest.jsonl"));
    let row = |c: &str, s: &str| golden.iter().find(|g| g["change_id"] == c && g["system_id"] == s).unwrap().clone();
    let empty_review = row("c1", "gamma");
    assert_eq!(empty_review["con"], 0.0);
    assert_eq!(empty_review["flags"], serde_json::json!(["empty_sents"]));
    let no_prefs = row("c3", "alpha");
    assert_eq!((no_prefs["comp"].as_f64(), no_prefs["rel"].as_f64()), (Some(0.0), Some(0.0)));
    assert_eq!(no_prefs["flags"], serde_json::json!(["empty_prefs"]));
    assert_eq!(row("c3", "beta")["flags"], serde_json::json!(["empty_prefs", "empty_sents"]));
}

#[test]
fn reruns_are_byte_identical() {
    let (a, b) = (tempfile::tempdir().unwrap(), tempfile::tempdir().unwrap());
    run_score(a.path());
    // a different worker count must not change anything
    let o = crscore(&golden_config(), b.path(), &["max_in_flight=1"], "score");
    assert!(o.status.success(), "{}", stderr(&o));
    for f in ["score-latest.csv", "score-latest.jsonl", "score-latest.md", "score-system-means-latest.csv"] {
        assert_eq!(
            std::fs::read(a.path().join(f)).unwrap(),
            std::fs::read(b.path().join(f)).unwrap(),
            "{f}"
        );
    }
}

#[test]
fn system_means_skip_reviews_without_prefs() {
    let out = tempfile::tempdir().unwrap();
    run_score(out.path());
    let csv = std::fs::read_to_string(out.path().join("score-system-means-latest.csv")).unwrap();
    let alpha = csv.lines().find(|l| l.starts_with("alpha,")).unwrap();
    // c3 has no pseudo-references, so alpha's mean is over c1 and c2 only
    assert!(alpha.starts_with("alpha,2,0.8333,0.8333,0.8333,0.7314,paper-best"), "{alpha}");
}

#[test]
fn other_thresholds_are_stamped() {
    let out = tempfile::tempdir().unwrap();
    let o = crscore(&golden_config(), out.path(), &["threshold=0.5"], "score");
    assert!(o.status.success(), "{}", stderr(&o));
    for r in read_jsonl(&out.path().join("score-latest.jsonl")) {
        assert_eq!(r["tau"], 0.5);
    }
    let o = crscore(&golden_config(), out.path(), &["threshold=calibrate"], "score");
    assert!(o.status.success(), "{}", stderr(&o));
    let md = std::fs::read_to_string(out.path().join("score-latest.md")).unwrap();
    assert!(md.contains("calibrated:hashbag-v1-s0-d256"), "{md}");
}
