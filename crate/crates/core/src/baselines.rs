//! Reference-based comparison metrics (BLEU, ROUGE-L, chrF, chrF++,
//! normalized edit distance) and the LLM-as-a-judge relevance scorer.

use std::collections::HashMap;
use std::hash::Hash;

use serde::{Deserialize, Serialize};

use crate::corpus::CodeChange;
use crate::error::{Error, Result};
use crate::llm::{ChatMessage, LlmClient};
use crate::textproc::{tokenize, StopwordLexicon};

pub const LAAJ_SYSTEM_PROMPT: &str = "You are a highly skilled software engineer who has a lot of experience reviewing code changes. Your task is to rate the relevance of any given code change";

pub const LAAJ_TASK_PROMPT: &str = "TASK PROMPT: You will be asked to rate the relevance of reviews for given Python, Java, or Javascript code changes. A relevant review is one which is both concise and comprehensive. A concise review contains very little text not related to the code change. A comprehensive review contains all the information about a code change that should be covered by a review. A relevant review is comprehensive while being concise.\n\nNow look at the {lang} code change and review below and score the relevance of the review on a scale of 1 to 5\n\nCode Change: {code_change}\n\nReview: {review}\n\nYour score:";

const LAAJ_RETRY: &str = "Answer with a single integer from 1 to 5.";

/// Flag attached to a score computed on an empty input.
pub const FLAG_EMPTY_INPUT: &str = "empty_input";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BaselineScore {
    pub change_id: String,
    pub system_id: String,
    pub metric_id: String,
    pub value: f64,
    /// Unnormalized judge rating (1-5); only set for `laaj`.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub raw: Option<u8>,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub flags: Vec<String>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct BaselineOptions {
    /// Add-one smoothing of zero higher-order BLEU precisions.
    pub bleu_smoothing: bool,
    /// Edit distance over characters instead of tokens.
    pub char_edit_distance: bool,
}

impl Default for BaselineOptions {
    fn default() -> Self {
        BaselineOptions {
            bleu_smoothing: true,
            char_edit_distance: false,
        }
    }
}

/// Lowercased word tokens, shared by BLEU, ROUGE-L and edit distance.
pub fn metric_tokens(text: &str) -> Vec<String> {
    tokenize(text).into_iter().map(|t| t.text.to_lowercase()).collect()
}

fn ngram_counts<T: Eq + Hash + Clone>(items: &[T], n: usize) -> HashMap<&[T], usize> {
    let mut counts = HashMap::new();
    if n == 0 || items.len() < n {
        return counts;
    }
    for w in items.windows(n) {
        *counts.entry(w).or_insert(0) += 1;
    }
    counts
}

fn clipped_matches<T: Eq + Hash + Clone>(hyp: &HashMap<&[T], usize>, reference: &HashMap<&[T], usize>) -> usize {
    hyp.iter()
        .map(|(g, c)| (*c).min(reference.get(g).copied().unwrap_or(0)))
        .sum()
}

/// Sentence BLEU over n = 1..4 with brevity penalty. With `smoothing`, an
/// order n >= 2 with no matches uses (0 + 1) / (total + 1).
pub fn bleu_tokens(cand: &[String], reference: &[String], smoothing: bool) -> f64 {
    if cand.is_empty() || reference.is_empty() {
        return 0.0;
    }
    let mut log_sum = 0.0;
    for n in 1..=4 {
        let h = ngram_counts(cand, n);
        let r = ngram_counts(reference, n);
        let total: usize = h.values().sum();
        let matched = clipped_matches(&h, &r);
        let p = if matched > 0 {
            matched as f64 / total as f64
        } else if n >= 2 && smoothing {
            1.0 / (total as f64 + 1.0)
        } else {
            return 0.0;
        };
        log_sum += p.ln() / 4.0;
    }
    let (c, r) = (cand.len() as f64, reference.len() as f64);
    let bp = if c < r { (1.0 - r / c).exp() } else { 1.0 };
    (bp * log_sum.exp()).min(1.0)
}

pub fn bleu(candidate: &str, reference: &str, drop_stopwords: bool, smoothing: bool) -> f64 {
    let (mut c, mut r) = (metric_tokens(candidate), metric_tokens(reference));
    if drop_stopwords {
        let lex = StopwordLexicon::english();
        c.retain(|t| !lex.contains(t));
        r.retain(|t| !lex.contains(t));
    }
    bleu_tokens(&c, &r, smoothing)
}

pub fn lcs_len<T: PartialEq>(a: &[T], b: &[T]) -> usize {
    let mut prev = vec![0usize; b.len() + 1];
    let mut cur = vec![0usize; b.len() + 1];
    for x in a {
        for (j, y) in b.iter().enumerate() {
            cur[j + 1] = if x == y { prev[j] + 1 } else { cur[j].max(prev[j + 1]) };
        }
        std::mem::swap(&mut prev, &mut cur);
    }
    prev[b.len()]
}

/// ROUGE-L F1 on word tokens.
pub fn rouge_l_f(candidate: &str, reference: &str) -> f64 {
    let (c, r) = (metric_tokens(candidate), metric_tokens(reference));
    let l = lcs_len(&c, &r);
    if l == 0 {
        return 0.0;
    }
    let p = l as f64 / c.len() as f64;
    let rec = l as f64 / r.len() as f64;
    2.0 * p * rec / (p + rec)
}

const CHRF_BETA: f64 = 2.0;
const CHRF_CHAR_ORDER: usize = 6;
const CHRF_WORD_ORDER: usize = 2;

/// F-beta for one n-gram order, or `None` when either side has no n-grams
/// of that order.
fn order_f<T: Eq + Hash + Clone>(hyp: &[T], reference: &[T], n: usize) -> Option<f64> {
    let h = ngram_counts(hyp, n);
    let r = ngram_counts(reference, n);
    if h.is_empty() || r.is_empty() {
        return None;
    }
    let m = clipped_matches(&h, &r);
    if m == 0 {
        return Some(0.0);
    }
    let p = m as f64 / h.values().sum::<usize>() as f64;
    let rec = m as f64 / r.values().sum::<usize>() as f64;
    let b2 = CHRF_BETA * CHRF_BETA;
    Some((1.0 + b2) * p * rec / (b2 * p + rec))
}

fn chrf_orders(candidate: &str, reference: &str, word_order: usize) -> f64 {
    let hc: Vec<char> = candidate.chars().filter(|c| !c.is_whitespace()).collect();
    let rc: Vec<char> = reference.chars().filter(|c| !c.is_whitespace()).collect();
    let hw: Vec<&str> = candidate.split_whitespace().collect();
    let rw: Vec<&str> = reference.split_whitespace().collect();
    let scores: Vec<f64> = (1..=CHRF_CHAR_ORDER)
        .filter_map(|n| order_f(&hc, &rc, n))
        .chain((1..=word_order).filter_map(|n| order_f(&hw, &rw, n)))
        .collect();
    if scores.is_empty() {
        return 0.0;
    }
    scores.iter().sum::<f64>() / scores.len() as f64
}

/// Character n-gram F-score (n = 1..6, beta = 2, whitespace ignored),
/// averaged over the orders both texts are long enough to have.
pub fn chrf(candidate: &str, reference: &str) -> f64 {
    chrf_orders(candidate, reference, 0)
}

/// chrF with word unigrams and bigrams added to the same average.
pub fn chrf_pp(candidate: &str, reference: &str) -> f64 {
    chrf_orders(candidate, reference, CHRF_WORD_ORDER)
}

pub fn levenshtein<T: PartialEq>(a: &[T], b: &[T]) -> usize {
    let mut prev: Vec<usize> = (0..=b.len()).collect();
    let mut cur = vec![0usize; b.len() + 1];
    for (i, x) in a.iter().enumerate() {
        cur[0] = i + 1;
        for (j, y) in b.iter().enumerate() {
            let sub = prev[j] + usize::from(x != y);
            cur[j + 1] = sub.min(prev[j + 1] + 1).min(cur[j] + 1);
        }
        std::mem::swap(&mut prev, &mut cur);
    }
    prev[b.len()]
}

/// Levenshtein distance divided by the longer length; 0 is best.
pub fn norm_edit_distance(candidate: &str, reference: &str, char_level: bool) -> f64 {
    let (d, len) = if char_level {
        let a: Vec<char> = candidate.chars().collect();
        let b: Vec<char> = reference.chars().collect();
        (levenshtein(&a, &b), a.len().max(b.len()))
    } else {
        let a = metric_tokens(candidate);
        let b = metric_tokens(reference);
        (levenshtein(&a, &b), a.len().max(b.len()))
    };
    if len == 0 {
        0.0
    } else {
        d as f64 / len as f64
    }
}

/// All string-based baselines for one candidate/reference pair, in a fixed
/// order. Empty candidates or references are flagged.
pub fn reference_scores(
    change_id: &str,
    system_id: &str,
    candidate: &str,
    reference: &str,
    opts: &BaselineOptions,
) -> Vec<BaselineScore> {
    let empty = metric_tokens(candidate).is_empty() || metric_tokens(reference).is_empty();
    let flags = if empty { vec![FLAG_EMPTY_INPUT.to_string()] } else { Vec::new() };
    let values = [
        ("bleu", bleu(candidate, reference, false, opts.bleu_smoothing)),
        ("bleu_nostop", bleu(candidate, reference, true, opts.bleu_smoothing)),
        ("rouge_l", rouge_l_f(candidate, reference)),
        ("chrf", chrf(candidate, reference)),
        ("chrf_pp", chrf_pp(candidate, reference)),
        ("norm_edit_distance", norm_edit_distance(candidate, reference, opts.char_edit_distance)),
    ];
    values
        .into_iter()
        .map(|(m, v)| BaselineScore {
            change_id: change_id.to_string(),
            system_id: system_id.to_string(),
            metric_id: m.to_string(),
            value: v,
            raw: None,
            flags: flags.clone(),
        })
        .collect()
}

/// The two judge messages for one change/review pair.
pub fn laaj_messages(change: &CodeChange, review: &str) -> Vec<ChatMessage> {
    let task = LAAJ_TASK_PROMPT
        .replace("{lang}", change.language.display_name())
        .replace("{code_change}", &change.diff_text)
        .replace("{review}", review);
    vec![ChatMessage::system(LAAJ_SYSTEM_PROMPT), ChatMessage::user(task)]
}

/// First whole integer in `reply` that lies in 1..=5.
pub fn parse_first_score(reply: &str) -> Option<u8> {
    let mut digits = String::new();
    for c in reply.chars().chain(std::iter::once(' ')) {
        if c.is_ascii_digit() {
            digits.push(c);
            continue;
        }
        if !digits.is_empty() {
            if let Ok(v) = digits.parse::<u64>() {
                if (1..=5).contains(&v) {
                    return Some(v as u8);
                }
            }
            digits.clear();
        }
    }
    None
}

/// Ask the judge model for a 1-5 relevance rating; one corrective follow-up
/// is sent if the reply holds no usable score.
pub fn laaj_score(change: &CodeChange, review: &str, client: &LlmClient) -> Result<u8> {
    let messages = laaj_messages(change, review);
    let (reply, _) = client.complete(messages.clone())?;
    if let Some(v) = parse_first_score(&reply) {
        return Ok(v);
    }
    let mut retry = messages;
    retry.push(ChatMessage::assistant(reply));
    retry.push(ChatMessage::user(LAAJ_RETRY));
    let (reply, _) = client.complete(retry)?;
    parse_first_score(&reply).ok_or_else(|| Error::Protocol(format!("judge reply has no score in 1-5: {reply:?}")))
}

pub fn laaj_record(change: &CodeChange, system_id: &str, rating: u8) -> Result<BaselineScore> {
    Ok(BaselineScore {
        change_id: change.id.clone(),
        system_id: system_id.to_string(),
        metric_id: "laaj".into(),
        value: crate::evalstats::normalize_likert(rating)?,
        raw: Some(rating),
        flags: Vec::new(),
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::corpus::Language;
    use crate::llm::testing::{config, Scripted};
    use proptest::prelude::*;
    use std::sync::atomic::Ordering;

    #[test]
    fn bleu_examples() {
        assert_eq!(bleu("the cat sat on the mat", "the cat sat on the mat", false, true), 1.0);
        assert_eq!(bleu("a b", "c d", false, true), 0.0);
        assert_eq!(bleu("", "c d", false, true), 0.0);
        // every candidate n-gram matches; only the brevity penalty applies
        let v = bleu("a b c d", "a b c d e f", false, true);
        assert!((v - (1.0f64 - 6.0 / 4.0).exp()).abs() < 1e-12);
        // short identical texts have no 4-grams; smoothing keeps them perfect
        assert_eq!(bleu("fix it", "fix it", false, true), 1.0);
        assert_eq!(bleu("fix it", "fix it", false, false), 0.0);
    }

    #[test]
    fn bleu_stopword_consistency() {
        let (c, r) = ("rename variable counter", "rename counter variable");
        assert_eq!(bleu(c, r, false, true), bleu(c, r, true, true));
        assert!(bleu("the fix is in the loop", "fix loop", true, true) > bleu("the fix is in the loop", "fix loop", false, true));
    }

    #[test]
    fn rouge_examples() {
        assert_eq!(rouge_l_f("a c", "a b c"), 0.8);
        assert_eq!(rouge_l_f("x y", "x y"), 1.0);
        assert_eq!(rouge_l_f("x", "y"), 0.0);
        assert_eq!(rouge_l_f("", "y"), 0.0);
    }

    #[test]
    fn chrf_examples() {
        assert_eq!(chrf("ab", "ab"), 1.0);
        assert_eq!(chrf("hello world", "hello world"), 1.0);
        assert_eq!(chrf_pp("hello world", "hello world"), 1.0);
        assert_eq!(chrf("", "abc"), 0.0);
        assert_eq!(chrf("abc", "xyz"), 0.0);
        // "abcd" vs "abce": orders 1..3 have 3/4, 2/3, 1/2 matched on both
        // sides (P = R so F = P); order 4 has none.
        let expected = (0.75 + 2.0 / 3.0 + 0.5 + 0.0) / 4.0;
        assert!((chrf("abcd", "abce") - expected).abs() < 1e-12);
        // word orders: unigram "abcd"/"abce" differ, bigrams absent
        assert!((chrf_pp("abcd", "abce") - (expected * 4.0) / 5.0).abs() < 1e-12);
    }

    #[test]
    fn edit_distance_examples() {
        let a: Vec<char> = "kitten".chars().collect();
        let b: Vec<char> = "sitting".chars().collect();
        assert_eq!(levenshtein(&a, &b), 3);
        assert_eq!(norm_edit_distance("kitten", "sitting", true), 3.0 / 7.0);
        assert_eq!(norm_edit_distance("same words", "same words", false), 0.0);
        assert_eq!(norm_edit_distance("", "a b c", false), 1.0);
        assert_eq!(norm_edit_distance("", "", false), 0.0);
        assert_eq!(norm_edit_distance("a b c", "a x c", false), 1.0 / 3.0);
    }

    #[test]
    fn reference_scores_flags_empty() {
        let s = reference_scores("c", "s", "", "fix", &BaselineOptions::default());
        assert_eq!(s.len(), 6);
        assert!(s.iter().all(|b| b.flags == vec![FLAG_EMPTY_INPUT.to_string()]));
        let s = reference_scores("c", "s", "fix", "fix", &BaselineOptions::default());
        assert!(s.iter().all(|b| b.flags.is_empty()));
    }

    #[test]
    fn score_parser() {
        assert_eq!(parse_first_score("Your score: 4"), Some(4));
        assert_eq!(parse_first_score("I'd say 3 out of 5"), Some(3));
        assert_eq!(parse_first_score("10 points, so 2"), Some(2));
        assert_eq!(parse_first_score("0 or 6"), None);
        assert_eq!(parse_first_score("excellent"), None);
        assert_eq!(parse_first_score("5"), Some(5));
    }

    fn change() -> CodeChange {
        CodeChange::new("c9", Language::Python, "@@ -1 +1 @@\n-x = 1\n+x = 2\n").unwrap()
    }

    #[test]
    fn prompt_is_assembled_verbatim() {
        let m = laaj_messages(&change(), "Changes x.");
        assert_eq!(m.len(), 2);
        assert_eq!(m[0], ChatMessage::system(LAAJ_SYSTEM_PROMPT));
        let user = &m[1].content;
        assert!(user.starts_with("TASK PROMPT: You will be asked"));
        assert!(user.contains("Now look at the Python code change and review below"));
        assert!(user.ends_with("Code Change: @@ -1 +1 @@\n-x = 1\n+x = 2\n\n\nReview: Changes x.\n\nYour score:"));
    }

    #[test]
    fn judge_retries_once() {
        let (t, calls) = Scripted::new(vec![Ok("excellent"), Ok("excellent")]);
        let client = LlmClient::with_transport(config(None), Box::new(t));
        assert!(laaj_score(&change(), "r", &client).is_err());
        assert_eq!(calls.load(Ordering::SeqCst), 2);

        let (t, _) = Scripted::new(vec![Ok("hmm"), Ok("Your score: 4")]);
        let client = LlmClient::with_transport(config(None), Box::new(t));
        let v = laaj_score(&change(), "r", &client).unwrap();
        let rec = laaj_record(&change(), "sys", v).unwrap();
        assert_eq!((rec.raw, rec.value), (Some(4), 0.75));
    }

    fn words() -> impl Strategy<Value = String> {
        proptest::collection::vec(prop::sample::select(vec!["fix", "bug", "loop", "x", "null", "check", "add"]), 0..12)
            .prop_map(|w| w.join(" "))
    }

    proptest! {
        #[test]
        fn identity_is_perfect(s in words()) {
            prop_assume!(!s.is_empty());
            prop_assert_eq!(bleu(&s, &s, false, true), 1.0);
            prop_assert_eq!(rouge_l_f(&s, &s), 1.0);
            prop_assert_eq!(chrf(&s, &s), 1.0);
            prop_assert_eq!(chrf_pp(&s, &s), 1.0);
            prop_assert_eq!(norm_edit_distance(&s, &s, false), 0.0);
        }

        #[test]
        fn bounded(a in words(), b in words()) {
            for v in [
                bleu(&a, &b, false, true),
                bleu(&a, &b, true, true),
                rouge_l_f(&a, &b),
                chrf(&a, &b),
                chrf_pp(&a, &b),
                norm_edit_distance(&a, &b, false),
                norm_edit_distance(&a, &b, true),
            ] {
                prop_assert!((0.0..=1.0).contains(&v), "{}", v);
            }
        }

        #[test]
        fn disjoint_is_zero(n in 1usize..6, m in 1usize..6) {
            let a = vec!["alpha"; n].join(" ");
            let b = vec!["omega"; m].join(" ");
            prop_assert_eq!(bleu(&a, &b, false, true), 0.0);
            prop_assert_eq!(rouge_l_f(&a, &b), 0.0);
            prop_assert_eq!(norm_edit_distance(&a, &b, false), 1.0);
        }

        #[test]
        fn triangle_inequality(a in "[ab]{0,6}", b in "[ab]{0,6}", c in "[ab]{0,6}") {
            let (a, b, c): (Vec<char>, Vec<char>, Vec<char>) = (a.chars().collect(), b.chars().collect(), c.chars().collect());
            prop_assert!(levenshtein(&a, &c) <= levenshtein(&a, &b) + levenshtein(&b, &c));
        }
    }
}
