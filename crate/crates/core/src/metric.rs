//! Conciseness, comprehensiveness and relevance of a review against its
//! pseudo-references, plus threshold calibration and evaluation helpers.
//!
//! For pseudo-references P, review sentences R and cosine similarities
//! s(p, r), with a threshold tau:
//!
//! * `con`  = |{r : max_p s(p, r) > tau}| / |R|
//! * `comp` = |{p : max_r s(p, r) > tau}| / |P|
//! * `rel`  = harmonic mean of `con` and `comp` (0 when both are 0)
//!
//! An empty R gives `con = 0`, an empty P gives `comp = 0`; both cases are
//! flagged on the result.

use std::collections::{BTreeSet, HashMap, HashSet};
use std::fmt;

use serde::{Deserialize, Serialize};

use crate::corpus::AnnotationRecord;
use crate::embed::{cosine, Embedder};
use crate::error::{Error, Result};
use crate::evalstats::{kendall, spearman, CorrelationResult};
use crate::pseudoref::PseudoRef;
use crate::textproc::{filter_stopwords, SentenceSet, StopwordLexicon};

pub const TAU_BEST: f64 = 0.7314;
pub const TAU_GT: f64 = 0.6576;

#[derive(Debug, Clone, PartialEq)]
pub struct SimilarityMatrix {
    pub change_id: String,
    pub system_id: String,
    /// Row ids (pseudo-references).
    pub pref_ids: Vec<String>,
    /// Column ids: index of each kept sentence in the review's sentence list.
    pub sent_index: Vec<usize>,
    /// `values[i][j]` = s(pref_i, sentence_j).
    pub values: Vec<Vec<f64>>,
}

impl SimilarityMatrix {
    pub fn from_values(values: Vec<Vec<f64>>, n_cols: usize) -> Result<Self> {
        let m = SimilarityMatrix {
            change_id: String::new(),
            system_id: String::new(),
            pref_ids: (0..values.len()).map(|i| format!("p{i}")).collect(),
            sent_index: (0..n_cols).collect(),
            values,
        };
        m.validate()?;
        Ok(m)
    }

    pub fn n_prefs(&self) -> usize {
        self.pref_ids.len()
    }

    pub fn n_sents(&self) -> usize {
        self.sent_index.len()
    }

    pub fn validate(&self) -> Result<()> {
        if self.values.len() != self.pref_ids.len() {
            return Err(Error::Invalid(format!(
                "matrix has {} rows for {} pseudo-references",
                self.values.len(),
                self.pref_ids.len()
            )));
        }
        for row in &self.values {
            if row.len() != self.sent_index.len() {
                return Err(Error::Invalid(format!(
                    "matrix row of length {} for {} sentences",
                    row.len(),
                    self.sent_index.len()
                )));
            }
            if row.iter().any(|v| !v.is_finite()) {
                return Err(Error::Invalid("matrix has non-finite entries".into()));
            }
        }
        Ok(())
    }

    /// Best similarity of each column (review sentence) over all rows.
    pub fn column_maxima(&self) -> Vec<f64> {
        (0..self.n_sents())
            .map(|j| self.values.iter().map(|r| r[j]).fold(f64::NEG_INFINITY, f64::max))
            .collect()
    }

    /// Best similarity of each row (pseudo-reference) over all columns.
    pub fn row_maxima(&self) -> Vec<f64> {
        self.values
            .iter()
            .map(|r| r.iter().copied().fold(f64::NEG_INFINITY, f64::max))
            .collect()
    }
}

/// Text that gets embedded for a pseudo-reference: stopwords removed, or the
/// lowercased original when nothing else is left.
pub fn pref_embedding_text(pref: &PseudoRef, lex: &StopwordLexicon) -> String {
    let toks = filter_stopwords(&pref.text, lex);
    if toks.is_empty() {
        pref.text.trim().to_lowercase()
    } else {
        toks.join(" ")
    }
}

/// Pairwise cosine similarities between pseudo-references and the review's
/// sentences. Sentences made only of stopwords carry no content and are not
/// columns of the matrix.
pub fn similarity_matrix(
    change_id: &str,
    system_id: &str,
    prefs: &[PseudoRef],
    sents: &SentenceSet,
    embedder: &Embedder,
    lex: &StopwordLexicon,
) -> Result<SimilarityMatrix> {
    let pref_texts: Vec<String> = prefs.iter().map(|p| pref_embedding_text(p, lex)).collect();
    let (sent_index, sent_texts): (Vec<usize>, Vec<String>) = sents
        .sentences
        .iter()
        .enumerate()
        .filter(|(_, s)| !s.is_empty())
        .map(|(i, s)| (i, s.filtered_text()))
        .unzip();

    let mut unique: Vec<String> = Vec::new();
    let mut slot: HashMap<&str, usize> = HashMap::new();
    for t in pref_texts.iter().chain(&sent_texts) {
        if !slot.contains_key(t.as_str()) {
            slot.insert(t, unique.len());
            unique.push(t.clone());
        }
    }
    let vectors = if unique.is_empty() {
        Vec::new()
    } else {
        embedder
            .embed(&unique)
            .map_err(|e| e.context(format!("embedding change `{change_id}`")))?
    };

    let mut values = Vec::with_capacity(prefs.len());
    for pt in &pref_texts {
        let pv = &vectors[slot[pt.as_str()]];
        let row = sent_texts
            .iter()
            .map(|st| cosine(pv, &vectors[slot[st.as_str()]]))
            .collect::<Result<Vec<f64>>>()?;
        values.push(row);
    }
    let m = SimilarityMatrix {
        change_id: change_id.to_string(),
        system_id: system_id.to_string(),
        pref_ids: prefs.iter().map(|p| p.id.clone()).collect(),
        sent_index,
        values,
    };
    m.validate()?;
    Ok(m)
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "kind", content = "run", rename_all = "kebab-case")]
pub enum ThresholdProvenance {
    Calibrated(String),
    Fixed,
    PaperBest,
    PaperGt,
}

impl fmt::Display for ThresholdProvenance {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            ThresholdProvenance::Calibrated(tag) => write!(f, "calibrated:{tag}"),
            ThresholdProvenance::Fixed => f.write_str("fixed"),
            ThresholdProvenance::PaperBest => f.write_str("paper-best"),
            ThresholdProvenance::PaperGt => f.write_str("paper-gt"),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ThresholdConfig {
    pub tau: f64,
    pub provenance: ThresholdProvenance,
}

impl ThresholdConfig {
    pub fn new(tau: f64, provenance: ThresholdProvenance) -> Result<Self> {
        if !(tau > 0.0 && tau < 1.0) {
            return Err(Error::Range(format!("threshold {tau} outside (0, 1)")));
        }
        Ok(ThresholdConfig { tau, provenance })
    }

    pub fn fixed(tau: f64) -> Result<Self> {
        Self::new(tau, ThresholdProvenance::Fixed)
    }

    /// Mean best-match similarity of GPT-3.5 review sentences.
    pub fn paper_best() -> Self {
        ThresholdConfig {
            tau: TAU_BEST,
            provenance: ThresholdProvenance::PaperBest,
        }
    }

    /// The same calibration run on ground-truth reviews.
    pub fn paper_gt() -> Self {
        ThresholdConfig {
            tau: TAU_GT,
            provenance: ThresholdProvenance::PaperGt,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DegenerateFlag {
    EmptyPrefs,
    EmptySents,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScoreTriple {
    pub con: f64,
    pub comp: f64,
    pub rel: f64,
    pub n_prefs: usize,
    pub n_sents: usize,
    pub flags: BTreeSet<DegenerateFlag>,
}

pub fn harmonic_mean(a: f64, b: f64) -> f64 {
    if a + b == 0.0 {
        0.0
    } else {
        2.0 * a * b / (a + b)
    }
}

pub fn score(m: &SimilarityMatrix, th: &ThresholdConfig) -> ScoreTriple {
    let tau = th.tau;
    let (n_prefs, n_sents) = (m.n_prefs(), m.n_sents());
    let mut flags = BTreeSet::new();

    let con = if n_sents == 0 {
        flags.insert(DegenerateFlag::EmptySents);
        0.0
    } else {
        let hits = m.column_maxima().iter().filter(|&&v| v > tau).count();
        hits as f64 / n_sents as f64
    };
    let comp = if n_prefs == 0 {
        flags.insert(DegenerateFlag::EmptyPrefs);
        0.0
    } else {
        let hits = m.row_maxima().iter().filter(|&&v| v > tau).count();
        hits as f64 / n_prefs as f64
    };
    ScoreTriple {
        con,
        comp,
        rel: harmonic_mean(con, comp),
        n_prefs,
        n_sents,
        flags,
    }
}

/// One line of score output.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScoreRecord {
    pub change_id: String,
    pub system_id: String,
    pub con: f64,
    pub comp: f64,
    pub rel: f64,
    pub n_prefs: usize,
    pub n_sents: usize,
    pub tau: f64,
    pub provider_tag: String,
    pub flags: Vec<DegenerateFlag>,
}

impl ScoreRecord {
    pub fn new(m: &SimilarityMatrix, th: &ThresholdConfig, s: &ScoreTriple, provider_tag: &str) -> Self {
        ScoreRecord {
            change_id: m.change_id.clone(),
            system_id: m.system_id.clone(),
            con: s.con,
            comp: s.comp,
            rel: s.rel,
            n_prefs: s.n_prefs,
            n_sents: s.n_sents,
            tau: th.tau,
            provider_tag: provider_tag.to_string(),
            flags: s.flags.iter().copied().collect(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Calibration {
    pub threshold: ThresholdConfig,
    /// Review sentences that contributed a best match.
    pub n_sentences: usize,
    /// Sentences skipped because their change had no pseudo-references.
    pub skipped_sentences: usize,
}

/// Threshold = mean over every review sentence of its best similarity to any
/// pseudo-reference of the same change.
pub fn calibrate_threshold(matrices: &[SimilarityMatrix], run_tag: &str) -> Result<Calibration> {
    let mut sum = 0.0;
    let mut n = 0usize;
    let mut skipped = 0usize;
    for m in matrices {
        if m.n_prefs() == 0 {
            skipped += m.n_sents();
            continue;
        }
        for v in m.column_maxima() {
            sum += v;
            n += 1;
        }
    }
    if n == 0 {
        return Err(Error::Invalid(
            "no review sentence has a pseudo-reference to calibrate against".into(),
        ));
    }
    let tau = sum / n as f64;
    Ok(Calibration {
        threshold: ThresholdConfig::new(tau, ThresholdProvenance::Calibrated(run_tag.to_string()))?,
        n_sentences: n,
        skipped_sentences: skipped,
    })
}

/// Pair matrices with annotations by (change, system). Matrices flagged with
/// no pseudo-references are dropped. Any annotation without a matrix is an
/// error.
pub fn align<'a>(
    matrices: &'a [SimilarityMatrix],
    annotations: &'a [AnnotationRecord],
) -> Result<Vec<(&'a SimilarityMatrix, &'a AnnotationRecord)>> {
    let by_key: HashMap<(&str, &str), &SimilarityMatrix> = matrices
        .iter()
        .map(|m| ((m.change_id.as_str(), m.system_id.as_str()), m))
        .collect();
    let mut missing = Vec::new();
    let mut out = Vec::new();
    for a in annotations {
        match by_key.get(&(a.change_id.as_str(), a.system_id.as_str())) {
            Some(m) if m.n_prefs() > 0 => out.push((*m, a)),
            Some(_) => {}
            None => missing.push(format!("{}/{}", a.change_id, a.system_id)),
        }
    }
    if !missing.is_empty() {
        return Err(Error::Alignment(missing));
    }
    Ok(out)
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct SweepRow {
    pub tau: f64,
    pub kendall: CorrelationResult,
    pub spearman: CorrelationResult,
}

/// Correlation of Rel with human relevance for each threshold in `grid`.
pub fn threshold_sweep(
    matrices: &[SimilarityMatrix],
    annotations: &[AnnotationRecord],
    grid: &[f64],
) -> Result<Vec<SweepRow>> {
    let pairs = align(matrices, annotations)?;
    let human: Vec<f64> = pairs.iter().map(|(_, a)| a.rel as f64).collect();
    grid.iter()
        .map(|&tau| {
            let th = ThresholdConfig::fixed(tau)?;
            let rel: Vec<f64> = pairs.iter().map(|(m, _)| score(m, &th).rel).collect();
            Ok(SweepRow {
                tau,
                kendall: kendall(&rel, &human)?,
                spearman: spearman(&rel, &human)?,
            })
        })
        .collect()
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct PrecisionRecall {
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
    pub tp: usize,
    pub fp: usize,
    pub fn_: usize,
}

/// Treat `sim > tau` as predicting that a review covers a pseudo-reference
/// and score the predictions against human links.
pub fn sts_classifier_eval(pairs: &[(f64, bool)], tau: f64) -> Result<PrecisionRecall> {
    if pairs.is_empty() {
        return Err(Error::Invalid("no similarity/coverage pairs".into()));
    }
    let (mut tp, mut fp, mut fn_) = (0usize, 0usize, 0usize);
    for &(sim, covered) in pairs {
        match (sim > tau, covered) {
            (true, true) => tp += 1,
            (true, false) => fp += 1,
            (false, true) => fn_ += 1,
            (false, false) => {}
        }
    }
    let precision = if tp + fp == 0 { 0.0 } else { tp as f64 / (tp + fp) as f64 };
    let recall = if tp + fn_ == 0 { 0.0 } else { tp as f64 / (tp + fn_) as f64 };
    Ok(PrecisionRecall {
        precision,
        recall,
        f1: harmonic_mean(precision, recall),
        tp,
        fp,
        fn_,
    })
}

/// (best similarity of each pseudo-reference to the review, whether the
/// annotator linked it). References the annotator excluded are skipped.
pub fn sts_pairs(m: &SimilarityMatrix, a: &AnnotationRecord) -> Vec<(f64, bool)> {
    let covered: HashSet<&str> = a.covered_ref_ids.iter().map(String::as_str).collect();
    let excluded: HashSet<&str> = a.unnecessary_ref_ids.iter().map(String::as_str).collect();
    m.pref_ids
        .iter()
        .zip(m.row_maxima())
        .filter(|(id, _)| !excluded.contains(id.as_str()))
        .map(|(id, best)| {
            let sim = if m.n_sents() == 0 { -1.0 } else { best };
            (sim, covered.contains(id.as_str()))
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn m(values: Vec<Vec<f64>>, cols: usize) -> SimilarityMatrix {
        SimilarityMatrix::from_values(values, cols).unwrap()
    }

    fn th(t: f64) -> ThresholdConfig {
        ThresholdConfig::fixed(t).unwrap()
    }

    #[test]
    fn single_match() {
        let s = score(&m(vec![vec![0.9]], 1), &ThresholdConfig::paper_best());
        assert_eq!((s.con, s.comp, s.rel), (1.0, 1.0, 1.0));
        assert!(s.flags.is_empty());
    }

    #[test]
    fn two_by_two() {
        let s = score(&m(vec![vec![0.8, 0.2], vec![0.3, 0.1]], 2), &th(0.7));
        assert_eq!((s.con, s.comp, s.rel), (0.5, 0.5, 0.5));
    }

    #[test]
    fn strict_threshold() {
        let s = score(&m(vec![vec![0.7]], 1), &th(0.7));
        assert_eq!((s.con, s.comp), (0.0, 0.0));
    }

    #[test]
    fn harmonic_mean_with_zero() {
        assert_eq!(harmonic_mean(1.0, 0.0), 0.0);
        assert_eq!(harmonic_mean(0.0, 0.0), 0.0);
    }

    #[test]
    fn degenerate_shapes() {
        let s = score(&m(vec![vec![], vec![]], 0), &th(0.5));
        assert_eq!((s.con, s.comp, s.rel), (0.0, 0.0, 0.0));
        assert_eq!(s.flags, BTreeSet::from([DegenerateFlag::EmptySents]));

        let s = score(&m(vec![], 3), &th(0.5));
        assert_eq!((s.con, s.comp, s.rel), (0.0, 0.0, 0.0));
        assert_eq!(s.flags, BTreeSet::from([DegenerateFlag::EmptyPrefs]));

        let s = score(&m(vec![], 0), &th(0.5));
        assert_eq!(
            s.flags,
            BTreeSet::from([DegenerateFlag::EmptyPrefs, DegenerateFlag::EmptySents])
        );
    }

    #[test]
    fn threshold_bounds() {
        assert!(ThresholdConfig::fixed(0.0).is_err());
        assert!(ThresholdConfig::fixed(1.0).is_err());
        assert!(ThresholdConfig::fixed(f64::NAN).is_err());
        assert_eq!(ThresholdConfig::paper_best().tau, 0.7314);
        assert_eq!(ThresholdConfig::paper_gt().tau, 0.6576);
    }

    #[test]
    fn calibration_means_column_maxima() {
        let one = m(vec![vec![0.4], vec![0.9]], 1);
        assert_eq!(calibrate_threshold(&[one], "t").unwrap().threshold.tau, 0.9);

        let two = m(vec![vec![0.9, 0.5]], 2);
        let empty = m(vec![], 4);
        let c = calibrate_threshold(&[two, empty], "t").unwrap();
        assert!((c.threshold.tau - 0.7).abs() < 1e-15);
        assert_eq!((c.n_sentences, c.skipped_sentences), (2, 4));
        assert_eq!(c.threshold.provenance, ThresholdProvenance::Calibrated("t".into()));

        assert!(calibrate_threshold(&[m(vec![], 2)], "t").is_err());
    }

    #[test]
    fn classifier_counts() {
        let all_right = [(0.9, true), (0.1, false)];
        let r = sts_classifier_eval(&all_right, 0.5).unwrap();
        assert_eq!((r.precision, r.recall, r.f1), (1.0, 1.0, 1.0));

        // 2 TP, 2 FP, 1 FN, 1 TN
        let pairs = [(0.9, true), (0.8, true), (0.7, false), (0.6, false), (0.1, true), (0.2, false)];
        let r = sts_classifier_eval(&pairs, 0.5).unwrap();
        assert_eq!((r.tp, r.fp, r.fn_), (2, 2, 1));
        assert_eq!(r.precision, 0.5);
        assert!((r.recall - 2.0 / 3.0).abs() < 1e-15);
        assert!((r.f1 - 4.0 / 7.0).abs() < 1e-15);

        let none_predicted = sts_classifier_eval(&[(0.1, true)], 0.5).unwrap();
        assert_eq!((none_predicted.precision, none_predicted.recall, none_predicted.f1), (0.0, 0.0, 0.0));
        assert!(sts_classifier_eval(&[], 0.5).is_err());
    }

    #[test]
    fn sweep_with_constant_humans_is_undefined() {
        let mut a = m(vec![vec![0.9]], 1);
        a.change_id = "c1".into();
        a.system_id = "s".into();
        let mut b = m(vec![vec![0.1]], 1);
        b.change_id = "c2".into();
        b.system_id = "s".into();
        let ann = |c: &str| AnnotationRecord {
            change_id: c.into(),
            system_id: "s".into(),
            con: 3,
            comp: 3,
            rel: 3,
            covered_ref_ids: vec![],
            unnecessary_ref_ids: vec![],
        };
        let rows = threshold_sweep(&[a.clone(), b.clone()], &[ann("c1"), ann("c2")], &[0.5]).unwrap();
        assert!(!rows[0].spearman.is_defined());
        assert!(!rows[0].kendall.is_defined());

        let err = threshold_sweep(&[a], &[ann("c1"), ann("c9")], &[0.5]).unwrap_err();
        assert!(matches!(err, Error::Alignment(ref ids) if ids == &vec!["c9/s".to_string()]));
    }

    fn matrix_strategy() -> impl Strategy<Value = (Vec<Vec<f64>>, usize)> {
        (0usize..=6, 0usize..=6).prop_flat_map(|(r, c)| {
            (proptest::collection::vec(proptest::collection::vec(-1.0f64..1.0, c), r), Just(c))
        })
    }

    proptest! {
        #[test]
        fn monotone_in_tau((v, c) in matrix_strategy(), mut taus in proptest::collection::vec(0.01f64..0.99, 2..8)) {
            taus.sort_by(f64::total_cmp);
            let mat = m(v, c);
            let scores: Vec<ScoreTriple> = taus.iter().map(|&t| score(&mat, &th(t))).collect();
            for w in scores.windows(2) {
                prop_assert!(w[1].con <= w[0].con);
                prop_assert!(w[1].comp <= w[0].comp);
            }
        }

        #[test]
        fn rel_bounds((v, c) in matrix_strategy(), tau in 0.01f64..0.99) {
            let s = score(&m(v, c), &th(tau));
            prop_assert!((0.0..=1.0).contains(&s.con) && (0.0..=1.0).contains(&s.comp));
            if s.con + s.comp > 0.0 {
                let (lo, hi) = (s.con.min(s.comp), s.con.max(s.comp));
                prop_assert!(s.rel >= lo - 1e-15 && s.rel <= hi + 1e-15);
            } else {
                prop_assert_eq!(s.rel, 0.0);
            }
            if s.con == s.comp {
                prop_assert!((s.rel - s.con).abs() < 1e-15);
            }
        }

        #[test]
        fn permutation_invariant((v, c) in matrix_strategy(), tau in 0.01f64..0.99, seed in any::<u64>()) {
            let mat = m(v.clone(), c);
            let mut rows = v;
            rows.reverse();
            let rot = if c == 0 { 0 } else { (seed as usize) % c };
            for r in &mut rows {
                r.rotate_left(rot);
            }
            let perm = m(rows, c);
            prop_assert_eq!(score(&mat, &th(tau)), score(&perm, &th(tau)));
        }

        #[test]
        fn appending_columns((v, c) in matrix_strategy(), tau in 0.05f64..0.95, extra in 0.0f64..1.0) {
            prop_assume!(!v.is_empty());
            let mat = m(v.clone(), c);
            let before = score(&mat, &th(tau));

            // a column whose best match stays at or below tau
            let low: Vec<Vec<f64>> = v.iter().map(|r| { let mut r = r.clone(); r.push(tau * extra); r }).collect();
            let after = score(&m(low, c + 1), &th(tau));
            prop_assert!(after.con <= before.con);
            prop_assert_eq!(after.comp, before.comp);

            // a column that clears tau somewhere
            let high: Vec<Vec<f64>> = v.iter().enumerate()
                .map(|(i, r)| { let mut r = r.clone(); r.push(if i == 0 { tau + (1.0 - tau) * 0.5 } else { -1.0 }); r })
                .collect();
            let after = score(&m(high, c + 1), &th(tau));
            prop_assert!(after.comp >= before.comp);
        }
    }
}
