//! Validation statistics: rank correlations with tie handling and p-values,
//! Likert normalization, system rankings, pseudo-reference quality rates,
//! inter-rater reliability and failure-case mining.

use std::collections::{BTreeMap, BTreeSet, HashMap};
use std::hash::Hash;

use serde::{Deserialize, Serialize};
use statrs::distribution::{ContinuousCDF, Normal, StudentsT};

use crate::error::{Error, Result};

/// Largest sample size for which p-values are computed by enumerating every
/// permutation.
pub const EXACT_P_MAX_N: usize = 10;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CorrelationMethod {
    Spearman,
    KendallB,
}

/// A rank correlation. `coefficient` and `p_value` are NaN when the
/// coefficient is undefined (an input is constant).
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CorrelationResult {
    pub coefficient: f64,
    pub p_value: f64,
    pub n: usize,
    pub method: CorrelationMethod,
}

impl CorrelationResult {
    fn undefined(n: usize, method: CorrelationMethod) -> Self {
        CorrelationResult {
            coefficient: f64::NAN,
            p_value: f64::NAN,
            n,
            method,
        }
    }

    pub fn is_defined(&self) -> bool {
        self.coefficient.is_finite()
    }
}

fn check_pair(xs: &[f64], ys: &[f64]) -> Result<()> {
    if xs.len() != ys.len() {
        return Err(Error::Invalid(format!(
            "correlation inputs differ in length ({} vs {})",
            xs.len(),
            ys.len()
        )));
    }
    if xs.len() < 2 {
        return Err(Error::Invalid("correlation needs at least 2 observations".into()));
    }
    if xs.iter().chain(ys).any(|v| !v.is_finite()) {
        return Err(Error::Invalid("correlation inputs must be finite".into()));
    }
    Ok(())
}

/// Twice the 1-based mid-rank of each value (ties share the average rank).
/// Doubling keeps every rank an integer.
pub fn doubled_midranks(xs: &[f64]) -> Vec<i64> {
    let mut order: Vec<usize> = (0..xs.len()).collect();
    order.sort_by(|&a, &b| xs[a].total_cmp(&xs[b]));
    let mut ranks = vec![0i64; xs.len()];
    let mut i = 0;
    while i < order.len() {
        let mut j = i;
        while j + 1 < order.len() && xs[order[j + 1]] == xs[order[i]] {
            j += 1;
        }
        // positions i+1 ..= j+1 share rank (i+1 + j+1)/2
        let r2 = (i + j + 2) as i64;
        for &k in &order[i..=j] {
            ranks[k] = r2;
        }
        i = j + 1;
    }
    ranks
}

/// Mid-ranks (average rank on ties), 1-based.
pub fn midranks(xs: &[f64]) -> Vec<f64> {
    doubled_midranks(xs).into_iter().map(|r| r as f64 / 2.0).collect()
}

fn ratio(num: i128, a: i128, b: i128) -> f64 {
    let r = if a == b {
        num as f64 / a as f64
    } else {
        num as f64 / ((a as f64).sqrt() * (b as f64).sqrt())
    };
    r.clamp(-1.0, 1.0)
}

/// Visit every permutation of `0..n` (Heap's algorithm).
fn for_each_permutation(n: usize, mut f: impl FnMut(&[usize])) {
    let mut p: Vec<usize> = (0..n).collect();
    let mut c = vec![0usize; n];
    f(&p);
    let mut i = 1;
    while i < n {
        if c[i] < i {
            if i % 2 == 0 {
                p.swap(0, i);
            } else {
                p.swap(c[i], i);
            }
            f(&p);
            c[i] += 1;
            i = 1;
        } else {
            c[i] = 0;
            i += 1;
        }
    }
}

fn factorial(n: usize) -> f64 {
    (1..=n).map(|k| k as f64).product()
}

fn dot(a: &[i64], b: &[i64]) -> i128 {
    a.iter().zip(b).map(|(x, y)| (*x as i128) * (*y as i128)).sum()
}

/// Centered doubled ranks of both inputs and the three cross products.
struct RankMoments {
    cx: Vec<i64>,
    cy: Vec<i64>,
    sxx: i128,
    syy: i128,
    sxy: i128,
}

fn rank_moments(xs: &[f64], ys: &[f64]) -> RankMoments {
    let shift = (xs.len() + 1) as i64;
    let cx: Vec<i64> = doubled_midranks(xs).into_iter().map(|r| r - shift).collect();
    let cy: Vec<i64> = doubled_midranks(ys).into_iter().map(|r| r - shift).collect();
    let (sxx, syy, sxy) = (dot(&cx, &cx), dot(&cy, &cy), dot(&cx, &cy));
    RankMoments { cx, cy, sxx, syy, sxy }
}

/// Spearman's rho alone (NaN when undefined), without a p-value.
pub fn spearman_rho(xs: &[f64], ys: &[f64]) -> Result<f64> {
    check_pair(xs, ys)?;
    let m = rank_moments(xs, ys);
    if m.sxx == 0 || m.syy == 0 {
        return Ok(f64::NAN);
    }
    Ok(ratio(m.sxy, m.sxx, m.syy))
}

/// Spearman's rank correlation (Pearson correlation of mid-ranks).
pub fn spearman(xs: &[f64], ys: &[f64]) -> Result<CorrelationResult> {
    let rho = spearman_rho(xs, ys)?;
    let n = xs.len();
    if rho.is_nan() {
        return Ok(CorrelationResult::undefined(n, CorrelationMethod::Spearman));
    }
    let RankMoments { cx, cy, sxy, .. } = rank_moments(xs, ys);

    let p_value = if n <= EXACT_P_MAX_N {
        let target = sxy.abs();
        let mut hits = 0u64;
        let mut buf = vec![0i64; n];
        for_each_permutation(n, |p| {
            for (k, &pi) in p.iter().enumerate() {
                buf[k] = cy[pi];
            }
            if dot(&cx, &buf).abs() >= target {
                hits += 1;
            }
        });
        hits as f64 / factorial(n)
    } else if rho.abs() >= 1.0 {
        0.0
    } else {
        let df = (n - 2) as f64;
        let t = rho * (df / ((1.0 - rho) * (1.0 + rho))).sqrt();
        let dist = StudentsT::new(0.0, 1.0, df).expect("valid t distribution");
        (2.0 * (1.0 - dist.cdf(t.abs()))).min(1.0)
    };
    Ok(CorrelationResult {
        coefficient: rho,
        p_value,
        n,
        method: CorrelationMethod::Spearman,
    })
}

fn sign(a: f64, b: f64) -> i8 {
    if a < b {
        -1
    } else if a > b {
        1
    } else {
        0
    }
}

fn tie_sums(xs: &[f64]) -> (f64, f64, f64) {
    let mut counts: BTreeMap<u64, u64> = BTreeMap::new();
    for x in xs {
        *counts.entry(x.to_bits()).or_default() += 1;
    }
    let (mut t0, mut t1, mut t2) = (0.0, 0.0, 0.0);
    for &t in counts.values() {
        let t = t as f64;
        t0 += t * (t - 1.0);
        t1 += t * (t - 1.0) * (t - 2.0);
        t2 += t * (t - 1.0) * (2.0 * t + 5.0);
    }
    (t0, t1, t2)
}

/// Concordance score S = concordant - discordant, and the number of pairs
/// tied in x and in y.
fn pair_counts(xs: &[f64], ys: &[f64]) -> (i128, i128, i128) {
    let n = xs.len();
    let (mut s, mut tx, mut ty) = (0i128, 0i128, 0i128);
    for i in 0..n {
        for j in (i + 1)..n {
            let a = sign(xs[i], xs[j]);
            let b = sign(ys[i], ys[j]);
            if a == 0 {
                tx += 1;
            }
            if b == 0 {
                ty += 1;
            }
            s += (a * b) as i128;
        }
    }
    (s, tx, ty)
}

/// Kendall's tau-b alone (NaN when undefined), without a p-value.
pub fn kendall_tau_b(xs: &[f64], ys: &[f64]) -> Result<f64> {
    check_pair(xs, ys)?;
    let n0 = (xs.len() * (xs.len() - 1) / 2) as i128;
    let (s, tx, ty) = pair_counts(xs, ys);
    let (dx, dy) = (n0 - tx, n0 - ty);
    if dx == 0 || dy == 0 {
        return Ok(f64::NAN);
    }
    Ok(ratio(s, dx, dy))
}

/// Kendall's tau-b (tie corrected).
pub fn kendall(xs: &[f64], ys: &[f64]) -> Result<CorrelationResult> {
    let tau = kendall_tau_b(xs, ys)?;
    let n = xs.len();
    if tau.is_nan() {
        return Ok(CorrelationResult::undefined(n, CorrelationMethod::KendallB));
    }
    let n0 = (n * (n - 1) / 2) as i128;
    let (s, tx, ty) = pair_counts(xs, ys);

    let p_value = if n <= EXACT_P_MAX_N {
        let target = s.abs();
        if tx == 0 && ty == 0 {
            let counts = inversion_counts(n);
            let total: f64 = counts.iter().sum();
            // S = n0 - 2 * inversions
            counts
                .iter()
                .enumerate()
                .filter(|(inv, _)| (n0 - 2 * *inv as i128).abs() >= target)
                .map(|(_, c)| c)
                .sum::<f64>()
                / total
        } else {
            let mut sx = vec![0i8; n * n];
            for i in 0..n {
                for j in 0..n {
                    sx[i * n + j] = sign(xs[i], xs[j]);
                }
            }
            let mut hits = 0u64;
            for_each_permutation(n, |p| {
                let mut sp = 0i32;
                for i in 0..n {
                    for j in (i + 1)..n {
                        sp += (sx[i * n + j] * sign(ys[p[i]], ys[p[j]])) as i32;
                    }
                }
                if (sp as i128).abs() >= target {
                    hits += 1;
                }
            });
            hits as f64 / factorial(n)
        }
    } else {
        let nf = n as f64;
        let m = nf * (nf - 1.0);
        let (x0, x1, x2) = tie_sums(xs);
        let (y0, y1, y2) = tie_sums(ys);
        let var = (m * (2.0 * nf + 5.0) - x2 - y2) / 18.0
            + (x0 * y0) / (2.0 * m)
            + (x1 * y1) / (9.0 * m * (nf - 2.0));
        let z = s as f64 / var.sqrt();
        let normal = Normal::new(0.0, 1.0).expect("standard normal");
        (2.0 * (1.0 - normal.cdf(z.abs()))).min(1.0)
    };
    Ok(CorrelationResult {
        coefficient: tau,
        p_value,
        n,
        method: CorrelationMethod::KendallB,
    })
}

/// Number of permutations of `n` items with exactly `k` inversions, for
/// every `k` (Mahonian numbers).
fn inversion_counts(n: usize) -> Vec<f64> {
    let max = n * n.saturating_sub(1) / 2;
    let mut row = vec![0.0; max + 1];
    row[0] = 1.0;
    for m in 2..=n {
        let mut next = vec![0.0; max + 1];
        for (k, &c) in row.iter().enumerate() {
            if c == 0.0 {
                continue;
            }
            for add in 0..m {
                if k + add <= max {
                    next[k + add] += c;
                }
            }
        }
        row = next;
    }
    row
}

/// Map a 1-5 Likert rating onto [0, 1].
pub fn normalize_likert(v: u8) -> Result<f64> {
    if !(1..=5).contains(&v) {
        return Err(Error::Range(format!("Likert value {v} outside 1-5")));
    }
    Ok(f64::from(v - 1) / 4.0)
}

/// Systems ordered by mean score, best first; ties broken by system id.
pub fn system_ranking(scores: &BTreeMap<String, Vec<f64>>, exclude: &[String]) -> Result<Vec<(String, f64)>> {
    let mut out = Vec::new();
    for (sys, vals) in scores {
        if exclude.contains(sys) {
            continue;
        }
        if vals.is_empty() {
            return Err(Error::Invalid(format!("system `{sys}` has no scores")));
        }
        out.push((sys.clone(), vals.iter().sum::<f64>() / vals.len() as f64));
    }
    if out.is_empty() {
        return Err(Error::Invalid("no systems to rank".into()));
    }
    out.sort_by(|a, b| b.1.total_cmp(&a.1).then_with(|| a.0.cmp(&b.0)));
    Ok(out)
}

/// Spearman and Kendall agreement between two system rankings, computed on
/// the per-system means (ties get mid-ranks).
pub fn ranking_correlation(
    metric: &[(String, f64)],
    human: &[(String, f64)],
) -> Result<(CorrelationResult, CorrelationResult)> {
    let h: HashMap<&str, f64> = human.iter().map(|(s, v)| (s.as_str(), *v)).collect();
    let m: HashMap<&str, f64> = metric.iter().map(|(s, v)| (s.as_str(), *v)).collect();
    let mut mismatch: Vec<String> = metric
        .iter()
        .filter(|(s, _)| !h.contains_key(s.as_str()))
        .map(|(s, _)| format!("extra:{s}"))
        .collect();
    mismatch.extend(
        human
            .iter()
            .filter(|(s, _)| !m.contains_key(s.as_str()))
            .map(|(s, _)| format!("missing:{s}")),
    );
    if !mismatch.is_empty() {
        return Err(Error::Alignment(mismatch));
    }
    let xs: Vec<f64> = metric.iter().map(|(_, v)| *v).collect();
    let ys: Vec<f64> = metric.iter().map(|(s, _)| h[s.as_str()]).collect();
    Ok((spearman(&xs, &ys)?, kendall(&xs, &ys)?))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
pub struct QualityCounts {
    pub n_correct: u64,
    pub n_incorrect: u64,
    pub n_unverifiable: u64,
    pub n_added: u64,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct QualityRates {
    pub accuracy: f64,
    pub error_rate: f64,
    pub unverifiable_rate: f64,
    pub missing_rate: f64,
}

/// Rates over the judged claims (correct + incorrect + unverifiable).
pub fn quality_rates(c: &QualityCounts) -> Result<QualityRates> {
    let judged = c.n_correct + c.n_incorrect + c.n_unverifiable;
    if judged == 0 {
        return Err(Error::Invalid("no judged pseudo-references".into()));
    }
    let d = judged as f64;
    Ok(QualityRates {
        accuracy: c.n_correct as f64 / d,
        error_rate: c.n_incorrect as f64 / d,
        unverifiable_rate: c.n_unverifiable as f64 / d,
        missing_rate: c.n_added as f64 / d,
    })
}

/// Cohen's kappa for two coders over the same items.
pub fn cohen_kappa<T: Eq + Hash>(a: &[T], b: &[T]) -> Result<f64> {
    if a.len() != b.len() {
        return Err(Error::Invalid(format!("label lists differ in length ({} vs {})", a.len(), b.len())));
    }
    if a.is_empty() {
        return Err(Error::Invalid("no labelled items".into()));
    }
    let n = a.len() as f64;
    let p_o = a.iter().zip(b).filter(|(x, y)| x == y).count() as f64 / n;
    let mut ca: HashMap<&T, f64> = HashMap::new();
    let mut cb: HashMap<&T, f64> = HashMap::new();
    for (x, y) in a.iter().zip(b) {
        *ca.entry(x).or_default() += 1.0;
        *cb.entry(y).or_default() += 1.0;
    }
    let p_e: f64 = ca.iter().map(|(k, v)| v * cb.get(k).copied().unwrap_or(0.0)).sum::<f64>() / (n * n);
    if p_e == 1.0 {
        return Ok(if p_o == 1.0 { 1.0 } else { 0.0 });
    }
    Ok((p_o - p_e) / (1.0 - p_e))
}

/// Krippendorff's alpha with the ordinal difference function. `ratings` is
/// items x raters; `None` marks a missing rating.
pub fn krippendorff_alpha_ordinal(ratings: &[Vec<Option<i64>>]) -> Result<f64> {
    let units: Vec<Vec<i64>> = ratings
        .iter()
        .map(|row| row.iter().flatten().copied().collect::<Vec<_>>())
        .filter(|vals: &Vec<i64>| vals.len() >= 2)
        .collect();
    if units.len() < 2 {
        return Err(Error::Invalid("need at least 2 items with 2 or more ratings".into()));
    }
    let values: Vec<i64> = units.iter().flatten().copied().collect::<BTreeSet<_>>().into_iter().collect();
    let idx: HashMap<i64, usize> = values.iter().enumerate().map(|(i, v)| (*v, i)).collect();
    let k = values.len();

    // coincidence matrix
    let mut o = vec![vec![0.0f64; k]; k];
    for u in &units {
        let m = u.len() as f64;
        for (i, a) in u.iter().enumerate() {
            for (j, b) in u.iter().enumerate() {
                if i != j {
                    o[idx[a]][idx[b]] += 1.0 / (m - 1.0);
                }
            }
        }
    }
    let n_c: Vec<f64> = o.iter().map(|row| row.iter().sum()).collect();
    let n: f64 = n_c.iter().sum();

    let delta2 = |c: usize, e: usize| -> f64 {
        let (lo, hi) = if c <= e { (c, e) } else { (e, c) };
        let s: f64 = n_c[lo..=hi].iter().sum::<f64>() - (n_c[lo] + n_c[hi]) / 2.0;
        s * s
    };
    let mut d_o = 0.0;
    let mut d_e = 0.0;
    for c in 0..k {
        for e in 0..k {
            let d = delta2(c, e);
            d_o += o[c][e] * d;
            d_e += n_c[c] * n_c[e] * d;
        }
    }
    if d_o == 0.0 {
        return Ok(1.0);
    }
    Ok(1.0 - (n - 1.0) * d_o / d_e)
}

/// Quantile with mid-rank (Hazen) plotting positions: the i-th smallest of
/// n values sits at cumulative fraction (i - 0.5) / n and values in between
/// are linearly interpolated.
pub fn quantile_midrank(sorted: &[f64], q: f64) -> f64 {
    let n = sorted.len();
    let h = q * n as f64 + 0.5;
    if h <= 1.0 {
        return sorted[0];
    }
    if h >= n as f64 {
        return sorted[n - 1];
    }
    let lo = h.floor() as usize;
    let frac = h - lo as f64;
    sorted[lo - 1] + frac * (sorted[lo] - sorted[lo - 1])
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct FailureCases {
    pub q1: f64,
    pub q4: f64,
    /// Scored below Q1 but rated 5 by humans.
    pub under: Vec<String>,
    /// Scored above Q4 but rated 1 by humans.
    pub over: Vec<String>,
}

/// Reviews where the metric strongly disagrees with a human rating, using
/// the 0.2 and 0.8 quantiles of the score distribution as cut points.
pub fn failure_cases(rel: &[(String, f64)], human: &[(String, u8)]) -> Result<FailureCases> {
    if rel.is_empty() {
        return Err(Error::Invalid("no scores".into()));
    }
    let h: HashMap<&str, u8> = human.iter().map(|(id, v)| (id.as_str(), *v)).collect();
    let missing: Vec<String> = rel.iter().filter(|(id, _)| !h.contains_key(id.as_str())).map(|(id, _)| id.clone()).collect();
    if !missing.is_empty() {
        return Err(Error::Alignment(missing));
    }
    let mut sorted: Vec<f64> = rel.iter().map(|(_, v)| *v).collect();
    sorted.sort_by(f64::total_cmp);
    let q1 = quantile_midrank(&sorted, 0.2);
    let q4 = quantile_midrank(&sorted, 0.8);
    let mut under = Vec::new();
    let mut over = Vec::new();
    for (id, v) in rel {
        match h[id.as_str()] {
            5 if *v < q1 => under.push(id.clone()),
            1 if *v > q4 => over.push(id.clone()),
            _ => {}
        }
    }
    Ok(FailureCases { q1, q4, under, over })
}
