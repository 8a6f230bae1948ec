//! One function per subcommand. Each reads its inputs from the run config,
//! writes its artifacts under `output_dir` and returns the written paths.

use std::collections::{BTreeMap, BTreeSet, HashMap, HashSet};
use std::path::{Path, PathBuf};
use std::sync::Mutex;

use anyhow::Context;
use serde::{Deserialize, Serialize};

use crscore::baselines::{self, BaselineOptions, BaselineScore};
use crscore::corpus::{self, AnnotationRecord, CodeChange, ReviewDoc};
use crscore::embed::Embedder;
use crscore::evalstats::{self, CorrelationResult};
use crscore::llm::LlmClient;
use crscore::metric::{self, DegenerateFlag, ScoreRecord, SimilarityMatrix, ThresholdConfig};
use crscore::pseudoref::{self, PseudoRef, RefKind, SmellFinding};
use crscore::textproc::{SentenceSet, StopwordLexicon};

use crate::config::RunConfig;
use crate::output::{num, num4, par_map, settle_errors, write_artifact, write_reports, ItemError, Table};

const DIMENSIONS: [&str; 3] = ["con", "comp", "rel"];

/// Metrics whose lower values are better; reported as-is, never inverted.
const LOWER_IS_BETTER: [&str; 1] = ["norm_edit_distance"];

fn direction(metric_id: &str) -> &'static str {
    if LOWER_IS_BETTER.contains(&metric_id) {
        "lower_is_better"
    } else {
        "higher_is_better"
    }
}

fn load_changes(cfg: &RunConfig) -> anyhow::Result<Vec<CodeChange>> {
    let p = cfg.require(&cfg.changes, "changes")?;
    let mut changes = corpus::load_changes(p).with_context(|| format!("loading changes from {}", p.display()))?;
    changes.sort_by(|a, b| a.id.cmp(&b.id));
    Ok(changes)
}

fn load_reviews(cfg: &RunConfig, changes: Option<&[CodeChange]>) -> anyhow::Result<Vec<ReviewDoc>> {
    let p = cfg.require(&cfg.reviews, "reviews")?;
    let mut reviews =
        corpus::load_reviews(p, changes).with_context(|| format!("loading reviews from {}", p.display()))?;
    reviews.sort_by(|a, b| (&a.change_id, &a.system_id).cmp(&(&b.change_id, &b.system_id)));
    if let Some(w) = reviews
        .windows(2)
        .find(|w| (&w[0].change_id, &w[0].system_id) == (&w[1].change_id, &w[1].system_id))
    {
        return Err(crscore::Error::DuplicateId(format!("{}/{}", w[0].change_id, w[0].system_id)).into());
    }
    Ok(reviews)
}

fn load_annotations(cfg: &RunConfig) -> anyhow::Result<Vec<AnnotationRecord>> {
    let p = cfg.require(&cfg.annotations, "annotations")?;
    let excluded = cfg.excluded_systems();
    let mut anns = corpus::load_annotations(p, None)
        .with_context(|| format!("loading annotations from {}", p.display()))?;
    anns.retain(|a| !excluded.contains(&a.system_id));
    anns.sort_by(|a, b| (&a.change_id, &a.system_id).cmp(&(&b.change_id, &b.system_id)));
    Ok(anns)
}

fn load_jsonl<T: for<'de> Deserialize<'de>>(path: &Path, what: &str) -> anyhow::Result<Vec<T>> {
    let mut out = Vec::new();
    corpus::read_jsonl(path, |_, r: T| {
        out.push(r);
        Ok(())
    })
    .with_context(|| format!("loading {what} from {}", path.display()))?;
    Ok(out)
}

fn llm_client(cfg: &RunConfig) -> anyhow::Result<LlmClient> {
    Ok(LlmClient::new(cfg.llm.clone())?)
}

// ---------------------------------------------------------------- gen-refs

fn smells_for_change(
    cfg: &RunConfig,
    change: &CodeChange,
    unavailable: &Mutex<HashSet<String>>,
) -> crscore::Result<Vec<(SmellFinding, RefKind)>> {
    let mut out = Vec::new();
    for spec in cfg.analyzers.iter().filter(|s| s.supports(&change.language)) {
        if unavailable.lock().unwrap().contains(&spec.name) {
            continue;
        }
        match pseudoref::detect_smells(change, spec, cfg.smell_scope) {
            Ok(found) => out.extend(found.into_iter().map(|f| (f, spec.kind))),
            Err(crscore::Error::AnalyzerUnavailable(what)) => {
                if unavailable.lock().unwrap().insert(spec.name.clone()) {
                    log::warn!("analyzer `{}` unavailable ({what}); skipping it for this run", spec.name);
                }
            }
            Err(crscore::Error::CannotMaterialize(id)) => {
                log::info!("change `{id}`: no before/after text, smells skipped");
                break;
            }
            Err(e) => return Err(e.context(format!("analyzer `{}`", spec.name))),
        }
    }
    Ok(out)
}

pub fn gen_refs(cfg: &RunConfig) -> anyhow::Result<Vec<PathBuf>> {
    let changes = load_changes(cfg)?;
    let template = match &cfg.claims_prompt {
        Some(p) => std::fs::read_to_string(p).with_context(|| format!("reading {}", p.display()))?,
        None => pseudoref::DEFAULT_CLAIMS_PROMPT.to_string(),
    };
    let client = if cfg.claims { Some(llm_client(cfg)?) } else { None };
    let unavailable = Mutex::new(HashSet::new());

    let results = par_map(&changes, cfg.max_in_flight, |c| -> crscore::Result<Vec<PseudoRef>> {
        let claims = match &client {
            Some(client) => pseudoref::generate_claims(c, client, &template)?,
            None => Vec::new(),
        };
        let smells = smells_for_change(cfg, c, &unavailable)?;
        pseudoref::assemble_pseudorefs(&c.id, claims, &smells)
    });

    let mut refs = Vec::new();
    let mut errors = Vec::new();
    let mut table = Table::new("Pseudo-references", &["change_id", "claims", "implications", "smells", "issues"]);
    for (c, r) in changes.iter().zip(results) {
        match r {
            Ok(rs) => {
                let count = |k: RefKind| rs.iter().filter(|r| r.kind == k).count().to_string();
                table.push(vec![
                    c.id.clone(),
                    count(RefKind::Claim),
                    count(RefKind::Implication),
                    count(RefKind::Smell),
                    count(RefKind::Issue),
                ]);
                refs.extend(rs);
            }
            Err(e) => errors.push(ItemError::new("gen-refs", &c.id, None, &e)),
        }
    }
    eprintln!("gen-refs: {} pseudo-reference(s) for {} change(s)", refs.len(), changes.len());
    let mut written = write_reports(cfg, "gen-refs", &[table], &refs)?;
    // a run over the failure limit leaves the previous pseudo-references alone
    settle_errors(cfg, errors, changes.len())?;
    write_artifact(&cfg.pseudorefs, &refs)?;
    written.push(cfg.pseudorefs.clone());
    Ok(written)
}

// ------------------------------------------------------------------ smells

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SmellRecord {
    pub change_id: String,
    pub kind: RefKind,
    #[serde(flatten)]
    pub finding: SmellFinding,
}

pub fn smells(cfg: &RunConfig) -> anyhow::Result<Vec<PathBuf>> {
    let changes = load_changes(cfg)?;
    let unavailable = Mutex::new(HashSet::new());
    let results = par_map(&changes, cfg.max_in_flight, |c| smells_for_change(cfg, c, &unavailable));

    let mut records = Vec::new();
    let mut errors = Vec::new();
    for (c, r) in changes.iter().zip(results) {
        match r {
            Ok(found) => records.extend(found.into_iter().map(|(finding, kind)| SmellRecord {
                change_id: c.id.clone(),
                kind,
                finding,
            })),
            Err(e) => errors.push(ItemError::new("smells", &c.id, None, &e)),
        }
    }
    let mut table = Table::new("Smell findings", &["change_id", "tool", "rule_id", "kind", "lines", "message"]);
    for r in &records {
        table.push(vec![
            r.change_id.clone(),
            r.finding.tool.clone(),
            r.finding.rule_id.clone(),
            serde_json::to_value(r.kind)?.as_str().unwrap_or_default().to_string(),
            format!("{}-{}", r.finding.line_start, r.finding.line_end),
            r.finding.message.clone(),
        ]);
    }
    eprintln!("smells: {} finding(s) in {} change(s)", records.len(), changes.len());
    let written = write_reports(cfg, "smells", &[table], &records)?;
    settle_errors(cfg, errors, changes.len())?;
    Ok(written)
}

// ------------------------------------------------------------------- score

/// Similarity matrices for every review, in (change, system) order, plus
/// the reviews whose matrix could not be built.
fn compute_matrices(
    cfg: &RunConfig,
    command: &str,
    reviews: &[ReviewDoc],
) -> anyhow::Result<(Vec<SimilarityMatrix>, Vec<ItemError>, String)> {
    let prefs = if cfg.pseudorefs.exists() {
        pseudoref::load_pseudorefs(&cfg.pseudorefs)
            .with_context(|| format!("loading pseudo-references from {}", cfg.pseudorefs.display()))?
    } else {
        return Err(crscore::Error::Invalid(format!(
            "pseudo-reference file {} does not exist (run gen-refs first)",
            cfg.pseudorefs.display()
        ))
        .into());
    };
    let embedder = Embedder::from_config(&cfg.provider)?;
    let lex = StopwordLexicon::english();
    let none: Vec<PseudoRef> = Vec::new();
    let results = par_map(reviews, cfg.max_in_flight, |r| {
        let p = prefs.get(&r.change_id).unwrap_or(&none);
        let sents = SentenceSet::build(format!("{}/{}", r.change_id, r.system_id), &r.text, lex);
        metric::similarity_matrix(&r.change_id, &r.system_id, p, &sents, &embedder, lex)
    });
    let mut matrices = Vec::new();
    let mut errors = Vec::new();
    for (r, m) in reviews.iter().zip(results) {
        match m {
            Ok(m) => matrices.push(m),
            Err(e) => errors.push(ItemError::new(command, &r.change_id, Some(&r.system_id), &e)),
        }
    }
    Ok((matrices, errors, embedder.tag().to_string()))
}

fn calibrate_on(cfg: &RunConfig, matrices: &[SimilarityMatrix], tag: &str) -> anyhow::Result<metric::Calibration> {
    let excluded = cfg.excluded_systems();
    let pool: Vec<SimilarityMatrix> = matrices
        .iter()
        .filter(|m| !excluded.contains(&m.system_id))
        .cloned()
        .collect();
    Ok(metric::calibrate_threshold(&pool, tag)?)
}

fn resolve_threshold(cfg: &RunConfig, matrices: &[SimilarityMatrix], tag: &str) -> anyhow::Result<ThresholdConfig> {
    match cfg.threshold.resolve() {
        Some(t) => Ok(t?),
        None => Ok(calibrate_on(cfg, matrices, tag)?.threshold),
    }
}

pub fn score(cfg: &RunConfig) -> anyhow::Result<Vec<PathBuf>> {
    let changes = load_changes(cfg)?;
    let reviews = load_reviews(cfg, Some(&changes))?;
    let (matrices, errors, tag) = compute_matrices(cfg, "score", &reviews)?;
    let th = resolve_threshold(cfg, &matrices, &tag)?;

    let records: Vec<ScoreRecord> = matrices
        .iter()
        .map(|m| ScoreRecord::new(m, &th, &metric::score(m, &th), &tag))
        .collect();

    let mut table = Table::new(
        "Scores",
        &["change_id", "system_id", "con", "comp", "rel", "n_prefs", "n_sents", "tau", "provider_tag", "flags"],
    );
    for r in &records {
        table.push(vec![
            r.change_id.clone(),
            r.system_id.clone(),
            num(r.con),
            num(r.comp),
            num(r.rel),
            r.n_prefs.to_string(),
            r.n_sents.to_string(),
            num(r.tau),
            r.provider_tag.clone(),
            r.flags.iter().map(flag_name).collect::<Vec<_>>().join(";"),
        ]);
    }
    let mut summary = Table::new("System means", &["system_id", "n", "con", "comp", "rel", "tau", "threshold"]);
    let mut by_system: BTreeMap<&str, Vec<&ScoreRecord>> = BTreeMap::new();
    for r in records.iter().filter(|r| !r.flags.contains(&DegenerateFlag::EmptyPrefs)) {
        by_system.entry(&r.system_id).or_default().push(r);
    }
    for (sys, rs) in by_system {
        let mean = |f: fn(&ScoreRecord) -> f64| rs.iter().map(|r| f(r)).sum::<f64>() / rs.len() as f64;
        summary.push(vec![
            sys.to_string(),
            rs.len().to_string(),
            num4(mean(|r| r.con)),
            num4(mean(|r| r.comp)),
            num4(mean(|r| r.rel)),
            num(th.tau),
            th.provenance.to_string(),
        ]);
    }
    eprintln!(
        "score: {} review(s) scored at tau={} ({}) with {tag}",
        records.len(),
        th.tau,
        th.provenance
    );
    write_artifact(&cfg.scores, &records)?;
    let mut written = write_reports(cfg, "score", &[table, summary], &records)?;
    written.push(cfg.scores.clone());
    settle_errors(cfg, errors, reviews.len())?;
    Ok(written)
}

fn flag_name(f: &DegenerateFlag) -> String {
    serde_json::to_value(f)
        .ok()
        .and_then(|v| v.as_str().map(str::to_string))
        .unwrap_or_default()
}

// --------------------------------------------------------------- calibrate

#[derive(Debug, Clone, Serialize)]
pub struct CalibrationRecord {
    pub scope: String,
    pub tau: f64,
    pub n_sentences: usize,
    pub skipped_sentences: usize,
    pub provider_tag: String,
}

pub fn calibrate(cfg: &RunConfig) -> anyhow::Result<Vec<PathBuf>> {
    let changes = load_changes(cfg)?;
    let reviews = load_reviews(cfg, Some(&changes))?;
    let (matrices, errors, tag) = compute_matrices(cfg, "calibrate", &reviews)?;

    let mut records = Vec::new();
    let all = calibrate_on(cfg, &matrices, &tag)?;
    records.push(CalibrationRecord {
        scope: "all".into(),
        tau: all.threshold.tau,
        n_sentences: all.n_sentences,
        skipped_sentences: all.skipped_sentences,
        provider_tag: tag.clone(),
    });
    let systems: BTreeSet<&str> = matrices.iter().map(|m| m.system_id.as_str()).collect();
    for sys in systems {
        let pool: Vec<SimilarityMatrix> = matrices.iter().filter(|m| m.system_id == sys).cloned().collect();
        match metric::calibrate_threshold(&pool, &tag) {
            Ok(c) => records.push(CalibrationRecord {
                scope: format!("system:{sys}"),
                tau: c.threshold.tau,
                n_sentences: c.n_sentences,
                skipped_sentences: c.skipped_sentences,
                provider_tag: tag.clone(),
            }),
            Err(e) => log::warn!("cannot calibrate on system `{sys}`: {e}"),
        }
    }
    let mut table = Table::new("Calibrated thresholds", &["scope", "tau", "n_sentences", "skipped_sentences", "provider_tag"]);
    for r in &records {
        table.push(vec![
            r.scope.clone(),
            num(r.tau),
            r.n_sentences.to_string(),
            r.skipped_sentences.to_string(),
            r.provider_tag.clone(),
        ]);
    }
    eprintln!("calibrate: tau = {} over {} sentence(s)", all.threshold.tau, all.n_sentences);
    let written = write_reports(cfg, "calibrate", &[table], &records)?;
    settle_errors(cfg, errors, reviews.len())?;
    Ok(written)
}

// ------------------------------------------------------------ sweep/sts-eval

fn annotated_matrices(
    cfg: &RunConfig,
    command: &str,
) -> anyhow::Result<(Vec<SimilarityMatrix>, Vec<AnnotationRecord>, Vec<ItemError>, usize, String)> {
    let changes = load_changes(cfg)?;
    let excluded = cfg.excluded_systems();
    let mut reviews = load_reviews(cfg, Some(&changes))?;
    reviews.retain(|r| !excluded.contains(&r.system_id));
    let anns = load_annotations(cfg)?;
    let (matrices, errors, tag) = compute_matrices(cfg, command, &reviews)?;
    Ok((matrices, anns, errors, reviews.len(), tag))
}

#[derive(Debug, Clone, Serialize)]
pub struct SweepRecord {
    pub tau: f64,
    pub n: usize,
    pub kendall: f64,
    pub kendall_p: f64,
    pub spearman: f64,
    pub spearman_p: f64,
}

pub fn sweep(cfg: &RunConfig) -> anyhow::Result<Vec<PathBuf>> {
    let (matrices, anns, errors, total, _) = annotated_matrices(cfg, "sweep")?;
    let rows = metric::threshold_sweep(&matrices, &anns, &cfg.sweep_grid)?;
    let records: Vec<SweepRecord> = rows
        .iter()
        .map(|r| SweepRecord {
            tau: r.tau,
            n: r.spearman.n,
            kendall: r.kendall.coefficient,
            kendall_p: r.kendall.p_value,
            spearman: r.spearman.coefficient,
            spearman_p: r.spearman.p_value,
        })
        .collect();
    let mut table = Table::new(
        "Rel vs human relevance across thresholds",
        &["tau", "n", "kendall", "kendall_p", "spearman", "spearman_p"],
    );
    for r in &records {
        table.push(vec![
            num4(r.tau),
            r.n.to_string(),
            num(r.kendall),
            num(r.kendall_p),
            num(r.spearman),
            num(r.spearman_p),
        ]);
    }
    let written = write_reports(cfg, "sweep", &[table], &records)?;
    settle_errors(cfg, errors, total)?;
    Ok(written)
}

#[derive(Debug, Clone, Serialize)]
pub struct StsRecord {
    pub tau: f64,
    pub n_pairs: usize,
    #[serde(flatten)]
    pub pr: metric::PrecisionRecall,
}

pub fn sts_eval(cfg: &RunConfig) -> anyhow::Result<Vec<PathBuf>> {
    let (matrices, anns, errors, total, tag) = annotated_matrices(cfg, "sts-eval")?;
    let th = resolve_threshold(cfg, &matrices, &tag)?;
    let pairs: Vec<(f64, bool)> = metric::align(&matrices, &anns)?
        .into_iter()
        .flat_map(|(m, a)| metric::sts_pairs(m, a))
        .collect();
    let pr = metric::sts_classifier_eval(&pairs, th.tau)?;
    let record = StsRecord {
        tau: th.tau,
        n_pairs: pairs.len(),
        pr,
    };
    let mut table = Table::new(
        "Similarity classifier vs human coverage links",
        &["tau", "n_pairs", "precision", "recall", "f1", "tp", "fp", "fn"],
    );
    table.push(vec![
        num(record.tau),
        record.n_pairs.to_string(),
        num(pr.precision),
        num(pr.recall),
        num(pr.f1),
        pr.tp.to_string(),
        pr.fp.to_string(),
        pr.fn_.to_string(),
    ]);
    let written = write_reports(cfg, "sts-eval", &[table], &[record])?;
    settle_errors(cfg, errors, total)?;
    Ok(written)
}

// --------------------------------------------------------------- baselines

pub fn baselines(cfg: &RunConfig) -> anyhow::Result<Vec<PathBuf>> {
    let changes = load_changes(cfg)?;
    let reviews = load_reviews(cfg, Some(&changes))?;
    let by_id: HashMap<&str, &CodeChange> = changes.iter().map(|c| (c.id.as_str(), c)).collect();
    let gt = cfg.ground_truth_system.as_str();
    let references: HashMap<&str, &str> = reviews
        .iter()
        .filter(|r| r.system_id == gt)
        .map(|r| (r.change_id.as_str(), r.text.as_str()))
        .collect();
    let opts = BaselineOptions {
        bleu_smoothing: cfg.bleu_smoothing,
        char_edit_distance: cfg.char_edit_distance,
    };

    let mut records: Vec<BaselineScore> = Vec::new();
    let mut errors = Vec::new();
    let mut total = 0;
    for r in reviews.iter().filter(|r| r.system_id != gt) {
        total += 1;
        match references.get(r.change_id.as_str()) {
            Some(reference) => {
                records.extend(baselines::reference_scores(&r.change_id, &r.system_id, &r.text, reference, &opts))
            }
            None => errors.push(ItemError::new(
                "baselines",
                &r.change_id,
                Some(&r.system_id),
                &crscore::Error::Invalid(format!("no `{gt}` review to use as reference")),
            )),
        }
    }

    if cfg.laaj {
        let client = llm_client(cfg)?;
        total += reviews.len();
        let results = par_map(&reviews, cfg.max_in_flight, |r| {
            let change = by_id[r.change_id.as_str()];
            baselines::laaj_score(change, &r.text, &client).and_then(|v| baselines::laaj_record(change, &r.system_id, v))
        });
        for (r, res) in reviews.iter().zip(results) {
            match res {
                Ok(rec) => records.push(rec),
                Err(e) => errors.push(ItemError::new("baselines", &r.change_id, Some(&r.system_id), &e)),
            }
        }
    }
    records.sort_by(|a, b| {
        (&a.change_id, &a.system_id, &a.metric_id).cmp(&(&b.change_id, &b.system_id, &b.metric_id))
    });

    let mut table = Table::new("Baseline scores", &["change_id", "system_id", "metric_id", "value", "raw", "flags"]);
    for r in &records {
        table.push(vec![
            r.change_id.clone(),
            r.system_id.clone(),
            r.metric_id.clone(),
            num(r.value),
            r.raw.map(|v| v.to_string()).unwrap_or_default(),
            r.flags.join(";"),
        ]);
    }
    let mut means: BTreeMap<(&str, &str), (f64, usize)> = BTreeMap::new();
    for r in &records {
        let e = means.entry((&r.metric_id, &r.system_id)).or_default();
        e.0 += r.value;
        e.1 += 1;
    }
    let mut summary = Table::new("Baseline means", &["metric_id", "direction", "system_id", "n", "mean"]);
    for ((m, s), (sum, n)) in means {
        summary.push(vec![m.into(), direction(m).into(), s.into(), n.to_string(), num4(sum / n as f64)]);
    }
    eprintln!("baselines: {} score(s)", records.len());
    write_artifact(&cfg.baselines, &records)?;
    let mut written = write_reports(cfg, "baselines", &[table, summary], &records)?;
    written.push(cfg.baselines.clone());
    settle_errors(cfg, errors, total)?;
    Ok(written)
}

// -------------------------------------------------- correlate / rank / report

/// Per-review metric values keyed by metric id, then (change, system).
type MetricValues = BTreeMap<String, BTreeMap<(String, String), f64>>;

struct Joined {
    /// CRScore dimensions then baseline metrics, in report order.
    metric_order: Vec<String>,
    values: MetricValues,
    /// Reviews scored but flagged with no pseudo-references.
    no_prefs: HashSet<(String, String)>,
    scored: HashSet<(String, String)>,
}

fn join_metrics(cfg: &RunConfig) -> anyhow::Result<Joined> {
    if !cfg.scores.exists() {
        return Err(crscore::Error::Invalid(format!(
            "score file {} does not exist (run score first)",
            cfg.scores.display()
        ))
        .into());
    }
    let scores: Vec<ScoreRecord> = load_jsonl(&cfg.scores, "scores")?;
    let mut values: MetricValues = BTreeMap::new();
    let mut no_prefs = HashSet::new();
    let mut scored = HashSet::new();
    for s in &scores {
        let key = (s.change_id.clone(), s.system_id.clone());
        scored.insert(key.clone());
        if s.flags.contains(&DegenerateFlag::EmptyPrefs) {
            no_prefs.insert(key);
            continue;
        }
        for (m, v) in [("con", s.con), ("comp", s.comp), ("rel", s.rel)] {
            values.entry(m.into()).or_default().insert(key.clone(), v);
        }
    }
    let mut metric_order: Vec<String> = DIMENSIONS.iter().map(|d| d.to_string()).collect();
    if cfg.baselines.exists() {
        let bl: Vec<BaselineScore> = load_jsonl(&cfg.baselines, "baselines")?;
        for b in bl {
            if !values.contains_key(&b.metric_id) {
                metric_order.push(b.metric_id.clone());
            }
            values
                .entry(b.metric_id.clone())
                .or_default()
                .insert((b.change_id, b.system_id), b.value);
        }
    }
    Ok(Joined {
        metric_order,
        values,
        no_prefs,
        scored,
    })
}

fn human_value(a: &AnnotationRecord, dim: &str) -> crscore::Result<f64> {
    evalstats::normalize_likert(match dim {
        "con" => a.con,
        "comp" => a.comp,
        _ => a.rel,
    })
}

#[derive(Debug, Clone, Serialize)]
pub struct CorrelationRecord {
    pub metric_id: String,
    pub dimension: String,
    pub direction: &'static str,
    pub n: usize,
    pub spearman: f64,
    pub spearman_p: f64,
    pub kendall: f64,
    pub kendall_p: f64,
}

impl CorrelationRecord {
    fn new(metric_id: &str, dimension: &str, s: &CorrelationResult, k: &CorrelationResult) -> Self {
        CorrelationRecord {
            metric_id: metric_id.into(),
            dimension: dimension.into(),
            direction: direction(metric_id),
            n: s.n,
            spearman: s.coefficient,
            spearman_p: s.p_value,
            kendall: k.coefficient,
            kendall_p: k.p_value,
        }
    }

    fn row(&self) -> Vec<String> {
        vec![
            self.metric_id.clone(),
            self.dimension.clone(),
            self.direction.into(),
            self.n.to_string(),
            num(self.spearman),
            num(self.spearman_p),
            num(self.kendall),
            num(self.kendall_p),
        ]
    }
}

const CORR_HEADERS: [&str; 8] = ["metric_id", "dimension", "direction", "n", "spearman", "spearman_p", "kendall", "kendall_p"];

/// Instance-level correlations of every metric with every human dimension.
fn instance_correlations(joined: &Joined, anns: &[AnnotationRecord]) -> anyhow::Result<Vec<CorrelationRecord>> {
    let missing: Vec<String> = anns
        .iter()
        .filter(|a| !joined.scored.contains(&(a.change_id.clone(), a.system_id.clone())))
        .map(|a| format!("{}/{}", a.change_id, a.system_id))
        .collect();
    if !missing.is_empty() {
        return Err(crscore::Error::Alignment(missing).into());
    }
    let mut out = Vec::new();
    for metric_id in &joined.metric_order {
        let vals = &joined.values[metric_id];
        for dim in DIMENSIONS {
            let mut xs = Vec::new();
            let mut ys = Vec::new();
            for a in anns {
                let key = (a.change_id.clone(), a.system_id.clone());
                if joined.no_prefs.contains(&key) {
                    continue;
                }
                if let Some(v) = vals.get(&key) {
                    xs.push(*v);
                    ys.push(human_value(a, dim)?);
                }
            }
            if xs.len() < 2 {
                log::warn!("{metric_id} vs human {dim}: fewer than 2 aligned reviews");
                continue;
            }
            let s = evalstats::spearman(&xs, &ys)?;
            let k = evalstats::kendall(&xs, &ys)?;
            out.push(CorrelationRecord::new(metric_id, dim, &s, &k));
        }
    }
    Ok(out)
}

pub fn correlate(cfg: &RunConfig) -> anyhow::Result<Vec<PathBuf>> {
    let joined = join_metrics(cfg)?;
    let anns = load_annotations(cfg)?;
    let records = instance_correlations(&joined, &anns)?;
    let mut table = Table::new("Instance-level correlation with human ratings", &CORR_HEADERS);
    for r in &records {
        table.push(r.row());
    }
    write_reports(cfg, "correlate", &[table], &records)
}

#[derive(Debug, Clone, Serialize)]
pub struct RankRecord {
    pub metric_id: String,
    pub rank: usize,
    pub system_id: String,
    pub mean: f64,
}

fn metric_rankings(cfg: &RunConfig, joined: &Joined) -> anyhow::Result<Vec<(String, Vec<(String, f64)>)>> {
    let excluded = cfg.excluded_systems();
    let mut out = Vec::new();
    for metric_id in &joined.metric_order {
        let mut by_sys: BTreeMap<String, Vec<f64>> = BTreeMap::new();
        for ((_, sys), v) in &joined.values[metric_id] {
            by_sys.entry(sys.clone()).or_default().push(*v);
        }
        by_sys.retain(|s, _| !excluded.contains(s));
        if by_sys.is_empty() {
            continue;
        }
        let mut ranking = evalstats::system_ranking(&by_sys, &excluded)?;
        if LOWER_IS_BETTER.contains(&metric_id.as_str()) {
            ranking.sort_by(|a, b| a.1.total_cmp(&b.1).then_with(|| a.0.cmp(&b.0)));
        }
        out.push((metric_id.clone(), ranking));
    }
    Ok(out)
}

fn human_rankings(anns: &[AnnotationRecord]) -> anyhow::Result<Vec<(String, Vec<(String, f64)>)>> {
    let mut out = Vec::new();
    for dim in DIMENSIONS {
        let mut by_sys: BTreeMap<String, Vec<f64>> = BTreeMap::new();
        for a in anns {
            by_sys.entry(a.system_id.clone()).or_default().push(human_value(a, dim)?);
        }
        out.push((format!("human_{dim}"), evalstats::system_ranking(&by_sys, &[])?));
    }
    Ok(out)
}

/// Correlation between each metric's system ranking and the human ranking
/// for each dimension. Lower-is-better metrics are negated first so a
/// positive value always means agreement.
fn ranking_correlations(
    metric: &[(String, Vec<(String, f64)>)],
    human: &[(String, Vec<(String, f64)>)],
) -> anyhow::Result<Vec<CorrelationRecord>> {
    let mut out = Vec::new();
    for (metric_id, ranking) in metric {
        let signed: Vec<(String, f64)> = if LOWER_IS_BETTER.contains(&metric_id.as_str()) {
            ranking.iter().map(|(s, v)| (s.clone(), -v)).collect()
        } else {
            ranking.clone()
        };
        for (hname, hr) in human {
            if signed.len() < 2 {
                continue;
            }
            let (s, k) = evalstats::ranking_correlation(&signed, hr)
                .map_err(|e| e.context(format!("ranking of `{metric_id}` vs {hname}")))?;
            out.push(CorrelationRecord::new(metric_id, hname.trim_start_matches("human_"), &s, &k));
        }
    }
    Ok(out)
}

pub fn rank(cfg: &RunConfig) -> anyhow::Result<Vec<PathBuf>> {
    let joined = join_metrics(cfg)?;
    let rankings = metric_rankings(cfg, &joined)?;
    let mut all = rankings.clone();
    let mut corr = Vec::new();
    if cfg.annotations.is_some() {
        let anns = load_annotations(cfg)?;
        let human = human_rankings(&anns)?;
        corr = ranking_correlations(&rankings, &human)?;
        all.extend(human);
    }
    let mut records = Vec::new();
    let mut table = Table::new("System rankings", &["metric_id", "rank", "system_id", "mean"]);
    for (metric_id, ranking) in &all {
        for (i, (sys, mean)) in ranking.iter().enumerate() {
            table.push(vec![metric_id.clone(), (i + 1).to_string(), sys.clone(), num(*mean)]);
            records.push(RankRecord {
                metric_id: metric_id.clone(),
                rank: i + 1,
                system_id: sys.clone(),
                mean: *mean,
            });
        }
    }
    let mut ctable = Table::new("Ranking correlation with human rankings", &CORR_HEADERS);
    for r in &corr {
        ctable.push(r.row());
    }
    write_reports(cfg, "rank", &[table, ctable], &records)
}

pub fn report(cfg: &RunConfig) -> anyhow::Result<Vec<PathBuf>> {
    let joined = join_metrics(cfg)?;
    let anns = match &cfg.annotations {
        Some(_) => Some(load_annotations(cfg)?),
        None => None,
    };
    let excluded = cfg.excluded_systems();

    // system means, every system (excluded ones marked)
    let mut systems: BTreeSet<String> = BTreeSet::new();
    for vals in joined.values.values() {
        systems.extend(vals.keys().map(|(_, s)| s.clone()));
    }
    let mut headers: Vec<String> = vec!["system_id".into(), "in_correlations".into()];
    if anns.is_some() {
        headers.extend(DIMENSIONS.iter().map(|d| format!("human_{d}")));
    }
    headers.extend(joined.metric_order.iter().map(|m| {
        if LOWER_IS_BETTER.contains(&m.as_str()) {
            format!("{m} (lower is better)")
        } else {
            m.clone()
        }
    }));
    let header_refs: Vec<&str> = headers.iter().map(String::as_str).collect();
    let mut means = Table::new("System means", &header_refs);
    let mut records = Vec::new();
    for sys in &systems {
        let mut row = vec![sys.clone(), (!excluded.contains(sys)).to_string()];
        let mut rec = serde_json::Map::new();
        rec.insert("system_id".into(), sys.clone().into());
        if let Some(anns) = &anns {
            for dim in DIMENSIONS {
                let vs: Vec<f64> = anns
                    .iter()
                    .filter(|a| &a.system_id == sys)
                    .map(|a| human_value(a, dim))
                    .collect::<crscore::Result<_>>()?;
                let m = if vs.is_empty() { f64::NAN } else { vs.iter().sum::<f64>() / vs.len() as f64 };
                row.push(num4(m));
                rec.insert(format!("human_{dim}"), serde_json::json!(if m.is_nan() { None } else { Some(m) }));
            }
        }
        for metric_id in &joined.metric_order {
            let vs: Vec<f64> = joined.values[metric_id]
                .iter()
                .filter(|((_, s), _)| s == sys)
                .map(|(_, v)| *v)
                .collect();
            let m = if vs.is_empty() { f64::NAN } else { vs.iter().sum::<f64>() / vs.len() as f64 };
            row.push(num4(m));
            rec.insert(metric_id.clone(), serde_json::json!(if m.is_nan() { None } else { Some(m) }));
        }
        means.push(row);
        records.push(serde_json::Value::Object(rec));
    }

    let mut tables = vec![means];
    if let Some(anns) = &anns {
        let rankings = metric_rankings(cfg, &joined)?;
        let human = human_rankings(anns)?;
        let mut rank_table = Table::new("Ranking correlation with human rankings", &CORR_HEADERS);
        for r in ranking_correlations(&rankings, &human)? {
            rank_table.push(r.row());
        }
        rank_table.push(not_implemented_row());
        let mut inst_table = Table::new("Instance-level correlation with human ratings", &CORR_HEADERS);
        for r in instance_correlations(&joined, anns)? {
            inst_table.push(r.row());
        }
        inst_table.push(not_implemented_row());
        tables.push(rank_table);
        tables.push(inst_table);
    }
    write_reports(cfg, "report", &tables, &records)
}

fn not_implemented_row() -> Vec<String> {
    let mut row = vec!["bertscore".to_string()];
    row.extend(std::iter::repeat_n("not implemented".to_string(), CORR_HEADERS.len() - 1));
    row
}
