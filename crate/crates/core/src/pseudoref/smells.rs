//! Static-analyzer adapters. Each tool is described declaratively (argv
//! template, timeout, output parser) and run as a subprocess on before/after
//! snapshots of the changed file in a scratch directory.

use std::collections::{BTreeMap, HashSet};
use std::fmt;
use std::fs;
use std::io::Read;
use std::path::Path;
use std::process::{Command, Stdio};
use std::time::Duration;

use regex::Regex;
use serde::{Deserialize, Serialize};
use wait_timeout::ChildExt;

use super::RefKind;
use crate::corpus::{materialize_before_after, CodeChange, DiffHunk, Language};
use crate::error::{Error, Result};

const PYTHON_SMELLS: &str = include_str!("../../assets/python_smells.py");
const PMD_RULESET: &str = include_str!("../../assets/pmd_ruleset.xml");

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SmellFinding {
    pub tool: String,
    pub rule_id: String,
    pub message: String,
    pub file: String,
    pub line_start: usize,
    pub line_end: usize,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub severity: Option<String>,
}

impl SmellFinding {
    fn intersects(&self, (start, end): (usize, usize)) -> bool {
        self.line_start <= end && start <= self.line_end
    }

    /// One-sentence rendering used as pseudo-reference text.
    pub fn render(&self) -> String {
        format!(
            "{}: {} at lines {}\u{2013}{} of {}",
            self.tool, self.message, self.line_start, self.line_end, self.file
        )
    }
}

/// Radon-style letter grade for a cyclomatic complexity score.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum ComplexityRank {
    A,
    B,
    C,
    D,
    E,
    F,
}

impl ComplexityRank {
    pub fn risk(self) -> &'static str {
        match self {
            ComplexityRank::A => "low - simple block",
            ComplexityRank::B => "low - well structured and stable block",
            ComplexityRank::C => "moderate - slightly complex block",
            ComplexityRank::D => "more than moderate - more complex block",
            ComplexityRank::E => "high - complex block, alarming",
            ComplexityRank::F => "very high - error-prone, unstable block",
        }
    }

    /// Blocks ranked C or worse count as a smell.
    pub fn flagged(self) -> bool {
        self >= ComplexityRank::C
    }
}

impl fmt::Display for ComplexityRank {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{self:?}")
    }
}

pub fn cyclomatic_rank(score: u32) -> Result<ComplexityRank> {
    Ok(match score {
        0 => return Err(Error::Range("cyclomatic complexity must be >= 1".into())),
        1..=5 => ComplexityRank::A,
        6..=10 => ComplexityRank::B,
        11..=20 => ComplexityRank::C,
        21..=30 => ComplexityRank::D,
        31..=40 => ComplexityRank::E,
        _ => ComplexityRank::F,
    })
}

/// How an adapter's stdout is turned into findings.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "kebab-case")]
pub enum OutputParser {
    /// `records` is a JSON pointer to the findings array where a `*` segment
    /// fans out over an array (e.g. `/files/*/violations`); field names pick
    /// values out of each record.
    Json {
        records: String,
        rule: String,
        line: String,
        #[serde(default)]
        end_line: Option<String>,
        message: String,
        #[serde(default)]
        severity: Option<String>,
    },
    /// One finding per matching line; named groups `rule`, `line`, `message`
    /// and optionally `end_line`, `severity`.
    LineRegex { pattern: String },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AnalyzerSpec {
    pub name: String,
    /// Language tags this adapter accepts (`py`, `java`, `js`).
    pub languages: Vec<String>,
    /// Command line; `{file}` is the snapshot path, `{workdir}` the scratch dir.
    pub argv: Vec<String>,
    #[serde(default = "default_timeout")]
    pub timeout_s: u64,
    pub parser: OutputParser,
    #[serde(default = "default_kind")]
    pub kind: RefKind,
    /// Extra files written into the scratch dir before running.
    #[serde(default)]
    pub support_files: BTreeMap<String, String>,
}

fn default_timeout() -> u64 {
    60
}

fn default_kind() -> RefKind {
    RefKind::Issue
}

impl AnalyzerSpec {
    pub fn python_smells() -> Self {
        AnalyzerSpec {
            name: "python-smells".into(),
            languages: vec!["py".into()],
            argv: vec![
                "python3".into(),
                "{workdir}/python_smells.py".into(),
                "{file}".into(),
            ],
            timeout_s: 60,
            parser: OutputParser::Json {
                records: String::new(),
                rule: "rule".into(),
                line: "line".into(),
                end_line: Some("end_line".into()),
                message: "message".into(),
                severity: Some("severity".into()),
            },
            kind: RefKind::Smell,
            support_files: BTreeMap::from([("python_smells.py".into(), PYTHON_SMELLS.into())]),
        }
    }

    pub fn java_pmd() -> Self {
        AnalyzerSpec {
            name: "java-pmd".into(),
            languages: vec!["java".into()],
            argv: [
                "pmd",
                "check",
                "--no-progress",
                "--no-cache",
                "-f",
                "json",
                "-R",
                "{workdir}/crscore-ruleset.xml",
                "-d",
                "{file}",
            ]
            .map(String::from)
            .to_vec(),
            timeout_s: 60,
            parser: OutputParser::Json {
                records: "/files/*/violations".into(),
                rule: "rule".into(),
                line: "beginline".into(),
                end_line: Some("endline".into()),
                message: "description".into(),
                severity: Some("priority".into()),
            },
            kind: RefKind::Issue,
            support_files: BTreeMap::from([("crscore-ruleset.xml".into(), PMD_RULESET.into())]),
        }
    }

    pub fn javascript_jshint() -> Self {
        AnalyzerSpec {
            name: "javascript-jshint".into(),
            languages: vec!["js".into()],
            argv: vec!["jshint".into(), "{file}".into()],
            timeout_s: 60,
            parser: OutputParser::LineRegex {
                pattern: r"^.+?: line (?P<line>\d+), col \d+, (?P<message>.+?) \((?P<rule>[EWI]\d+)\)$"
                    .into(),
            },
            kind: RefKind::Issue,
            support_files: BTreeMap::new(),
        }
    }

    pub fn builtin() -> Vec<AnalyzerSpec> {
        vec![Self::python_smells(), Self::java_pmd(), Self::javascript_jshint()]
    }

    pub fn supports(&self, lang: &Language) -> bool {
        self.languages.iter().any(|l| Language::from_tag(l) == *lang)
    }

    /// Run the tool on one file. A nonzero exit status is accepted as long as
    /// the output parses.
    pub fn run_on_file(&self, workdir: &Path, file: &Path) -> Result<Vec<SmellFinding>> {
        for (name, content) in &self.support_files {
            fs::write(workdir.join(name), content)?;
        }
        let subst = |a: &String| {
            a.replace("{file}", &file.to_string_lossy())
                .replace("{workdir}", &workdir.to_string_lossy())
        };
        let argv: Vec<String> = self.argv.iter().map(subst).collect();
        let (program, args) = argv
            .split_first()
            .ok_or_else(|| Error::Invalid(format!("analyzer `{}` has an empty argv", self.name)))?;

        let mut child = Command::new(program)
            .args(args)
            .current_dir(workdir)
            .stdin(Stdio::null())
            .stdout(Stdio::piped())
            .stderr(Stdio::piped())
            .spawn()
            .map_err(|e| match e.kind() {
                std::io::ErrorKind::NotFound | std::io::ErrorKind::PermissionDenied => {
                    Error::AnalyzerUnavailable(format!("{} ({program})", self.name))
                }
                _ => Error::Io(e),
            })?;

        let mut stdout = child.stdout.take().expect("piped stdout");
        let mut stderr = child.stderr.take().expect("piped stderr");
        let out_reader = std::thread::spawn(move || {
            let mut buf = Vec::new();
            let _ = stdout.read_to_end(&mut buf);
            buf
        });
        let err_reader = std::thread::spawn(move || {
            let mut buf = Vec::new();
            let _ = stderr.read_to_end(&mut buf);
            buf
        });

        let status = match child.wait_timeout(Duration::from_secs(self.timeout_s))? {
            Some(s) => s,
            None => {
                let _ = child.kill();
                let _ = child.wait();
                return Err(Error::AnalyzerTimeout {
                    tool: self.name.clone(),
                    secs: self.timeout_s,
                });
            }
        };
        let stdout = String::from_utf8_lossy(&out_reader.join().unwrap_or_default()).into_owned();
        let stderr = String::from_utf8_lossy(&err_reader.join().unwrap_or_default()).into_owned();

        match self.parse_output(&stdout, &file.to_string_lossy()) {
            Ok(findings) if status.success() || !findings.is_empty() => Ok(findings),
            Ok(_) => Err(Error::Analyzer {
                tool: self.name.clone(),
                message: format!("exit status {status} without findings: {}", stderr.trim()),
            }),
            Err(e) if status.success() => Err(e),
            Err(_) => Err(Error::Analyzer {
                tool: self.name.clone(),
                message: format!("exit status {status}: {}", stderr.trim()),
            }),
        }
    }

    pub fn parse_output(&self, stdout: &str, file: &str) -> Result<Vec<SmellFinding>> {
        match &self.parser {
            OutputParser::Json {
                records,
                rule,
                line,
                end_line,
                message,
                severity,
            } => {
                if stdout.trim().is_empty() {
                    return Ok(Vec::new());
                }
                let root: serde_json::Value = serde_json::from_str(stdout).map_err(|e| Error::Analyzer {
                    tool: self.name.clone(),
                    message: format!("unparseable JSON output: {e}"),
                })?;
                let mut out = Vec::new();
                for rec in select(&root, records) {
                    let items: Vec<&serde_json::Value> = match rec {
                        serde_json::Value::Array(a) => a.iter().collect(),
                        other => vec![other],
                    };
                    for item in items {
                        out.push(self.json_record(item, rule, line, end_line.as_deref(), message, severity.as_deref(), file)?);
                    }
                }
                Ok(out)
            }
            OutputParser::LineRegex { pattern } => {
                let re = Regex::new(pattern).map_err(|e| Error::Invalid(format!("analyzer `{}`: {e}", self.name)))?;
                let mut out = Vec::new();
                for l in stdout.lines() {
                    let Some(c) = re.captures(l) else { continue };
                    let num = |g: &str| c.name(g).and_then(|m| m.as_str().parse::<usize>().ok());
                    let line_start = num("line").ok_or_else(|| Error::Analyzer {
                        tool: self.name.clone(),
                        message: format!("no line number in `{l}`"),
                    })?;
                    let finding = SmellFinding {
                        tool: self.name.clone(),
                        rule_id: c.name("rule").map_or("", |m| m.as_str()).to_string(),
                        message: c.name("message").map_or("", |m| m.as_str()).trim().to_string(),
                        file: file.to_string(),
                        line_start,
                        line_end: num("end_line").unwrap_or(line_start).max(line_start),
                        severity: c.name("severity").map(|m| m.as_str().to_string()),
                    };
                    validate(&finding, &self.name)?;
                    out.push(finding);
                }
                Ok(out)
            }
        }
    }

    #[allow(clippy::too_many_arguments)]
    fn json_record(
        &self,
        item: &serde_json::Value,
        rule: &str,
        line: &str,
        end_line: Option<&str>,
        message: &str,
        severity: Option<&str>,
        file: &str,
    ) -> Result<SmellFinding> {
        let as_text = |v: &serde_json::Value| match v {
            serde_json::Value::String(s) => Some(s.clone()),
            serde_json::Value::Null => None,
            other => Some(other.to_string()),
        };
        let line_start = item.get(line).and_then(|v| v.as_u64()).ok_or_else(|| Error::Analyzer {
            tool: self.name.clone(),
            message: format!("record without numeric `{line}`: {item}"),
        })? as usize;
        let line_end = end_line
            .and_then(|k| item.get(k))
            .and_then(|v| v.as_u64())
            .map_or(line_start, |v| v as usize);
        let finding = SmellFinding {
            tool: self.name.clone(),
            rule_id: item.get(rule).and_then(as_text).unwrap_or_default(),
            message: item.get(message).and_then(as_text).unwrap_or_default().trim().to_string(),
            file: file.to_string(),
            line_start,
            line_end,
            severity: severity.and_then(|k| item.get(k)).and_then(as_text),
        };
        validate(&finding, &self.name)?;
        Ok(finding)
    }
}

fn validate(f: &SmellFinding, tool: &str) -> Result<()> {
    if f.rule_id.is_empty() {
        return Err(Error::Analyzer {
            tool: tool.to_string(),
            message: "finding without a rule id".into(),
        });
    }
    if f.line_start > f.line_end {
        return Err(Error::Analyzer {
            tool: tool.to_string(),
            message: format!("finding with line range {}..{}", f.line_start, f.line_end),
        });
    }
    Ok(())
}

/// Resolve a JSON pointer where `*` segments fan out over arrays.
fn select<'a>(root: &'a serde_json::Value, pointer: &str) -> Vec<&'a serde_json::Value> {
    let mut current = vec![root];
    for seg in pointer.split('/').filter(|s| !s.is_empty()) {
        let mut next = Vec::new();
        for v in current {
            if seg == "*" {
                if let Some(a) = v.as_array() {
                    next.extend(a.iter());
                }
            } else if let Some(child) = v.pointer(&format!("/{seg}")) {
                next.push(child);
            }
        }
        current = next;
    }
    current
}

/// Whether findings are localized to the changed region or reported for the
/// whole after-file.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum SmellScope {
    #[default]
    ChangedRegion,
    WholeFile,
}

/// Keep after-findings that are new (by rule and message) or that touch an
/// added region of the diff.
pub fn smell_delta(before: &[SmellFinding], after: &[SmellFinding], hunks: &[DiffHunk]) -> Vec<SmellFinding> {
    let old: HashSet<(&str, &str)> = before
        .iter()
        .map(|f| (f.rule_id.as_str(), f.message.as_str()))
        .collect();
    let added: Vec<(usize, usize)> = hunks.iter().flat_map(|h| h.added_ranges()).collect();
    after
        .iter()
        .filter(|f| {
            !old.contains(&(f.rule_id.as_str(), f.message.as_str()))
                || added.iter().any(|&r| f.intersects(r))
        })
        .cloned()
        .collect()
}

/// Run `spec` on the before and after versions of `change`.
pub fn detect_smells(change: &CodeChange, spec: &AnalyzerSpec, scope: SmellScope) -> Result<Vec<SmellFinding>> {
    if !spec.supports(&change.language) {
        return Err(Error::Invalid(format!(
            "analyzer `{}` does not support language `{}`",
            spec.name, change.language
        )));
    }
    let (before, after) = materialize_before_after(change)?;
    let logical = change.file_path();
    let basename = Path::new(&logical)
        .file_name()
        .map(|n| n.to_string_lossy().into_owned())
        .unwrap_or_else(|| format!("snapshot.{}", change.language.file_extension()));

    let workdir = tempfile::tempdir()?;
    let run = |label: &str, text: &str| -> Result<Vec<SmellFinding>> {
        let dir = workdir.path().join(label);
        fs::create_dir_all(&dir)?;
        let file = dir.join(&basename);
        fs::write(&file, text)?;
        let mut found = spec.run_on_file(workdir.path(), &file)?;
        for f in &mut found {
            f.file = logical.clone();
        }
        Ok(found)
    };

    let after_findings = run("after", &after)?;
    match scope {
        SmellScope::WholeFile => Ok(after_findings),
        SmellScope::ChangedRegion => {
            let before_findings = if before.is_empty() { Vec::new() } else { run("before", &before)? };
            Ok(smell_delta(&before_findings, &after_findings, &change.hunks))
        }
    }
}
