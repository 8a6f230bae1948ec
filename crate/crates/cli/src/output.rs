//! Report files, the per-item error log and the bounded worker pool.

use std::fs;
use std::path::{Path, PathBuf};
use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::mpsc;
use std::time::{SystemTime, UNIX_EPOCH};

use anyhow::Context;
use serde::Serialize;

use crate::config::{Format, RunConfig};

/// A rectangular report: header plus string cells.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct Table {
    pub title: String,
    pub headers: Vec<String>,
    pub rows: Vec<Vec<String>>,
}

impl Table {
    pub fn new(title: impl Into<String>, headers: &[&str]) -> Self {
        Table {
            title: title.into(),
            headers: headers.iter().map(|h| h.to_string()).collect(),
            rows: Vec::new(),
        }
    }

    pub fn push(&mut self, row: Vec<String>) {
        debug_assert_eq!(row.len(), self.headers.len());
        self.rows.push(row);
    }

    pub fn to_csv(&self) -> anyhow::Result<String> {
        let mut w = csv::Writer::from_writer(Vec::new());
        w.write_record(&self.headers)?;
        for r in &self.rows {
            w.write_record(r)?;
        }
        Ok(String::from_utf8(w.into_inner()?)?)
    }

    pub fn to_markdown(&self) -> String {
        let esc = |s: &str| s.replace('|', "\\|").replace('\n', " ");
        let mut out = String::new();
        if !self.title.is_empty() {
            out.push_str(&format!("## {}\n\n", self.title));
        }
        out.push_str(&format!(
            "| {} |\n",
            self.headers.iter().map(|h| esc(h)).collect::<Vec<_>>().join(" | ")
        ));
        out.push_str(&format!("|{}\n", "---|".repeat(self.headers.len())));
        for r in &self.rows {
            out.push_str(&format!("| {} |\n", r.iter().map(|c| esc(c)).collect::<Vec<_>>().join(" | ")));
        }
        out
    }
}

/// Full-precision cell for CSV; "undefined" for NaN.
pub fn num(v: f64) -> String {
    if v.is_nan() {
        "undefined".into()
    } else {
        format!("{v}")
    }
}

/// Four-decimal cell for Markdown.
pub fn num4(v: f64) -> String {
    if v.is_nan() {
        "undefined".into()
    } else {
        format!("{v:.4}")
    }
}

fn stamp(cfg: &RunConfig) -> String {
    if cfg.timestamped {
        let secs = SystemTime::now().duration_since(UNIX_EPOCH).map(|d| d.as_secs()).unwrap_or(0);
        secs.to_string()
    } else {
        "latest".into()
    }
}

/// `<output_dir>/<command>-<stamp>.<ext>`
pub fn report_path(cfg: &RunConfig, command: &str, ext: &str) -> PathBuf {
    cfg.output_dir.join(format!("{command}-{}.{ext}", stamp(cfg)))
}

fn write_file(path: &Path, contents: &str) -> anyhow::Result<()> {
    if let Some(dir) = path.parent() {
        fs::create_dir_all(dir).with_context(|| format!("creating {}", dir.display()))?;
    }
    fs::write(path, contents).with_context(|| format!("writing {}", path.display()))
}

pub fn jsonl<T: Serialize>(records: &[T]) -> anyhow::Result<String> {
    let mut out = String::new();
    for r in records {
        out.push_str(&serde_json::to_string(r)?);
        out.push('\n');
    }
    Ok(out)
}

fn slug(title: &str) -> String {
    let mut out = String::new();
    for c in title.chars() {
        if c.is_ascii_alphanumeric() {
            out.push(c.to_ascii_lowercase());
        } else if !out.ends_with('-') {
            out.push('-');
        }
    }
    out.trim_matches('-').to_string()
}

/// Write the configured formats for one command. Markdown holds every table
/// in order; the first table is `<command>.csv` and later ones get a slug of
/// their title appended; JSONL holds `records`.
pub fn write_reports<T: Serialize>(
    cfg: &RunConfig,
    command: &str,
    tables: &[Table],
    records: &[T],
) -> anyhow::Result<Vec<PathBuf>> {
    let mut written = Vec::new();
    for f in &cfg.formats {
        let files: Vec<(String, &str, String)> = match f {
            Format::Jsonl => vec![(command.to_string(), "jsonl", jsonl(records)?)],
            Format::Csv => tables
                .iter()
                .enumerate()
                .map(|(i, t)| {
                    let name = if i == 0 { command.to_string() } else { format!("{command}-{}", slug(&t.title)) };
                    Ok((name, "csv", t.to_csv()?))
                })
                .collect::<anyhow::Result<_>>()?,
            Format::Md => vec![(
                command.to_string(),
                "md",
                tables.iter().map(Table::to_markdown).collect::<Vec<_>>().join("\n"),
            )],
        };
        for (name, ext, body) in files {
            let p = report_path(cfg, &name, ext);
            write_file(&p, &body)?;
            written.push(p);
        }
    }
    Ok(written)
}

/// Write a JSONL artifact that later commands read, regardless of the
/// configured report formats.
pub fn write_artifact<T: Serialize>(path: &Path, records: &[T]) -> anyhow::Result<()> {
    write_file(path, &jsonl(records)?)
}

#[derive(Debug, Clone, Serialize)]
pub struct ItemError {
    pub command: String,
    pub change_id: String,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub system_id: Option<String>,
    pub class: &'static str,
    pub message: String,
    #[serde(skip)]
    pub exit_code: i32,
}

impl ItemError {
    pub fn new(command: &str, change_id: &str, system_id: Option<&str>, err: &crscore::Error) -> Self {
        let (class, exit_code) = match err.class() {
            crscore::ErrorClass::Config => ("config", 1),
            crscore::ErrorClass::Data => ("data", 2),
            crscore::ErrorClass::External => ("external", 3),
        };
        ItemError {
            command: command.into(),
            change_id: change_id.into(),
            system_id: system_id.map(str::to_string),
            class,
            message: err.to_string(),
            exit_code,
        }
    }
}

/// Raised when too many items failed; carries the exit code to use.
#[derive(Debug)]
pub struct FailureLimitExceeded {
    pub failed: usize,
    pub total: usize,
    pub limit: f64,
    pub exit_code: i32,
}

impl std::fmt::Display for FailureLimitExceeded {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(
            f,
            "{} of {} items failed, above the failure limit of {:.1}%",
            self.failed,
            self.total,
            self.limit * 100.0
        )
    }
}

impl std::error::Error for FailureLimitExceeded {}

/// Write `errors.jsonl` (always, possibly empty) and fail when the failure
/// ratio is above the configured limit.
pub fn settle_errors(cfg: &RunConfig, mut errors: Vec<ItemError>, total: usize) -> anyhow::Result<()> {
    errors.sort_by(|a, b| (&a.change_id, &a.system_id).cmp(&(&b.change_id, &b.system_id)));
    write_artifact(&cfg.output_dir.join("errors.jsonl"), &errors)?;
    for e in &errors {
        log::warn!("{} {}: {}", e.command, e.change_id, e.message);
    }
    if !errors.is_empty() {
        eprintln!("{} of {total} item(s) failed; see errors.jsonl", errors.len());
    }
    if total > 0 && errors.len() as f64 / total as f64 > cfg.failure_limit {
        let exit_code = errors.iter().map(|e| e.exit_code).max().unwrap_or(2);
        return Err(FailureLimitExceeded {
            failed: errors.len(),
            total,
            limit: cfg.failure_limit,
            exit_code,
        }
        .into());
    }
    Ok(())
}

/// Run `f` over `items` on at most `limit` threads. Results travel over a
/// channel to the calling thread, which is the only writer, and come back in
/// input order.
pub fn par_map<T, R, F>(items: &[T], limit: usize, f: F) -> Vec<R>
where
    T: Sync,
    R: Send,
    F: Fn(&T) -> R + Sync,
{
    let next = AtomicUsize::new(0);
    let (tx, rx) = mpsc::channel::<(usize, R)>();
    let mut slots: Vec<Option<R>> = (0..items.len()).map(|_| None).collect();
    std::thread::scope(|s| {
        for _ in 0..limit.clamp(1, items.len().max(1)) {
            let tx = tx.clone();
            let (next, f) = (&next, &f);
            s.spawn(move || loop {
                let i = next.fetch_add(1, Ordering::SeqCst);
                if i >= items.len() {
                    break;
                }
                if tx.send((i, f(&items[i]))).is_err() {
                    break;
                }
            });
        }
        drop(tx);
        for (i, r) in rx {
            slots[i] = Some(r);
        }
    });
    slots.into_iter().map(|r| r.expect("every item produced a result")).collect()
}
