//! On-disk data contracts: code changes, reviews, pseudo-references and
//! human annotations, all stored as JSONL (one UTF-8 record per line).

pub mod diff;

use std::collections::{BTreeMap, HashSet};
use std::fmt;
use std::fs;
use std::path::Path;

use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
pub use diff::{apply_hunks, parse_unified_diff, render_hunks, DiffHunk, DiffLine, LineKind};

#[derive(Debug, Clone, PartialEq, Eq, Hash)]
pub enum Language {
    Python,
    Java,
    JavaScript,
    Other(String),
}

impl Language {
    pub fn from_tag(tag: &str) -> Self {
        let t = tag.trim().to_lowercase();
        match t.as_str() {
            "py" | "python" => Language::Python,
            "java" => Language::Java,
            "js" | "javascript" => Language::JavaScript,
            _ => Language::Other(t),
        }
    }

    pub fn tag(&self) -> &str {
        match self {
            Language::Python => "py",
            Language::Java => "java",
            Language::JavaScript => "js",
            Language::Other(t) => t,
        }
    }

    /// Display name used in prompts.
    pub fn display_name(&self) -> &str {
        match self {
            Language::Python => "Python",
            Language::Java => "Java",
            Language::JavaScript => "Javascript",
            Language::Other(t) => t,
        }
    }

    pub fn file_extension(&self) -> &str {
        match self {
            Language::Python => "py",
            Language::Java => "java",
            Language::JavaScript => "js",
            Language::Other(t) => t,
        }
    }
}

impl fmt::Display for Language {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.tag())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct CodeChange {
    pub id: String,
    pub language: Language,
    pub diff_text: String,
    pub hunks: Vec<DiffHunk>,
    pub before_text: Option<String>,
    pub after_text: Option<String>,
    pub meta: BTreeMap<String, String>,
}

impl CodeChange {
    pub fn new(id: impl Into<String>, language: Language, diff_text: impl Into<String>) -> Result<Self> {
        let id = id.into();
        let diff_text = diff_text.into();
        let hunks = parse_unified_diff(&diff_text).map_err(|e| e.context(format!("change `{id}`")))?;
        Ok(CodeChange {
            id,
            language,
            diff_text,
            hunks,
            before_text: None,
            after_text: None,
            meta: BTreeMap::new(),
        })
    }

    /// Path of the changed file, falling back to a name derived from the id.
    pub fn file_path(&self) -> String {
        self.meta
            .get("path")
            .cloned()
            .unwrap_or_else(|| format!("{}.{}", sanitize(&self.id), self.language.file_extension()))
    }
}

fn sanitize(s: &str) -> String {
    s.chars()
        .map(|c| if c.is_ascii_alphanumeric() || c == '-' || c == '_' { c } else { '_' })
        .collect()
}

/// Reconstruct full before/after file texts for a change.
pub fn materialize_before_after(change: &CodeChange) -> Result<(String, String)> {
    let before = match &change.before_text {
        Some(b) => b.clone(),
        None if diff::is_full_file(&change.hunks) => String::new(),
        None => return Err(Error::CannotMaterialize(change.id.clone())),
    };
    let after = apply_hunks(&before, &change.hunks)
        .map_err(|e| e.context(format!("change `{}`", change.id)))?;
    Ok((before, after))
}

#[derive(Debug, Deserialize)]
struct RawChange {
    id: String,
    lang: String,
    patch: String,
    #[serde(default)]
    oldf: Option<String>,
    #[serde(default)]
    newf: Option<String>,
    #[serde(default)]
    meta: BTreeMap<String, String>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ReviewDoc {
    pub change_id: String,
    pub system_id: String,
    pub text: String,
}

impl ReviewDoc {
    pub fn is_empty(&self) -> bool {
        self.text.trim().is_empty()
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct AnnotationRecord {
    pub change_id: String,
    pub system_id: String,
    pub con: u8,
    pub comp: u8,
    pub rel: u8,
    #[serde(default)]
    pub covered_ref_ids: Vec<String>,
    #[serde(default)]
    pub unnecessary_ref_ids: Vec<String>,
}

impl AnnotationRecord {
    fn validate(&self) -> std::result::Result<(), String> {
        for (name, v) in [("con", self.con), ("comp", self.comp), ("rel", self.rel)] {
            if !(1..=5).contains(&v) {
                return Err(format!("{name}={v} outside the 1-5 Likert range"));
            }
        }
        let covered: HashSet<&String> = self.covered_ref_ids.iter().collect();
        if let Some(both) = self.unnecessary_ref_ids.iter().find(|id| covered.contains(id)) {
            return Err(format!("ref `{both}` is both covered and unnecessary"));
        }
        Ok(())
    }
}

/// Read a JSONL file, handing each non-blank line to `f` with its 1-based
/// line number.
pub fn read_jsonl<T, F>(path: &Path, mut f: F) -> Result<()>
where
    T: DeserializeOwned,
    F: FnMut(usize, T) -> std::result::Result<(), String>,
{
    let text = fs::read_to_string(path).map_err(|e| Error::from(e).context(path.display().to_string()))?;
    for (i, line) in text.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let parse_err = |message: String| Error::Parse {
            path: path.to_path_buf(),
            line: i + 1,
            message,
        };
        let rec: T = serde_json::from_str(line).map_err(|e| parse_err(e.to_string()))?;
        f(i + 1, rec).map_err(parse_err)?;
    }
    Ok(())
}

/// Write records as JSONL, one per line.
pub fn write_jsonl<T: Serialize>(path: &Path, records: &[T]) -> Result<()> {
    let mut out = String::new();
    for r in records {
        out.push_str(&serde_json::to_string(r)?);
        out.push('\n');
    }
    fs::write(path, out)?;
    Ok(())
}

pub fn load_changes(path: &Path) -> Result<Vec<CodeChange>> {
    let mut seen = HashSet::new();
    let mut out = Vec::new();
    read_jsonl(path, |_, raw: RawChange| {
        if !seen.insert(raw.id.clone()) {
            return Err(Error::DuplicateId(raw.id).to_string());
        }
        let mut change = CodeChange::new(raw.id, Language::from_tag(&raw.lang), raw.patch)
            .map_err(|e| e.to_string())?;
        change.before_text = raw.oldf;
        change.after_text = raw.newf;
        change.meta = raw.meta;
        if let (Some(_), Some(expected)) = (&change.before_text, &change.after_text) {
            let (_, after) = materialize_before_after(&change).map_err(|e| e.to_string())?;
            if &after != expected {
                return Err(format!(
                    "change `{}`: applying the patch to oldf does not reproduce newf",
                    change.id
                ));
            }
        }
        out.push(change);
        Ok(())
    })?;
    Ok(out)
}

fn check_refs<'a>(
    kind: &'static str,
    ids: impl IntoIterator<Item = &'a str>,
    changes: Option<&[CodeChange]>,
) -> Result<()> {
    let Some(changes) = changes else {
        return Ok(());
    };
    let known: HashSet<&str> = changes.iter().map(|c| c.id.as_str()).collect();
    for id in ids {
        if !known.contains(id) {
            return Err(Error::DanglingReference {
                kind,
                id: id.to_string(),
            });
        }
    }
    Ok(())
}

/// Load reviews; when `changes` is given every `change_id` must resolve.
pub fn load_reviews(path: &Path, changes: Option<&[CodeChange]>) -> Result<Vec<ReviewDoc>> {
    let mut out = Vec::new();
    read_jsonl(path, |_, r: ReviewDoc| {
        out.push(r);
        Ok(())
    })?;
    check_refs("review", out.iter().map(|r| r.change_id.as_str()), changes)?;
    Ok(out)
}

pub fn load_annotations(path: &Path, changes: Option<&[CodeChange]>) -> Result<Vec<AnnotationRecord>> {
    let mut out = Vec::new();
    read_jsonl(path, |_, a: AnnotationRecord| {
        a.validate()?;
        out.push(a);
        Ok(())
    })?;
    check_refs("annotation", out.iter().map(|a| a.change_id.as_str()), changes)?;
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::io::Write;

    fn jsonl(lines: &[&str]) -> tempfile::NamedTempFile {
        let mut f = tempfile::NamedTempFile::new().unwrap();
        for l in lines {
            writeln!(f, "{l}").unwrap();
        }
        f
    }

    #[test]
    fn loads_python_change() {
        let f = jsonl(&[r#"{"id":"x1","lang":"py","patch":"@@ -1 +1 @@\n-a\n+b\n"}"#]);
        let cs = load_changes(f.path()).unwrap();
        assert_eq!(cs.len(), 1);
        assert_eq!(cs[0].id, "x1");
        assert_eq!(cs[0].language, Language::Python);
    }

    #[test]
    fn duplicate_id_rejected() {
        let line = r#"{"id":"x1","lang":"py","patch":"@@ -1 +1 @@\n-a\n+b\n"}"#;
        let err = load_changes(jsonl(&[line, line]).path()).unwrap_err();
        assert!(matches!(err, Error::Parse { line: 2, .. }), "{err}");
        assert!(err.to_string().contains("duplicate id"));
    }

    #[test]
    fn malformed_line_carries_line_number() {
        let f = jsonl(&[
            r#"{"id":"x1","lang":"py","patch":"@@ -1 +1 @@\n-a\n+b\n"}"#,
            r#"{"id": oops"#,
        ]);
        assert!(matches!(load_changes(f.path()).unwrap_err(), Error::Parse { line: 2, .. }));
    }

    #[test]
    fn bad_patch_is_load_error() {
        let f = jsonl(&[r#"{"id":"x1","lang":"py","patch":"@@ -1,3 +1,1 @@\n a\n"}"#]);
        assert!(load_changes(f.path()).is_err());
    }

    #[test]
    fn inconsistent_old_new_rejected() {
        let f = jsonl(&[
            r#"{"id":"x1","lang":"py","patch":"@@ -1 +1 @@\n-a\n+b\n","oldf":"a\n","newf":"c\n"}"#,
        ]);
        assert!(load_changes(f.path()).unwrap_err().to_string().contains("newf"));
    }

    #[test]
    fn language_normalization() {
        assert_eq!(Language::from_tag("Go"), Language::Other("go".into()));
        assert_eq!(Language::from_tag("JavaScript"), Language::JavaScript);
        assert_eq!(Language::from_tag("PY"), Language::Python);
    }

    #[test]
    fn materialize_applies_patch() {
        let mut c = CodeChange::new("c", Language::Python, "@@ -1 +1 @@\n-a\n+b\n").unwrap();
        c.before_text = Some("a\n".into());
        assert_eq!(materialize_before_after(&c).unwrap(), ("a\n".into(), "b\n".into()));
    }

    #[test]
    fn materialize_without_before_fails_for_fragments() {
        let c = CodeChange::new("c", Language::Python, "@@ -4,2 +4,2 @@\n x\n y\n").unwrap();
        assert!(matches!(
            materialize_before_after(&c).unwrap_err(),
            Error::CannotMaterialize(_)
        ));
    }

    #[test]
    fn review_and_annotation_loading() {
        let r = jsonl(&[r#"{"change_id":"x1","system_id":"gt","text":"Fix this."}"#]);
        let reviews = load_reviews(r.path(), None).unwrap();
        assert_eq!(reviews[0].text, "Fix this.");

        let a = jsonl(&[r#"{"change_id":"x1","system_id":"gt","con":3,"comp":2,"rel":6}"#]);
        let err = load_annotations(a.path(), None).unwrap_err();
        assert!(err.to_string().contains("rel=6"), "{err}");

        let a = jsonl(&[
            r#"{"change_id":"x1","system_id":"gt","con":3,"comp":2,"rel":2,"covered_ref_ids":["x1#0"],"unnecessary_ref_ids":["x1#0"]}"#,
        ]);
        assert!(load_annotations(a.path(), None).is_err());
    }

    #[test]
    fn dangling_review_rejected() {
        let c = jsonl(&[r#"{"id":"x1","lang":"py","patch":"@@ -1 +1 @@\n-a\n+b\n"}"#]);
        let changes = load_changes(c.path()).unwrap();
        let r = jsonl(&[r#"{"change_id":"nope","system_id":"gt","text":"Fix this."}"#]);
        assert!(matches!(
            load_reviews(r.path(), Some(&changes)).unwrap_err(),
            Error::DanglingReference { .. }
        ));
    }
}
