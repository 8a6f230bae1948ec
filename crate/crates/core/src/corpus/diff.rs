//! Unified-diff hunks: parsing, rendering and application to a base text.

use std::fmt::Write as _;

use crate::error::{Error, Result};

const NO_NEWLINE_MARKER: &str = "\\ No newline at end of file";

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum LineKind {
    Context,
    Added,
    Removed,
}

impl LineKind {
    fn prefix(self) -> char {
        match self {
            LineKind::Context => ' ',
            LineKind::Added => '+',
            LineKind::Removed => '-',
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct DiffLine {
    pub kind: LineKind,
    pub text: String,
    /// Followed by a `\ No newline at end of file` marker.
    pub no_newline: bool,
}

impl DiffLine {
    pub fn new(kind: LineKind, text: impl Into<String>) -> Self {
        DiffLine {
            kind,
            text: text.into(),
            no_newline: false,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct DiffHunk {
    pub old_start: usize,
    pub old_len: usize,
    pub new_start: usize,
    pub new_len: usize,
    pub lines: Vec<DiffLine>,
}

impl DiffHunk {
    pub fn count(&self, kind: LineKind) -> usize {
        self.lines.iter().filter(|l| l.kind == kind).count()
    }

    /// 1-based line range `[start, end]` of the new-side lines that were added,
    /// as maximal runs.
    pub fn added_ranges(&self) -> Vec<(usize, usize)> {
        let mut ranges = Vec::new();
        let mut new_line = self.new_start;
        let mut open: Option<(usize, usize)> = None;
        for line in &self.lines {
            match line.kind {
                LineKind::Added => {
                    open = Some(match open {
                        Some((s, _)) => (s, new_line),
                        None => (new_line, new_line),
                    });
                    new_line += 1;
                }
                LineKind::Context => {
                    if let Some(r) = open.take() {
                        ranges.push(r);
                    }
                    new_line += 1;
                }
                LineKind::Removed => {}
            }
        }
        ranges.extend(open);
        ranges
    }

    /// The old-side span this hunk touches, as a half-open 0-based range.
    fn old_span(&self) -> (usize, usize) {
        let begin = if self.old_len == 0 {
            self.old_start
        } else {
            self.old_start - 1
        };
        (begin, begin + self.old_len)
    }
}

fn parse_range(s: &str) -> Option<(usize, usize)> {
    match s.split_once(',') {
        Some((a, b)) => Some((a.parse().ok()?, b.parse().ok()?)),
        None => Some((s.parse().ok()?, 1)),
    }
}

fn parse_header(line: &str) -> Option<(usize, usize, usize, usize)> {
    let rest = line.strip_prefix("@@ -")?;
    let (ranges, _) = rest.split_once(" @@")?;
    let (old, new) = ranges.split_once(" +")?;
    let (os, ol) = parse_range(old)?;
    let (ns, nl) = parse_range(new)?;
    Some((os, ol, ns, nl))
}

/// Parse the hunks of a single-file unified diff. File headers (`diff --git`,
/// `---`, `+++`, `index`) preceding the first hunk are skipped.
pub fn parse_unified_diff(diff_text: &str) -> Result<Vec<DiffHunk>> {
    let mut hunks: Vec<DiffHunk> = Vec::new();
    let lines = diff_text.lines();
    let mut old_seen = 0usize;
    let mut new_seen = 0usize;

    for line in lines {
        let idx = hunks.len();
        if line.starts_with("@@") {
            if let Some(h) = hunks.last() {
                check_counts(h, idx - 1, old_seen, new_seen)?;
            }
            let (old_start, old_len, new_start, new_len) =
                parse_header(line).ok_or_else(|| Error::Diff {
                    hunk: idx,
                    message: format!("malformed hunk header `{line}`"),
                })?;
            hunks.push(DiffHunk {
                old_start,
                old_len,
                new_start,
                new_len,
                lines: Vec::new(),
            });
            old_seen = 0;
            new_seen = 0;
            continue;
        }

        let Some(hunk) = hunks.last_mut() else {
            // preamble before the first hunk
            continue;
        };
        let hunk_idx = idx - 1;
        let full = old_seen >= hunk.old_len && new_seen >= hunk.new_len;

        if line.starts_with('\\') {
            match hunk.lines.last_mut() {
                Some(last) => last.no_newline = true,
                None => {
                    return Err(Error::Diff {
                        hunk: hunk_idx,
                        message: "no-newline marker before any line".into(),
                    })
                }
            }
            continue;
        }

        if full {
            if line.is_empty() {
                continue;
            }
            if line.starts_with("diff ")
                || line.starts_with("--- ")
                || line.starts_with("+++ ")
                || line.starts_with("index ")
            {
                continue;
            }
            return Err(Error::Diff {
                hunk: hunk_idx,
                message: format!(
                    "body exceeds header counts (-{} +{})",
                    hunk.old_len, hunk.new_len
                ),
            });
        }

        let (kind, text) = match line.chars().next() {
            Some(' ') => (LineKind::Context, &line[1..]),
            Some('+') => (LineKind::Added, &line[1..]),
            Some('-') => (LineKind::Removed, &line[1..]),
            // blank context lines whose leading space was stripped
            None => (LineKind::Context, ""),
            Some(_) => {
                return Err(Error::Diff {
                    hunk: hunk_idx,
                    message: format!("unexpected body line `{line}`"),
                })
            }
        };
        match kind {
            LineKind::Context => {
                old_seen += 1;
                new_seen += 1;
            }
            LineKind::Added => new_seen += 1,
            LineKind::Removed => old_seen += 1,
        }
        hunk.lines.push(DiffLine::new(kind, text));
    }

    match hunks.last() {
        Some(h) => check_counts(h, hunks.len() - 1, old_seen, new_seen)?,
        None => {
            return Err(Error::Diff {
                hunk: 0,
                message: "diff contains no hunks".into(),
            })
        }
    }
    Ok(hunks)
}

fn check_counts(h: &DiffHunk, idx: usize, old_seen: usize, new_seen: usize) -> Result<()> {
    if old_seen != h.old_len || new_seen != h.new_len {
        return Err(Error::Diff {
            hunk: idx,
            message: format!(
                "header says -{} +{} but body has -{} +{}",
                h.old_len, h.new_len, old_seen, new_seen
            ),
        });
    }
    Ok(())
}

fn render_range(start: usize, len: usize) -> String {
    if len == 1 {
        start.to_string()
    } else {
        format!("{start},{len}")
    }
}

/// Render hunks back to unified-diff text (hunks only, no file headers).
pub fn render_hunks(hunks: &[DiffHunk]) -> String {
    let mut out = String::new();
    for h in hunks {
        let _ = writeln!(
            out,
            "@@ -{} +{} @@",
            render_range(h.old_start, h.old_len),
            render_range(h.new_start, h.new_len)
        );
        for l in &h.lines {
            out.push(l.kind.prefix());
            out.push_str(&l.text);
            out.push('\n');
            if l.no_newline {
                out.push_str(NO_NEWLINE_MARKER);
                out.push('\n');
            }
        }
    }
    out
}

/// A text split into lines, remembering whether each line was terminated.
struct Lines<'a> {
    items: Vec<(&'a str, bool)>,
}

impl<'a> Lines<'a> {
    fn split(text: &'a str) -> Self {
        let mut items = Vec::new();
        let mut rest = text;
        while !rest.is_empty() {
            match rest.find('\n') {
                Some(i) => {
                    items.push((&rest[..i], true));
                    rest = &rest[i + 1..];
                }
                None => {
                    items.push((rest, false));
                    rest = "";
                }
            }
        }
        Lines { items }
    }
}

/// Apply hunks to `before`. Hunks may be given in any order; overlapping
/// hunks are rejected.
pub fn apply_hunks(before: &str, hunks: &[DiffHunk]) -> Result<String> {
    let base = Lines::split(before);
    let mut order: Vec<usize> = (0..hunks.len()).collect();
    order.sort_by_key(|&i| (hunks[i].old_span(), i));

    let mut out = String::with_capacity(before.len());
    let mut cursor = 0usize;
    let mut last_end: Option<(usize, usize)> = None;

    for &hi in &order {
        let h = &hunks[hi];
        let (begin, end) = h.old_span();
        if let Some((prev_idx, prev_end)) = last_end {
            if begin < prev_end {
                return Err(Error::Apply {
                    hunk: hi,
                    line: begin + 1,
                    message: format!("overlaps hunk {prev_idx}"),
                });
            }
        }
        if end > base.items.len() {
            return Err(Error::Apply {
                hunk: hi,
                line: begin + 1,
                message: format!(
                    "hunk spans past end of file ({} lines)",
                    base.items.len()
                ),
            });
        }
        for &(text, nl) in &base.items[cursor..begin] {
            push_line(&mut out, text, nl);
        }
        let mut pos = begin;
        for l in &h.lines {
            match l.kind {
                LineKind::Context | LineKind::Removed => {
                    let (text, nl) = base.items[pos];
                    if text != l.text {
                        return Err(Error::Apply {
                            hunk: hi,
                            line: pos + 1,
                            message: format!("expected `{}`, found `{}`", l.text, text),
                        });
                    }
                    if l.kind == LineKind::Context {
                        push_line(&mut out, text, nl && !l.no_newline);
                    }
                    pos += 1;
                }
                LineKind::Added => push_line(&mut out, &l.text, !l.no_newline),
            }
        }
        cursor = end;
        last_end = Some((hi, end));
    }
    for &(text, nl) in &base.items[cursor..] {
        push_line(&mut out, text, nl);
    }
    Ok(out)
}

fn push_line(out: &mut String, text: &str, newline: bool) {
    out.push_str(text);
    if newline {
        out.push('\n');
    }
}

/// True for a diff that creates a file from nothing (`@@ -0,0 +1,n @@`).
pub fn is_full_file(hunks: &[DiffHunk]) -> bool {
    matches!(hunks, [h] if h.old_start == 0 && h.old_len == 0)
}
