//! Sentence segmentation, tokenization, stopword filtering and claim-list
//! parsing.

use std::collections::HashSet;
use std::sync::OnceLock;

use regex::Regex;

use crate::error::{Error, Result};

const DEFAULT_STOPWORDS: &str = include_str!("../assets/stopwords_en.txt");

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct StopwordLexicon {
    words: HashSet<String>,
    version_tag: String,
}

impl StopwordLexicon {
    /// Parse a newline-delimited list. A leading `# version: <tag>` line sets
    /// the version tag; other `#` lines are comments.
    pub fn parse(text: &str) -> Result<Self> {
        let mut version_tag = String::from("unversioned");
        let mut words = HashSet::new();
        for line in text.lines() {
            let line = line.trim();
            if let Some(rest) = line.strip_prefix('#') {
                if let Some(tag) = rest.trim().strip_prefix("version:") {
                    version_tag = tag.trim().to_string();
                }
                continue;
            }
            if !line.is_empty() {
                words.insert(line.to_lowercase());
            }
        }
        if words.is_empty() {
            return Err(Error::Invalid("stopword lexicon is empty".into()));
        }
        Ok(StopwordLexicon { words, version_tag })
    }

    pub fn from_words<I, S>(words: I, version_tag: &str) -> Result<Self>
    where
        I: IntoIterator<Item = S>,
        S: AsRef<str>,
    {
        let words: HashSet<String> = words.into_iter().map(|w| w.as_ref().to_lowercase()).collect();
        if words.is_empty() {
            return Err(Error::Invalid("stopword lexicon is empty".into()));
        }
        Ok(StopwordLexicon {
            words,
            version_tag: version_tag.to_string(),
        })
    }

    /// The bundled English list.
    pub fn english() -> &'static StopwordLexicon {
        static LEX: OnceLock<StopwordLexicon> = OnceLock::new();
        LEX.get_or_init(|| StopwordLexicon::parse(DEFAULT_STOPWORDS).expect("bundled stopword list"))
    }

    pub fn contains(&self, word: &str) -> bool {
        self.words.contains(&word.to_lowercase())
    }

    pub fn version_tag(&self) -> &str {
        &self.version_tag
    }

    pub fn len(&self) -> usize {
        self.words.len()
    }

    pub fn is_empty(&self) -> bool {
        self.words.is_empty()
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Token<'a> {
    pub text: &'a str,
    /// A backtick-delimited code span, kept intact including its backticks.
    pub code: bool,
}

fn is_word_char(c: char) -> bool {
    c.is_alphanumeric() || c == '_'
}

/// Split text into words and intact backtick code spans. Punctuation and
/// whitespace separate tokens and are dropped. An apostrophe between two
/// word characters stays inside the word (`don't`).
pub fn tokenize(text: &str) -> Vec<Token<'_>> {
    let mut tokens = Vec::new();
    let chars: Vec<(usize, char)> = text.char_indices().collect();
    let mut i = 0;
    while i < chars.len() {
        let (start, c) = chars[i];
        if c == '`' {
            let mut j = i + 1;
            while j < chars.len() && chars[j].1 != '`' {
                j += 1;
            }
            let end = if j < chars.len() { chars[j].0 + 1 } else { text.len() };
            tokens.push(Token {
                text: &text[start..end],
                code: true,
            });
            i = j + 1;
        } else if is_word_char(c) {
            let mut j = i + 1;
            while j < chars.len() {
                let cj = chars[j].1;
                if is_word_char(cj) {
                    j += 1;
                } else if cj == '\'' && j + 1 < chars.len() && is_word_char(chars[j + 1].1) {
                    j += 2;
                } else {
                    break;
                }
            }
            let end = if j < chars.len() { chars[j].0 } else { text.len() };
            tokens.push(Token {
                text: &text[start..end],
                code: false,
            });
            i = j;
        } else {
            i += 1;
        }
    }
    tokens
}

/// Lowercased tokens with stopwords removed, order preserved. Code spans are
/// never treated as stopwords.
pub fn filter_stopwords(sentence: &str, lex: &StopwordLexicon) -> Vec<String> {
    tokenize(sentence)
        .into_iter()
        .filter(|t| t.code || !lex.contains(t.text))
        .map(|t| t.text.to_lowercase())
        .collect()
}

/// Split review text into sentences on `.`, `!` or `?` followed by
/// whitespace, and on blank lines. Terminators inside backtick spans do not
/// split. Returned sentences are trimmed and non-empty.
pub fn split_sentences(text: &str) -> Vec<String> {
    let mut out = Vec::new();
    let chars: Vec<(usize, char)> = text.char_indices().collect();
    let mut seg_start = 0usize;
    let mut in_code = false;
    let mut i = 0;

    let flush = |from: usize, to: usize, out: &mut Vec<String>| {
        let s = text[from..to].trim();
        if !s.is_empty() {
            out.push(s.to_string());
        }
    };

    while i < chars.len() {
        let (pos, c) = chars[i];
        match c {
            '`' => in_code = !in_code,
            '\n' => {
                // blank line: newline, optional horizontal space, newline
                let mut j = i + 1;
                while j < chars.len() && chars[j].1 != '\n' && chars[j].1.is_whitespace() {
                    j += 1;
                }
                if j < chars.len() && chars[j].1 == '\n' {
                    flush(seg_start, pos, &mut out);
                    in_code = false;
                    seg_start = chars[j].0 + 1;
                    i = j + 1;
                    continue;
                }
            }
            '.' | '!' | '?' if !in_code => {
                let mut j = i + 1;
                while j < chars.len() && matches!(chars[j].1, '.' | '!' | '?' | ')' | '"' | '\'') {
                    j += 1;
                }
                if j == chars.len() || chars[j].1.is_whitespace() {
                    let end = if j < chars.len() { chars[j].0 } else { text.len() };
                    flush(seg_start, end, &mut out);
                    seg_start = end;
                    i = j;
                    continue;
                }
            }
            _ => {}
        }
        i += 1;
    }
    flush(seg_start, text.len(), &mut out);
    out
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Sentence {
    pub raw: String,
    pub filtered_tokens: Vec<String>,
}

impl Sentence {
    /// Filtered tokens joined by single spaces; the form that gets embedded.
    pub fn filtered_text(&self) -> String {
        self.filtered_tokens.join(" ")
    }

    /// True when every token was a stopword (or there were none).
    pub fn is_empty(&self) -> bool {
        self.filtered_tokens.is_empty()
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct SentenceSet {
    pub doc_id: String,
    pub sentences: Vec<Sentence>,
}

impl SentenceSet {
    pub fn build(doc_id: impl Into<String>, text: &str, lex: &StopwordLexicon) -> Self {
        let sentences = split_sentences(text)
            .into_iter()
            .map(|raw| {
                let filtered_tokens = filter_stopwords(&raw, lex);
                Sentence { raw, filtered_tokens }
            })
            .collect();
        SentenceSet {
            doc_id: doc_id.into(),
            sentences,
        }
    }

    pub fn len(&self) -> usize {
        self.sentences.len()
    }

    pub fn is_empty(&self) -> bool {
        self.sentences.is_empty()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ClaimSection {
    Claim,
    Implication,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ParsedClaim {
    pub text: String,
    pub section: ClaimSection,
}

fn item_regex() -> &'static Regex {
    static RE: OnceLock<Regex> = OnceLock::new();
    RE.get_or_init(|| Regex::new(r"^\s*(?:\d+[.)]|[-*•+])(?:\s+(.*))?$").unwrap())
}

/// Returns the heading text if `line` looks like a section heading
/// (`Claims:`, `## Implications`, `**Low-level changes:**`).
fn heading(line: &str) -> Option<String> {
    let t = line.trim();
    let hashed = t.starts_with('#');
    let t = t.trim_start_matches('#').trim();
    let t = t.trim_matches(|c| c == '*' || c == '_').trim();
    let t = t.trim_end_matches(|c| c == '*' || c == '_');
    let colon = t.ends_with(':');
    let body = t.trim_end_matches(':').trim();
    if body.is_empty() || !(hashed || colon) || body.split_whitespace().count() > 8 {
        return None;
    }
    Some(body.to_lowercase())
}

/// Parse numbered or bulleted items out of an LLM reply. Items under a
/// heading mentioning implications (or high-level effects) are tagged as
/// implications; everything else is a claim.
pub fn parse_claims(llm_output: &str) -> Result<Vec<ParsedClaim>> {
    let mut items: Vec<ParsedClaim> = Vec::new();
    let mut section = ClaimSection::Claim;
    let mut open = false;

    for line in llm_output.lines() {
        if line.trim().is_empty() {
            open = false;
            continue;
        }
        if let Some(caps) = item_regex().captures(line) {
            let text = caps.get(1).map_or("", |m| m.as_str()).trim().to_string();
            items.push(ParsedClaim { text, section });
            open = true;
            continue;
        }
        if let Some(h) = heading(line) {
            section = if h.contains("implication") || h.contains("high-level") || h.contains("high level") {
                ClaimSection::Implication
            } else {
                ClaimSection::Claim
            };
            open = false;
            continue;
        }
        if open {
            let last = items.last_mut().expect("open item");
            if !last.text.is_empty() {
                last.text.push(' ');
            }
            last.text.push_str(line.trim());
        }
    }

    items.retain(|c| !c.text.is_empty());
    if items.is_empty() {
        let preview: String = llm_output.chars().take(80).collect();
        return Err(Error::UnparseableClaims(format!("no list items in `{preview}`")));
    }
    Ok(items)
}
