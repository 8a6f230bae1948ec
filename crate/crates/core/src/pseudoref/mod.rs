//! Pseudo-references: the claims, implications and analyzer findings a
//! review is measured against.

pub mod smells;

use std::collections::{BTreeMap, HashSet};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::corpus::{read_jsonl, CodeChange};
use crate::error::{Error, Result};
use crate::llm::{ChatMessage, LlmClient};
use crate::textproc::{parse_claims, ClaimSection};
pub use smells::{
    cyclomatic_rank, detect_smells, smell_delta, AnalyzerSpec, ComplexityRank, OutputParser, SmellFinding,
    SmellScope,
};

pub const DEFAULT_CLAIMS_PROMPT: &str = include_str!("../../assets/claims_prompt.txt");

const REPROMPT: &str = "Your answer could not be parsed. Reply with the heading \"Claims:\" followed by a numbered list, then the heading \"Implications:\" followed by a numbered list, and nothing else.";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum RefKind {
    Claim,
    Implication,
    Smell,
    Issue,
}

#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(tag = "type", content = "tag", rename_all = "lowercase")]
pub enum RefSource {
    Llm(String),
    Analyzer(String),
}

/// Human coding of a pseudo-reference's accuracy.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Verdict {
    Correct,
    Incorrect,
    Unverifiable,
    Ambiguous,
    Added,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct PseudoRef {
    pub id: String,
    pub change_id: String,
    pub kind: RefKind,
    pub text: String,
    pub source: RefSource,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub verdict: Option<Verdict>,
}

impl PseudoRef {
    pub fn validate(&self) -> std::result::Result<(), String> {
        if self.text.trim().is_empty() {
            return Err(format!("pseudo-reference `{}` has empty text", self.id));
        }
        if matches!(self.kind, RefKind::Smell | RefKind::Issue) && !matches!(self.source, RefSource::Analyzer(_)) {
            return Err(format!("pseudo-reference `{}`: smells must come from an analyzer", self.id));
        }
        Ok(())
    }
}

/// Fill the `{diff}` and `{lang}` slots of a claim prompt template.
pub fn render_claims_prompt(template: &str, change: &CodeChange) -> Result<String> {
    if !template.contains("{diff}") {
        return Err(Error::Invalid("claim prompt template has no {diff} slot".into()));
    }
    Ok(template
        .replace("{lang}", change.language.display_name())
        .replace("{diff}", &change.diff_text))
}

/// Ask the model for claims and implications about `change`. One corrective
/// follow-up is sent if the first reply has no parseable list.
pub fn generate_claims(change: &CodeChange, client: &LlmClient, prompt_template: &str) -> Result<Vec<PseudoRef>> {
    let prompt = render_claims_prompt(prompt_template, change)?;
    let first = vec![ChatMessage::user(prompt)];
    let (reply, _) = client
        .complete(first.clone())
        .map_err(|e| e.context(format!("change `{}`", change.id)))?;

    let parsed = match parse_claims(&reply) {
        Ok(p) => p,
        Err(_) => {
            let mut retry = first;
            retry.push(ChatMessage::assistant(reply));
            retry.push(ChatMessage::user(REPROMPT));
            let (reply, _) = client
                .complete(retry)
                .map_err(|e| e.context(format!("change `{}`", change.id)))?;
            parse_claims(&reply).map_err(|e| e.context(format!("change `{}`", change.id)))?
        }
    };

    let model = client.config().model.clone();
    Ok(parsed
        .into_iter()
        .map(|c| PseudoRef {
            id: String::new(),
            change_id: change.id.clone(),
            kind: match c.section {
                ClaimSection::Claim => RefKind::Claim,
                ClaimSection::Implication => RefKind::Implication,
            },
            text: c.text,
            source: RefSource::Llm(model.clone()),
            verdict: None,
        })
        .collect())
}

/// Merge claims and rendered smell findings into the final pseudo-reference
/// list for one change: claims first, case-insensitive duplicate texts
/// dropped, ids `<change_id>#k` assigned in order.
pub fn assemble_pseudorefs(
    change_id: &str,
    claims: Vec<PseudoRef>,
    smells: &[(SmellFinding, RefKind)],
) -> Result<Vec<PseudoRef>> {
    if let Some(stray) = claims.iter().find(|c| c.change_id != change_id) {
        return Err(Error::Invalid(format!(
            "claim for change `{}` passed while assembling `{change_id}`",
            stray.change_id
        )));
    }
    let smell_refs = smells.iter().map(|(f, kind)| PseudoRef {
        id: String::new(),
        change_id: change_id.to_string(),
        kind: *kind,
        text: f.render(),
        source: RefSource::Analyzer(f.tool.clone()),
        verdict: None,
    });

    let mut seen = HashSet::new();
    let mut out = Vec::new();
    for mut r in claims.into_iter().chain(smell_refs) {
        if !seen.insert(r.text.trim().to_lowercase()) {
            continue;
        }
        r.id = format!("{change_id}#{}", out.len());
        out.push(r);
    }
    Ok(out)
}

/// Load pseudo-references grouped by change id (file order kept within a
/// change).
pub fn load_pseudorefs(path: &Path) -> Result<BTreeMap<String, Vec<PseudoRef>>> {
    let mut ids = HashSet::new();
    let mut out: BTreeMap<String, Vec<PseudoRef>> = BTreeMap::new();
    read_jsonl(path, |_, r: PseudoRef| {
        r.validate()?;
        if !ids.insert(r.id.clone()) {
            return Err(Error::DuplicateId(r.id).to_string());
        }
        out.entry(r.change_id.clone()).or_default().push(r);
        Ok(())
    })?;
    Ok(out)
}
