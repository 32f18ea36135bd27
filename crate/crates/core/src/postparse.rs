//! Turning free-form model generations into capped, constrained label lists.

use std::collections::HashSet;
use std::io::BufRead;
use std::sync::OnceLock;

use regex::Regex;
use serde::{Deserialize, Serialize};
use serde_json::Value;

use crate::error::{Error, Result};
use crate::retrieval::AllowedLabelSet;
use crate::taxonomy::{normalize_code, CpcCode};
use crate::PREDICTION_CAP;

/// Which rung of the ladder produced the final labels.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ParsePath {
    StrictJson,
    RegexJson,
    TokenFallback,
    Top1Fallback,
    Empty,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DropReason {
    /// Not a well-formed CPC subclass after normalization.
    Invalid,
    NotAllowed,
    Duplicate,
    OverCap,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Dropped {
    pub raw: String,
    pub reason: DropReason,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ParseOutcome {
    pub labels: Vec<CpcCode>,
    pub path: ParsePath,
    pub dropped: Vec<Dropped>,
}

#[derive(Clone, Copy, Debug)]
pub struct ParseOptions<'a> {
    pub allowed: Option<&'a AllowedLabelSet>,
    pub enforce_nonempty: bool,
    pub cap: usize,
}

impl Default for ParseOptions<'_> {
    fn default() -> Self {
        ParseOptions {
            allowed: None,
            enforce_nonempty: false,
            cap: PREDICTION_CAP,
        }
    }
}

fn cpc_token() -> &'static Regex {
    static RE: OnceLock<Regex> = OnceLock::new();
    RE.get_or_init(|| Regex::new(r"\b[A-HY][0-9]{2}[A-Z]\b").expect("static pattern"))
}

/// Raw entries of a `"labels"` list; non-string entries are kept as their
/// JSON text so they can be reported as invalid.
fn labels_of(value: &Value) -> Option<Vec<String>> {
    let items = value.as_object()?.get("labels")?.as_array()?;
    Some(
        items
            .iter()
            .map(|v| match v {
                Value::String(s) => s.clone(),
                other => other.to_string(),
            })
            .collect(),
    )
}

/// End (exclusive) of the balanced `{...}` span opening at `start`, skipping
/// braces inside string literals.
fn balanced_end(bytes: &[u8], start: usize) -> Option<usize> {
    let mut depth = 0usize;
    let mut in_string = false;
    let mut escaped = false;
    for (i, &b) in bytes.iter().enumerate().skip(start) {
        if in_string {
            match b {
                _ if escaped => escaped = false,
                b'\\' => escaped = true,
                b'"' => in_string = false,
                _ => {}
            }
            continue;
        }
        match b {
            b'"' => in_string = true,
            b'{' => depth += 1,
            b'}' => {
                depth -= 1;
                if depth == 0 {
                    return Some(i + 1);
                }
            }
            _ => {}
        }
    }
    None
}

/// First balanced object, scanning opening braces left to right, that
/// parses as JSON and carries a `"labels"` list.
fn first_embedded_labels(text: &str) -> Option<Vec<String>> {
    let bytes = text.as_bytes();
    bytes
        .iter()
        .enumerate()
        .filter(|(_, &b)| b == b'{')
        .find_map(|(start, _)| {
            let end = balanced_end(bytes, start)?;
            labels_of(&serde_json::from_str(&text[start..end]).ok()?)
        })
}

pub fn parse_output(raw: &str, options: &ParseOptions<'_>) -> ParseOutcome {
    assert!(options.cap >= 1, "prediction cap must be at least 1");
    let text = raw.trim();
    let mut dropped = Vec::new();

    let (candidates, json_path) = match serde_json::from_str::<Value>(text)
        .ok()
        .as_ref()
        .and_then(labels_of)
    {
        Some(labels) => (labels, ParsePath::StrictJson),
        None => match first_embedded_labels(text) {
            Some(labels) => (labels, ParsePath::RegexJson),
            None => (Vec::new(), ParsePath::Empty),
        },
    };

    let mut seen = HashSet::new();
    let mut labels = Vec::new();
    for item in candidates {
        match normalize_code(&item) {
            Err(_) => dropped.push(Dropped {
                raw: item,
                reason: DropReason::Invalid,
            }),
            Ok(code) if !seen.insert(code) => dropped.push(Dropped {
                raw: item,
                reason: DropReason::Duplicate,
            }),
            Ok(code) if options.allowed.is_some_and(|a| !a.contains(&code)) => {
                dropped.push(Dropped {
                    raw: item,
                    reason: DropReason::NotAllowed,
                })
            }
            Ok(code) => labels.push(code),
        }
    }

    let mut path = json_path;
    if labels.is_empty() && options.enforce_nonempty {
        let token = cpc_token()
            .find_iter(text)
            .filter_map(|m| normalize_code(m.as_str()).ok())
            .find(|c| options.allowed.is_none_or(|a| a.contains(c)));
        if let Some(code) = token {
            labels.push(code);
            path = ParsePath::TokenFallback;
        } else if let Some(allowed) = options.allowed {
            labels.push(allowed.top1());
            path = ParsePath::Top1Fallback;
        }
    }

    for code in labels
        .drain(options.cap.min(labels.len())..)
        .collect::<Vec<_>>()
    {
        dropped.push(Dropped {
            raw: code.to_string(),
            reason: DropReason::OverCap,
        });
    }
    if labels.is_empty() {
        path = ParsePath::Empty;
    }
    ParseOutcome {
        labels,
        path,
        dropped,
    }
}

/// Drop labels outside `allowed`, then keep the first `cap`.
pub fn enforce_constraints(
    labels: &[CpcCode],
    allowed: Option<&AllowedLabelSet>,
    cap: usize,
) -> Vec<CpcCode> {
    labels
        .iter()
        .filter(|c| allowed.is_none_or(|a| a.contains(c)))
        .take(cap)
        .copied()
        .collect()
}

/// One raw model generation.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Generation {
    pub id: String,
    pub raw_output: String,
    /// Digest of the run configuration the prompts were rendered under.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub manifest_digest: Option<String>,
}

pub fn read_generations<R: BufRead>(reader: R, source: &str) -> Result<Vec<Generation>> {
    let mut out = Vec::new();
    let mut ids = HashSet::new();
    for (i, line) in reader.lines().enumerate() {
        let line = line.map_err(|e| Error::io(source, e))?;
        if line.trim().is_empty() {
            continue;
        }
        let g: Generation =
            serde_json::from_str(&line).map_err(|e| Error::parse(source, i + 1, e.to_string()))?;
        if !ids.insert(g.id.clone()) {
            return Err(Error::DuplicateId(g.id));
        }
        out.push(g);
    }
    Ok(out)
}
