//! Prompt assembly for the four prompting regimes.
//!
//! The templates under `templates/` are stored byte-for-byte and only ever
//! touched by placeholder substitution.

use std::collections::{BTreeMap, HashSet};
use std::fmt;
use std::io::{BufRead, Write};
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::corpus::{PatentCorpus, PatentRecord};
use crate::error::{Error, Result};
use crate::retrieval::{AllowedLabelSet, TfidfIndex};
use crate::taxonomy::{CpcCode, DefinitionCatalog};

/// Longest definition shown next to an allowed code, in characters.
pub const DEFINITION_MAX_CHARS: usize = 220;

const PATENT_TEXT: &str = "{patent_text}";
const FEWSHOT_BLOCK: &str = "{fewshot_block}";
const ALLOWED_LABELS: &str = "{allowed_labels}";

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Regime {
    ZeroShot,
    FewShot,
    ZeroShotRag,
    FewShotRag,
}

impl Regime {
    pub const ALL: [Regime; 4] = [
        Regime::ZeroShot,
        Regime::FewShot,
        Regime::ZeroShotRag,
        Regime::FewShotRag,
    ];

    pub fn uses_fewshot(self) -> bool {
        matches!(self, Regime::FewShot | Regime::FewShotRag)
    }

    pub fn uses_allowed(self) -> bool {
        matches!(self, Regime::ZeroShotRag | Regime::FewShotRag)
    }

    pub fn name(self) -> &'static str {
        match self {
            Regime::ZeroShot => "zero_shot",
            Regime::FewShot => "few_shot",
            Regime::ZeroShotRag => "zero_shot_rag",
            Regime::FewShotRag => "few_shot_rag",
        }
    }

    pub fn system_template(self) -> &'static str {
        match self {
            Regime::ZeroShot => include_str!("../templates/zero_shot.system.txt"),
            Regime::FewShot => include_str!("../templates/few_shot.system.txt"),
            Regime::ZeroShotRag => include_str!("../templates/zero_shot_rag.system.txt"),
            Regime::FewShotRag => include_str!("../templates/few_shot_rag.system.txt"),
        }
    }

    pub fn user_template(self) -> &'static str {
        match self {
            Regime::ZeroShot => include_str!("../templates/zero_shot.user.txt"),
            Regime::FewShot => include_str!("../templates/few_shot.user.txt"),
            Regime::ZeroShotRag => include_str!("../templates/zero_shot_rag.user.txt"),
            Regime::FewShotRag => include_str!("../templates/few_shot_rag.user.txt"),
        }
    }
}

impl fmt::Display for Regime {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Regime {
    type Err = Error;

    /// Accepts `zero_shot`, `zero-shot`, `ZeroShot`, `few-shot+rag` and similar spellings.
    fn from_str(s: &str) -> Result<Self> {
        let key: String = s
            .chars()
            .filter(|c| c.is_ascii_alphanumeric())
            .collect::<String>()
            .to_ascii_lowercase();
        match key.as_str() {
            "zeroshot" => Ok(Regime::ZeroShot),
            "fewshot" => Ok(Regime::FewShot),
            "zeroshotrag" => Ok(Regime::ZeroShotRag),
            "fewshotrag" => Ok(Regime::FewShotRag),
            _ => Err(Error::Config(format!("unknown regime {s:?}"))),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct FewShotConfig {
    pub static_indices: Vec<usize>,
    pub dynamic_count: usize,
}

impl Default for FewShotConfig {
    fn default() -> Self {
        FewShotConfig {
            static_indices: vec![2, 27],
            dynamic_count: 3,
        }
    }
}

/// Rendered few-shot examples plus the ids they came from, static first.
#[derive(Clone, Debug, PartialEq)]
pub struct FewShotBlock {
    pub text: String,
    pub example_ids: Vec<String>,
}

/// `{"labels": ["A01B", "G06F"]}` in the spacing the templates use.
pub fn labels_json<'a>(codes: impl IntoIterator<Item = &'a CpcCode>) -> String {
    let quoted: Vec<String> = codes.into_iter().map(|c| format!("\"{c}\"")).collect();
    format!("{{\"labels\": [{}]}}", quoted.join(", "))
}

fn format_example(record: &PatentRecord) -> String {
    format!(
        "PATENT TEXT:\n{}\n{}",
        record.text(),
        labels_json(&record.gold_labels)
    )
}

/// Static rows first, then the `dynamic_count` nearest training texts
/// (static ids excluded), separated by blank lines.
pub fn build_fewshot_block(
    corpus: &PatentCorpus,
    config: &FewShotConfig,
    tfidf: &TfidfIndex,
    target_text: &str,
) -> Result<FewShotBlock> {
    if tfidf.len() != corpus.len()
        || tfidf
            .ids()
            .iter()
            .zip(corpus.records())
            .any(|(a, r)| *a != r.id)
    {
        return Err(Error::Alignment(
            "TF-IDF index was not fitted on this corpus".into(),
        ));
    }
    let mut examples = Vec::new();
    let mut ids = Vec::new();
    for &i in &config.static_indices {
        let record = corpus.get(i).ok_or(Error::IndexOutOfRange {
            index: i,
            len: corpus.len(),
        })?;
        examples.push(format_example(record));
        ids.push(record.id.clone());
    }
    if config.dynamic_count > 0 {
        let exclude: HashSet<String> = ids.iter().cloned().collect();
        for hit in tfidf.topk(target_text, config.dynamic_count, &exclude) {
            examples.push(format_example(&corpus.records()[hit.row]));
            ids.push(hit.id);
        }
    }
    Ok(FewShotBlock {
        text: examples.join("\n\n"),
        example_ids: ids,
    })
}

/// The grouped allowed-label listing plus the codes it covers.
#[derive(Clone, Debug, PartialEq)]
pub struct AllowedBlock {
    pub text: String,
    pub codes: Vec<CpcCode>,
    /// Allowed codes that had no definition in the catalog.
    pub missing: Vec<CpcCode>,
}

fn truncate_chars(s: &str, max: usize) -> &str {
    match s.char_indices().nth(max) {
        Some((i, _)) => &s[..i],
        None => s,
    }
}

/// Group allowed codes by section and class:
///
/// ```text
/// Section G:
/// Class G06:
/// - G06F --- Electric digital data processing
/// ```
pub fn format_allowed_block(
    allowed: &AllowedLabelSet,
    catalog: &DefinitionCatalog,
) -> AllowedBlock {
    let mut grouped: BTreeMap<char, BTreeMap<String, Vec<CpcCode>>> = BTreeMap::new();
    for code in allowed.codes() {
        grouped
            .entry(code.section())
            .or_default()
            .entry(code.as_str()[..3].to_string())
            .or_default()
            .push(code);
    }
    let mut lines = Vec::new();
    let mut missing = Vec::new();
    for (section, classes) in grouped {
        lines.push(format!("Section {section}:"));
        for (class, mut codes) in classes {
            lines.push(format!("Class {class}:"));
            codes.sort();
            for code in codes {
                match catalog.get(&code) {
                    Some(def) => lines.push(format!(
                        "- {code} --- {}",
                        truncate_chars(def, DEFINITION_MAX_CHARS)
                    )),
                    None => {
                        log::warn!("no definition for allowed code {code}");
                        missing.push(code);
                        lines.push(format!("- {code} ---"));
                    }
                }
            }
        }
    }
    AllowedBlock {
        text: lines.join("\n"),
        codes: allowed.codes(),
        missing,
    }
}

/// Replace every placeholder in one left-to-right pass, so substituted text
/// is never rescanned.
fn substitute(template: &str, values: &[(&str, &str)]) -> String {
    let mut out =
        String::with_capacity(template.len() + values.iter().map(|v| v.1.len()).sum::<usize>());
    let mut rest = template;
    'scan: while let Some(pos) = rest.find('{') {
        out.push_str(&rest[..pos]);
        let tail = &rest[pos..];
        for (placeholder, value) in values {
            if let Some(after) = tail.strip_prefix(placeholder) {
                out.push_str(value);
                rest = after;
                continue 'scan;
            }
        }
        out.push('{');
        rest = &tail[1..];
    }
    out.push_str(rest);
    out
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PromptBundle {
    pub id: String,
    pub regime: Regime,
    pub system: String,
    pub user: String,
    pub fewshot_ids: Vec<String>,
    pub allowed_codes: Vec<CpcCode>,
}

pub fn render_prompt(
    regime: Regime,
    patent: &PatentRecord,
    fewshot: Option<&FewShotBlock>,
    allowed: Option<&AllowedBlock>,
) -> Result<PromptBundle> {
    let fewshot = match (regime.uses_fewshot(), fewshot) {
        (true, Some(b)) if !b.example_ids.is_empty() => Some(b),
        (true, _) => {
            return Err(Error::MissingComponent(format!(
                "{regime} needs a non-empty few-shot block"
            )))
        }
        (false, Some(_)) => return Err(Error::Config(format!("{regime} takes no few-shot block"))),
        (false, None) => None,
    };
    let allowed = match (regime.uses_allowed(), allowed) {
        (true, Some(b)) if !b.codes.is_empty() => Some(b),
        (true, _) => {
            return Err(Error::MissingComponent(format!(
                "{regime} needs a non-empty allowed-label block"
            )))
        }
        (false, Some(_)) => {
            return Err(Error::Config(format!(
                "{regime} takes no allowed-label block"
            )))
        }
        (false, None) => None,
    };
    let text = patent.text();
    let values = [
        (PATENT_TEXT, text.as_str()),
        (FEWSHOT_BLOCK, fewshot.map_or("", |b| b.text.as_str())),
        (ALLOWED_LABELS, allowed.map_or("", |b| b.text.as_str())),
    ];
    Ok(PromptBundle {
        id: patent.id.clone(),
        regime,
        system: substitute(regime.system_template(), &values),
        user: substitute(regime.user_template(), &values),
        fewshot_ids: fewshot.map(|b| b.example_ids.clone()).unwrap_or_default(),
        allowed_codes: allowed.map(|b| b.codes.clone()).unwrap_or_default(),
    })
}

pub fn write_prompts<W: Write>(bundles: &[PromptBundle], mut out: W) -> Result<()> {
    for b in bundles {
        serde_json::to_writer(&mut out, b)?;
        out.write_all(b"\n").map_err(|e| Error::io("<output>", e))?;
    }
    Ok(())
}

pub fn read_prompts<R: BufRead>(reader: R, source: &str) -> Result<Vec<PromptBundle>> {
    let mut out = Vec::new();
    for (i, line) in reader.lines().enumerate() {
        let line = line.map_err(|e| Error::io(source, e))?;
        if !line.trim().is_empty() {
            out.push(
                serde_json::from_str(&line)
                    .map_err(|e| Error::parse(source, i + 1, e.to_string()))?,
            );
        }
    }
    Ok(out)
}
