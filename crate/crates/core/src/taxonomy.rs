//! CPC codes, the section/class/subclass hierarchy and the definitions catalog.

use std::collections::BTreeMap;
use std::collections::BTreeSet;
use std::fmt;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use serde::{Deserialize, Deserializer, Serialize, Serializer};

use crate::error::{Error, Result};

/// Section letters that occur in the CPC scheme.
pub const SECTIONS: [u8; 9] = *b"ABCDEFGHY";

/// A canonical four-character CPC subclass code such as `G06F`.
#[derive(Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct CpcCode([u8; 4]);

impl CpcCode {
    /// Accepts only an already canonical code: section letter, two digits,
    /// uppercase subclass letter.
    pub fn parse_canonical(s: &str) -> Result<Self> {
        let b = s.as_bytes();
        let valid = b.len() == 4
            && SECTIONS.contains(&b[0])
            && b[1].is_ascii_digit()
            && b[2].is_ascii_digit()
            && b[3].is_ascii_uppercase();
        if valid {
            Ok(CpcCode([b[0], b[1], b[2], b[3]]))
        } else {
            Err(Error::InvalidCode { raw: s.to_string() })
        }
    }

    pub fn as_str(&self) -> &str {
        // constructed from validated ASCII only
        std::str::from_utf8(&self.0).expect("CPC codes are ASCII")
    }

    pub fn section(&self) -> char {
        self.0[0] as char
    }

    pub fn class_digits(&self) -> &str {
        &self.as_str()[1..3]
    }

    pub fn subclass_letter(&self) -> char {
        self.0[3] as char
    }

    /// The prefix of this code at `level`.
    pub fn at_level(&self, level: Level) -> Label {
        let mut bytes = [0u8; 4];
        let len = level.code_len();
        bytes[..len].copy_from_slice(&self.0[..len]);
        Label {
            bytes,
            len: len as u8,
        }
    }
}

impl fmt::Display for CpcCode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl fmt::Debug for CpcCode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "CpcCode({})", self.as_str())
    }
}

impl FromStr for CpcCode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        CpcCode::parse_canonical(s)
    }
}

impl Serialize for CpcCode {
    fn serialize<S: Serializer>(&self, serializer: S) -> std::result::Result<S::Ok, S::Error> {
        serializer.serialize_str(self.as_str())
    }
}

impl<'de> Deserialize<'de> for CpcCode {
    fn deserialize<D: Deserializer<'de>>(deserializer: D) -> std::result::Result<Self, D::Error> {
        let s = String::deserialize(deserializer)?;
        CpcCode::parse_canonical(&s).map_err(serde::de::Error::custom)
    }
}

/// Normalize a raw label to its subclass code: uppercase, drop everything
/// from the first `/`, keep the first four characters, validate.
pub fn normalize_code(raw: &str) -> Result<CpcCode> {
    let upper = raw.trim().to_uppercase();
    let head = match upper.find('/') {
        Some(i) => &upper[..i],
        None => upper.as_str(),
    };
    let truncated: String = head.chars().take(4).collect();
    CpcCode::parse_canonical(&truncated).map_err(|_| Error::InvalidCode {
        raw: raw.to_string(),
    })
}

/// Hierarchy level of a CPC label.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Level {
    Section,
    Class,
    Subclass,
}

impl Level {
    pub const ALL: [Level; 3] = [Level::Section, Level::Class, Level::Subclass];

    /// Number of characters a label has at this level.
    pub fn code_len(self) -> usize {
        match self {
            Level::Section => 1,
            Level::Class => 3,
            Level::Subclass => 4,
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            Level::Section => "section",
            Level::Class => "class",
            Level::Subclass => "subclass",
        }
    }
}

impl fmt::Display for Level {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Level {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "section" => Ok(Level::Section),
            "class" => Ok(Level::Class),
            "subclass" => Ok(Level::Subclass),
            other => Err(Error::Config(format!("unknown hierarchy level {other:?}"))),
        }
    }
}

/// A label at any hierarchy level: `G`, `G06` or `G06F`.
///
/// Ordering is the lexicographic order of the label text, so a section sorts
/// before its classes and a class before its subclasses.
#[derive(Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Label {
    bytes: [u8; 4],
    len: u8,
}

impl Label {
    pub fn as_str(&self) -> &str {
        std::str::from_utf8(&self.bytes[..self.len as usize]).expect("labels are ASCII")
    }

    pub fn level(&self) -> Level {
        match self.len {
            1 => Level::Section,
            3 => Level::Class,
            _ => Level::Subclass,
        }
    }

    pub fn is_prefix_of(&self, code: &CpcCode) -> bool {
        code.as_str().starts_with(self.as_str())
    }

    pub fn parse(s: &str) -> Result<Self> {
        let invalid = || Error::InvalidCode { raw: s.to_string() };
        let level = match s.len() {
            1 => Level::Section,
            3 => Level::Class,
            4 => Level::Subclass,
            _ => return Err(invalid()),
        };
        // pad to a full code so the prefix rules are checked by one validator
        let padded = match level {
            Level::Section => format!("{s}00A"),
            Level::Class => format!("{s}A"),
            Level::Subclass => s.to_string(),
        };
        let code = CpcCode::parse_canonical(&padded).map_err(|_| invalid())?;
        Ok(code.at_level(level))
    }
}

impl From<CpcCode> for Label {
    fn from(code: CpcCode) -> Self {
        code.at_level(Level::Subclass)
    }
}

impl fmt::Display for Label {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl fmt::Debug for Label {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "Label({})", self.as_str())
    }
}

impl Serialize for Label {
    fn serialize<S: Serializer>(&self, serializer: S) -> std::result::Result<S::Ok, S::Error> {
        serializer.serialize_str(self.as_str())
    }
}

impl<'de> Deserialize<'de> for Label {
    fn deserialize<D: Deserializer<'de>>(deserializer: D) -> std::result::Result<Self, D::Error> {
        let s = String::deserialize(deserializer)?;
        Label::parse(&s).map_err(serde::de::Error::custom)
    }
}

/// `anc(c)`: the code itself, its class and its section.
pub fn ancestors(code: CpcCode) -> BTreeSet<Label> {
    Level::ALL.iter().map(|&l| code.at_level(l)).collect()
}

/// Project a label set onto one hierarchy level. Projecting onto
/// [`Level::Subclass`] is the identity.
pub fn expand_label_set<'a, I>(labels: I, level: Level) -> BTreeSet<Label>
where
    I: IntoIterator<Item = &'a CpcCode>,
{
    labels.into_iter().map(|c| c.at_level(level)).collect()
}

/// Union of `anc(c)` over a label set (all three levels pooled).
pub fn expand_with_ancestors<'a, I>(labels: I) -> BTreeSet<Label>
where
    I: IntoIterator<Item = &'a CpcCode>,
{
    labels.into_iter().flat_map(|&c| ancestors(c)).collect()
}

/// Official subclass definitions keyed by code.
#[derive(Clone, Debug, Default)]
pub struct DefinitionCatalog {
    entries: BTreeMap<CpcCode, String>,
    source: Option<PathBuf>,
}

impl DefinitionCatalog {
    pub fn from_entries<I>(entries: I) -> Result<Self>
    where
        I: IntoIterator<Item = (CpcCode, String)>,
    {
        let mut map = BTreeMap::new();
        for (code, text) in entries {
            let text = crate::corpus::collapse_whitespace(&text);
            if text.is_empty() {
                return Err(Error::parse(
                    "<entries>",
                    0,
                    format!("empty definition for {code}"),
                ));
            }
            if map.insert(code, text).is_some() {
                return Err(Error::DuplicateCode(code));
            }
        }
        Ok(DefinitionCatalog {
            entries: map,
            source: None,
        })
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn get(&self, code: &CpcCode) -> Option<&str> {
        self.entries.get(code).map(String::as_str)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&CpcCode, &str)> {
        self.entries.iter().map(|(c, d)| (c, d.as_str()))
    }

    pub fn source(&self) -> Option<&Path> {
        self.source.as_deref()
    }

    /// Retrieval passages in `CODE: definition` form, one per code, in code order.
    pub fn passages(&self) -> Vec<(CpcCode, String)> {
        self.entries
            .iter()
            .map(|(c, d)| (*c, format!("{c}: {d}")))
            .collect()
    }
}

/// Parse a tab-separated definitions file (`CODE<TAB>text`, `#` comments).
pub fn parse_definitions(text: &str, source_name: &str) -> Result<DefinitionCatalog> {
    let mut entries = BTreeMap::new();
    for (i, line) in text.lines().enumerate() {
        let lineno = i + 1;
        let line = line.strip_suffix('\r').unwrap_or(line);
        if line.trim().is_empty() || line.trim_start().starts_with('#') {
            continue;
        }
        let (key, definition) = line
            .split_once('\t')
            .ok_or_else(|| Error::parse(source_name, lineno, "expected CODE<TAB>definition"))?;
        let code =
            normalize_code(key).map_err(|e| Error::parse(source_name, lineno, e.to_string()))?;
        let definition = crate::corpus::collapse_whitespace(definition);
        if definition.is_empty() {
            return Err(Error::parse(
                source_name,
                lineno,
                format!("empty definition for {code}"),
            ));
        }
        if entries.insert(code, definition).is_some() {
            return Err(Error::DuplicateCode(code));
        }
    }
    Ok(DefinitionCatalog {
        entries,
        source: None,
    })
}

pub fn load_definitions(path: impl AsRef<Path>) -> Result<DefinitionCatalog> {
    let path = path.as_ref();
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let mut catalog = parse_definitions(&text, &path.display().to_string())?;
    catalog.source = Some(path.to_path_buf());
    Ok(catalog)
}
