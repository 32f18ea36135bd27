//! Sparse TF-IDF retrieval for few-shot examples and dense cosine retrieval
//! of allowed label sets over definition embeddings.

use std::cmp::Ordering;
use std::collections::{BTreeMap, HashMap, HashSet};
use std::fs::File;
use std::io::{BufRead, BufReader, Read, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::corpus::PatentCorpus;
use crate::error::{Error, Result};
use crate::taxonomy::{normalize_code, CpcCode};

/// Default number of retrieved allowed codes per patent.
pub const DEFAULT_TOP_K: usize = 20;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TfidfConfig {
    pub max_features: usize,
    pub ngram_range: (usize, usize),
    pub min_df: usize,
}

impl Default for TfidfConfig {
    fn default() -> Self {
        TfidfConfig {
            max_features: 50_000,
            ngram_range: (1, 2),
            min_df: 2,
        }
    }
}

/// Lowercased maximal runs of alphanumeric characters, at least two characters long.
pub fn tokenize(text: &str) -> Vec<String> {
    text.to_lowercase()
        .split(|c: char| !c.is_alphanumeric())
        .filter(|t| t.chars().count() >= 2)
        .map(String::from)
        .collect()
}

fn ngrams(tokens: &[String], (lo, hi): (usize, usize)) -> Vec<String> {
    let mut out = Vec::new();
    for n in lo..=hi {
        for window in tokens.windows(n) {
            out.push(window.join(" "));
        }
    }
    out
}

fn term_counts(text: &str, range: (usize, usize)) -> HashMap<String, u32> {
    let mut counts = HashMap::new();
    for term in ngrams(&tokenize(text), range) {
        *counts.entry(term).or_insert(0) += 1;
    }
    counts
}

/// A sparse, L2-normalized vector sorted by column.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct SparseVector {
    pub entries: Vec<(u32, f64)>,
}

impl SparseVector {
    pub fn norm(&self) -> f64 {
        self.entries.iter().map(|(_, v)| v * v).sum::<f64>().sqrt()
    }

    pub fn dot(&self, other: &SparseVector) -> f64 {
        let (mut i, mut j, mut acc) = (0, 0, 0.0);
        while i < self.entries.len() && j < other.entries.len() {
            match self.entries[i].0.cmp(&other.entries[j].0) {
                Ordering::Less => i += 1,
                Ordering::Greater => j += 1,
                Ordering::Equal => {
                    acc += self.entries[i].1 * other.entries[j].1;
                    i += 1;
                    j += 1;
                }
            }
        }
        acc
    }

    fn normalize(&mut self) {
        let norm = self.norm();
        if norm > 0.0 {
            for (_, v) in &mut self.entries {
                *v /= norm;
            }
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct ScoredDoc {
    pub id: String,
    pub row: usize,
    pub score: f64,
}

/// Fitted TF-IDF model over a set of training documents.
///
/// Weights: raw term count times `ln((1 + N) / (1 + df)) + 1`, rows
/// L2-normalized. Columns follow the lexicographic order of the terms.
#[derive(Clone, Debug)]
pub struct TfidfIndex {
    config: TfidfConfig,
    vocabulary: HashMap<String, u32>,
    terms: Vec<String>,
    idf: Vec<f64>,
    rows: Vec<SparseVector>,
    postings: Vec<Vec<(u32, f64)>>,
    ids: Vec<String>,
}

impl TfidfIndex {
    pub fn fit(corpus: &PatentCorpus, config: &TfidfConfig) -> Result<Self> {
        let ids: Vec<String> = corpus.records().iter().map(|r| r.id.clone()).collect();
        let texts: Vec<String> = corpus.records().iter().map(|r| r.text()).collect();
        Self::fit_texts(ids, &texts, config)
    }

    pub fn fit_texts(ids: Vec<String>, texts: &[String], config: &TfidfConfig) -> Result<Self> {
        let (lo, hi) = config.ngram_range;
        if lo == 0 || lo > hi {
            return Err(Error::Config(format!("invalid n-gram range ({lo}, {hi})")));
        }
        if ids.len() != texts.len() {
            return Err(Error::Alignment("ids and texts differ in length".into()));
        }
        if texts.is_empty() {
            return Err(Error::EmptyInput("TF-IDF training corpus"));
        }
        let docs: Vec<HashMap<String, u32>> = texts
            .iter()
            .map(|t| term_counts(t, config.ngram_range))
            .collect();

        let mut df: HashMap<&str, (u32, u64)> = HashMap::new();
        for doc in &docs {
            for (term, &count) in doc {
                let e = df.entry(term.as_str()).or_insert((0, 0));
                e.0 += 1;
                e.1 += u64::from(count);
            }
        }
        let mut kept: Vec<(&str, u32, u64)> = df
            .into_iter()
            .filter(|&(_, (d, _))| d as usize >= config.min_df)
            .map(|(t, (d, total))| (t, d, total))
            .collect();
        if kept.is_empty() {
            return Err(Error::EmptyVocabulary);
        }
        if kept.len() > config.max_features {
            kept.sort_by(|a, b| b.2.cmp(&a.2).then_with(|| a.0.cmp(b.0)));
            kept.truncate(config.max_features);
        }
        kept.sort_by(|a, b| a.0.cmp(b.0));

        let n = texts.len() as f64;
        let terms: Vec<String> = kept.iter().map(|k| k.0.to_string()).collect();
        let idf: Vec<f64> = kept
            .iter()
            .map(|&(_, d, _)| ((1.0 + n) / (1.0 + f64::from(d))).ln() + 1.0)
            .collect();
        let vocabulary: HashMap<String, u32> = terms
            .iter()
            .enumerate()
            .map(|(i, t)| (t.clone(), i as u32))
            .collect();

        let mut postings = vec![Vec::new(); terms.len()];
        let rows: Vec<SparseVector> = docs
            .iter()
            .map(|doc| weigh(doc, &vocabulary, &idf))
            .collect();
        for (row, vec) in rows.iter().enumerate() {
            for &(col, w) in &vec.entries {
                postings[col as usize].push((row as u32, w));
            }
        }

        Ok(TfidfIndex {
            config: config.clone(),
            vocabulary,
            terms,
            idf,
            rows,
            postings,
            ids,
        })
    }

    pub fn config(&self) -> &TfidfConfig {
        &self.config
    }

    pub fn vocabulary_len(&self) -> usize {
        self.terms.len()
    }

    pub fn contains_term(&self, term: &str) -> bool {
        self.vocabulary.contains_key(term)
    }

    /// Terms in column order.
    pub fn terms(&self) -> &[String] {
        &self.terms
    }

    pub fn idf(&self, term: &str) -> Option<f64> {
        self.vocabulary.get(term).map(|&c| self.idf[c as usize])
    }

    pub fn row(&self, row: usize) -> &SparseVector {
        &self.rows[row]
    }

    pub fn len(&self) -> usize {
        self.rows.len()
    }

    pub fn is_empty(&self) -> bool {
        self.rows.is_empty()
    }

    pub fn ids(&self) -> &[String] {
        &self.ids
    }

    /// Vectorize text with the fitted vocabulary and idf, L2-normalized.
    pub fn query_vector(&self, text: &str) -> SparseVector {
        weigh(
            &term_counts(text, self.config.ngram_range),
            &self.vocabulary,
            &self.idf,
        )
    }

    pub fn topk(
        &self,
        query_text: &str,
        k: usize,
        exclude_ids: &HashSet<String>,
    ) -> Vec<ScoredDoc> {
        self.topk_vector(&self.query_vector(query_text), k, exclude_ids)
    }

    /// Top-`k` rows by cosine similarity, ties broken by ascending row.
    pub fn topk_vector(
        &self,
        query: &SparseVector,
        k: usize,
        exclude_ids: &HashSet<String>,
    ) -> Vec<ScoredDoc> {
        let mut q = query.clone();
        q.normalize();
        let mut scores = vec![0.0f64; self.rows.len()];
        for &(col, w) in &q.entries {
            for &(row, v) in &self.postings[col as usize] {
                scores[row as usize] += w * v;
            }
        }
        let mut candidates: Vec<(usize, f64)> = scores
            .into_iter()
            .enumerate()
            .filter(|(row, _)| !exclude_ids.contains(&self.ids[*row]))
            .collect();
        let by_rank = |a: &(usize, f64), b: &(usize, f64)| b.1.total_cmp(&a.1).then(a.0.cmp(&b.0));
        if k < candidates.len() {
            candidates.select_nth_unstable_by(k, by_rank);
            candidates.truncate(k);
        }
        candidates.sort_by(by_rank);
        candidates
            .into_iter()
            .map(|(row, score)| ScoredDoc {
                id: self.ids[row].clone(),
                row,
                score,
            })
            .collect()
    }
}

fn weigh(
    counts: &HashMap<String, u32>,
    vocabulary: &HashMap<String, u32>,
    idf: &[f64],
) -> SparseVector {
    let mut entries: Vec<(u32, f64)> = counts
        .iter()
        .filter_map(|(term, &tf)| {
            vocabulary
                .get(term)
                .map(|&col| (col, f64::from(tf) * idf[col as usize]))
        })
        .collect();
    entries.sort_by_key(|e| e.0);
    let mut v = SparseVector { entries };
    v.normalize();
    v
}

/// Convenience wrapper matching the free-function style of the other modules.
pub fn fit_tfidf(corpus: &PatentCorpus, config: &TfidfConfig) -> Result<TfidfIndex> {
    TfidfIndex::fit(corpus, config)
}

pub fn tfidf_topk(
    index: &TfidfIndex,
    query_text: &str,
    k: usize,
    exclude_ids: &HashSet<String>,
) -> Vec<ScoredDoc> {
    index.topk(query_text, k, exclude_ids)
}

/// Keyed dense vectors as read from disk, before any normalization.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct RawVectors {
    pub keys: Vec<String>,
    pub dim: usize,
    pub data: Vec<f64>,
}

impl RawVectors {
    pub fn vector(&self, i: usize) -> &[f64] {
        &self.data[i * self.dim..(i + 1) * self.dim]
    }

    pub fn len(&self) -> usize {
        self.keys.len()
    }

    pub fn is_empty(&self) -> bool {
        self.keys.is_empty()
    }

    fn push(&mut self, key: String, vector: &[f64]) -> Result<()> {
        if self.keys.is_empty() {
            self.dim = vector.len();
        } else if vector.len() != self.dim {
            return Err(Error::DimensionMismatch {
                key,
                expected: self.dim,
                found: vector.len(),
            });
        }
        if vector.is_empty() {
            return Err(Error::DimensionMismatch {
                key,
                expected: 1,
                found: 0,
            });
        }
        self.keys.push(key);
        self.data.extend_from_slice(vector);
        Ok(())
    }
}

#[derive(Deserialize)]
struct VectorLine {
    #[serde(alias = "code")]
    id: String,
    vector: Vec<f64>,
}

const BINARY_MAGIC: &[u8] = b"dim=";

/// Read vectors from JSONL (`{"code"|"id": str, "vector": [...]}`) or the
/// flat binary layout:
///
/// ```text
/// dim=<d>\n
/// count=<n>\n
/// <key 1>\n ... <key n>\n
/// n·d little-endian f32 values, row-major
/// ```
pub fn read_vectors(path: impl AsRef<Path>) -> Result<RawVectors> {
    let path = path.as_ref();
    let mut bytes = Vec::new();
    File::open(path)
        .and_then(|mut f| f.read_to_end(&mut bytes))
        .map_err(|e| Error::io(path, e))?;
    let source = path.display().to_string();
    if bytes.starts_with(BINARY_MAGIC) {
        parse_binary_vectors(&bytes, &source)
    } else {
        parse_jsonl_vectors(BufReader::new(bytes.as_slice()), &source)
    }
}

pub fn parse_jsonl_vectors<R: BufRead>(reader: R, source: &str) -> Result<RawVectors> {
    let mut out = RawVectors::default();
    for (i, line) in reader.lines().enumerate() {
        let line = line.map_err(|e| Error::io(source, e))?;
        if line.trim().is_empty() {
            continue;
        }
        let v: VectorLine =
            serde_json::from_str(&line).map_err(|e| Error::parse(source, i + 1, e.to_string()))?;
        if v.vector.iter().any(|x| !x.is_finite()) {
            return Err(Error::parse(source, i + 1, "non-finite vector component"));
        }
        out.push(v.id, &v.vector)?;
    }
    Ok(out)
}

pub fn parse_binary_vectors(bytes: &[u8], source: &str) -> Result<RawVectors> {
    let mut pos = 0;
    let mut next_line = |lineno: usize| -> Result<String> {
        let end = bytes[pos..]
            .iter()
            .position(|&b| b == b'\n')
            .ok_or_else(|| Error::parse(source, lineno, "truncated header"))?;
        let line = std::str::from_utf8(&bytes[pos..pos + end])
            .map_err(|_| Error::parse(source, lineno, "header is not UTF-8"))?
            .to_string();
        pos += end + 1;
        Ok(line)
    };
    let field = |line: &str, name: &str, lineno: usize| -> Result<usize> {
        line.strip_prefix(name)
            .and_then(|v| v.trim().parse().ok())
            .ok_or_else(|| Error::parse(source, lineno, format!("expected {name}<integer>")))
    };
    let dim = field(&next_line(1)?, "dim=", 1)?;
    let count = field(&next_line(2)?, "count=", 2)?;
    let mut keys = Vec::with_capacity(count);
    for i in 0..count {
        keys.push(next_line(3 + i)?);
    }
    let payload = &bytes[pos..];
    if payload.len() != count * dim * 4 {
        return Err(Error::parse(
            source,
            3 + count,
            format!(
                "expected {} payload bytes, found {}",
                count * dim * 4,
                payload.len()
            ),
        ));
    }
    let mut out = RawVectors::default();
    let mut row = Vec::with_capacity(dim);
    for (i, key) in keys.into_iter().enumerate() {
        row.clear();
        for j in 0..dim {
            let off = (i * dim + j) * 4;
            let x = f32::from_le_bytes([
                payload[off],
                payload[off + 1],
                payload[off + 2],
                payload[off + 3],
            ]);
            row.push(f64::from(x));
        }
        out.push(key, &row)?;
    }
    Ok(out)
}

pub fn write_binary_vectors<W: Write>(vectors: &RawVectors, mut out: W) -> Result<()> {
    let io = |e| Error::io("<output>", e);
    write!(out, "dim={}\ncount={}\n", vectors.dim, vectors.len()).map_err(io)?;
    for k in &vectors.keys {
        writeln!(out, "{k}").map_err(io)?;
    }
    for &x in &vectors.data {
        out.write_all(&(x as f32).to_le_bytes()).map_err(io)?;
    }
    Ok(())
}

fn unit(key: &str, v: &[f64]) -> Result<Vec<f64>> {
    let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt();
    if norm == 0.0 {
        return Err(Error::ZeroVector {
            key: key.to_string(),
        });
    }
    Ok(v.iter().map(|x| x / norm).collect())
}

/// L2-normalized definition embeddings, one row per CPC code.
#[derive(Clone, Debug)]
pub struct EmbeddingMatrix {
    codes: Vec<CpcCode>,
    dim: usize,
    data: Vec<f64>,
}

impl EmbeddingMatrix {
    pub fn from_raw(raw: &RawVectors) -> Result<Self> {
        let mut codes = Vec::with_capacity(raw.len());
        let mut seen = HashSet::new();
        let mut data = Vec::with_capacity(raw.data.len());
        for (i, key) in raw.keys.iter().enumerate() {
            let code = normalize_code(key)?;
            if !seen.insert(code) {
                return Err(Error::DuplicateCode(code));
            }
            codes.push(code);
            data.extend(unit(key, raw.vector(i))?);
        }
        if codes.is_empty() {
            return Err(Error::EmptyInput("embedding matrix"));
        }
        Ok(EmbeddingMatrix {
            codes,
            dim: raw.dim,
            data,
        })
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn len(&self) -> usize {
        self.codes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.codes.is_empty()
    }

    pub fn codes(&self) -> &[CpcCode] {
        &self.codes
    }

    pub fn row(&self, i: usize) -> &[f64] {
        &self.data[i * self.dim..(i + 1) * self.dim]
    }

    pub fn vector(&self, code: &CpcCode) -> Option<&[f64]> {
        self.codes
            .iter()
            .position(|c| c == code)
            .map(|i| self.row(i))
    }
}

pub fn load_embeddings(path: impl AsRef<Path>) -> Result<EmbeddingMatrix> {
    EmbeddingMatrix::from_raw(&read_vectors(path)?)
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct AllowedCode {
    pub code: CpcCode,
    pub score: f64,
}

/// Ranked candidate codes for one patent, best first.
#[derive(Clone, Debug, PartialEq)]
pub struct AllowedLabelSet {
    pub patent_id: String,
    entries: Vec<AllowedCode>,
}

impl AllowedLabelSet {
    pub fn new(patent_id: impl Into<String>, entries: Vec<AllowedCode>) -> Result<Self> {
        let patent_id = patent_id.into();
        if entries.is_empty() {
            return Err(Error::EmptyInput("allowed label set"));
        }
        let mut seen = HashSet::new();
        for e in &entries {
            if !seen.insert(e.code) {
                return Err(Error::DuplicateCode(e.code));
            }
        }
        if entries.windows(2).any(|w| w[1].score > w[0].score)
            || entries.iter().any(|e| e.score.is_nan())
        {
            return Err(Error::Invariant(format!(
                "allowed set for {patent_id:?} is not sorted by score"
            )));
        }
        Ok(AllowedLabelSet { patent_id, entries })
    }

    pub fn entries(&self) -> &[AllowedCode] {
        &self.entries
    }

    pub fn codes(&self) -> Vec<CpcCode> {
        self.entries.iter().map(|e| e.code).collect()
    }

    pub fn contains(&self, code: &CpcCode) -> bool {
        self.entries.iter().any(|e| &e.code == code)
    }

    pub fn top1(&self) -> CpcCode {
        self.entries[0].code
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    /// The best `k` entries (all of them when fewer exist).
    pub fn truncated(&self, k: usize) -> AllowedLabelSet {
        AllowedLabelSet {
            patent_id: self.patent_id.clone(),
            entries: self.entries[..k.min(self.entries.len()).max(1)].to_vec(),
        }
    }
}

/// Top-`k` codes by dot product with the normalized query, ties in code order.
pub fn allowed_set(
    patent_id: &str,
    query: &[f64],
    matrix: &EmbeddingMatrix,
    k: usize,
) -> Result<AllowedLabelSet> {
    if k == 0 {
        return Err(Error::Config("k must be at least 1".into()));
    }
    if query.len() != matrix.dim() {
        return Err(Error::DimensionMismatch {
            key: patent_id.to_string(),
            expected: matrix.dim(),
            found: query.len(),
        });
    }
    let q = unit(patent_id, query)?;
    let mut scored: Vec<AllowedCode> = matrix
        .codes()
        .iter()
        .enumerate()
        .map(|(i, &code)| {
            let dot: f64 = matrix.row(i).iter().zip(&q).map(|(a, b)| a * b).sum();
            AllowedCode {
                code,
                score: dot.clamp(-1.0, 1.0),
            }
        })
        .collect();
    scored.sort_by(|a, b| b.score.total_cmp(&a.score).then(a.code.cmp(&b.code)));
    scored.truncate(k);
    AllowedLabelSet::new(patent_id, scored)
}

/// Allowed sets keyed by patent id.
pub type AllowedSets = BTreeMap<String, AllowedLabelSet>;

#[derive(Serialize, Deserialize)]
struct AllowedLine {
    id: String,
    codes: Vec<String>,
    scores: Vec<f64>,
}

pub fn read_allowed_sets<R: BufRead>(reader: R, source: &str) -> Result<AllowedSets> {
    let mut out = AllowedSets::new();
    for (i, line) in reader.lines().enumerate() {
        let line = line.map_err(|e| Error::io(source, e))?;
        if line.trim().is_empty() {
            continue;
        }
        let row: AllowedLine =
            serde_json::from_str(&line).map_err(|e| Error::parse(source, i + 1, e.to_string()))?;
        if row.codes.len() != row.scores.len() {
            return Err(Error::parse(
                source,
                i + 1,
                "codes and scores differ in length",
            ));
        }
        let entries = row
            .codes
            .iter()
            .zip(&row.scores)
            .map(|(c, &score)| {
                Ok(AllowedCode {
                    code: normalize_code(c)?,
                    score,
                })
            })
            .collect::<Result<Vec<_>>>()
            .map_err(|e| Error::parse(source, i + 1, e.to_string()))?;
        let set = AllowedLabelSet::new(row.id.clone(), entries)
            .map_err(|e| Error::parse(source, i + 1, e.to_string()))?;
        if out.insert(row.id.clone(), set).is_some() {
            return Err(Error::DuplicateId(row.id));
        }
    }
    Ok(out)
}

pub fn load_allowed_sets(path: impl AsRef<Path>) -> Result<AllowedSets> {
    let path = path.as_ref();
    let file = File::open(path).map_err(|e| Error::io(path, e))?;
    read_allowed_sets(BufReader::new(file), &path.display().to_string())
}

pub fn write_allowed_set<W: Write>(set: &AllowedLabelSet, mut out: W) -> Result<()> {
    let line = AllowedLine {
        id: set.patent_id.clone(),
        codes: set.entries.iter().map(|e| e.code.to_string()).collect(),
        scores: set.entries.iter().map(|e| e.score).collect(),
    };
    serde_json::to_writer(&mut out, &line)?;
    out.write_all(b"\n").map_err(|e| Error::io("<output>", e))
}
