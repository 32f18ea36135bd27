#![allow(dead_code)]

use std::path::PathBuf;

use cpc_harness::corpus::{load_corpus, CorpusFormat, PatentCorpus, Split};
use cpc_harness::retrieval::{allowed_set, load_embeddings, read_vectors, AllowedSets};
use cpc_harness::taxonomy::{load_definitions, DefinitionCatalog};

pub fn fixtures() -> PathBuf {
    PathBuf::from(env!("CARGO_MANIFEST_DIR")).join("../../fixtures")
}

pub fn synthetic(name: &str) -> PathBuf {
    fixtures().join("synthetic").join(name)
}

pub fn corpus(name: &str, split: Split) -> PatentCorpus {
    load_corpus(synthetic(name), CorpusFormat::Jsonl, split).unwrap()
}

pub fn catalog() -> DefinitionCatalog {
    load_definitions(synthetic("definitions.txt")).unwrap()
}

/// Allowed sets for every synthetic query, retrieved with the library.
pub fn allowed_sets(k: usize) -> AllowedSets {
    let matrix = load_embeddings(synthetic("embeddings.jsonl")).unwrap();
    let queries = read_vectors(synthetic("queries.jsonl")).unwrap();
    (0..queries.len())
        .map(|i| {
            let set = allowed_set(&queries.keys[i], queries.vector(i), &matrix, k).unwrap();
            (set.patent_id.clone(), set)
        })
        .collect()
}

pub fn read_json(path: PathBuf) -> serde_json::Value {
    serde_json::from_str(&std::fs::read_to_string(path).unwrap()).unwrap()
}
