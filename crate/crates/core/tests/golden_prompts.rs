mod common;

use std::collections::BTreeMap;

use cpc_harness::corpus::Split;
use cpc_harness::evaluation::{prepare, LlmInputs, RunConfig, RunManifest};
use cpc_harness::prompting::{
    build_fewshot_block, format_allowed_block, render_prompt, FewShotConfig, PromptBundle, Regime,
};
use cpc_harness::retrieval::{fit_tfidf, TfidfConfig, DEFAULT_TOP_K};
use sha2::{Digest, Sha256};

fn golden(name: &str) -> String {
    std::fs::read_to_string(common::synthetic("golden_prompts").join(name)).unwrap()
}

fn checksums() -> BTreeMap<String, String> {
    golden("SHA256SUMS")
        .lines()
        .map(|l| {
            let (hash, file) = l.split_once("  ").unwrap();
            (file.to_string(), hash.to_string())
        })
        .collect()
}

fn sha256_hex(text: &str) -> String {
    hex::encode(Sha256::digest(text.as_bytes()))
}

/// Prompts for the first test patent, rendered piece by piece.
fn render_direct(regime: Regime) -> PromptBundle {
    let train = common::corpus("train.jsonl", Split::Train);
    let test = common::corpus("test.jsonl", Split::Test);
    let patent = &test.records()[0];
    let fewshot = regime.uses_fewshot().then(|| {
        let tfidf = fit_tfidf(&train, &TfidfConfig::default()).unwrap();
        build_fewshot_block(&train, &FewShotConfig::default(), &tfidf, &patent.text()).unwrap()
    });
    let allowed = regime.uses_allowed().then(|| {
        let sets = common::allowed_sets(DEFAULT_TOP_K);
        format_allowed_block(&sets[&patent.id], &common::catalog())
    });
    render_prompt(regime, patent, fewshot.as_ref(), allowed.as_ref()).unwrap()
}

#[test]
fn golden_files_match_their_checksums() {
    let sums = checksums();
    assert_eq!(sums.len(), 8);
    for (file, hash) in sums {
        assert_eq!(sha256_hex(&golden(&file)), hash, "{file}");
    }
}

#[test]
fn rendered_prompts_are_byte_identical_to_golden_files() {
    for regime in Regime::ALL {
        let bundle = render_direct(regime);
        assert_eq!(bundle.id, "TE000");
        assert_eq!(
            bundle.system,
            golden(&format!("{}.system.txt", regime.name())),
            "{regime} system"
        );
        assert_eq!(
            bundle.user,
            golden(&format!("{}.user.txt", regime.name())),
            "{regime} user"
        );
    }
}

#[test]
fn fewshot_ids_and_allowed_codes_match_metadata() {
    let meta = common::read_json(common::synthetic("golden_prompts/meta.json"));
    for regime in Regime::ALL {
        let bundle = render_direct(regime);
        let want = &meta["regimes"][regime.name()];
        let ids: Vec<String> = serde_json::from_value(want["fewshot_ids"].clone()).unwrap();
        let codes: Vec<String> = serde_json::from_value(want["allowed_codes"].clone()).unwrap();
        assert_eq!(bundle.fewshot_ids, ids, "{regime}");
        assert_eq!(
            bundle
                .allowed_codes
                .iter()
                .map(|c| c.to_string())
                .collect::<Vec<_>>(),
            codes,
            "{regime}"
        );
        if regime.uses_fewshot() {
            assert_eq!(bundle.fewshot_ids.len(), 5);
        }
    }
}

#[test]
fn retrieval_reproduces_reference_allowed_sets() {
    let want = common::read_json(common::synthetic("expected/allowed_k20.json"));
    let sets = common::allowed_sets(DEFAULT_TOP_K);
    assert_eq!(sets.len(), want.as_object().unwrap().len());
    for (id, set) in &sets {
        let codes: Vec<String> = set.codes().iter().map(|c| c.to_string()).collect();
        let expected: Vec<String> = serde_json::from_value(want[id].clone()).unwrap();
        assert_eq!(codes, expected, "{id}");
    }
}

#[test]
fn pipeline_prepare_renders_the_same_prompts() {
    let train = common::corpus("train.jsonl", Split::Train);
    let test = common::corpus("test.jsonl", Split::Test);
    let catalog = common::catalog();
    let sets = common::allowed_sets(DEFAULT_TOP_K);
    let inputs = LlmInputs {
        test: &test,
        train: Some(&train),
        catalog: Some(&catalog),
        allowed: Some(&sets),
    };
    for regime in Regime::ALL {
        let manifest = RunManifest::new("golden", RunConfig::llm(regime)).unwrap();
        let bundles = prepare(&inputs, &manifest).unwrap();
        assert_eq!(bundles.len(), test.len());
        assert_eq!(bundles[0], render_direct(regime), "{regime}");
    }
}
