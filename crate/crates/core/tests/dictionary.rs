use std::collections::BTreeSet;
use std::path::{Path, PathBuf};
use std::process::Command;

use ovdet::dictionary::{
    build_dictionary, enrich, extract_noun_phrases, format_enriched, ConceptDictionary,
    ConceptEntry, ConceptSource, Enricher, Lexicon, TableProvider,
};
use proptest::prelude::*;

const MIN_FREQ: u64 = 3;

fn fixture(name: &str) -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("tests/fixtures/dictionary").join(name)
}

fn lines(name: &str) -> Vec<String> {
    std::fs::read_to_string(fixture(name))
        .unwrap()
        .lines()
        .map(str::to_string)
        .collect()
}

fn fixture_dictionary() -> ConceptDictionary {
    let phrases: Vec<String> = lines("captions.txt")
        .iter()
        .flat_map(|c| extract_noun_phrases(c))
        .collect();
    let lexicon = Lexicon::load(&fixture("lexicon.jsonl")).unwrap();
    build_dictionary(
        &[
            (ConceptSource::Detection, lines("detection_names.txt")),
            (ConceptSource::Things, lines("things_names.txt")),
            (ConceptSource::Imagetext, phrases),
        ],
        MIN_FREQ,
        &lexicon,
    )
}

#[test]
fn fixture_corpus_builds_the_golden_jsonl() {
    let mut buf = Vec::new();
    fixture_dictionary().write_jsonl(&mut buf).unwrap();
    let golden = std::fs::read(fixture("golden.jsonl")).unwrap();
    assert_eq!(String::from_utf8(buf).unwrap(), String::from_utf8(golden).unwrap());
}

#[test]
fn frequency_boundaries() {
    let dict = fixture_dictionary();
    // exactly at the threshold with a definition
    assert_eq!(dict.lookup("red circle").unwrap().frequency, MIN_FREQ);
    // one below the threshold
    assert!(!dict.contains("blue square"));
    // frequent enough but undefined
    assert!(!dict.contains("herding dog"));
    // defined but never mentioned
    assert!(!dict.contains("cat"));
    // undefined detection names are kept
    assert_eq!(dict.lookup("car").unwrap().definition, None);
}

#[test]
fn cli_build_dict_writes_the_golden_jsonl() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("dict.jsonl");
    let status = Command::new(env!("CARGO_BIN_EXE_ovdet"))
        .arg("build-dict")
        .arg("--captions")
        .arg(fixture("captions.txt"))
        .arg("--detection-names")
        .arg(fixture("detection_names.txt"))
        .arg("--things-names")
        .arg(fixture("things_names.txt"))
        .arg("--lexicon")
        .arg(fixture("lexicon.jsonl"))
        .args(["--min-freq", "3", "--out"])
        .arg(&out)
        .status()
        .unwrap();
    assert!(status.success());
    assert_eq!(std::fs::read(&out).unwrap(), std::fs::read(fixture("golden.jsonl")).unwrap());
}

#[test]
fn golden_round_trips_through_load() {
    let dict = ConceptDictionary::load(&fixture("golden.jsonl")).unwrap();
    assert_eq!(dict, fixture_dictionary());
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("d.jsonl");
    dict.save(&path).unwrap();
    assert_eq!(ConceptDictionary::load(&path).unwrap().content_hash(), dict.content_hash());
}

#[test]
fn person_is_enriched_with_its_definition() {
    let dict = fixture_dictionary();
    assert_eq!(enrich(&dict, "person", None), "person, a human being.");
    assert_eq!(Enricher::new(&dict, None).enrich("person"), "person, a human being.");
}

#[test]
fn high_heels_retrieves_stiletto_under_the_fixture_table() {
    let dict = fixture_dictionary();
    let table = TableProvider::load(&fixture("embeddings.jsonl")).unwrap();
    let hit = dict.retrieve_nearest("High Heels", &table).unwrap();
    assert_eq!(hit.matched_name, "stiletto");
    assert!(!hit.exact);
    assert_eq!(
        hit.definition.as_deref(),
        Some("A woman's shoe with a thin, high tapering heel.")
    );
    assert_eq!(
        enrich(&dict, "High Heels", Some(&table)),
        "High Heels, a woman's shoe with a thin, high tapering heel."
    );
}

#[test]
fn unmatched_name_without_provider_falls_back_to_the_bare_name() {
    let dict = fixture_dictionary();
    assert_eq!(enrich(&dict, "zebra", None), "zebra.");
    // a provider that cannot embed the query also degrades to the name
    let table = TableProvider::load(&fixture("embeddings.jsonl")).unwrap();
    assert_eq!(enrich(&dict, "zebra", Some(&table)), "zebra.");
}

#[test]
fn duplicate_entries_are_rejected() {
    let e = ConceptEntry::new("dog", None, ConceptSource::Detection, 1);
    assert!(ConceptDictionary::from_entries([e.clone(), e]).is_err());
}

fn arb_name() -> impl Strategy<Value = String> {
    "[a-z]{1,8}( [a-z]{1,8})?"
}

proptest! {
    #[test]
    fn enriched_text_has_the_name_prefix_and_shape(
        name in arb_name(),
        def in proptest::option::of("[A-Za-z][a-z ,']{0,30}"),
    ) {
        let out = format_enriched(&name, def.as_deref());
        prop_assert!(out.starts_with(&name));
        prop_assert!(out.ends_with('.'));
        let head = out.split(", ").next().unwrap();
        prop_assert!(!head.contains(','));
    }

    #[test]
    fn build_is_order_independent_within_a_source(
        mut names in proptest::collection::vec(arb_name(), 1..20),
        seed in any::<u64>(),
    ) {
        let lex = Lexicon::new();
        let a = build_dictionary(&[(ConceptSource::Detection, names.clone())], 1, &lex);
        let k = names.len();
        names.rotate_left((seed as usize) % k);
        let b = build_dictionary(&[(ConceptSource::Detection, names)], 1, &lex);
        prop_assert_eq!(a.content_hash(), b.content_hash());
    }

    #[test]
    fn negatives_are_distinct_and_avoid_exclusions(
        names in proptest::collection::btree_set(arb_name(), 2..30),
        seed in any::<u64>(),
    ) {
        let lex = Lexicon::new();
        let dict = build_dictionary(&[(ConceptSource::Detection, names.iter().cloned().collect::<Vec<_>>())], 1, &lex);
        let exclude: BTreeSet<String> = names.iter().take(1).cloned().collect();
        let k = dict.len() - exclude.len();
        let drawn = dict.sample_negatives(&exclude, k, seed).unwrap();
        let uniq: BTreeSet<&String> = drawn.iter().collect();
        prop_assert_eq!(uniq.len(), k);
        prop_assert!(drawn.iter().all(|n| !exclude.contains(n)));
        prop_assert!(dict.sample_negatives(&exclude, k + 1, seed).is_err());
        prop_assert_eq!(dict.sample_negatives(&exclude, k, seed).unwrap(), drawn);
    }
}
