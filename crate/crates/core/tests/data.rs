use std::collections::BTreeSet;
use std::sync::Arc;

use ovdet::data::{
    generate_synthetic_dataset, normalize_record, DetectionRow, GroundingRow, PhraseBox,
    RawRecord, Split, SyntheticSpec, EOS_ID,
};
use ovdet::dictionary::{build_dictionary, ConceptSource, Lexicon};
use ovdet::{
    BBox, ConceptDictionary, Image, Object, ParallelInputBuilder, ParallelOptions, RecordKind,
    Tokenizer, UnifiedRecord,
};
use proptest::prelude::*;

fn dictionary(extra: usize) -> ConceptDictionary {
    let mut names: Vec<String> = ["person", "dog", "cattle", "woman"].map(String::from).to_vec();
    names.extend((0..extra).map(|i| format!("thing{i:02}")));
    let lex: Lexicon = [("person", "a human being"), ("dog", "a domestic canine.")]
        .into_iter()
        .collect();
    build_dictionary(&[(ConceptSource::Detection, names)], 1, &lex)
}

fn record(kind: RecordKind, names: &[String]) -> UnifiedRecord {
    UnifiedRecord {
        image_id: "r".into(),
        image: Arc::new(Image::zeros((16, 16, 3))),
        objects: names
            .iter()
            .enumerate()
            .map(|(i, n)| Object {
                bbox: BBox::new(0.0, 0.0, 2.0 + i as f64, 3.0).unwrap(),
                concept: n.clone(),
            })
            .collect(),
        kind,
        caption: None,
    }
}

fn arb_kind() -> impl Strategy<Value = RecordKind> {
    prop_oneof![
        Just(RecordKind::Detection),
        Just(RecordKind::Grounding),
        Just(RecordKind::Imagetext),
    ]
}

fn arb_positives() -> impl Strategy<Value = Vec<String>> {
    proptest::collection::vec(
        prop_oneof![
            Just("person".to_string()),
            Just("dog".to_string()),
            Just("woman".to_string()),
            (0..20usize).prop_map(|i| format!("thing{i:02}")),
        ],
        0..12,
    )
}

fn first_occurrence(names: &[String]) -> Vec<String> {
    let mut seen = Vec::new();
    for n in names {
        if !seen.contains(n) {
            seen.push(n.clone());
        }
    }
    seen
}

proptest! {
    #[test]
    fn positives_lead_in_first_occurrence_order(
        kind in arb_kind(),
        positives in arb_positives(),
        n in 1..16usize,
        enrich in any::<bool>(),
        seed in any::<u64>(),
    ) {
        let dict = dictionary(20);
        let opts = ParallelOptions { n, enrich, sample_negatives: true, ..Default::default() };
        let builder = ParallelInputBuilder::new(&dict, opts, None)
            .with_label_space(["person".to_string(), "dog".to_string(), "cattle".to_string()]);
        let p = builder.build(&record(kind, &positives), seed).unwrap();
        let mut expected = first_occurrence(&positives);
        expected.truncate(n);
        let k = expected.len();
        prop_assert_eq!(p.len(), n);
        prop_assert_eq!(p.positive_count, k);
        prop_assert_eq!(&p.names[..k], &expected[..]);
        let positive_set: BTreeSet<&String> = expected.iter().collect();
        prop_assert!(p.names[k..].iter().all(|x| !positive_set.contains(x)));
        let distinct: BTreeSet<&String> = p.names.iter().collect();
        prop_assert_eq!(distinct.len(), n);
        for (obj, &i) in p.objects.iter().zip(&p.concept_index_of_object) {
            prop_assert!(i < k);
            prop_assert_eq!(&p.names[i], &obj.concept);
        }
        // objects dropped only when their concept was truncated away
        let kept = positives.iter().filter(|x| expected.contains(x)).count();
        prop_assert_eq!(p.objects.len(), kept);
        for (text, name) in p.concepts.iter().zip(&p.names) {
            if enrich {
                prop_assert!(text.starts_with(name.as_str()) && text.ends_with('.'));
            } else {
                prop_assert_eq!(text, name);
            }
        }
    }

    #[test]
    fn seeds_only_move_the_negatives(
        kind in arb_kind(),
        positives in arb_positives(),
        s1 in any::<u64>(),
        s2 in any::<u64>(),
    ) {
        let dict = dictionary(20);
        let opts = ParallelOptions { n: 12, ..Default::default() };
        let builder = ParallelInputBuilder::new(&dict, opts, None);
        let rec = record(kind, &positives);
        let a = builder.build(&rec, s1).unwrap();
        prop_assert_eq!(&builder.build(&rec, s1).unwrap(), &a);
        let b = builder.build(&rec, s2).unwrap();
        let k = a.positive_count;
        prop_assert_eq!(&a.concepts[..k], &b.concepts[..k]);
        prop_assert_eq!(&a.concept_index_of_object, &b.concept_index_of_object);
    }

    #[test]
    fn tokens_fit_and_end_in_eos(text in "[a-z ,.]{0,400}", max_len in 2..64usize) {
        let tok = Tokenizer::from_texts(["person, a human being.", "red circle"], 16, max_len);
        let seq = tok.encode(&text);
        prop_assert!(seq.ids.len() <= max_len);
        prop_assert_eq!(*seq.ids.last().unwrap(), EOS_ID);
        prop_assert_eq!(seq.eos_position, seq.ids.len() - 1);
        prop_assert_eq!(tok.encode(&text), seq);
    }
}

#[test]
fn padding_without_negative_sampling_is_the_empty_text() {
    let dict = dictionary(0);
    let opts = ParallelOptions { n: 5, enrich: true, sample_negatives: false, ..Default::default() };
    let p = ParallelInputBuilder::new(&dict, opts, None)
        .build(&record(RecordKind::Grounding, &["person".into()]), 0)
        .unwrap();
    assert_eq!(p.concepts, vec!["person, a human being.", "", "", "", ""]);
}

#[test]
fn held_out_names_are_never_negatives() {
    let dict = dictionary(6);
    let opts = ParallelOptions { n: 8, ..Default::default() };
    let builder = ParallelInputBuilder::new(&dict, opts, None)
        .with_excluded(["thing00".to_string(), "thing01".to_string()]);
    for seed in 0..50 {
        let p = builder.build(&record(RecordKind::Imagetext, &["dog".into()]), seed).unwrap();
        assert!(!p.names.iter().any(|n| n == "thing00" || n == "thing01"));
    }
    // only 8 names remain, one short of what N=9 needs
    let tight = ParallelOptions { n: 9, ..Default::default() };
    let err = ParallelInputBuilder::new(&dict, tight, None)
        .with_excluded(["thing00".to_string(), "thing01".to_string()])
        .build(&record(RecordKind::Imagetext, &["dog".into()]), 0);
    assert!(err.is_err());
}

#[test]
fn detection_rows_normalize_to_unified_records() {
    let img = Arc::new(Image::zeros((20, 30, 3)));
    let raw = RawRecord::Detection(DetectionRow {
        image_id: "d".into(),
        image_path: "d.npy".into(),
        boxes: vec![[0.0, 0.0, 5.0, 5.0], [2.0, 2.0, 40.0, 8.0], [1.0, 1.0, 4.0, 4.0]],
        classes: vec!["car".into(), "Car".into(), "person".into()],
    });
    let n = normalize_record(raw, img.clone()).unwrap();
    assert_eq!(n.record.kind, RecordKind::Detection);
    let names: Vec<&str> = n.record.objects.iter().map(|o| o.concept.as_str()).collect();
    assert_eq!(names, ["car", "car", "person"]);
    assert_eq!(n.record.objects[1].bbox.x2, 30.0);

    let grounding = RawRecord::Grounding(GroundingRow {
        image_id: "g".into(),
        image_path: "g.npy".into(),
        caption: "a woman and a herding dog".into(),
        phrase_boxes: vec![
            PhraseBox { phrase: "a herding dog".into(), bbox: [0.0, 0.0, 4.0, 4.0] },
            PhraseBox { phrase: "ghost".into(), bbox: [40.0, 40.0, 50.0, 50.0] },
        ],
    });
    let g = normalize_record(grounding, img).unwrap();
    assert_eq!(g.record.objects.len(), 1);
    assert_eq!(g.record.objects[0].concept, "a herding dog");
    assert_eq!(g.dropped, 1);
}

#[test]
fn mismatched_detection_row_is_an_error() {
    let raw = RawRecord::Detection(DetectionRow {
        image_id: "d".into(),
        image_path: "d.npy".into(),
        boxes: vec![[0.0, 0.0, 5.0, 5.0]],
        classes: vec![],
    });
    assert!(normalize_record(raw, Arc::new(Image::zeros((8, 8, 3)))).is_err());
}

#[test]
fn synthetic_split_and_holdout_contract() {
    let spec = SyntheticSpec { num_images: 60, seed: 5, ..Default::default() };
    let ds = generate_synthetic_dataset(&spec).unwrap();
    assert_eq!(ds.records.len(), 60);
    assert_eq!(ds.training_concepts.len(), 8);
    assert_eq!(ds.holdout.len(), 4);
    let held: BTreeSet<&str> = ds.holdout.iter().map(String::as_str).collect();
    for r in ds.split(Split::Train) {
        assert!(r.record.objects.iter().all(|o| !held.contains(o.concept.as_str())));
        assert!((1..=4).contains(&r.ground_truth.len()));
    }
    for name in ds.palette_names() {
        assert!(ds.dictionary.lookup(&name).unwrap().definition.is_some(), "{name}");
    }
    let eval = ds.eval_records();
    assert!(!eval.is_empty());
    assert!(eval.iter().all(|r| r.kind == RecordKind::Detection));
}
