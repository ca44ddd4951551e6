use ovdet_py::{filter_proposals, giou, giou_loss, noun_phrases, PyDictionary};

#[test]
fn box_functions_match_the_core_crate() {
    assert_eq!(giou([0.0, 0.0, 2.0, 2.0], [0.0, 0.0, 2.0, 2.0]).unwrap(), 1.0);
    let loss = giou_loss(vec![([0.0, 0.0, 1.0, 1.0], [2.0, 2.0, 3.0, 3.0])]).unwrap();
    assert!((loss - 16.0 / 9.0).abs() < 1e-12);
    assert!(giou([1.0, 1.0, 0.0, 0.0], [0.0, 0.0, 1.0, 1.0]).is_err());
}

#[test]
fn proposal_filter_keeps_boundary_values() {
    let kept = filter_proposals(
        vec![([0.0, 0.0, 100.0, 60.0], 0.3), ([0.0, 0.0, 100.0, 59.0], 0.9), ([0.0, 0.0, 100.0, 100.0], 0.29)],
        0.3,
        6000.0,
    )
    .unwrap();
    assert_eq!(kept, vec![([0.0, 0.0, 100.0, 60.0], 0.3)]);
}

#[test]
fn dictionary_builds_saves_and_enriches() {
    assert_eq!(noun_phrases("two red circles and a blue square"), ["red circle", "blue square"]);
    let d = PyDictionary::build(
        vec!["person".into()],
        vec![],
        vec!["a red circle".into(), "the red circle".into(), "a cat".into()],
        vec![("person".into(), "a human being".into()), ("red circle".into(), "a round red shape".into())],
        2,
    );
    assert_eq!(d.names(), ["person", "red circle"]);
    assert_eq!(d.enrich("person"), "person, a human being.");
    assert_eq!(d.enrich("zebra"), "zebra.");
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("dict.jsonl");
    d.save(path.clone()).unwrap();
    let back = PyDictionary::load(path).unwrap();
    assert_eq!(back.__len__(), 2);
    assert!(back.__contains__("red circle"));
    assert_eq!(back.definition("red circle").as_deref(), Some("a round red shape"));
}
