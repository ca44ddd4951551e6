mod common;

use common::*;
use ovdet::data::{load_records, KindRatios, SyntheticSpec};
use ovdet::model::load_checkpoint;
use ovdet::train::MetricsRow;
use ovdet::util::read_jsonl;
use ovdet::{evaluate, train, EvalOptions, EvalReport, RecordKind};

/// Eight fully annotated detection images, so every batch has positives.
fn eight_detection_images() -> SyntheticSpec {
    SyntheticSpec {
        num_images: 8,
        eval_fraction: 0.0,
        kind_ratios: KindRatios { detection: 1.0, grounding: 0.0, imagetext: 0.0 },
        unannotated_holdout_rate: 0.0,
        seed: 3,
        ..Default::default()
    }
}

#[test]
fn one_epoch_on_eight_images_lowers_the_loss_for_most_seeds() {
    let mut decreased = 0;
    let mut trace = Vec::new();
    for seed in 0..5 {
        let dir = tempfile::tempdir().unwrap();
        let cfg = ovdet::TrainConfig { seed, ..tiny_run_with(dir.path(), &eight_detection_images()) };
        let out = train(&cfg).unwrap();
        assert!(out.losses.len() >= 2, "need at least two steps");
        let (first, last) = (out.losses[0], *out.losses.last().unwrap());
        trace.push((first, last));
        if last < first {
            decreased += 1;
        }
    }
    assert!(decreased >= 4, "first/last losses per seed: {trace:?}");
}

#[test]
fn zero_text_rate_freezes_the_text_tower() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = ovdet::TrainConfig { lr_text: 0.0, max_steps: Some(1), ..tiny_run(dir.path(), 10, 1) };
    let out = train(&cfg).unwrap();
    assert_eq!(out.steps, 1);
    // a fresh run at step zero has the same init, since init depends only on the seed
    let zero = ovdet::TrainConfig { max_steps: Some(0), out_dir: dir.path().join("zero"), ..cfg.clone() };
    let init = train(&zero).unwrap();
    let before = load_checkpoint(&init.checkpoint).unwrap().detector;
    let after = load_checkpoint(&out.checkpoint).unwrap().detector;
    assert_eq!(before.text_params().snapshot().unwrap(), after.text_params().snapshot().unwrap());
    assert_ne!(before.visual_params().snapshot().unwrap(), after.visual_params().snapshot().unwrap());
}

#[test]
fn both_groups_share_one_schedule_multiplier() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = ovdet::TrainConfig {
        epochs: 3,
        milestones: Some(vec![1, 2]),
        warmup_steps: 3,
        lr_visual: 3e-3,
        lr_text: 7e-4,
        ..tiny_run(dir.path(), 10, 2)
    };
    let out = train(&cfg).unwrap();
    let rows: Vec<MetricsRow> = read_jsonl(&out.metrics).unwrap();
    assert_eq!(rows.len() as u64, out.steps);
    for r in &rows {
        let f = cfg.lr_factor(r.epoch, r.step);
        assert_eq!(r.lr_visual, cfg.lr_visual * f);
        assert_eq!(r.lr_text, cfg.lr_text * f);
    }
    let last = rows.last().unwrap();
    assert!((last.lr_visual - cfg.lr_visual * 0.01).abs() < 1e-15);
}

#[test]
fn resume_continues_the_step_count() {
    let dir = tempfile::tempdir().unwrap();
    let base = tiny_run(dir.path(), 10, 4);
    let first = train(&ovdet::TrainConfig { epochs: 1, ..base.clone() }).unwrap();
    let ck = base.out_dir.join("checkpoint-epoch000.safetensors");
    assert_eq!(load_checkpoint(&ck).unwrap().meta.step, first.steps);
    let resumed = train(&ovdet::TrainConfig { epochs: 2, resume: Some(ck), ..base.clone() }).unwrap();
    assert_eq!(resumed.steps, 2 * first.steps);
    let rows: Vec<MetricsRow> = read_jsonl(&resumed.metrics).unwrap();
    let steps: Vec<u64> = rows.iter().map(|r| r.step).collect();
    assert_eq!(steps, (0..resumed.steps).collect::<Vec<_>>());
    assert!(rows[first.steps as usize..].iter().all(|r| r.epoch == 1));
}

#[test]
fn evaluation_reproduces_from_a_saved_checkpoint() {
    let dir = tempfile::tempdir().unwrap();
    let out = train(&tiny_run(dir.path(), 20, 5)).unwrap();
    let records = load_records(&dir.path().join("eval.jsonl"), RecordKind::Detection).unwrap();
    let concepts: Vec<String> = std::fs::read_to_string(dir.path().join("concepts.txt"))
        .unwrap()
        .lines()
        .map(str::to_string)
        .collect();
    let unseen = &concepts[8..];
    let dict = ovdet::ConceptDictionary::load(&dir.path().join("dict.jsonl")).unwrap();
    let run = || {
        let det = load_checkpoint(&out.checkpoint).unwrap().detector;
        evaluate(&det, &records, &concepts, unseen, Some(&dict), &EvalOptions::default()).unwrap()
    };
    let a = run();
    let path = dir.path().join("report.json");
    a.save(&path).unwrap();
    let saved = EvalReport::load(&path).unwrap();
    let b = run();
    assert!((saved.mean_ap - b.mean_ap).abs() <= 1e-9);
    for (name, r) in &saved.per_concept {
        let other = &b.per_concept[name];
        match (r.ap, other.ap) {
            (Some(x), Some(y)) => assert!((x - y).abs() <= 1e-9, "{name}"),
            (x, y) => assert_eq!(x, y, "{name}"),
        }
    }
    assert_eq!(saved.num_detections, b.num_detections);
    assert!((0.0..=1.0).contains(&b.mean_ap));
}

#[test]
fn training_without_records_is_a_config_error() {
    let cfg = ovdet::TrainConfig { dictionary: Some("dict.jsonl".into()), ..Default::default() };
    assert!(matches!(train(&cfg), Err(ovdet::Error::Config(_))));
}
