mod common;

use dspo_annotation::{export_records, AnnotationError, AnnotationStore, AnnotationSubmission, StoreConfig, TaskStatus};
use dspo_core::preference::RecordSource;

fn sub(task: &str, annotator: &str, winner: &str, loser: &str, round: usize) -> AnnotationSubmission {
    AnnotationSubmission {
        task_id: task.into(),
        annotator_id: annotator.into(),
        winner_label: winner.into(),
        loser_label: loser.into(),
        flagged_caption_labels: vec![],
        round,
        timestamp: Some(1),
    }
}

fn store_with(n: usize) -> (tempfile::TempDir, AnnotationStore, Vec<String>) {
    let dir = tempfile::tempdir().unwrap();
    let mut store = AnnotationStore::open(dir.path(), StoreConfig::default()).unwrap();
    let specs = (0..n).map(|i| common::task_spec(&store.files_dir(), &format!("img{i}"), i % 5)).collect();
    let ids = store.create_tasks(specs).unwrap();
    (dir, store, ids)
}

#[test]
fn tasks_are_served_once_per_annotator_and_round() {
    let (_dir, mut store, ids) = store_with(3);
    let mut seen = Vec::new();
    while let Some(task) = store.next_task("ann-1", 0) {
        assert_eq!(task.status, TaskStatus::Open);
        assert_eq!(task.spec.candidates.len(), 4);
        store.submit(sub(&task.task_id, "ann-1", "step-20", "cfg-10.5", 0)).unwrap();
        seen.push(task.task_id);
    }
    assert_eq!(seen, ids);
    // another annotator and another round are independent
    assert_eq!(store.next_task("ann-2", 0).unwrap().task_id, ids[0]);
    assert_eq!(store.next_task("ann-1", 1).unwrap().task_id, ids[0]);
}

#[test]
fn interleaved_annotators_each_see_every_task() {
    let (_dir, mut store, ids) = store_with(3);
    let (mut a, mut b) = (Vec::new(), Vec::new());
    for _ in 0..3 {
        let t = store.next_task("a", 0).unwrap().task_id;
        store.submit(sub(&t, "a", "step-20", "step-80", 0)).unwrap();
        a.push(t);
        let t = store.next_task("b", 0).unwrap().task_id;
        store.submit(sub(&t, "b", "step-20", "step-80", 0)).unwrap();
        b.push(t);
    }
    assert_eq!(a, ids);
    assert_eq!(b, ids);
    assert!(store.next_task("a", 0).is_none() && store.next_task("b", 0).is_none());
}

#[test]
fn identical_content_yields_distinct_ids() {
    let dir = tempfile::tempdir().unwrap();
    let mut store = AnnotationStore::open(dir.path(), StoreConfig::default()).unwrap();
    let spec = common::task_spec(&store.files_dir(), "img", 0);
    let a = store.create_tasks(vec![spec.clone()]).unwrap();
    let b = store.create_tasks(vec![spec]).unwrap();
    assert_ne!(a, b);
}

#[test]
fn invalid_submissions_are_rejected() {
    let (_dir, mut store, ids) = store_with(1);
    let same = store.submit(sub(&ids[0], "a", "step-20", "step-20", 0)).unwrap_err();
    assert!(matches!(same, AnnotationError::Invalid(_)), "{same}");
    let unknown = store.submit(sub(&ids[0], "a", "step-20", "nope", 0)).unwrap_err();
    assert!(unknown.to_string().contains("nope"));
    let mut flagged = sub(&ids[0], "a", "step-20", "step-80", 0);
    flagged.flagged_caption_labels = vec!["ghost".into()];
    assert!(store.submit(flagged).is_err());
    assert!(matches!(store.submit(sub("t999999", "a", "step-20", "step-80", 0)), Err(AnnotationError::UnknownTask(_))));
    assert!(store.submissions().is_empty());
}

#[test]
fn missing_crop_is_named() {
    let dir = tempfile::tempdir().unwrap();
    let mut store = AnnotationStore::open(dir.path(), StoreConfig::default()).unwrap();
    let mut spec = common::task_spec(&store.files_dir(), "img", 0);
    spec.candidates[2].image = "img/inst0/absent.png".into();
    match store.create_tasks(vec![spec]) {
        Err(AnnotationError::MissingFile(p)) => assert!(p.ends_with("img/inst0/absent.png")),
        other => panic!("expected missing file, got {other:?}"),
    }
}

#[test]
fn resubmission_replaces_and_survives_reopen() {
    let (dir, mut store, ids) = store_with(1);
    assert!(!store.submit(sub(&ids[0], "a", "step-20", "step-80", 0)).unwrap().replaced);
    assert!(store.submit(sub(&ids[0], "a", "cfg-4.5", "step-80", 0)).unwrap().replaced);
    let records = store.export_human_records();
    assert_eq!(records.len(), 1);
    assert_eq!(records[0].settings.winner, "cfg-4.5");
    drop(store);
    let reopened = AnnotationStore::open(dir.path(), StoreConfig::default()).unwrap();
    assert_eq!(reopened.export_human_records(), records);
    assert_eq!(reopened.stats().submissions, 1);
}

#[test]
fn majority_vote_and_tie_skip() {
    let (_dir, mut store, ids) = store_with(3);
    // unanimous
    for a in ["x", "y", "z"] {
        store.submit(sub(&ids[0], a, "step-80", "cfg-10.5", 0)).unwrap();
    }
    // 2-vs-1 winner
    store.submit(sub(&ids[1], "x", "step-20", "cfg-10.5", 0)).unwrap();
    store.submit(sub(&ids[1], "y", "step-20", "cfg-10.5", 0)).unwrap();
    store.submit(sub(&ids[1], "z", "cfg-4.5", "cfg-10.5", 0)).unwrap();
    // 1-1-1 winner split
    store.submit(sub(&ids[2], "x", "step-20", "cfg-10.5", 0)).unwrap();
    store.submit(sub(&ids[2], "y", "step-80", "cfg-10.5", 0)).unwrap();
    store.submit(sub(&ids[2], "z", "cfg-4.5", "cfg-10.5", 0)).unwrap();
    let records = store.export_human_records();
    assert_eq!(records.len(), 2);
    assert_eq!((records[0].settings.winner.as_str(), records[0].settings.loser.as_str()), ("step-80", "cfg-10.5"));
    assert_eq!(records[0].winner_path, "candidates/img0/step-80.png");
    assert_eq!(records[1].settings.winner, "step-20");
    assert!(records.iter().all(|r| r.source == RecordSource::Human && r.weight == 0.25 && r.validate().is_ok()));
}

#[test]
fn majority_flagged_captions_become_negative_prompt() {
    let (_dir, mut store, ids) = store_with(1);
    let mut s = sub(&ids[0], "x", "step-20", "cfg-10.5", 0);
    s.flagged_caption_labels = vec!["cfg-10.5".into(), "step-80".into()];
    store.submit(s.clone()).unwrap();
    s.annotator_id = "y".into();
    s.flagged_caption_labels = vec!["cfg-10.5".into()];
    store.submit(s.clone()).unwrap();
    s.annotator_id = "z".into();
    s.flagged_caption_labels = vec![];
    store.submit(s).unwrap();
    let records = store.export_human_records();
    assert_eq!(records[0].negative_prompt.as_deref(), Some("smooth-red busy-blue-3"));
}

#[test]
fn export_is_a_pure_function_of_the_log() {
    let (_dir, mut store, ids) = store_with(2);
    store.submit(sub(&ids[1], "x", "step-20", "cfg-10.5", 0)).unwrap();
    assert_eq!(export_records(&store.tasks(), &store.submissions()), store.export_human_records());
    let (_d2, empty, _) = store_with(2);
    assert!(empty.export_human_records().is_empty());
}

#[test]
fn votes_per_task_closes_tasks() {
    let dir = tempfile::tempdir().unwrap();
    let mut store = AnnotationStore::open(dir.path(), StoreConfig { votes_per_task: Some(1) }).unwrap();
    let spec = common::task_spec(&store.files_dir(), "img", 0);
    let ids = store.create_tasks(vec![spec]).unwrap();
    store.submit(sub(&ids[0], "x", "step-20", "cfg-10.5", 0)).unwrap();
    assert_eq!(store.task(&ids[0]).unwrap().status, TaskStatus::Done);
    assert!(store.next_task("y", 0).is_none());
    assert_eq!(store.stats().done, 1);
}
