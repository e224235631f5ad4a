mod common;

use telii::bench::{run_oracle, run_suite_on, BenchQuery, Oracle, QuerySampler, Suite, Task};
use telii::pipeline::{self, BuildOptions};
use telii::query::{DayRange, Engine, QueryEngine};
use telii::store::{BuildMode, Manifest, StoreHandle};
use telii::{Error, EventKey, Relation};

fn small(root: &std::path::Path, opts: &BuildOptions) -> common::Corpus {
    common::corpus(root, &common::config(300, 40, 15, 11), opts)
}

#[test]
fn engines_agree_with_oracle_on_small_corpus() {
    let dir = tempfile::tempdir().unwrap();
    let corpus = small(dir.path(), &BuildOptions::default());
    let store = StoreHandle::open(&corpus.data).unwrap();
    let oracle = Oracle::load(&corpus.records, &corpus.rules).unwrap();
    let rows = run_suite_on(&store, Some(&oracle), Suite::All, 30, 5).unwrap();
    assert_eq!(rows.len(), 4 * 30 * 2);
    let bad: Vec<_> = rows.iter().filter(|r| r.oracle_match != Some(true)).collect();
    assert!(bad.is_empty(), "{bad:#?}");
}

#[test]
fn derived_event_is_indexed_and_counted() {
    let dir = tempfile::tempdir().unwrap();
    let corpus = small(dir.path(), &BuildOptions::default());
    let store = StoreHandle::open(&corpus.data).unwrap();
    let id = store.catalog().resolve("PCR_POSITIVE").unwrap();
    let oracle = Oracle::load(&corpus.records, &corpus.rules).unwrap();
    let key = EventKey::derived("PCR_POSITIVE").unwrap();
    assert!(oracle.event_count(&key) > 0);
    assert_eq!(store.catalog().patient_count(id), oracle.event_count(&key));
    assert_eq!(store.manifest().derived_rules, vec!["PCR_POSITIVE".to_string()]);
}

fn answers(store: &StoreHandle, queries: &[BenchQuery]) -> Vec<telii::bench::Answer> {
    let engine = QueryEngine::new(store, Engine::Telii).unwrap();
    queries
        .iter()
        .map(|q| telii::bench::run_engine(&engine, q).unwrap().into_answer(store))
        .collect()
}

#[test]
fn hybrid_build_answers_like_full_build() {
    let dir = tempfile::tempdir().unwrap();
    let corpus = small(dir.path(), &BuildOptions::default());
    let full = StoreHandle::open(&corpus.data).unwrap();
    let threshold = full.catalog().patient_count(telii::EventId::new(10).unwrap());
    let mut queries = Vec::new();
    for task in Task::ALL {
        queries.extend(QuerySampler::new(full.catalog(), 3).sample(task, 25).unwrap());
    }
    let expected = answers(&full, &queries);
    let full_relation_docs = full.manifest().records_in("relation.0000.seg");
    drop(full);

    pipeline::build(
        &corpus.data,
        &BuildOptions {
            hybrid_min_patients: Some(threshold),
            ..BuildOptions::default()
        },
    )
    .unwrap();
    let hybrid = StoreHandle::open(&corpus.data).unwrap();
    assert_eq!(hybrid.hybrid_min_patients(), Some(threshold));
    assert!(hybrid.manifest().records_in("relation.0000.seg") < full_relation_docs);
    assert_eq!(answers(&hybrid, &queries), expected);
}

#[test]
fn hybrid_requires_both_indexes() {
    let dir = tempfile::tempdir().unwrap();
    let corpus = small(dir.path(), &BuildOptions::default());
    let err = pipeline::build(
        &corpus.data,
        &BuildOptions {
            mode: BuildMode::Telii,
            hybrid_min_patients: Some(5),
            ..BuildOptions::default()
        },
    )
    .unwrap_err();
    assert!(matches!(err, Error::InvalidArgument(_)));
}

#[test]
fn capped_build_rejects_wider_ranges() {
    let dir = tempfile::tempdir().unwrap();
    let corpus = small(dir.path(), &BuildOptions::default());
    let store = StoreHandle::open(&corpus.data).unwrap();
    let engine = QueryEngine::new(&store, Engine::Telii).unwrap();
    let (a, b) = (telii::EventId::new(1).unwrap(), telii::EventId::new(3).unwrap());
    let w30 = DayRange::new(0, 30).unwrap();
    let uncapped = engine.before(a, b, Some(w30)).unwrap();
    let uncapped_plain = engine.before(a, b, None).unwrap();
    drop(store);

    pipeline::build(
        &corpus.data,
        &BuildOptions {
            max_abs_diff: Some(30),
            ..BuildOptions::default()
        },
    )
    .unwrap();
    let store = StoreHandle::open(&corpus.data).unwrap();
    let engine = QueryEngine::new(&store, Engine::Telii).unwrap();
    assert_eq!(engine.before(a, b, Some(w30)).unwrap(), uncapped);
    assert_eq!(engine.before(a, b, None).unwrap(), uncapped_plain);
    let err = engine.before(a, b, Some(DayRange::new(0, 60).unwrap())).unwrap_err();
    assert!(matches!(err, Error::CapExceeded { cap: 30, .. }), "{err}");
    assert!(err.to_string().contains("capped at 30"));
    let err = engine
        .explore(a, Relation::After, Some(DayRange::new(31, 60).unwrap()), 5)
        .unwrap_err();
    assert!(matches!(err, Error::CapExceeded { .. }));
    // The baseline has no cap.
    let elii = QueryEngine::new(&store, Engine::Elii).unwrap();
    assert!(elii.before(a, b, Some(DayRange::new(0, 60).unwrap())).is_ok());
}

#[test]
fn single_mode_builds_refuse_the_other_engine() {
    let dir = tempfile::tempdir().unwrap();
    let corpus = small(dir.path(), &BuildOptions { mode: BuildMode::Elii, ..BuildOptions::default() });
    let store = StoreHandle::open(&corpus.data).unwrap();
    assert!(matches!(QueryEngine::new(&store, Engine::Telii), Err(Error::MissingIndex(_))));
    assert!(QueryEngine::new(&store, Engine::Elii).is_ok());
    drop(store);

    pipeline::build(&corpus.data, &BuildOptions { mode: BuildMode::Telii, ..BuildOptions::default() }).unwrap();
    let store = StoreHandle::open(&corpus.data).unwrap();
    assert!(matches!(QueryEngine::new(&store, Engine::Elii), Err(Error::MissingIndex(_))));
    assert!(!corpus.data.join("elii.0000.seg").exists());
}

#[test]
fn spilling_build_is_byte_identical() {
    let dir = tempfile::tempdir().unwrap();
    let corpus = small(dir.path(), &BuildOptions::default());
    let in_memory = Manifest::read(&corpus.data).unwrap();
    pipeline::build(
        &corpus.data,
        &BuildOptions {
            memory_bytes: 64 << 10,
            ..BuildOptions::default()
        },
    )
    .unwrap();
    assert_eq!(Manifest::read(&corpus.data).unwrap(), in_memory);
}

#[test]
fn corrupted_segment_fails_to_open() {
    let dir = tempfile::tempdir().unwrap();
    let corpus = small(dir.path(), &BuildOptions::default());
    let path = corpus.data.join("timediff.0000.seg");
    let mut bytes = std::fs::read(&path).unwrap();
    let mid = bytes.len() / 2;
    bytes[mid] ^= 0x40;
    std::fs::write(&path, &bytes).unwrap();
    let err = StoreHandle::open(&corpus.data).unwrap_err();
    assert!(err.to_string().contains("checksum"), "{err}");
}

#[test]
fn interrupted_ingest_leaves_no_openable_directory() {
    let dir = tempfile::tempdir().unwrap();
    let corpus = small(dir.path(), &BuildOptions::default());
    std::fs::write(dir.path().join("bad.jsonl"), "{\"patient_id\":\"P\"}\n").unwrap();
    let err = pipeline::ingest(&dir.path().join("bad.jsonl"), &[], &corpus.data, Default::default()).unwrap_err();
    assert!(matches!(err, Error::Record { line: 1, .. }), "{err}");
    assert!(StoreHandle::open(&corpus.data).unwrap_err().to_string().contains("manifest"));
}

#[test]
fn oracle_rows_use_engine_tie_rule() {
    let dir = tempfile::tempdir().unwrap();
    let corpus = small(dir.path(), &BuildOptions::default());
    let store = StoreHandle::open(&corpus.data).unwrap();
    let oracle = Oracle::load(&corpus.records, &corpus.rules).unwrap();
    let query = BenchQuery::Explore {
        input: telii::EventId::new(5).unwrap(),
        direction: Relation::CoOccur,
        within: None,
        top_k: 1000,
    };
    let engine = QueryEngine::new(&store, Engine::Telii).unwrap();
    let got = telii::bench::run_engine(&engine, &query).unwrap().into_answer(&store);
    assert_eq!(got, run_oracle(&oracle, store.catalog(), &query).unwrap());
}
