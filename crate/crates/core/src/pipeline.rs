//! Writing data directories: `ingest` turns a records file into the catalog
//! and Event-Time segments; `build` derives the temporal and event-level
//! indexes from them. Both stages are deterministic.

use std::path::Path;

use crate::catalog::Catalog;
use crate::error::{Error, Result};
use crate::index::{EliiBuilder, ExternalSorter, RelationIndexBuilder, TimeDiffIndexBuilder};
use crate::ingest::{self, DerivedEventRule, ScanMode};
use crate::model::{DayStamp, EventId};
use crate::postings;
use crate::relate::{self, TimelineEntry};
use crate::store::{
    self, keys, BuildMode, IndexParams, Manifest, SegmentKind, SegmentWriter, StoreHandle,
};

pub const DEFAULT_MEMORY_BYTES: usize = 256 << 20;

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct IngestSummary {
    pub records: u64,
    pub skipped: usize,
    pub patients: u64,
    pub events: u64,
    pub event_time_docs: u64,
}

fn key_to_u128(key: &[u8]) -> u128 {
    let mut bytes = [0u8; 16];
    bytes[16 - key.len()..].copy_from_slice(key);
    u128::from_be_bytes(bytes)
}

fn u128_to_key(value: u128, len: usize) -> Vec<u8> {
    value.to_be_bytes()[16 - len..].to_vec()
}

/// Writes a secondary segment from `(key, primary offset)` entries.
fn write_secondary(dir: &Path, kind: SegmentKind, sorter: ExternalSorter<(u128, u64)>) -> Result<store::SegmentInfo> {
    let mut writer = SegmentWriter::create(dir, kind)?;
    for entry in sorter.finish()? {
        let (key, offset) = entry?;
        writer.push(&u128_to_key(key, kind.key_len()), &offset.to_le_bytes())?;
    }
    writer.finish()
}

fn remove_index_files(dir: &Path, manifest: &mut Manifest, kinds: &[SegmentKind]) -> Result<()> {
    for kind in kinds {
        let name = kind.file_name();
        manifest.files.remove(&name);
        match std::fs::remove_file(dir.join(&name)) {
            Ok(()) => {}
            Err(e) if e.kind() == std::io::ErrorKind::NotFound => {}
            Err(e) => return Err(e.into()),
        }
    }
    Ok(())
}

const INDEX_KINDS: [SegmentKind; 5] = [
    SegmentKind::Relation,
    SegmentKind::RelationByRelated,
    SegmentKind::TimeDiff,
    SegmentKind::TimeDiffByRelated,
    SegmentKind::Elii,
];

/// Scans `records`, assigns event ids and writes the catalog, patient
/// table and Event-Time segments into `out`.
pub fn ingest(records: &Path, rules: &[DerivedEventRule], out: &Path, mode: ScanMode) -> Result<IngestSummary> {
    std::fs::create_dir_all(out)?;
    // An interrupted run must not leave a directory that opens.
    match std::fs::remove_file(out.join(store::MANIFEST_FILE)) {
        Ok(()) => {}
        Err(e) if e.kind() == std::io::ErrorKind::NotFound => {}
        Err(e) => return Err(e.into()),
    }

    let scan = ingest::scan_records(records, rules, mode)?;
    if scan.records() == 0 {
        return Err(Error::Build(format!("{} contains no records", records.display())));
    }
    let catalog = Catalog::new(ingest::assign_event_ids(&scan.draft_counts()))?;
    let table = ingest::build_event_time(&scan, &catalog)?;
    tracing::info!(
        records = scan.records(),
        patients = table.patients().len(),
        events = catalog.len(),
        docs = table.len(),
        "scanned records"
    );

    let mut docs_per_event = vec![0u64; catalog.len()];
    for doc in table.iter() {
        docs_per_event[doc.event_id.get() as usize - 1] += 1;
    }
    for entry in catalog.entries() {
        let docs = docs_per_event[entry.event_id.get() as usize - 1];
        if docs != entry.patient_count {
            return Err(Error::Build(format!(
                "event {} counts {} patients but has {docs} Event-Time documents",
                entry.label, entry.patient_count
            )));
        }
    }

    let mut manifest = Manifest {
        format_version: store::manifest::FORMAT_VERSION,
        patients: table.patients().len() as u64,
        events: catalog.len() as u64,
        records: scan.records(),
        skipped_records: scan.skipped() as u64,
        derived_rules: rules.iter().map(|r| r.name.clone()).collect(),
        index: None,
        files: Default::default(),
    };
    remove_index_files(out, &mut manifest, &INDEX_KINDS)?;
    manifest
        .files
        .insert(store::CATALOG_FILE.to_string(), store::write_catalog(out, &catalog)?);

    let mut patients = SegmentWriter::create(out, SegmentKind::Patients)?;
    for (i, id) in table.patients().iter().enumerate() {
        patients.push(&keys::id_key(i as u32), id.as_str().as_bytes())?;
    }
    let info = patients.finish()?;
    manifest.files.insert(SegmentKind::Patients.file_name(), store::file_entry(&info));

    let mut event_time = SegmentWriter::create(out, SegmentKind::EventTime)?;
    let mut by_event = ExternalSorter::<(u128, u64)>::new(DEFAULT_MEMORY_BYTES, Some(out.to_path_buf()));
    let mut value = Vec::new();
    for doc in table.iter() {
        value.clear();
        store::encode_times(doc.times, &mut value);
        let offset = event_time.push(&keys::event_time(doc.patient, doc.event_id), &value)?;
        by_event.push((key_to_u128(&keys::event_time_by_event(doc.event_id, doc.patient)), offset))?;
    }
    let info = event_time.finish()?;
    let docs = info.records;
    manifest.files.insert(SegmentKind::EventTime.file_name(), store::file_entry(&info));
    let info = write_secondary(out, SegmentKind::EventTimeByEvent, by_event)?;
    manifest.files.insert(SegmentKind::EventTimeByEvent.file_name(), store::file_entry(&info));

    manifest.write(out)?;
    Ok(IngestSummary {
        records: scan.records(),
        skipped: scan.skipped(),
        patients: manifest.patients,
        events: manifest.events,
        event_time_docs: docs,
    })
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct BuildOptions {
    pub mode: BuildMode,
    /// Keep only day differences with `|d| <= max_abs_diff`.
    pub max_abs_diff: Option<u32>,
    /// Leave pairs whose anchor has fewer patients than this out of the
    /// temporal index; queries on them fall back to Event-Time evaluation.
    pub hybrid_min_patients: Option<u64>,
    /// Buffer size of each external sorter.
    pub memory_bytes: usize,
}

impl Default for BuildOptions {
    fn default() -> Self {
        BuildOptions {
            mode: BuildMode::Both,
            max_abs_diff: None,
            hybrid_min_patients: None,
            memory_bytes: DEFAULT_MEMORY_BYTES,
        }
    }
}

#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct BuildSummary {
    pub relation_docs: u64,
    pub timediff_docs: u64,
    pub elii_docs: u64,
}

/// Builds the indexes selected by `opts.mode` from an ingested directory,
/// replacing any previous build.
pub fn build(dir: &Path, opts: &BuildOptions) -> Result<BuildSummary> {
    if opts.hybrid_min_patients.is_some() && opts.mode != BuildMode::Both {
        return Err(Error::InvalidArgument(
            "a hybrid build needs --mode both so uncovered pairs can fall back to the event-level index".into(),
        ));
    }
    if opts.max_abs_diff == Some(0) {
        return Err(Error::InvalidArgument("max_abs_diff must be positive".into()));
    }
    let handle = StoreHandle::open(dir)?;
    let mut manifest = handle.manifest().clone();
    manifest.index = None;
    remove_index_files(dir, &mut manifest, &INDEX_KINDS)?;
    // Leave the directory unopenable until the build completes.
    std::fs::remove_file(dir.join(store::MANIFEST_FILE))?;

    let spill_dir = tempfile::TempDir::new_in(dir)?;
    let spill = || Some(spill_dir.path().to_path_buf());
    let mut summary = BuildSummary::default();

    if opts.mode.has_telii() {
        let catalog = handle.catalog();
        let indexed = |anchor: EventId| {
            opts.hybrid_min_patients
                .is_none_or(|min| catalog.patient_count(anchor) >= min)
        };
        let mut relations = RelationIndexBuilder::new(opts.memory_bytes, spill());
        let mut diffs = TimeDiffIndexBuilder::new(opts.memory_bytes, spill());
        let mut rows = handle.iter_event_time().peekable();
        let mut timeline: Vec<(EventId, Vec<DayStamp>)> = Vec::new();
        let mut day_scratch = Vec::new();
        let mut diff_scratch = Vec::new();
        let mut patients = 0u64;
        while let Some((patient, event, times)) = rows.next() {
            timeline.clear();
            timeline.push((event, times));
            while let Some((_, event, times)) = rows.next_if(|(p, _, _)| *p == patient) {
                timeline.push((event, times));
            }
            let entries: Vec<TimelineEntry<'_>> = timeline
                .iter()
                .map(|(event, times)| TimelineEntry { event: *event, times })
                .collect();
            let mut failed = None;
            relate::for_each_relation(&entries, &mut day_scratch, |fact| {
                if failed.is_none() && indexed(fact.anchor) {
                    failed = relations.push(patient, &fact).err();
                }
            });
            relate::for_each_diff(&entries, opts.max_abs_diff, &mut diff_scratch, |anchor, related, ds| {
                if failed.is_none() && indexed(anchor) {
                    failed = diffs.push(patient, anchor, related, ds).err();
                }
            });
            if let Some(err) = failed {
                return Err(err);
            }
            patients += 1;
            if patients.is_multiple_of(20_000) {
                tracing::info!(patients, "extracted relations");
            }
        }

        let mut writer = SegmentWriter::create(dir, SegmentKind::Relation)?;
        let mut secondary = ExternalSorter::<(u128, u64)>::new(opts.memory_bytes, spill());
        let mut value = Vec::new();
        for doc in relations.finish()? {
            let doc = doc?;
            value.clear();
            doc.patients.encode(&mut value);
            let offset = writer.push(&keys::relation(doc.anchor, doc.relation, doc.related), &value)?;
            secondary.push((key_to_u128(&keys::relation_by_related(doc.relation, doc.related, doc.anchor)), offset))?;
        }
        let info = writer.finish()?;
        summary.relation_docs = info.records;
        manifest.files.insert(SegmentKind::Relation.file_name(), store::file_entry(&info));
        let info = write_secondary(dir, SegmentKind::RelationByRelated, secondary)?;
        manifest.files.insert(SegmentKind::RelationByRelated.file_name(), store::file_entry(&info));

        let mut writer = SegmentWriter::create(dir, SegmentKind::TimeDiff)?;
        let mut secondary = ExternalSorter::<(u128, u64)>::new(opts.memory_bytes, spill());
        for doc in diffs.finish()? {
            let doc = doc?;
            value.clear();
            doc.patients.encode(&mut value);
            let offset = writer.push(&keys::timediff(doc.anchor, doc.related, doc.day_diff), &value)?;
            secondary.push((key_to_u128(&keys::timediff_by_related(doc.related, doc.day_diff, doc.anchor)), offset))?;
        }
        let info = writer.finish()?;
        summary.timediff_docs = info.records;
        manifest.files.insert(SegmentKind::TimeDiff.file_name(), store::file_entry(&info));
        let info = write_secondary(dir, SegmentKind::TimeDiffByRelated, secondary)?;
        manifest.files.insert(SegmentKind::TimeDiffByRelated.file_name(), store::file_entry(&info));
    }

    if opts.mode.has_elii() {
        let mut elii = EliiBuilder::new(opts.memory_bytes, spill());
        for (patient, event, _) in handle.iter_event_time() {
            elii.push(patient, event)?;
        }
        let mut writer = SegmentWriter::create(dir, SegmentKind::Elii)?;
        let mut value = Vec::new();
        for doc in elii.finish()? {
            let doc = doc?;
            if doc.patients.len() as u64 != handle.catalog().patient_count(doc.event) {
                return Err(Error::Build(format!(
                    "event {} has {} patients in the event-level index but {} in the catalog",
                    doc.event,
                    doc.patients.len(),
                    handle.catalog().patient_count(doc.event)
                )));
            }
            value.clear();
            postings::encode_ids(doc.patients.as_slice(), &mut value);
            writer.push(&keys::id_key(doc.event.get()), &value)?;
        }
        let info = writer.finish()?;
        summary.elii_docs = info.records;
        manifest.files.insert(SegmentKind::Elii.file_name(), store::file_entry(&info));
    }

    drop(handle);
    spill_dir.close()?;
    manifest.index = Some(IndexParams {
        mode: opts.mode,
        max_abs_diff: opts.max_abs_diff,
        hybrid_min_patients: opts.hybrid_min_patients,
    });
    manifest.write(dir)?;
    Ok(summary)
}
