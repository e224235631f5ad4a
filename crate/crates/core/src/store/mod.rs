//! Read side of a data directory: manifest, catalog, patient table and the
//! segment files, with the point-lookup and range-scan access paths used by
//! the query engines.
//!
//! Layout:
//!
//! ```text
//! <data-dir>/manifest.json
//! <data-dir>/catalog.jsonl
//! <data-dir>/patients.0000.seg
//! <data-dir>/event_time.0000.seg            (patient, event)          -> days
//! <data-dir>/event_time_by_event.0000.seg   (event, patient)          -> offset
//! <data-dir>/relation.0000.seg              (anchor, relation, related) -> patients
//! <data-dir>/relation_by_related.0000.seg   (relation, related, anchor) -> offset
//! <data-dir>/timediff.0000.seg              (anchor, related, d)      -> patients
//! <data-dir>/timediff_by_related.0000.seg   (related, d, anchor)      -> offset
//! <data-dir>/elii.0000.seg                  (event)                   -> patients
//! ```

pub mod keys;
pub mod manifest;
pub mod segment;

use std::path::{Path, PathBuf};

use crate::catalog::Catalog;
use crate::error::{Error, Result};
use crate::index::{EliiDoc, RelationDoc, TimeDiffDoc};
use crate::ingest::EventTimeDoc;
use crate::model::{DayStamp, EventId, PatientId, Relation};
use crate::postings::{self, PostingList};

pub use manifest::{BuildMode, FileEntry, IndexParams, Manifest, CATALOG_FILE, MANIFEST_FILE};
pub use segment::{Segment, SegmentInfo, SegmentKind, SegmentWriter};

pub(crate) fn checksum_hex(checksum: u64) -> String {
    format!("{checksum:016x}")
}

pub(crate) fn encode_times(times: &[DayStamp], out: &mut Vec<u8>) {
    out.extend_from_slice(&(times.len() as u32).to_le_bytes());
    for t in times {
        out.extend_from_slice(&t.0.to_le_bytes());
    }
}

fn decode_times(bytes: &[u8]) -> Vec<DayStamp> {
    let n = u32::from_le_bytes(bytes[..4].try_into().expect("count")) as usize;
    bytes[4..4 + 4 * n]
        .chunks_exact(4)
        .map(|c| DayStamp(i32::from_le_bytes(c.try_into().expect("4 bytes"))))
        .collect()
}

fn offset_value(bytes: &[u8]) -> u64 {
    u64::from_le_bytes(bytes[..8].try_into().expect("8-byte offset"))
}

/// An opened, verified, read-only data directory. Cheap to share across
/// threads.
pub struct StoreHandle {
    dir: PathBuf,
    manifest: Manifest,
    catalog: Catalog,
    patients: Vec<PatientId>,
    event_time: Segment,
    event_time_by_event: Segment,
    relation: Option<(Segment, Segment)>,
    timediff: Option<(Segment, Segment)>,
    elii: Option<Segment>,
}

impl std::fmt::Debug for StoreHandle {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("StoreHandle")
            .field("dir", &self.dir)
            .field("patients", &self.patients.len())
            .field("events", &self.catalog.len())
            .finish_non_exhaustive()
    }
}

impl StoreHandle {
    /// Opens a data directory, verifying every file listed in the manifest
    /// against its recorded size and checksum.
    pub fn open(dir: impl AsRef<Path>) -> Result<Self> {
        let dir = dir.as_ref().to_path_buf();
        let manifest = Manifest::read(&dir)?;
        for (name, entry) in &manifest.files {
            let path = dir.join(name);
            let len = std::fs::metadata(&path)
                .map_err(|e| Error::store(&path, format!("listed in manifest but unreadable: {e}")))?
                .len();
            if len != entry.bytes {
                return Err(Error::store(
                    &path,
                    format!("checksum mismatch: size {len} differs from manifest {}", entry.bytes),
                ));
            }
        }

        let catalog_path = dir.join(CATALOG_FILE);
        let entry = manifest
            .files
            .get(CATALOG_FILE)
            .ok_or_else(|| Error::store(&catalog_path, "catalog not listed in manifest"))?;
        let bytes = std::fs::read(&catalog_path)?;
        if checksum_hex(xxhash_rust::xxh3::xxh3_64(&bytes)) != entry.checksum {
            return Err(Error::store(&catalog_path, "checksum mismatch"));
        }
        let catalog = Catalog::read_jsonl(bytes.as_slice())
            .map_err(|e| Error::store(&catalog_path, e.to_string()))?;
        if catalog.len() as u64 != manifest.events {
            return Err(Error::store(&catalog_path, "event count differs from manifest"));
        }

        let open = |kind: SegmentKind| -> Result<Option<Segment>> {
            let name = kind.file_name();
            let Some(entry) = manifest.files.get(&name) else {
                return Ok(None);
            };
            let seg = Segment::open(&dir.join(&name), kind)?;
            if checksum_hex(seg.checksum()) != entry.checksum || seg.len() != entry.records {
                return Err(Error::store(seg.path(), "checksum mismatch with manifest"));
            }
            Ok(Some(seg))
        };
        let require = |kind: SegmentKind| -> Result<Segment> {
            open(kind)?.ok_or_else(|| Error::store(dir.join(kind.file_name()), "segment missing from manifest"))
        };

        let patients_seg = require(SegmentKind::Patients)?;
        let mut patients = Vec::with_capacity(patients_seg.len() as usize);
        for (i, rec) in patients_seg.iter().enumerate() {
            if keys::be_u32(rec.key) as usize != i {
                return Err(Error::store(patients_seg.path(), "patient ordinals are not dense"));
            }
            let text = std::str::from_utf8(rec.value)
                .map_err(|_| Error::store(patients_seg.path(), "patient id is not UTF-8"))?;
            patients.push(PatientId::new(text)?);
        }
        if patients.windows(2).any(|w| w[0] >= w[1]) || patients.len() as u64 != manifest.patients {
            return Err(Error::store(patients_seg.path(), "patient table is not sorted or has the wrong size"));
        }

        let pair = |a: SegmentKind, b: SegmentKind| -> Result<Option<(Segment, Segment)>> {
            match (open(a)?, open(b)?) {
                (Some(x), Some(y)) => Ok(Some((x, y))),
                (None, None) => Ok(None),
                _ => Err(Error::store(dir.join(a.file_name()), "primary and secondary segments must both be present")),
            }
        };
        let relation = pair(SegmentKind::Relation, SegmentKind::RelationByRelated)?;
        let timediff = pair(SegmentKind::TimeDiff, SegmentKind::TimeDiffByRelated)?;
        let elii = open(SegmentKind::Elii)?;
        let mode = manifest.index.as_ref().map(|p| p.mode);
        if mode.is_some_and(|m| m.has_telii()) != (relation.is_some() && timediff.is_some())
            || mode.is_some_and(|m| m.has_elii()) != elii.is_some()
        {
            return Err(Error::store(dir.join(MANIFEST_FILE), "build mode does not match segment files"));
        }

        Ok(StoreHandle {
            event_time: require(SegmentKind::EventTime)?,
            event_time_by_event: require(SegmentKind::EventTimeByEvent)?,
            dir,
            manifest,
            catalog,
            patients,
            relation,
            timediff,
            elii,
        })
    }

    pub fn dir(&self) -> &Path {
        &self.dir
    }

    pub fn manifest(&self) -> &Manifest {
        &self.manifest
    }

    pub fn catalog(&self) -> &Catalog {
        &self.catalog
    }

    pub fn index_params(&self) -> Option<&IndexParams> {
        self.manifest.index.as_ref()
    }

    pub fn max_abs_diff(&self) -> Option<u32> {
        self.index_params().and_then(|p| p.max_abs_diff)
    }

    pub fn hybrid_min_patients(&self) -> Option<u64> {
        self.index_params().and_then(|p| p.hybrid_min_patients)
    }

    pub fn has_telii(&self) -> bool {
        self.relation.is_some()
    }

    pub fn has_elii(&self) -> bool {
        self.elii.is_some()
    }

    pub fn patient_count(&self) -> usize {
        self.patients.len()
    }

    pub fn patients(&self) -> &[PatientId] {
        &self.patients
    }

    pub fn patient_id(&self, ordinal: u32) -> &PatientId {
        &self.patients[ordinal as usize]
    }

    pub fn patient_ordinal(&self, id: &PatientId) -> Option<u32> {
        self.patients.binary_search(id).ok().map(|i| i as u32)
    }

    pub fn patient_ids(&self, list: &PostingList) -> Vec<PatientId> {
        list.iter().map(|p| self.patient_id(p).clone()).collect()
    }

    fn relation_segments(&self) -> Result<&(Segment, Segment)> {
        self.relation
            .as_ref()
            .ok_or_else(|| Error::MissingIndex("temporal (telii)".into()))
    }

    fn timediff_segments(&self) -> Result<&(Segment, Segment)> {
        self.timediff
            .as_ref()
            .ok_or_else(|| Error::MissingIndex("temporal (telii)".into()))
    }

    fn elii_segment(&self) -> Result<&Segment> {
        self.elii
            .as_ref()
            .ok_or_else(|| Error::MissingIndex("event-level (elii)".into()))
    }

    fn relation_doc(rec: segment::Record<'_>) -> RelationDoc {
        let (anchor, relation, related) = keys::decode_relation(rec.key);
        RelationDoc {
            anchor,
            relation,
            related,
            patients: postings::decode(rec.value),
        }
    }

    fn timediff_doc(rec: segment::Record<'_>) -> TimeDiffDoc {
        let (anchor, related, day_diff) = keys::decode_timediff(rec.key);
        TimeDiffDoc {
            anchor,
            related,
            day_diff,
            patients: postings::decode(rec.value),
        }
    }

    /// Exact-key lookup. An absent document means no qualifying patient.
    pub fn get_relation(&self, anchor: EventId, relation: Relation, related: EventId) -> Result<Option<RelationDoc>> {
        let (primary, _) = self.relation_segments()?;
        Ok(primary
            .get(&keys::relation(anchor, relation, related))
            .map(Self::relation_doc))
    }

    /// Size of a relation posting list without decoding it.
    pub fn relation_len(&self, anchor: EventId, relation: Relation, related: EventId) -> Result<usize> {
        let (primary, _) = self.relation_segments()?;
        Ok(primary
            .get(&keys::relation(anchor, relation, related))
            .map_or(0, |r| postings::encoded_len(r.value)))
    }

    /// All documents with the given anchor and relation, by ascending
    /// related id.
    pub fn scan_by_anchor(&self, anchor: EventId, relation: Relation) -> Result<impl Iterator<Item = RelationDoc> + '_> {
        let (primary, _) = self.relation_segments()?;
        let mut prefix = [0u8; 5];
        prefix.copy_from_slice(&keys::relation(anchor, relation, anchor)[..5]);
        Ok(primary
            .seek(&prefix)
            .take_while(move |r| r.key[..5] == prefix)
            .map(Self::relation_doc))
    }

    fn resolve_offset<'a>(seg: &'a Segment, offset: u64) -> Result<segment::Record<'a>> {
        seg.record_at_offset(offset)
            .ok_or_else(|| Error::store(seg.path(), format!("dangling secondary offset {offset}")))
    }

    /// All documents with the given relation and related event, by
    /// ascending anchor id. Served by the secondary index.
    pub fn scan_by_related(&self, relation: Relation, related: EventId) -> Result<impl Iterator<Item = Result<RelationDoc>> + '_> {
        let (primary, secondary) = self.relation_segments()?;
        let mut prefix = [0u8; 5];
        prefix.copy_from_slice(&keys::relation_by_related(relation, related, related)[..5]);
        Ok(secondary
            .seek(&prefix)
            .take_while(move |r| r.key[..5] == prefix)
            .map(move |r| {
                let rec = Self::resolve_offset(primary, offset_value(r.value))?;
                let doc = Self::relation_doc(rec);
                if keys::relation_by_related(doc.relation, doc.related, doc.anchor)[..] != *r.key {
                    return Err(Error::store(secondary.path(), "secondary entry points at the wrong document"));
                }
                Ok(doc)
            }))
    }

    fn check_range(lo: i32, hi: i32) -> Result<()> {
        if lo > hi {
            return Err(Error::InvalidArgument(format!("inverted day range {lo}..{hi}")));
        }
        Ok(())
    }

    /// Time-difference documents of `anchor` (and `related`, when given)
    /// with `lo <= day_diff <= hi`.
    pub fn range_timediff(
        &self,
        anchor: EventId,
        related: Option<EventId>,
        lo: i32,
        hi: i32,
    ) -> Result<Box<dyn Iterator<Item = TimeDiffDoc> + '_>> {
        Self::check_range(lo, hi)?;
        let (primary, _) = self.timediff_segments()?;
        Ok(match related {
            Some(related) => {
                let from = keys::timediff(anchor, related, lo);
                let to = keys::timediff(anchor, related, hi);
                Box::new(
                    primary
                        .seek(&from)
                        .take_while(move |r| r.key <= &to[..])
                        .map(Self::timediff_doc),
                )
            }
            None => {
                let prefix = anchor.get().to_be_bytes();
                Box::new(
                    primary
                        .seek(&prefix)
                        .take_while(move |r| r.key[..4] == prefix)
                        .filter(move |r| (lo..=hi).contains(&keys::decode_timediff(r.key).2))
                        .map(Self::timediff_doc),
                )
            }
        })
    }

    /// Time-difference documents whose related event is `related`, across
    /// all anchors, with `lo <= day_diff <= hi`. Served by the secondary
    /// index, ordered by (day_diff, anchor).
    pub fn range_timediff_by_related(
        &self,
        related: EventId,
        lo: i32,
        hi: i32,
    ) -> Result<impl Iterator<Item = Result<TimeDiffDoc>> + '_> {
        Self::check_range(lo, hi)?;
        let (primary, secondary) = self.timediff_segments()?;
        let from = keys::timediff_by_related_raw(related.get(), lo, 0);
        let to = keys::timediff_by_related_raw(related.get(), hi, u32::MAX);
        Ok(secondary
            .seek(&from)
            .take_while(move |r| r.key <= &to[..])
            .map(move |r| {
                let rec = Self::resolve_offset(primary, offset_value(r.value))?;
                let doc = Self::timediff_doc(rec);
                if keys::timediff_by_related(doc.related, doc.day_diff, doc.anchor)[..] != *r.key {
                    return Err(Error::store(secondary.path(), "secondary entry points at the wrong document"));
                }
                Ok(doc)
            }))
    }

    /// Occurrence days of `event` for the patient with ordinal `patient`.
    pub fn event_times(&self, patient: u32, event: EventId) -> Option<Vec<DayStamp>> {
        self.event_time
            .get(&keys::event_time(patient, event))
            .map(|r| decode_times(r.value))
    }

    pub fn get_event_time(&self, patient: &PatientId, event: EventId) -> Option<EventTimeDoc> {
        let ordinal = self.patient_ordinal(patient)?;
        self.event_times(ordinal, event).map(|times| EventTimeDoc {
            patient_id: patient.clone(),
            event_id: event,
            times,
        })
    }

    /// Event-Time documents of one event, by ascending patient.
    pub fn scan_event_time_by_event(&self, event: EventId) -> impl Iterator<Item = Result<EventTimeDoc>> + '_ {
        let prefix = event.get().to_be_bytes();
        self.event_time_by_event
            .seek(&prefix)
            .take_while(move |r| r.key[..4] == prefix)
            .map(move |r| {
                let rec = Self::resolve_offset(&self.event_time, offset_value(r.value))?;
                let (patient, event_id) = keys::decode_event_time(rec.key);
                if keys::event_time_by_event(event_id, patient)[..] != *r.key {
                    return Err(Error::store(self.event_time_by_event.path(), "secondary entry points at the wrong document"));
                }
                Ok(EventTimeDoc {
                    patient_id: self.patient_id(patient).clone(),
                    event_id,
                    times: decode_times(rec.value),
                })
            })
    }

    /// Every event of one patient with its days, by ascending event id.
    pub fn patient_timeline(&self, patient: u32) -> impl Iterator<Item = (EventId, Vec<DayStamp>)> + '_ {
        let prefix = patient.to_be_bytes();
        self.event_time
            .seek(&prefix)
            .take_while(move |r| r.key[..4] == prefix)
            .map(|r| (keys::decode_event_time(r.key).1, decode_times(r.value)))
    }

    /// Full scan of the Event-Time segment as `(patient ordinal, event, days)`.
    pub fn iter_event_time(&self) -> impl Iterator<Item = (u32, EventId, Vec<DayStamp>)> + '_ {
        self.event_time.iter().map(|r| {
            let (patient, event) = keys::decode_event_time(r.key);
            (patient, event, decode_times(r.value))
        })
    }

    pub fn elii(&self, event: EventId) -> Result<PostingList> {
        Ok(self
            .elii_segment()?
            .get(&keys::id_key(event.get()))
            .map(|r| postings::decode(r.value))
            .unwrap_or_default())
    }

    pub fn iter_relation_docs(&self) -> Result<impl Iterator<Item = RelationDoc> + '_> {
        Ok(self.relation_segments()?.0.iter().map(Self::relation_doc))
    }

    pub fn iter_timediff_docs(&self) -> Result<impl Iterator<Item = TimeDiffDoc> + '_> {
        Ok(self.timediff_segments()?.0.iter().map(Self::timediff_doc))
    }

    pub fn iter_elii_docs(&self) -> Result<impl Iterator<Item = EliiDoc> + '_> {
        Ok(self.elii_segment()?.iter().map(|r| EliiDoc {
            event: EventId::from_raw(keys::be_u32(r.key)),
            patients: postings::decode(r.value),
        }))
    }

    /// Document count per segment file, for stats endpoints.
    pub fn segment_counts(&self) -> Vec<(String, u64)> {
        self.manifest
            .files
            .iter()
            .map(|(name, f)| (name.clone(), f.records))
            .collect()
    }
}

/// Writes a catalog file and returns its manifest entry.
pub(crate) fn write_catalog(dir: &Path, catalog: &Catalog) -> Result<FileEntry> {
    let mut bytes = Vec::new();
    catalog.write_jsonl(&mut bytes)?;
    std::fs::write(dir.join(CATALOG_FILE), &bytes)?;
    Ok(FileEntry {
        records: catalog.len() as u64,
        bytes: bytes.len() as u64,
        checksum: checksum_hex(xxhash_rust::xxh3::xxh3_64(&bytes)),
    })
}

pub(crate) fn file_entry(info: &SegmentInfo) -> FileEntry {
    FileEntry {
        records: info.records,
        bytes: info.bytes,
        checksum: checksum_hex(info.checksum),
    }
}
