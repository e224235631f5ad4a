//! Immutable sorted segment files.
//!
//! ```text
//! header   "TELIISEG" | version u16 | kind u8 | key_len u8 | 4 reserved bytes
//! records  [len u32][key (key_len bytes)][value (len - key_len bytes)] ...
//! footer   record_count u64 | sample_count u64 | [key | offset u64] ...
//! trailer  footer_offset u64 | checksum u64
//! ```
//!
//! Integers are little-endian except inside keys, which are fixed-width
//! big-endian so that bytewise key order equals logical order. Records are
//! strictly ascending by key. The footer samples every
//! [`SAMPLE_INTERVAL`]-th record. The checksum is XXH3-64 over every byte
//! before it.

use std::cmp::Ordering;
use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};

use memmap2::Mmap;
use xxhash_rust::xxh3::Xxh3;

use crate::error::{Error, Result};

pub const SAMPLE_INTERVAL: u64 = 4096;
const MAGIC: &[u8; 8] = b"TELIISEG";
const VERSION: u16 = 1;
const HEADER_LEN: usize = 16;
const TRAILER_LEN: usize = 16;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum SegmentKind {
    Patients,
    EventTime,
    EventTimeByEvent,
    Relation,
    RelationByRelated,
    TimeDiff,
    TimeDiffByRelated,
    Elii,
}

impl SegmentKind {
    pub const ALL: [SegmentKind; 8] = [
        SegmentKind::Patients,
        SegmentKind::EventTime,
        SegmentKind::EventTimeByEvent,
        SegmentKind::Relation,
        SegmentKind::RelationByRelated,
        SegmentKind::TimeDiff,
        SegmentKind::TimeDiffByRelated,
        SegmentKind::Elii,
    ];

    pub fn stem(self) -> &'static str {
        match self {
            SegmentKind::Patients => "patients",
            SegmentKind::EventTime => "event_time",
            SegmentKind::EventTimeByEvent => "event_time_by_event",
            SegmentKind::Relation => "relation",
            SegmentKind::RelationByRelated => "relation_by_related",
            SegmentKind::TimeDiff => "timediff",
            SegmentKind::TimeDiffByRelated => "timediff_by_related",
            SegmentKind::Elii => "elii",
        }
    }

    pub fn file_name(self) -> String {
        format!("{}.0000.seg", self.stem())
    }

    fn code(self) -> u8 {
        SegmentKind::ALL.iter().position(|k| *k == self).expect("listed") as u8 + 1
    }

    pub fn key_len(self) -> usize {
        match self {
            SegmentKind::Patients | SegmentKind::Elii => 4,
            SegmentKind::EventTime | SegmentKind::EventTimeByEvent => 8,
            SegmentKind::Relation | SegmentKind::RelationByRelated => 9,
            SegmentKind::TimeDiff | SegmentKind::TimeDiffByRelated => 12,
        }
    }
}

/// Summary of a finished segment, recorded in the manifest.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct SegmentInfo {
    pub kind: SegmentKind,
    pub records: u64,
    pub bytes: u64,
    pub checksum: u64,
}

pub struct SegmentWriter {
    kind: SegmentKind,
    path: PathBuf,
    out: BufWriter<File>,
    hasher: Xxh3,
    offset: u64,
    count: u64,
    samples: Vec<(Vec<u8>, u64)>,
    last_key: Option<Vec<u8>>,
}

impl SegmentWriter {
    pub fn create(dir: &Path, kind: SegmentKind) -> Result<Self> {
        let path = dir.join(kind.file_name());
        let out = BufWriter::with_capacity(1 << 20, File::create(&path)?);
        let mut writer = SegmentWriter {
            kind,
            path,
            out,
            hasher: Xxh3::new(),
            offset: 0,
            count: 0,
            samples: Vec::new(),
            last_key: None,
        };
        let mut header = [0u8; HEADER_LEN];
        header[..8].copy_from_slice(MAGIC);
        header[8..10].copy_from_slice(&VERSION.to_le_bytes());
        header[10] = kind.code();
        header[11] = kind.key_len() as u8;
        writer.write(&header)?;
        Ok(writer)
    }

    fn write(&mut self, bytes: &[u8]) -> Result<()> {
        self.out.write_all(bytes)?;
        self.hasher.update(bytes);
        self.offset += bytes.len() as u64;
        Ok(())
    }

    /// Appends a record and returns its offset. Keys must be strictly
    /// ascending.
    pub fn push(&mut self, key: &[u8], value: &[u8]) -> Result<u64> {
        if key.len() != self.kind.key_len() {
            return Err(Error::store(&self.path, format!("key length {} != {}", key.len(), self.kind.key_len())));
        }
        if self.last_key.as_deref().is_some_and(|last| last >= key) {
            return Err(Error::store(&self.path, "records must be strictly ascending by key"));
        }
        let offset = self.offset;
        if self.count.is_multiple_of(SAMPLE_INTERVAL) {
            self.samples.push((key.to_vec(), offset));
        }
        let len = u32::try_from(key.len() + value.len())
            .map_err(|_| Error::store(&self.path, "record exceeds 4 GiB"))?;
        self.write(&len.to_le_bytes())?;
        self.write(key)?;
        self.write(value)?;
        match &mut self.last_key {
            Some(last) => {
                last.clear();
                last.extend_from_slice(key);
            }
            None => self.last_key = Some(key.to_vec()),
        }
        self.count += 1;
        Ok(offset)
    }

    pub fn records(&self) -> u64 {
        self.count
    }

    pub fn finish(mut self) -> Result<SegmentInfo> {
        let footer_offset = self.offset;
        let count = self.count;
        self.write(&count.to_le_bytes())?;
        self.write(&(self.samples.len() as u64).to_le_bytes())?;
        for (key, offset) in std::mem::take(&mut self.samples) {
            self.write(&key)?;
            self.write(&offset.to_le_bytes())?;
        }
        self.write(&footer_offset.to_le_bytes())?;
        let checksum = self.hasher.digest();
        self.out.write_all(&checksum.to_le_bytes())?;
        let file = self
            .out
            .into_inner()
            .map_err(|e| Error::Io(e.into_error()))?;
        file.sync_all()?;
        Ok(SegmentInfo {
            kind: self.kind,
            records: count,
            bytes: self.offset + 8,
            checksum,
        })
    }
}

/// A record borrowed from a mapped segment.
#[derive(Debug, Clone, Copy)]
pub struct Record<'a> {
    pub offset: u64,
    pub key: &'a [u8],
    pub value: &'a [u8],
}

/// Read-only view of a segment file.
pub struct Segment {
    path: PathBuf,
    kind: SegmentKind,
    map: Mmap,
    records_end: usize,
    count: u64,
    checksum: u64,
    samples: Vec<usize>,
}

fn le_u64(bytes: &[u8], at: usize) -> u64 {
    u64::from_le_bytes(bytes[at..at + 8].try_into().expect("8 bytes"))
}

fn le_u32(bytes: &[u8], at: usize) -> u32 {
    u32::from_le_bytes(bytes[at..at + 4].try_into().expect("4 bytes"))
}

impl Segment {
    /// Maps and fully validates a segment: checksum, header, record framing,
    /// key order and footer samples.
    pub fn open(path: &Path, kind: SegmentKind) -> Result<Self> {
        let file = File::open(path).map_err(|e| Error::store(path, format!("cannot open: {e}")))?;
        // SAFETY: segments are written once and never modified afterwards.
        let map = unsafe { Mmap::map(&file) }.map_err(|e| Error::store(path, format!("cannot map: {e}")))?;
        let bad = |reason: String| Error::store(path, reason);
        let len = map.len();
        if len < HEADER_LEN + TRAILER_LEN + 16 {
            return Err(bad(format!("checksum mismatch: file truncated ({len} bytes)")));
        }
        let stored = le_u64(&map, len - 8);
        let actual = xxhash_rust::xxh3::xxh3_64(&map[..len - 8]);
        if stored != actual {
            return Err(bad(format!(
                "checksum mismatch: stored {stored:016x}, computed {actual:016x}"
            )));
        }
        if &map[..8] != MAGIC {
            return Err(bad("not a segment file".into()));
        }
        let version = u16::from_le_bytes([map[8], map[9]]);
        if version != VERSION {
            return Err(bad(format!("unsupported segment version {version}")));
        }
        if map[10] != kind.code() || map[11] as usize != kind.key_len() {
            return Err(bad(format!("segment is not of kind {}", kind.stem())));
        }
        let key_len = kind.key_len();
        let footer_offset = le_u64(&map, len - TRAILER_LEN) as usize;
        if footer_offset < HEADER_LEN || footer_offset + 16 > len - TRAILER_LEN {
            return Err(bad("footer offset out of range".into()));
        }
        let count = le_u64(&map, footer_offset);
        let sample_count = le_u64(&map, footer_offset + 8) as usize;
        let expected_samples = count.div_ceil(SAMPLE_INTERVAL) as usize;
        if sample_count != expected_samples
            || footer_offset + 16 + sample_count * (key_len + 8) != len - TRAILER_LEN
        {
            return Err(bad("malformed footer".into()));
        }

        let mut samples = Vec::with_capacity(sample_count);
        let mut pos = HEADER_LEN;
        let mut seen = 0u64;
        let mut prev: Option<&[u8]> = None;
        while pos < footer_offset {
            if pos + 4 > footer_offset {
                return Err(bad(format!("truncated record at offset {pos}")));
            }
            let rec_len = le_u32(&map, pos) as usize;
            let end = pos + 4 + rec_len;
            if rec_len < key_len || end > footer_offset {
                return Err(bad(format!("bad record length at offset {pos}")));
            }
            let key = &map[pos + 4..pos + 4 + key_len];
            if prev.is_some_and(|p| p >= key) {
                return Err(bad(format!("keys out of order at offset {pos}")));
            }
            if seen.is_multiple_of(SAMPLE_INTERVAL) {
                let at = footer_offset + 16 + samples.len() * (key_len + 8);
                if &map[at..at + key_len] != key || le_u64(&map, at + key_len) as usize != pos {
                    return Err(bad(format!("footer sample {} does not match data", samples.len())));
                }
                samples.push(pos);
            }
            prev = Some(key);
            seen += 1;
            pos = end;
        }
        if seen != count {
            return Err(bad(format!("footer count {count} but {seen} records")));
        }
        Ok(Segment {
            path: path.to_path_buf(),
            kind,
            records_end: footer_offset,
            count,
            checksum: stored,
            samples,
            map,
        })
    }

    pub fn path(&self) -> &Path {
        &self.path
    }

    pub fn kind(&self) -> SegmentKind {
        self.kind
    }

    pub fn len(&self) -> u64 {
        self.count
    }

    pub fn is_empty(&self) -> bool {
        self.count == 0
    }

    pub fn checksum(&self) -> u64 {
        self.checksum
    }

    pub fn byte_len(&self) -> u64 {
        self.map.len() as u64
    }

    fn record_at(&self, pos: usize) -> Record<'_> {
        let rec_len = le_u32(&self.map, pos) as usize;
        let key_len = self.kind.key_len();
        Record {
            offset: pos as u64,
            key: &self.map[pos + 4..pos + 4 + key_len],
            value: &self.map[pos + 4 + key_len..pos + 4 + rec_len],
        }
    }

    /// Record starting at `offset`, as recorded by a secondary index.
    /// Returns `None` when the offset cannot be a record start.
    pub fn record_at_offset(&self, offset: u64) -> Option<Record<'_>> {
        let pos = usize::try_from(offset).ok()?;
        if pos < HEADER_LEN || pos + 4 > self.records_end {
            return None;
        }
        let rec_len = le_u32(&self.map, pos) as usize;
        if rec_len < self.kind.key_len() || pos + 4 + rec_len > self.records_end {
            return None;
        }
        Some(self.record_at(pos))
    }

    /// Offset of the first record whose key is `>= target`. `target` may be
    /// a key prefix.
    fn lower_bound(&self, target: &[u8]) -> usize {
        // Last sample strictly below the target; everything before it is too.
        let idx = self
            .samples
            .partition_point(|pos| self.record_at(*pos).key.cmp(target) == Ordering::Less);
        let mut pos = if idx == 0 { HEADER_LEN } else { self.samples[idx - 1] };
        while pos < self.records_end {
            let rec = self.record_at(pos);
            if rec.key >= target {
                break;
            }
            pos += 4 + le_u32(&self.map, pos) as usize;
        }
        pos
    }

    pub fn get(&self, key: &[u8]) -> Option<Record<'_>> {
        let pos = self.lower_bound(key);
        if pos < self.records_end {
            let rec = self.record_at(pos);
            if rec.key == key {
                return Some(rec);
            }
        }
        None
    }

    pub fn iter(&self) -> Cursor<'_> {
        Cursor {
            seg: self,
            pos: HEADER_LEN,
        }
    }

    /// Records from the first key `>= from` onwards.
    pub fn seek(&self, from: &[u8]) -> Cursor<'_> {
        Cursor {
            seg: self,
            pos: self.lower_bound(from),
        }
    }

    /// Records whose key starts with `prefix`.
    pub fn prefix<'a>(&'a self, prefix: &'a [u8]) -> impl Iterator<Item = Record<'a>> + 'a {
        self.seek(prefix).take_while(move |r| r.key.starts_with(prefix))
    }

    /// Records with `lo <= key <= hi` (full-width keys).
    pub fn range<'a>(&'a self, lo: &[u8], hi: &'a [u8]) -> impl Iterator<Item = Record<'a>> + 'a {
        self.seek(lo).take_while(move |r| r.key <= hi)
    }
}

pub struct Cursor<'a> {
    seg: &'a Segment,
    pos: usize,
}

impl<'a> Iterator for Cursor<'a> {
    type Item = Record<'a>;

    fn next(&mut self) -> Option<Record<'a>> {
        if self.pos >= self.seg.records_end {
            return None;
        }
        let rec = self.seg.record_at(self.pos);
        self.pos += 4 + rec.key.len() + rec.value.len();
        Some(rec)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn key(i: u32) -> [u8; 4] {
        i.to_be_bytes()
    }

    fn write(dir: &Path, n: u32) -> SegmentInfo {
        let mut w = SegmentWriter::create(dir, SegmentKind::Elii).unwrap();
        for i in 0..n {
            w.push(&key(i * 2), &i.to_le_bytes().repeat((i % 3) as usize)).unwrap();
        }
        w.finish().unwrap()
    }

    #[test]
    fn lookups_match_linear_scan() {
        let dir = tempfile::tempdir().unwrap();
        let info = write(dir.path(), 10_000);
        assert_eq!(info.records, 10_000);
        let seg = Segment::open(&dir.path().join("elii.0000.seg"), SegmentKind::Elii).unwrap();
        assert_eq!(seg.len(), 10_000);
        assert_eq!(seg.checksum(), info.checksum);
        let all: Vec<Record<'_>> = seg.iter().collect();
        assert_eq!(all.len(), 10_000);
        for probe in [0u32, 1, 2, 8191, 8192, 8193, 12_000, 19_998, 19_999, 30_000] {
            let hit = seg.get(&key(probe));
            let expected = all.iter().find(|r| r.key == key(probe));
            assert_eq!(hit.map(|r| r.offset), expected.map(|r| r.offset), "probe {probe}");
            let first = seg.seek(&key(probe)).next().map(|r| r.offset);
            let scan = all.iter().find(|r| r.key >= &key(probe)[..]).map(|r| r.offset);
            assert_eq!(first, scan, "seek {probe}");
        }
        let ranged: Vec<u64> = seg.range(&key(100), &key(120)).map(|r| r.offset).collect();
        assert_eq!(ranged.len(), 11);
        let by_offset = seg.record_at_offset(ranged[3]).unwrap();
        assert_eq!(by_offset.key, key(106));
        assert!(seg.record_at_offset(1).is_none());
    }

    #[test]
    fn empty_segment_opens() {
        let dir = tempfile::tempdir().unwrap();
        write(dir.path(), 0);
        let seg = Segment::open(&dir.path().join("elii.0000.seg"), SegmentKind::Elii).unwrap();
        assert!(seg.is_empty());
        assert!(seg.get(&key(0)).is_none());
        assert_eq!(seg.iter().count(), 0);
    }

    #[test]
    fn writer_rejects_unsorted_keys() {
        let dir = tempfile::tempdir().unwrap();
        let mut w = SegmentWriter::create(dir.path(), SegmentKind::Elii).unwrap();
        w.push(&key(5), b"").unwrap();
        assert!(w.push(&key(5), b"").is_err());
        assert!(w.push(&key(4), b"").is_err());
        assert!(w.push(&[0, 0, 1], b"").is_err());
    }

    #[test]
    fn corruption_is_detected() {
        let dir = tempfile::tempdir().unwrap();
        write(dir.path(), 5000);
        let path = dir.path().join("elii.0000.seg");
        let bytes = std::fs::read(&path).unwrap();

        std::fs::write(&path, &bytes[..bytes.len() - 100]).unwrap();
        let err = Segment::open(&path, SegmentKind::Elii).err().unwrap();
        assert!(err.to_string().contains("checksum"), "{err}");

        let mut flipped = bytes.clone();
        flipped[200] ^= 0xff;
        std::fs::write(&path, &flipped).unwrap();
        let err = Segment::open(&path, SegmentKind::Elii).err().unwrap();
        assert!(err.to_string().contains("checksum"), "{err}");

        std::fs::write(&path, &bytes).unwrap();
        assert!(Segment::open(&path, SegmentKind::Relation).is_err());
        assert!(Segment::open(&path, SegmentKind::Elii).is_ok());
    }
}
