//! Aggregation of per-patient facts into posting lists: the relation and
//! time-difference collections of the temporal index, and the per-event
//! baseline index.
//!
//! Facts are packed into `u128` values whose high 96 bits are the document
//! key and whose low 32 bits are the patient ordinal, then pushed through an
//! [`ExternalSorter`]. Consecutive facts with equal keys form one document.

pub mod extsort;

use std::iter::Peekable;
use std::path::PathBuf;

use crate::error::{Error, Result};
use crate::model::{EventId, Relation};
use crate::postings::PostingList;
use crate::relate::{PatientPairDiff, PatientPairRelation};

pub use extsort::ExternalSorter;

/// Patients for whom `related` stands in `relation` to `anchor`.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct RelationDoc {
    pub anchor: EventId,
    pub relation: Relation,
    pub related: EventId,
    pub patients: PostingList,
}

/// Patients with an occurrence pair at exactly `day_diff` days
/// (`related - anchor`).
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct TimeDiffDoc {
    pub anchor: EventId,
    pub related: EventId,
    pub day_diff: i32,
    pub patients: PostingList,
}

/// Patients having at least one occurrence of `event`.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct EliiDoc {
    pub event: EventId,
    pub patients: PostingList,
}

const DEFAULT_MEMORY: usize = 64 << 20;

fn flip_sign(d: i32) -> u128 {
    u128::from((d as u32) ^ 0x8000_0000)
}

fn unflip_sign(bits: u128) -> i32 {
    ((bits as u32) ^ 0x8000_0000) as i32
}

fn relation_fact(anchor: EventId, relation: Relation, related: EventId, patient: u32) -> u128 {
    (u128::from(anchor.get()) << 96)
        | (u128::from(relation.code()) << 88)
        | (u128::from(related.get()) << 56)
        | u128::from(patient)
}

fn timediff_fact(anchor: EventId, related: EventId, d: i32, patient: u32) -> u128 {
    (u128::from(anchor.get()) << 96)
        | (u128::from(related.get()) << 64)
        | (flip_sign(d) << 32)
        | u128::from(patient)
}

fn elii_fact(event: EventId, patient: u32) -> u128 {
    (u128::from(event.get()) << 32) | u128::from(patient)
}

fn check_orientation(anchor: EventId, related: EventId) -> Result<()> {
    if anchor <= related {
        return Err(Error::Build(format!(
            "anchor {anchor} must have a larger id than related event {related}"
        )));
    }
    Ok(())
}

/// Groups sorted facts by their key bits.
pub struct Grouped<I: Iterator<Item = Result<u128>>> {
    inner: Peekable<I>,
}

impl<I: Iterator<Item = Result<u128>>> Iterator for Grouped<I> {
    /// `(fact >> 32, patients)`
    type Item = Result<(u128, PostingList)>;

    fn next(&mut self) -> Option<Self::Item> {
        let first = match self.inner.next()? {
            Ok(f) => f,
            Err(e) => return Some(Err(e)),
        };
        let key = first >> 32;
        let mut patients = vec![first as u32];
        loop {
            match self.inner.peek() {
                Some(Ok(f)) if f >> 32 == key => {
                    patients.push(*f as u32);
                    self.inner.next();
                }
                Some(Err(_)) => {
                    let err = self.inner.next().expect("peeked").expect_err("peeked an error");
                    return Some(Err(err));
                }
                _ => break,
            }
        }
        Some(Ok((key, PostingList::from_sorted(patients))))
    }
}

fn grouped<I: Iterator<Item = Result<u128>>>(iter: I) -> Grouped<I> {
    Grouped {
        inner: iter.peekable(),
    }
}

/// Streams relation facts into [`RelationDoc`]s.
pub struct RelationIndexBuilder {
    sorter: ExternalSorter<u128>,
}

impl RelationIndexBuilder {
    pub fn new(memory_bytes: usize, spill_dir: Option<PathBuf>) -> Self {
        RelationIndexBuilder {
            sorter: ExternalSorter::new(memory_bytes, spill_dir),
        }
    }

    pub fn push(&mut self, patient: u32, fact: &PatientPairRelation) -> Result<()> {
        check_orientation(fact.anchor, fact.related)?;
        for (flag, relation) in [
            (fact.has_before, Relation::Before),
            (fact.has_after, Relation::After),
            (fact.has_cooccur, Relation::CoOccur),
        ] {
            if flag {
                self.sorter
                    .push(relation_fact(fact.anchor, relation, fact.related, patient))?;
            }
        }
        Ok(())
    }

    /// Documents in `(anchor, relation, related)` order.
    pub fn finish(self) -> Result<impl Iterator<Item = Result<RelationDoc>>> {
        Ok(grouped(self.sorter.finish()?).map(|group| {
            group.map(|(key, patients)| RelationDoc {
                anchor: EventId::from_raw((key >> 64) as u32),
                relation: Relation::from_code((key >> 56) as u8).expect("packed relation"),
                related: EventId::from_raw((key >> 24) as u32),
                patients,
            })
        }))
    }
}

/// Streams day-difference facts into [`TimeDiffDoc`]s.
pub struct TimeDiffIndexBuilder {
    sorter: ExternalSorter<u128>,
}

impl TimeDiffIndexBuilder {
    pub fn new(memory_bytes: usize, spill_dir: Option<PathBuf>) -> Self {
        TimeDiffIndexBuilder {
            sorter: ExternalSorter::new(memory_bytes, spill_dir),
        }
    }

    pub fn push(&mut self, patient: u32, anchor: EventId, related: EventId, diffs: &[i32]) -> Result<()> {
        check_orientation(anchor, related)?;
        for d in diffs {
            self.sorter.push(timediff_fact(anchor, related, *d, patient))?;
        }
        Ok(())
    }

    /// Documents in `(anchor, related, day_diff)` order.
    pub fn finish(self) -> Result<impl Iterator<Item = Result<TimeDiffDoc>>> {
        Ok(grouped(self.sorter.finish()?).map(|group| {
            group.map(|(key, patients)| TimeDiffDoc {
                anchor: EventId::from_raw((key >> 64) as u32),
                related: EventId::from_raw((key >> 32) as u32),
                day_diff: unflip_sign(key),
                patients,
            })
        }))
    }
}

/// Streams (patient, event) presence into [`EliiDoc`]s.
pub struct EliiBuilder {
    sorter: ExternalSorter<u128>,
}

impl EliiBuilder {
    pub fn new(memory_bytes: usize, spill_dir: Option<PathBuf>) -> Self {
        EliiBuilder {
            sorter: ExternalSorter::new(memory_bytes, spill_dir),
        }
    }

    pub fn push(&mut self, patient: u32, event: EventId) -> Result<()> {
        self.sorter.push(elii_fact(event, patient))
    }

    pub fn finish(self) -> Result<impl Iterator<Item = Result<EliiDoc>>> {
        Ok(grouped(self.sorter.finish()?).map(|group| {
            group.map(|(key, patients)| EliiDoc {
                event: EventId::from_raw(key as u32),
                patients,
            })
        }))
    }
}

/// Aggregates `(patient ordinal, relation)` facts into relation documents.
pub fn build_relation_index(
    facts: impl IntoIterator<Item = (u32, PatientPairRelation)>,
) -> Result<Vec<RelationDoc>> {
    let mut builder = RelationIndexBuilder::new(DEFAULT_MEMORY, None);
    for (patient, fact) in facts {
        builder.push(patient, &fact)?;
    }
    builder.finish()?.collect()
}

/// Aggregates `(patient ordinal, diffs)` facts into time-difference
/// documents, one per distinct day difference.
pub fn build_timediff_index(
    facts: impl IntoIterator<Item = (u32, PatientPairDiff)>,
) -> Result<Vec<TimeDiffDoc>> {
    let mut builder = TimeDiffIndexBuilder::new(DEFAULT_MEMORY, None);
    for (patient, fact) in facts {
        builder.push(patient, fact.anchor, fact.related, &fact.diffs)?;
    }
    builder.finish()?.collect()
}

/// Per-event posting lists from `(patient ordinal, event)` presence pairs.
pub fn build_elii(event_time: impl IntoIterator<Item = (u32, EventId)>) -> Result<Vec<EliiDoc>> {
    let mut builder = EliiBuilder::new(DEFAULT_MEMORY, None);
    for (patient, event) in event_time {
        builder.push(patient, event)?;
    }
    builder.finish()?.collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    fn id(v: u32) -> EventId {
        EventId::new(v).unwrap()
    }

    fn rel(anchor: u32, related: u32, b: bool, a: bool, c: bool) -> PatientPairRelation {
        PatientPairRelation {
            anchor: id(anchor),
            related: id(related),
            has_before: b,
            has_after: a,
            has_cooccur: c,
        }
    }

    #[test]
    fn relation_facts_aggregate_per_key() {
        let docs = build_relation_index([
            (2, rel(5, 3, true, false, false)),
            (1, rel(5, 3, true, true, true)),
            (7, rel(9, 1, false, true, false)),
        ])
        .unwrap();
        let summary: Vec<(u32, Relation, u32, Vec<u32>)> = docs
            .into_iter()
            .map(|d| (d.anchor.get(), d.relation, d.related.get(), d.patients.into_vec()))
            .collect();
        assert_eq!(
            summary,
            vec![
                (5, Relation::Before, 3, vec![1, 2]),
                (5, Relation::After, 3, vec![1]),
                (5, Relation::CoOccur, 3, vec![1]),
                (9, Relation::After, 1, vec![7]),
            ]
        );
    }

    #[test]
    fn orientation_violation_is_a_build_error() {
        let err = build_relation_index([(0, rel(3, 5, true, false, false))]).unwrap_err();
        assert!(matches!(err, Error::Build(_)));
        let err = build_timediff_index([(
            0,
            PatientPairDiff {
                anchor: id(2),
                related: id(2),
                diffs: vec![0],
            },
        )])
        .unwrap_err();
        assert!(matches!(err, Error::Build(_)));
    }

    #[test]
    fn timediff_docs_per_difference() {
        let docs = build_timediff_index([
            (
                1,
                PatientPairDiff {
                    anchor: id(4),
                    related: id(2),
                    diffs: vec![-5, 30],
                },
            ),
            (
                0,
                PatientPairDiff {
                    anchor: id(4),
                    related: id(2),
                    diffs: vec![-5],
                },
            ),
        ])
        .unwrap();
        let summary: Vec<(i32, Vec<u32>)> = docs
            .into_iter()
            .map(|d| (d.day_diff, d.patients.into_vec()))
            .collect();
        assert_eq!(summary, vec![(-5, vec![0, 1]), (30, vec![1])]);
    }

    #[test]
    fn elii_groups_by_event() {
        let docs = build_elii([(3, id(1)), (1, id(1)), (2, id(2)), (1, id(1))]).unwrap();
        assert_eq!(docs.len(), 2);
        assert_eq!(docs[0].patients.as_slice(), &[1, 3]);
        assert_eq!(docs[1].event, id(2));
    }

    #[test]
    fn packed_sign_order() {
        let a = timediff_fact(id(1), id(1), -1, 0);
        let b = timediff_fact(id(1), id(1), 0, 0);
        let c = timediff_fact(id(1), id(1), i32::MAX, 0);
        let z = timediff_fact(id(1), id(1), i32::MIN, 0);
        assert!(z < a && a < b && b < c);
        assert_eq!(unflip_sign(flip_sign(-17)), -17);
    }
}
