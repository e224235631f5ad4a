//! Per-patient extraction of pairwise event relations and signed day
//! differences.
//!
//! For a pair of events the anchor is the less common one, i.e. the one
//! with the larger [`EventId`]. A difference `d` is always
//! `related day - anchor day`, so `d <= 0` means the related event happened
//! on or before the anchor.

use crate::error::{Error, Result};
use crate::ingest::EventTimeDoc;
use crate::model::{DayStamp, EventId};

/// One event of a patient timeline. `times` is strictly ascending.
#[derive(Debug, Clone, Copy)]
pub struct TimelineEntry<'a> {
    pub event: EventId,
    pub times: &'a [DayStamp],
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord)]
pub struct PatientPairRelation {
    pub anchor: EventId,
    pub related: EventId,
    pub has_before: bool,
    pub has_after: bool,
    pub has_cooccur: bool,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct PatientPairDiff {
    pub anchor: EventId,
    pub related: EventId,
    /// Ascending, deduplicated.
    pub diffs: Vec<i32>,
}

fn check_timeline(timeline: &[TimelineEntry<'_>]) -> Result<()> {
    for pair in timeline.windows(2) {
        if pair[0].event >= pair[1].event {
            return Err(Error::InvalidArgument(
                "timeline events must be strictly ascending by id".into(),
            ));
        }
    }
    for entry in timeline {
        if entry.times.is_empty() || entry.times.windows(2).any(|w| w[0] >= w[1]) {
            return Err(Error::InvalidArgument(format!(
                "times of event {} must be non-empty and strictly ascending",
                entry.event
            )));
        }
    }
    Ok(())
}

/// Visits the relations of every event pair in a timeline, ordered by
/// (anchor, related).
///
/// Co-occurrence comes from grouping occurrences by date. Before and after
/// only need the first and last day of each event: some related day is on
/// or before some anchor day iff `first(related) <= last(anchor)`, and
/// symmetrically for after.
pub fn for_each_relation(
    timeline: &[TimelineEntry<'_>],
    scratch: &mut Vec<(i32, u32)>,
    mut visit: impl FnMut(PatientPairRelation),
) {
    scratch.clear();
    for entry in timeline {
        scratch.extend(entry.times.iter().map(|t| (t.0, entry.event.get())));
    }
    scratch.sort_unstable();
    let mut cooccur: Vec<(u32, u32)> = Vec::new();
    let mut group_start = 0;
    for i in 1..=scratch.len() {
        if i == scratch.len() || scratch[i].0 != scratch[group_start].0 {
            let group = &scratch[group_start..i];
            for (j, (_, hi)) in group.iter().enumerate() {
                for (_, lo) in &group[..j] {
                    cooccur.push((*hi, *lo));
                }
            }
            group_start = i;
        }
    }
    cooccur.sort_unstable();
    cooccur.dedup();

    let mut co = cooccur.into_iter().peekable();
    for (ai, anchor) in timeline.iter().enumerate() {
        let a_first = anchor.times[0];
        let a_last = *anchor.times.last().expect("non-empty");
        for related in &timeline[..ai] {
            let r_first = related.times[0];
            let r_last = *related.times.last().expect("non-empty");
            let key = (anchor.event.get(), related.event.get());
            while co.peek().is_some_and(|p| *p < key) {
                co.next();
            }
            let has_cooccur = co.peek() == Some(&key);
            visit(PatientPairRelation {
                anchor: anchor.event,
                related: related.event,
                has_before: r_first <= a_last,
                has_after: r_last >= a_first,
                has_cooccur,
            });
        }
    }
}

/// Visits `(anchor, related, diffs)` for every pair with at least one
/// difference inside the cap. `diffs` is ascending and deduplicated.
pub fn for_each_diff(
    timeline: &[TimelineEntry<'_>],
    max_abs_diff: Option<u32>,
    scratch: &mut Vec<i32>,
    mut visit: impl FnMut(EventId, EventId, &[i32]),
) {
    let cap = max_abs_diff.map(i64::from);
    for (ai, anchor) in timeline.iter().enumerate() {
        for related in &timeline[..ai] {
            scratch.clear();
            for ta in anchor.times {
                for tr in related.times {
                    let d = i64::from(tr.0) - i64::from(ta.0);
                    if cap.is_none_or(|c| d.abs() <= c) {
                        scratch.push(d as i32);
                    }
                }
            }
            if scratch.is_empty() {
                continue;
            }
            scratch.sort_unstable();
            scratch.dedup();
            visit(anchor.event, related.event, scratch);
        }
    }
}

fn timeline_of(docs: &[EventTimeDoc]) -> Result<Vec<TimelineEntry<'_>>> {
    if let Some(first) = docs.first() {
        if let Some(other) = docs.iter().find(|d| d.patient_id != first.patient_id) {
            return Err(Error::InvalidArgument(format!(
                "timeline mixes patients {} and {}",
                first.patient_id, other.patient_id
            )));
        }
    }
    let mut timeline: Vec<TimelineEntry<'_>> = docs
        .iter()
        .map(|d| TimelineEntry {
            event: d.event_id,
            times: &d.times,
        })
        .collect();
    timeline.sort_by_key(|e| e.event);
    check_timeline(&timeline)?;
    Ok(timeline)
}

/// All pair relations of one patient's Event-Time documents.
pub fn extract_patient_relations(docs: &[EventTimeDoc]) -> Result<Vec<PatientPairRelation>> {
    let timeline = timeline_of(docs)?;
    let mut out = Vec::new();
    for_each_relation(&timeline, &mut Vec::new(), |r| out.push(r));
    Ok(out)
}

/// All pair day differences of one patient's Event-Time documents, limited
/// to `|d| <= max_abs_diff` when a cap is given.
pub fn extract_patient_diffs(
    docs: &[EventTimeDoc],
    max_abs_diff: Option<u32>,
) -> Result<Vec<PatientPairDiff>> {
    let timeline = timeline_of(docs)?;
    let mut out = Vec::new();
    for_each_diff(&timeline, max_abs_diff, &mut Vec::new(), |anchor, related, diffs| {
        out.push(PatientPairDiff {
            anchor,
            related,
            diffs: diffs.to_vec(),
        })
    });
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::PatientId;
    use proptest::prelude::*;

    fn doc(patient: &str, event: u32, times: &[i32]) -> EventTimeDoc {
        EventTimeDoc {
            patient_id: PatientId::new(patient).unwrap(),
            event_id: EventId::new(event).unwrap(),
            times: times.iter().map(|t| DayStamp(*t)).collect(),
        }
    }

    fn flags(anchor: &[i32], related: &[i32]) -> (bool, bool, bool) {
        let rel = extract_patient_relations(&[doc("P", 2, anchor), doc("P", 1, related)]).unwrap();
        assert_eq!(rel.len(), 1);
        assert_eq!(rel[0].anchor.get(), 2);
        (rel[0].has_before, rel[0].has_after, rel[0].has_cooccur)
    }

    #[test]
    fn relation_examples() {
        assert_eq!(flags(&[10], &[5]), (true, false, false));
        assert_eq!(flags(&[10], &[10]), (true, true, true));
        // brute force: 10 <= 20 and 10 >= 3, no shared date
        assert_eq!(flags(&[3, 20], &[10]), (true, true, false));
    }

    fn diffs(anchor: &[i32], related: &[i32]) -> Vec<i32> {
        let out = extract_patient_diffs(&[doc("P", 2, anchor), doc("P", 1, related)], None).unwrap();
        out.into_iter().next().map(|d| d.diffs).unwrap_or_default()
    }

    #[test]
    fn diff_examples() {
        assert_eq!(diffs(&[10], &[5, 40]), vec![-5, 30]);
        assert_eq!(diffs(&[10], &[10]), vec![0]);
        // (0,3)=3 (0,7)=7 (7,3)=-4 (7,7)=0
        assert_eq!(diffs(&[0, 7], &[3, 7]), vec![-4, 0, 3, 7]);
    }

    #[test]
    fn cap_filters_and_drops_empty_pairs() {
        let docs = [doc("P", 3, &[100]), doc("P", 2, &[0, 95]), doc("P", 1, &[0])];
        let out = extract_patient_diffs(&docs, Some(10)).unwrap();
        assert_eq!(
            out,
            vec![
                PatientPairDiff {
                    anchor: EventId::new(2).unwrap(),
                    related: EventId::new(1).unwrap(),
                    diffs: vec![0]
                },
                PatientPairDiff {
                    anchor: EventId::new(3).unwrap(),
                    related: EventId::new(2).unwrap(),
                    diffs: vec![-5]
                },
            ]
        );
    }

    #[test]
    fn mixed_patients_rejected() {
        let err = extract_patient_relations(&[doc("P", 2, &[1]), doc("Q", 1, &[1])]).unwrap_err();
        assert!(matches!(err, Error::InvalidArgument(_)));
        let err = extract_patient_relations(&[doc("P", 2, &[3, 1])]).unwrap_err();
        assert!(matches!(err, Error::InvalidArgument(_)));
    }

    fn timeline_strategy() -> impl Strategy<Value = Vec<(u32, Vec<i32>)>> {
        prop::collection::btree_map(1u32..12, prop::collection::btree_set(-20i32..20, 1..5), 1..7)
            .prop_map(|m| m.into_iter().map(|(e, t)| (e, t.into_iter().collect())).collect())
    }

    proptest! {
        #[test]
        fn extractors_agree_with_pairwise_definition(timeline in timeline_strategy()) {
            let docs: Vec<EventTimeDoc> = timeline.iter().map(|(e, t)| doc("P", *e, t)).collect();
            let rels = extract_patient_relations(&docs).unwrap();
            let diffs = extract_patient_diffs(&docs, None).unwrap();
            let n = timeline.len();
            prop_assert_eq!(rels.len(), n * (n - 1) / 2);
            prop_assert_eq!(diffs.len(), rels.len());
            for (rel, diff) in rels.iter().zip(&diffs) {
                prop_assert!(rel.anchor > rel.related);
                prop_assert_eq!((rel.anchor, rel.related), (diff.anchor, diff.related));
                let ta = &timeline.iter().find(|(e, _)| *e == rel.anchor.get()).unwrap().1;
                let tr = &timeline.iter().find(|(e, _)| *e == rel.related.get()).unwrap().1;
                let pairs: Vec<i32> = ta.iter().flat_map(|a| tr.iter().map(move |r| r - a)).collect();
                prop_assert_eq!(rel.has_before, pairs.iter().any(|d| *d <= 0));
                prop_assert_eq!(rel.has_after, pairs.iter().any(|d| *d >= 0));
                prop_assert_eq!(rel.has_cooccur, pairs.contains(&0));
                prop_assert!(rel.has_before || rel.has_after);
                prop_assert!(!rel.has_cooccur || (rel.has_before && rel.has_after));
                prop_assert_eq!(rel.has_before, diff.diffs.iter().any(|d| *d <= 0));
                prop_assert_eq!(rel.has_after, diff.diffs.iter().any(|d| *d >= 0));
                prop_assert_eq!(rel.has_cooccur, diff.diffs.contains(&0));
                let mut expected = pairs.clone();
                expected.sort_unstable();
                expected.dedup();
                prop_assert_eq!(&diff.diffs, &expected);
            }
        }
    }
}
