//! The four query tasks over a data directory, answered either from the
//! temporal index or by the event-level baseline, which intersects
//! per-event patient lists and checks temporal conditions against
//! Event-Time documents on the fly.

use std::collections::BTreeMap;
use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::catalog::Catalog;
use crate::error::{Error, Result};
use crate::model::{DayStamp, EventId, Relation};
use crate::postings::PostingList;
use crate::store::StoreHandle;

/// An event given by id or by text the catalog can resolve.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum EventRef {
    Id(u32),
    Text(String),
}

impl EventRef {
    pub fn resolve(&self, catalog: &Catalog) -> Result<EventId> {
        match self {
            EventRef::Id(id) => catalog.resolve(&id.to_string()),
            EventRef::Text(text) => catalog.resolve(text),
        }
    }
}

impl FromStr for EventRef {
    type Err = std::convert::Infallible;

    fn from_str(s: &str) -> std::result::Result<Self, Self::Err> {
        Ok(EventRef::Text(s.to_string()))
    }
}

impl fmt::Display for EventRef {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            EventRef::Id(id) => write!(f, "#{id}"),
            EventRef::Text(text) => f.write_str(text),
        }
    }
}

/// Inclusive day range.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(try_from = "RawRange")]
pub struct DayRange {
    lo: i32,
    hi: i32,
}

#[derive(Deserialize)]
struct RawRange {
    lo: i32,
    hi: i32,
}

impl TryFrom<RawRange> for DayRange {
    type Error = Error;
    fn try_from(raw: RawRange) -> Result<Self> {
        DayRange::new(raw.lo, raw.hi)
    }
}

impl DayRange {
    pub fn new(lo: i32, hi: i32) -> Result<Self> {
        if lo > hi {
            return Err(Error::InvalidArgument(format!("day range {lo}..{hi} has lo > hi")));
        }
        Ok(DayRange { lo, hi })
    }

    pub fn lo(&self) -> i32 {
        self.lo
    }

    pub fn hi(&self) -> i32 {
        self.hi
    }

    pub fn contains(&self, d: i64) -> bool {
        i64::from(self.lo) <= d && d <= i64::from(self.hi)
    }

    fn mirrored(&self) -> (i32, i32) {
        (-self.hi, -self.lo)
    }
}

impl FromStr for DayRange {
    type Err = Error;

    /// Parses `LO..HI`.
    fn from_str(s: &str) -> Result<Self> {
        let bad = || Error::InvalidArgument(format!("day range {s:?} is not LO..HI"));
        let (lo, hi) = s.split_once("..").ok_or_else(bad)?;
        DayRange::new(lo.trim().parse().map_err(|_| bad())?, hi.trim().parse().map_err(|_| bad())?)
    }
}

impl fmt::Display for DayRange {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}..{}", self.lo, self.hi)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ExploreRow {
    pub related_event: EventId,
    pub patient_count: u64,
    /// Fraction of the input event's patients.
    pub pct: f64,
}

/// `fraction` as a percentage rounded to two decimals.
pub fn percent_2dp(fraction: f64) -> f64 {
    (fraction * 10_000.0).round() / 100.0
}

/// Maps a pair query to the key it is stored under. The anchor is the
/// less common event (larger id); "a after b" is read as "b before a".
pub fn normalize_pair(a: EventId, b: EventId, relation: Relation) -> Result<(EventId, Relation, EventId)> {
    if a == b {
        return Err(Error::InvalidArgument(format!("self-relation on event {a} is not supported")));
    }
    let (first, second) = match relation {
        Relation::CoOccur => return Ok((a.max(b), Relation::CoOccur, a.min(b))),
        Relation::Before => (a, b),
        Relation::After => (b, a),
    };
    // `first` happened on or before `second`.
    if first > second {
        Ok((first, Relation::After, second))
    } else {
        Ok((second, Relation::Before, first))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Engine {
    Telii,
    Elii,
}

impl Engine {
    pub fn as_str(self) -> &'static str {
        match self {
            Engine::Telii => "telii",
            Engine::Elii => "elii",
        }
    }
}

impl FromStr for Engine {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "telii" => Ok(Engine::Telii),
            "elii" => Ok(Engine::Elii),
            _ => Err(Error::InvalidArgument(format!("unknown engine {s:?}; expected telii or elii"))),
        }
    }
}

fn validate_within(within: Option<DayRange>) -> Result<()> {
    if let Some(w) = within {
        if w.lo < 0 {
            return Err(Error::InvalidArgument(format!(
                "within range {w} must have lo >= 0; swap the events to look backwards"
            )));
        }
    }
    Ok(())
}

fn has_pair_within(first: &[DayStamp], second: &[DayStamp], within: DayRange) -> bool {
    // Both sorted: for each first day, look for a second day in
    // [t + lo, t + hi].
    first.iter().any(|t| {
        let lo = i64::from(t.0) + i64::from(within.lo);
        let i = second.partition_point(|s| i64::from(s.0) < lo);
        second.get(i).is_some_and(|s| within.contains(i64::from(s.0) - i64::from(t.0)))
    })
}

fn shares_day(a: &[DayStamp], b: &[DayStamp]) -> bool {
    let (mut i, mut j) = (0, 0);
    while i < a.len() && j < b.len() {
        match a[i].cmp(&b[j]) {
            std::cmp::Ordering::Less => i += 1,
            std::cmp::Ordering::Greater => j += 1,
            std::cmp::Ordering::Equal => return true,
        }
    }
    false
}

/// Whether `related` stands in `direction` to `input` for one patient:
/// with `direction = After`, some `related` day is on or after some
/// `input` day (within the range, when given).
fn relation_holds(input: &[DayStamp], related: &[DayStamp], direction: Relation, within: Option<DayRange>) -> bool {
    match (direction, within) {
        (Relation::CoOccur, _) => shares_day(input, related),
        (Relation::After, None) => related.last() >= input.first(),
        (Relation::Before, None) => related.first() <= input.last(),
        (Relation::After, Some(w)) => has_pair_within(input, related, w),
        (Relation::Before, Some(w)) => has_pair_within(related, input, w),
    }
}

/// Query executor over an opened store.
#[derive(Debug, Clone, Copy)]
pub struct QueryEngine<'a> {
    store: &'a StoreHandle,
    engine: Engine,
}

impl<'a> QueryEngine<'a> {
    /// Fails with [`Error::MissingIndex`] when the store lacks the index
    /// the engine needs.
    pub fn new(store: &'a StoreHandle, engine: Engine) -> Result<Self> {
        match engine {
            Engine::Telii if !store.has_telii() => Err(Error::MissingIndex("temporal (telii)".into())),
            Engine::Elii if !store.has_elii() => Err(Error::MissingIndex("event-level (elii)".into())),
            _ => Ok(QueryEngine { store, engine }),
        }
    }

    pub fn engine(&self) -> Engine {
        self.engine
    }

    pub fn store(&self) -> &'a StoreHandle {
        self.store
    }

    pub fn resolve(&self, event: &EventRef) -> Result<EventId> {
        event.resolve(self.store.catalog())
    }

    /// Whether pairs anchored on `anchor` are in the temporal index.
    fn indexed(&self, anchor: EventId) -> bool {
        self.store
            .hybrid_min_patients()
            .is_none_or(|min| self.store.catalog().patient_count(anchor) >= min)
    }

    fn use_temporal(&self, a: EventId, b: EventId) -> bool {
        self.engine == Engine::Telii && self.indexed(a.max(b))
    }

    fn check_cap(&self, within: Option<DayRange>) -> Result<()> {
        if let (Some(w), Some(cap)) = (within, self.store.max_abs_diff()) {
            if self.engine == Engine::Telii && i64::from(w.hi) > i64::from(cap) {
                return Err(Error::CapExceeded { cap, lo: w.lo, hi: w.hi });
            }
        }
        Ok(())
    }

    fn check_event(&self, id: EventId) -> Result<()> {
        if self.store.catalog().get(id).is_none() {
            return Err(Error::NotFound {
                reference: id.to_string(),
                near: Vec::new(),
            });
        }
        Ok(())
    }

    /// Patients having both events.
    pub fn coexist_two(&self, a: EventId, b: EventId) -> Result<PostingList> {
        self.check_event(a)?;
        self.check_event(b)?;
        if a == b {
            return Err(Error::InvalidArgument(format!("co-existence of event {a} with itself")));
        }
        if self.use_temporal(a, b) {
            let (anchor, related) = (a.max(b), a.min(b));
            let before = self.store.get_relation(anchor, Relation::Before, related)?;
            let after = self.store.get_relation(anchor, Relation::After, related)?;
            Ok(match (before, after) {
                (Some(x), Some(y)) => x.patients.union(&y.patients),
                (Some(x), None) | (None, Some(x)) => x.patients,
                (None, None) => PostingList::new(),
            })
        } else {
            Ok(self.store.elii(a)?.intersect(&self.store.elii(b)?))
        }
    }

    /// Patients having every event of the group.
    pub fn coexist_group(&self, events: &[EventId]) -> Result<PostingList> {
        if events.len() < 2 {
            return Err(Error::InvalidArgument("a co-existence query needs at least two events".into()));
        }
        let mut sorted = events.to_vec();
        sorted.sort_unstable();
        if sorted.windows(2).any(|w| w[0] == w[1]) {
            return Err(Error::InvalidArgument("co-existence events must be distinct".into()));
        }
        let anchor = *sorted.last().expect("non-empty");
        if self.engine == Engine::Elii {
            for id in &sorted {
                self.check_event(*id)?;
            }
            let lists = sorted.iter().map(|e| self.store.elii(*e)).collect::<Result<Vec<_>>>()?;
            return Ok(PostingList::intersect_all(lists));
        }
        let mut result: Option<PostingList> = None;
        for other in &sorted[..sorted.len() - 1] {
            let pair = self.coexist_two(anchor, *other)?;
            let next = match result {
                Some(acc) => acc.intersect(&pair),
                None => pair,
            };
            if next.is_empty() {
                return Ok(next);
            }
            result = Some(next);
        }
        Ok(result.unwrap_or_default())
    }

    /// Patients with an occurrence of `a` on or before an occurrence of
    /// `b`; with `within`, with `t_b - t_a` inside the range.
    pub fn before(&self, a: EventId, b: EventId, within: Option<DayRange>) -> Result<PostingList> {
        self.check_event(a)?;
        self.check_event(b)?;
        validate_within(within)?;
        if a == b {
            return Err(Error::InvalidArgument(format!("self-relation on event {a} is not supported")));
        }
        if !self.use_temporal(a, b) {
            return self.elii_before(a, b, within);
        }
        self.check_cap(within)?;
        match within {
            None => {
                let (anchor, relation, related) = normalize_pair(a, b, Relation::Before)?;
                Ok(self
                    .store
                    .get_relation(anchor, relation, related)?
                    .map(|d| d.patients)
                    .unwrap_or_default())
            }
            Some(w) => {
                // d = t_related - t_anchor.
                let (anchor, related, lo, hi) = if a > b {
                    (a, b, w.lo, w.hi)
                } else {
                    let (lo, hi) = w.mirrored();
                    (b, a, lo, hi)
                };
                let docs: Vec<PostingList> = self
                    .store
                    .range_timediff(anchor, Some(related), lo, hi)?
                    .map(|d| d.patients)
                    .collect();
                Ok(PostingList::union_all(&docs))
            }
        }
    }

    /// Size of [`before`](Self::before) without materializing the list
    /// where the index allows it.
    pub fn before_count(&self, a: EventId, b: EventId, within: Option<DayRange>) -> Result<usize> {
        if within.is_none() && a != b && self.use_temporal(a, b) {
            self.check_event(a)?;
            self.check_event(b)?;
            let (anchor, relation, related) = normalize_pair(a, b, Relation::Before)?;
            return self.store.relation_len(anchor, relation, related);
        }
        Ok(self.before(a, b, within)?.len())
    }

    /// Patients for whom "`x` `relation` `y`" holds: `x` on or before `y`,
    /// on or after `y`, or on a shared day. `within` bounds how far `y`
    /// lies from `x` in the stated direction.
    pub fn pair(&self, x: EventId, relation: Relation, y: EventId, within: Option<DayRange>) -> Result<PostingList> {
        if within.is_none() && x != y && self.use_temporal(x, y) {
            self.check_event(x)?;
            self.check_event(y)?;
            let (anchor, stored, related) = normalize_pair(x, y, relation)?;
            return Ok(self
                .store
                .get_relation(anchor, stored, related)?
                .map(|d| d.patients)
                .unwrap_or_default());
        }
        match (relation, within) {
            (Relation::Before, _) => self.before(x, y, within),
            (Relation::After, _) => self.before(y, x, within),
            (Relation::CoOccur, Some(_)) => Err(Error::InvalidArgument("within applies only to before and after".into())),
            (Relation::CoOccur, None) => {
                self.check_event(x)?;
                self.check_event(y)?;
                if x == y {
                    return Err(Error::InvalidArgument(format!("self-relation on event {x} is not supported")));
                }
                let candidates = self.store.elii(x)?.intersect(&self.store.elii(y)?);
                let mut out = Vec::new();
                for p in candidates.iter() {
                    if let (Some(tx), Some(ty)) = (self.store.event_times(p, x), self.store.event_times(p, y)) {
                        if shares_day(&tx, &ty) {
                            out.push(p);
                        }
                    }
                }
                Ok(PostingList::from_sorted(out))
            }
        }
    }

    fn elii_before(&self, a: EventId, b: EventId, within: Option<DayRange>) -> Result<PostingList> {
        let candidates = self.store.elii(a)?.intersect(&self.store.elii(b)?);
        let mut out = Vec::new();
        for p in candidates.iter() {
            let (Some(ta), Some(tb)) = (self.store.event_times(p, a), self.store.event_times(p, b)) else {
                return Err(Error::Build(format!("patient {p} is listed for events {a} and {b} without Event-Time documents")));
            };
            if relation_holds(&ta, &tb, Relation::After, within) {
                out.push(p);
            }
        }
        Ok(PostingList::from_sorted(out))
    }

    /// Related events ranked by the number of patients in which they stand
    /// in `direction` to `input`.
    pub fn explore(
        &self,
        input: EventId,
        direction: Relation,
        within: Option<DayRange>,
        top_k: usize,
    ) -> Result<Vec<ExploreRow>> {
        self.check_event(input)?;
        if top_k == 0 {
            return Err(Error::InvalidArgument("top_k must be at least 1".into()));
        }
        if direction == Relation::CoOccur && within.is_some() {
            return Err(Error::InvalidArgument("within applies only to before and after".into()));
        }
        validate_within(within)?;

        let mut counts: BTreeMap<EventId, u64> = BTreeMap::new();
        let mut all_temporal = self.engine == Engine::Telii;
        if self.engine == Engine::Telii {
            self.check_cap(within)?;
            self.telii_explore(input, direction, within, &mut counts)?;
            all_temporal = self.store.hybrid_min_patients().is_none();
        }
        if !all_temporal || self.engine == Engine::Elii {
            let baseline = |related: EventId| self.engine == Engine::Elii || !self.indexed(input.max(related));
            self.elii_explore(input, direction, within, baseline, &mut counts)?;
        }

        let total = self.store.catalog().patient_count(input);
        let mut rows: Vec<ExploreRow> = counts
            .into_iter()
            .map(|(related_event, patient_count)| {
                debug_assert!(patient_count <= total);
                ExploreRow {
                    related_event,
                    patient_count,
                    pct: patient_count as f64 / total as f64,
                }
            })
            .collect();
        rows.sort_by(|x, y| {
            y.patient_count
                .cmp(&x.patient_count)
                .then(x.related_event.cmp(&y.related_event))
        });
        rows.truncate(top_k);
        Ok(rows)
    }

    fn telii_explore(
        &self,
        input: EventId,
        direction: Relation,
        within: Option<DayRange>,
        counts: &mut BTreeMap<EventId, u64>,
    ) -> Result<()> {
        match within {
            None => {
                // Pairs anchored on the input store the related event's
                // relation to it; pairs where the input is the related
                // event store the inverse.
                for doc in self.store.scan_by_anchor(input, direction)? {
                    counts.insert(doc.related, doc.patients.len() as u64);
                }
                for doc in self.store.scan_by_related(direction.flip(), input)? {
                    let doc = doc?;
                    counts.insert(doc.anchor, doc.patients.len() as u64);
                }
            }
            Some(w) => {
                // d = t_related - t_anchor. For AFTER the related event
                // follows the input, so with the input as anchor d lies in
                // [lo, hi] and with the input as related event in [-hi, -lo].
                let (mirror_lo, mirror_hi) = w.mirrored();
                let (as_anchor, as_related) = match direction {
                    Relation::After => ((w.lo, w.hi), (mirror_lo, mirror_hi)),
                    Relation::Before => ((mirror_lo, mirror_hi), (w.lo, w.hi)),
                    Relation::CoOccur => unreachable!("rejected above"),
                };
                let mut lists: BTreeMap<EventId, Vec<PostingList>> = BTreeMap::new();
                for doc in self.store.range_timediff(input, None, as_anchor.0, as_anchor.1)? {
                    lists.entry(doc.related).or_default().push(doc.patients);
                }
                for doc in self.store.range_timediff_by_related(input, as_related.0, as_related.1)? {
                    let doc = doc?;
                    lists.entry(doc.anchor).or_default().push(doc.patients);
                }
                for (event, lists) in lists {
                    let count = if lists.len() == 1 {
                        lists[0].len()
                    } else {
                        PostingList::union_all(&lists).len()
                    };
                    counts.insert(event, count as u64);
                }
            }
        }
        Ok(())
    }

    fn elii_explore(
        &self,
        input: EventId,
        direction: Relation,
        within: Option<DayRange>,
        include: impl Fn(EventId) -> bool,
        counts: &mut BTreeMap<EventId, u64>,
    ) -> Result<()> {
        for p in self.store.elii(input)?.iter() {
            let timeline: Vec<(EventId, Vec<DayStamp>)> = self.store.patient_timeline(p).collect();
            let Some((_, input_days)) = timeline.iter().find(|(e, _)| *e == input) else {
                return Err(Error::Build(format!("patient {p} is listed for event {input} without an Event-Time document")));
            };
            for (event, days) in &timeline {
                if *event != input && include(*event) && relation_holds(input_days, days, direction, within) {
                    *counts.entry(*event).or_default() += 1;
                }
            }
        }
        Ok(())
    }
}
