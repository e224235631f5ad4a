//! Brute-force reference answers computed straight from a records file.
//! Shares only record parsing and rule evaluation with the engines.

use std::collections::{BTreeMap, BTreeSet, HashMap};
use std::path::Path;

use crate::error::{Error, Result};
use crate::ingest::{apply_derived_rules, read_records, DerivedEventRule, RawRecord, ScanMode};
use crate::model::{EventKey, PatientId, Relation};
use crate::query::DayRange;

#[derive(Debug, Default)]
pub struct Oracle {
    /// patient -> event -> distinct days
    timelines: BTreeMap<PatientId, HashMap<EventKey, BTreeSet<i32>>>,
}

impl Oracle {
    pub fn load(records: &Path, rules: &[DerivedEventRule]) -> Result<Self> {
        let mut oracle = Oracle::default();
        read_records(records, ScanMode::Strict, |record| {
            oracle.add(&record, rules);
            Ok(())
        })?;
        Ok(oracle)
    }

    pub fn from_records<'a>(records: impl IntoIterator<Item = &'a RawRecord>, rules: &[DerivedEventRule]) -> Self {
        let mut oracle = Oracle::default();
        for record in records {
            oracle.add(record, rules);
        }
        oracle
    }

    fn add(&mut self, record: &RawRecord, rules: &[DerivedEventRule]) {
        let timeline = self.timelines.entry(record.patient_id.clone()).or_default();
        timeline.entry(record.key.clone()).or_default().insert(record.date.0);
        for key in apply_derived_rules(record, rules) {
            timeline.entry(key).or_default().insert(record.date.0);
        }
    }

    pub fn patient_count(&self) -> usize {
        self.timelines.len()
    }

    /// Number of patients with at least one occurrence of `event`.
    pub fn event_count(&self, event: &EventKey) -> u64 {
        self.timelines.values().filter(|t| t.contains_key(event)).count() as u64
    }

    /// Patients having every event.
    pub fn coexist(&self, events: &[EventKey]) -> Vec<PatientId> {
        self.timelines
            .iter()
            .filter(|(_, t)| events.iter().all(|e| t.contains_key(e)))
            .map(|(p, _)| p.clone())
            .collect()
    }

    /// Patients with some `a` day `ta` and `b` day `tb` such that
    /// `ta <= tb`, or `tb - ta` lies in `within` when given.
    pub fn before(&self, a: &EventKey, b: &EventKey, within: Option<DayRange>) -> Result<Vec<PatientId>> {
        if a == b {
            return Err(Error::InvalidArgument("self-relation is not supported".into()));
        }
        let mut out = Vec::new();
        for (patient, timeline) in &self.timelines {
            let (Some(ta), Some(tb)) = (timeline.get(a), timeline.get(b)) else {
                continue;
            };
            let mut found = false;
            for x in ta {
                for y in tb {
                    let d = i64::from(*y) - i64::from(*x);
                    let ok = match within {
                        None => d >= 0,
                        Some(w) => w.contains(d),
                    };
                    found |= ok;
                }
            }
            if found {
                out.push(patient.clone());
            }
        }
        Ok(out)
    }

    /// Per related event, the number of patients in which it stands in
    /// `direction` to `input` (AFTER: the related event occurs on or after
    /// the input event).
    pub fn explore(
        &self,
        input: &EventKey,
        direction: Relation,
        within: Option<DayRange>,
    ) -> Result<BTreeMap<EventKey, u64>> {
        if direction == Relation::CoOccur && within.is_some() {
            return Err(Error::InvalidArgument("within applies only to before and after".into()));
        }
        let mut counts: BTreeMap<EventKey, u64> = BTreeMap::new();
        for timeline in self.timelines.values() {
            let Some(t_input) = timeline.get(input) else {
                continue;
            };
            for (other, t_other) in timeline {
                if other == input {
                    continue;
                }
                let mut found = false;
                for x in t_input {
                    for y in t_other {
                        // d = t_related - t_input
                        let d = i64::from(*y) - i64::from(*x);
                        found |= match (direction, within) {
                            (Relation::CoOccur, _) => d == 0,
                            (Relation::After, None) => d >= 0,
                            (Relation::Before, None) => d <= 0,
                            (Relation::After, Some(w)) => w.contains(d),
                            (Relation::Before, Some(w)) => w.contains(-d),
                        };
                    }
                }
                if found {
                    *counts.entry(other.clone()).or_default() += 1;
                }
            }
        }
        Ok(counts)
    }
}
