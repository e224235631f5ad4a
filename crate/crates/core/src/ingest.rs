//! Record parsing, derived-event rules, catalog construction and the
//! Event-Time grouping.
//!
//! Records are JSON lines:
//!
//! ```text
//! {"patient_id":"PT0000001","date":"2020-03-02","domain":"LAB","code":"94500-6","value":"DETECTED"}
//! ```
//!
//! `code_type`, `status` and `value` are optional. Dates may carry a time
//! of day (`2020-03-02T10:15:00`), which is truncated to the date.

use std::collections::{BTreeMap, HashMap};
use std::fs::File;
use std::io::{BufRead, BufReader};
use std::ops::Range;
use std::path::Path;

use regex::{Regex, RegexBuilder};
use serde::Deserialize;

use crate::catalog::Catalog;
use crate::error::{Error, Result};
use crate::model::{
    canonicalize_event_key, parse_day, CatalogEntry, DayStamp, EventId, EventKey, PatientId,
};

/// One parsed and validated input record.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct RawRecord {
    pub patient_id: PatientId,
    pub date: DayStamp,
    pub key: EventKey,
    pub value: Option<String>,
}

#[derive(Deserialize)]
struct RecordLine {
    patient_id: String,
    date: String,
    domain: String,
    code: String,
    #[serde(default)]
    code_type: Option<String>,
    #[serde(default)]
    status: Option<String>,
    #[serde(default)]
    value: Option<String>,
}

/// Parses a record date, truncating any time-of-day suffix.
pub fn parse_record_date(text: &str) -> Result<DayStamp> {
    let text = text.trim();
    match text.as_bytes().get(10) {
        Some(b'T') | Some(b' ') if text.is_char_boundary(10) => parse_day(&text[..10]),
        _ => parse_day(text),
    }
}

impl RawRecord {
    pub fn parse_line(line: &str) -> Result<Self> {
        let raw: RecordLine = serde_json::from_str(line)?;
        Ok(RawRecord {
            patient_id: PatientId::new(raw.patient_id.trim())?,
            date: parse_record_date(&raw.date)?,
            key: canonicalize_event_key(
                &raw.domain,
                &raw.code,
                raw.code_type.as_deref().unwrap_or(""),
                raw.status.as_deref().unwrap_or(""),
            )?,
            value: raw.value,
        })
    }
}

/// Reads every record of a JSON-lines file, calling `sink` for each one.
/// Blank lines are ignored. Returns the number of skipped malformed lines
/// (always zero in strict mode).
pub fn read_records(
    path: &Path,
    mode: ScanMode,
    mut sink: impl FnMut(RawRecord) -> Result<()>,
) -> Result<usize> {
    let reader = BufReader::with_capacity(1 << 20, File::open(path)?);
    let mut skipped = 0;
    for (idx, line) in reader.lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        match RawRecord::parse_line(&line) {
            Ok(record) => sink(record)?,
            Err(err) => match mode {
                ScanMode::Strict => {
                    return Err(Error::Record {
                        path: path.to_path_buf(),
                        line: idx + 1,
                        message: err.to_string(),
                    })
                }
                ScanMode::Skip => {
                    tracing::warn!(line = idx + 1, error = %err, "skipping malformed record");
                    skipped += 1;
                }
            },
        }
    }
    Ok(skipped)
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub enum ScanMode {
    #[default]
    Strict,
    Skip,
}

/// Field a rule condition inspects.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RuleField {
    Domain,
    Code,
    CodeType,
    Status,
    Value,
}

#[derive(Debug, Clone)]
pub enum Condition {
    Equals { field: RuleField, value: String },
    Matches { pattern: Regex },
}

impl Condition {
    fn holds(&self, record: &RawRecord) -> bool {
        match self {
            Condition::Equals { field, value } => match field {
                RuleField::Domain => record.key.domain().as_str().eq_ignore_ascii_case(value),
                RuleField::Code => record.key.code() == value,
                RuleField::CodeType => record.key.code_type() == value,
                RuleField::Status => record.key.status() == value,
                RuleField::Value => unreachable!("rejected at load time"),
            },
            Condition::Matches { pattern } => {
                record.value.as_deref().is_some_and(|v| pattern.is_match(v))
            }
        }
    }
}

/// A rule producing a `DERIVED` event when any of its clauses fully holds.
#[derive(Debug, Clone)]
pub struct DerivedEventRule {
    pub name: String,
    key: EventKey,
    /// Disjunction of conjunctions.
    pub clauses: Vec<Vec<Condition>>,
}

impl DerivedEventRule {
    pub fn key(&self) -> &EventKey {
        &self.key
    }

    pub fn triggers(&self, record: &RawRecord) -> bool {
        self.clauses
            .iter()
            .any(|clause| clause.iter().all(|c| c.holds(record)))
    }
}

#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
struct RuleSpec {
    name: String,
    clauses: Vec<ClauseSpec>,
}

#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
struct ClauseSpec {
    conditions: Vec<ConditionSpec>,
}

#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
struct ConditionSpec {
    field: RuleField,
    #[serde(default)]
    equals: Option<String>,
    #[serde(default)]
    matches: Option<String>,
}

/// Parses and validates a rules document (a JSON array of rules).
pub fn parse_rules(json: &str) -> Result<Vec<DerivedEventRule>> {
    let specs: Vec<RuleSpec> =
        serde_json::from_str(json).map_err(|e| Error::Rules(e.to_string()))?;
    let mut rules: Vec<DerivedEventRule> = Vec::with_capacity(specs.len());
    for spec in specs {
        let name = spec.name.trim().to_string();
        let key = EventKey::derived(&name)
            .map_err(|e| Error::Rules(format!("rule {:?}: {e}", spec.name)))?;
        if rules.iter().any(|r| r.name == name) {
            return Err(Error::Rules(format!("duplicate rule name {name:?}")));
        }
        if spec.clauses.is_empty() {
            return Err(Error::Rules(format!("rule {name:?} has no clauses")));
        }
        let mut clauses = Vec::with_capacity(spec.clauses.len());
        for clause in spec.clauses {
            if clause.conditions.is_empty() {
                return Err(Error::Rules(format!("rule {name:?} has an empty clause")));
            }
            let mut conditions = Vec::with_capacity(clause.conditions.len());
            for cond in clause.conditions {
                conditions.push(match (cond.field, cond.equals, cond.matches) {
                    (RuleField::Value, None, Some(pattern)) => Condition::Matches {
                        pattern: RegexBuilder::new(&pattern)
                            .case_insensitive(true)
                            .build()
                            .map_err(|e| {
                                Error::Rules(format!("rule {name:?}: bad pattern {pattern:?}: {e}"))
                            })?,
                    },
                    (RuleField::Value, _, _) => {
                        return Err(Error::Rules(format!(
                            "rule {name:?}: field value takes exactly one `matches` pattern"
                        )))
                    }
                    (field, Some(value), None) => Condition::Equals {
                        field,
                        value: value.trim().to_string(),
                    },
                    (field, _, _) => {
                        return Err(Error::Rules(format!(
                            "rule {name:?}: field {field:?} takes exactly one `equals` value"
                        )))
                    }
                });
            }
            clauses.push(conditions);
        }
        rules.push(DerivedEventRule { name, key, clauses });
    }
    Ok(rules)
}

pub fn load_rules(path: &Path) -> Result<Vec<DerivedEventRule>> {
    let text = std::fs::read_to_string(path)?;
    parse_rules(&text).map_err(|e| match e {
        Error::Rules(msg) => Error::Rules(format!("{}: {msg}", path.display())),
        other => other,
    })
}

/// Derived event keys triggered by `record`, in rule order. The record's
/// own key is not included.
pub fn apply_derived_rules(record: &RawRecord, rules: &[DerivedEventRule]) -> Vec<EventKey> {
    rules
        .iter()
        .filter(|rule| rule.triggers(record))
        .map(|rule| rule.key.clone())
        .collect()
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord)]
struct Occurrence {
    patient: u32,
    key: u32,
    day: i32,
}

/// Result of scanning a records file: interned patients and keys, the
/// occurrence multiset and per-key distinct-patient counts.
#[derive(Debug, Default)]
pub struct Scan {
    patients: Vec<PatientId>,
    keys: Vec<EventKey>,
    counts: Vec<u64>,
    occurrences: Vec<Occurrence>,
    records: u64,
    skipped: usize,
}

impl Scan {
    pub fn records(&self) -> u64 {
        self.records
    }

    pub fn skipped(&self) -> usize {
        self.skipped
    }

    pub fn patient_count(&self) -> usize {
        self.patients.len()
    }

    /// Distinct-patient count per event key.
    pub fn draft_counts(&self) -> BTreeMap<EventKey, u64> {
        self.keys.iter().cloned().zip(self.counts.iter().copied()).collect()
    }

    pub fn occurrences(&self) -> impl Iterator<Item = (&PatientId, &EventKey, DayStamp)> + '_ {
        self.occurrences.iter().map(|o| {
            (
                &self.patients[o.patient as usize],
                &self.keys[o.key as usize],
                DayStamp(o.day),
            )
        })
    }
}

#[derive(Default)]
struct ScanBuilder {
    scan: Scan,
    patient_ix: HashMap<PatientId, u32>,
    key_ix: HashMap<EventKey, u32>,
}

impl ScanBuilder {
    fn push(&mut self, record: RawRecord, rules: &[DerivedEventRule]) {
        let derived = apply_derived_rules(&record, rules);
        let scan = &mut self.scan;
        let patient = *self.patient_ix.entry(record.patient_id).or_insert_with_key(|id| {
            scan.patients.push(id.clone());
            (scan.patients.len() - 1) as u32
        });
        for key in std::iter::once(record.key).chain(derived) {
            let key = *self.key_ix.entry(key).or_insert_with_key(|k| {
                scan.keys.push(k.clone());
                (scan.keys.len() - 1) as u32
            });
            scan.occurrences.push(Occurrence {
                patient,
                key,
                day: record.date.0,
            });
        }
        scan.records += 1;
    }

    fn finish(mut self) -> Scan {
        let mut pairs: Vec<(u32, u32)> = self
            .scan
            .occurrences
            .iter()
            .map(|o| (o.key, o.patient))
            .collect();
        pairs.sort_unstable();
        pairs.dedup();
        let mut counts = vec![0u64; self.scan.keys.len()];
        for (key, _) in pairs {
            counts[key as usize] += 1;
        }
        self.scan.counts = counts;
        self.scan
    }
}

/// Scans a records file, applying `rules` to every record.
pub fn scan_records(path: &Path, rules: &[DerivedEventRule], mode: ScanMode) -> Result<Scan> {
    let mut builder = ScanBuilder::default();
    let skipped = read_records(path, mode, |record| {
        builder.push(record, rules);
        Ok(())
    })?;
    let mut scan = builder.finish();
    scan.skipped = skipped;
    Ok(scan)
}

/// Scans in-memory records; same semantics as [`scan_records`].
pub fn scan_iter(
    records: impl IntoIterator<Item = RawRecord>,
    rules: &[DerivedEventRule],
) -> Scan {
    let mut builder = ScanBuilder::default();
    for record in records {
        builder.push(record, rules);
    }
    builder.finish()
}

/// Orders events by descending patient count (ties: ascending key) and
/// assigns dense 1-based ids in that order.
pub fn assign_event_ids(draft: &BTreeMap<EventKey, u64>) -> Vec<CatalogEntry> {
    let mut ranked: Vec<(&EventKey, u64)> = draft.iter().map(|(k, c)| (k, *c)).collect();
    ranked.sort_by(|(ka, ca), (kb, cb)| cb.cmp(ca).then_with(|| ka.cmp(kb)));
    ranked
        .into_iter()
        .enumerate()
        .map(|(i, (key, patient_count))| CatalogEntry {
            event_id: EventId::from_raw(i as u32 + 1),
            label: key.display(),
            key: key.clone(),
            patient_count,
        })
        .collect()
}

/// One patient's occurrences of one event.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct EventTimeDoc {
    pub patient_id: PatientId,
    pub event_id: EventId,
    /// Strictly ascending.
    pub times: Vec<DayStamp>,
}

/// Event-Time collection ordered by (patient, event). Patients are numbered
/// by their position in bytewise order.
#[derive(Debug, Default)]
pub struct EventTimeTable {
    patients: Vec<PatientId>,
    docs: Vec<(u32, EventId, Range<usize>)>,
    days: Vec<DayStamp>,
}

/// Borrowed view of one Event-Time document.
#[derive(Debug, Clone, Copy)]
pub struct EventTimeRef<'a> {
    pub patient: u32,
    pub patient_id: &'a PatientId,
    pub event_id: EventId,
    pub times: &'a [DayStamp],
}

impl EventTimeTable {
    pub fn patients(&self) -> &[PatientId] {
        &self.patients
    }

    pub fn len(&self) -> usize {
        self.docs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.docs.is_empty()
    }

    pub fn iter(&self) -> impl Iterator<Item = EventTimeRef<'_>> + '_ {
        self.docs.iter().map(move |(p, e, range)| EventTimeRef {
            patient: *p,
            patient_id: &self.patients[*p as usize],
            event_id: *e,
            times: &self.days[range.clone()],
        })
    }

    pub fn docs(&self) -> impl Iterator<Item = EventTimeDoc> + '_ {
        self.iter().map(|d| EventTimeDoc {
            patient_id: d.patient_id.clone(),
            event_id: d.event_id,
            times: d.times.to_vec(),
        })
    }
}

/// Groups the scanned occurrences by (patient, event) into sorted,
/// deduplicated time arrays.
pub fn build_event_time(scan: &Scan, catalog: &Catalog) -> Result<EventTimeTable> {
    let key_ids: Vec<EventId> = scan
        .keys
        .iter()
        .map(|key| {
            catalog.id_of(key).ok_or_else(|| {
                Error::Build(format!("event {} missing from the catalog", key.display()))
            })
        })
        .collect::<Result<_>>()?;

    let mut order: Vec<u32> = (0..scan.patients.len() as u32).collect();
    order.sort_unstable_by(|a, b| scan.patients[*a as usize].cmp(&scan.patients[*b as usize]));
    let mut ordinal = vec![0u32; order.len()];
    for (ord, tmp) in order.iter().enumerate() {
        ordinal[*tmp as usize] = ord as u32;
    }
    let patients: Vec<PatientId> = order
        .iter()
        .map(|tmp| scan.patients[*tmp as usize].clone())
        .collect();

    let mut rows: Vec<(u32, u32, i32)> = scan
        .occurrences
        .iter()
        .map(|o| (ordinal[o.patient as usize], key_ids[o.key as usize].get(), o.day))
        .collect();
    rows.sort_unstable();
    rows.dedup();

    let mut table = EventTimeTable {
        patients,
        docs: Vec::new(),
        days: Vec::with_capacity(rows.len()),
    };
    let mut start = 0;
    for (i, row) in rows.iter().enumerate() {
        table.days.push(DayStamp(row.2));
        let last = rows.get(i + 1).is_none_or(|next| (next.0, next.1) != (row.0, row.1));
        if last {
            table
                .docs
                .push((row.0, EventId::from_raw(row.1), start..i + 1));
            start = i + 1;
        }
    }
    Ok(table)
}
