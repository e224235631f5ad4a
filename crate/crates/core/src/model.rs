//! Core domain types shared by every stage of the pipeline: patients, day
//! stamps, event keys, catalog entries and the three point-event relations.

use std::cmp::Ordering;
use std::fmt;
use std::iter;
use std::str::FromStr;

use chrono::{Datelike, NaiveDate};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Separator used in the canonical (storage) form of an [`EventKey`].
pub const UNIT_SEPARATOR: char = '\u{1f}';

/// Opaque patient token, e.g. `PT0000001`. Compared bytewise.
#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(try_from = "String", into = "String")]
pub struct PatientId(String);

impl PatientId {
    pub fn new(value: impl Into<String>) -> Result<Self> {
        let value = value.into();
        if value.is_empty() {
            return Err(Error::Field {
                field: "patient_id",
                reason: "must not be empty".into(),
            });
        }
        if value.chars().any(char::is_control) {
            return Err(Error::Field {
                field: "patient_id",
                reason: format!("{value:?} contains a control character"),
            });
        }
        Ok(PatientId(value))
    }

    pub fn as_str(&self) -> &str {
        &self.0
    }
}

impl TryFrom<String> for PatientId {
    type Error = Error;

    fn try_from(value: String) -> Result<Self> {
        PatientId::new(value)
    }
}

impl From<PatientId> for String {
    fn from(id: PatientId) -> String {
        id.0
    }
}

impl fmt::Display for PatientId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.0)
    }
}

/// Calendar date as days since 1970-01-01.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct DayStamp(pub i32);

pub const MIN_YEAR: i32 = 1900;
pub const MAX_YEAR: i32 = 2100;

fn epoch() -> NaiveDate {
    NaiveDate::from_ymd_opt(1970, 1, 1).expect("epoch is a valid date")
}

/// Parses a strict `YYYY-MM-DD` date into days since the Unix epoch.
pub fn parse_day(text: &str) -> Result<DayStamp> {
    let err = |field: &'static str, reason: String| Error::Date {
        text: text.to_string(),
        field,
        reason,
    };
    let bytes = text.as_bytes();
    let shape_ok = bytes.len() == 10
        && bytes[4] == b'-'
        && bytes[7] == b'-'
        && bytes
            .iter()
            .enumerate()
            .all(|(i, b)| i == 4 || i == 7 || b.is_ascii_digit());
    if !shape_ok {
        return Err(err("format", "expected YYYY-MM-DD".into()));
    }
    let year: i32 = text[0..4].parse().expect("digits");
    let month: u32 = text[5..7].parse().expect("digits");
    let day: u32 = text[8..10].parse().expect("digits");
    if !(MIN_YEAR..=MAX_YEAR).contains(&year) {
        return Err(err(
            "year",
            format!("{year} outside supported range {MIN_YEAR}..={MAX_YEAR}"),
        ));
    }
    if !(1..=12).contains(&month) {
        return Err(err("month", format!("{month} out of range 1..=12")));
    }
    let date = NaiveDate::from_ymd_opt(year, month, day)
        .ok_or_else(|| err("day", format!("{day} does not exist in {year:04}-{month:02}")))?;
    Ok(DayStamp((date - epoch()).num_days() as i32))
}

/// Inverse of [`parse_day`].
pub fn format_day(day: DayStamp) -> String {
    let date = epoch() + chrono::Duration::days(i64::from(day.0));
    format!("{:04}-{:02}-{:02}", date.year(), date.month(), date.day())
}

impl fmt::Display for DayStamp {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&format_day(*self))
    }
}

impl FromStr for DayStamp {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        parse_day(s)
    }
}

/// Record category of an event.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "UPPERCASE")]
pub enum Domain {
    Diagnosis,
    Lab,
    Medication,
    Procedure,
    Observation,
    Immunization,
    Derived,
}

impl Domain {
    pub const ALL: [Domain; 7] = [
        Domain::Diagnosis,
        Domain::Lab,
        Domain::Medication,
        Domain::Procedure,
        Domain::Observation,
        Domain::Immunization,
        Domain::Derived,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            Domain::Diagnosis => "DIAGNOSIS",
            Domain::Lab => "LAB",
            Domain::Medication => "MEDICATION",
            Domain::Procedure => "PROCEDURE",
            Domain::Observation => "OBSERVATION",
            Domain::Immunization => "IMMUNIZATION",
            Domain::Derived => "DERIVED",
        }
    }
}

impl FromStr for Domain {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let trimmed = s.trim();
        Domain::ALL
            .into_iter()
            .find(|d| d.as_str().eq_ignore_ascii_case(trimmed))
            .ok_or_else(|| Error::UnknownDomain(s.to_string()))
    }
}

impl fmt::Display for Domain {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

/// Canonical identity of a queryable event.
///
/// Ordering and equality follow the canonical form: the four fields joined
/// by [`UNIT_SEPARATOR`], compared bytewise.
#[derive(Debug, Clone, PartialEq, Eq, Hash)]
pub struct EventKey {
    domain: Domain,
    code: String,
    code_type: String,
    status: String,
}

impl EventKey {
    pub fn domain(&self) -> Domain {
        self.domain
    }

    pub fn code(&self) -> &str {
        &self.code
    }

    pub fn code_type(&self) -> &str {
        &self.code_type
    }

    pub fn status(&self) -> &str {
        &self.status
    }

    /// Key of a rule-derived event.
    pub fn derived(name: &str) -> Result<Self> {
        canonicalize_event_key("DERIVED", name, "", "")
    }

    pub fn canonical(&self) -> String {
        let mut out = String::with_capacity(self.canonical_len());
        for (i, part) in self.parts().into_iter().enumerate() {
            if i > 0 {
                out.push(UNIT_SEPARATOR);
            }
            out.push_str(part);
        }
        out
    }

    fn canonical_len(&self) -> usize {
        self.parts().iter().map(|p| p.len()).sum::<usize>() + 3
    }

    fn parts(&self) -> [&str; 4] {
        [self.domain.as_str(), &self.code, &self.code_type, &self.status]
    }

    fn canonical_bytes(&self) -> impl Iterator<Item = u8> + '_ {
        let [d, c, t, s] = self.parts();
        let sep = || iter::once(UNIT_SEPARATOR as u8);
        d.bytes()
            .chain(sep())
            .chain(c.bytes())
            .chain(sep())
            .chain(t.bytes())
            .chain(sep())
            .chain(s.bytes())
    }

    /// Display form: fields joined by `:`, with `\` and `:` backslash-escaped
    /// and trailing empty fields dropped.
    pub fn display(&self) -> String {
        let parts = self.parts();
        let keep = parts
            .iter()
            .rposition(|p| !p.is_empty())
            .map_or(1, |i| i + 1)
            .max(2);
        let mut out = String::new();
        for (i, part) in parts[..keep].iter().enumerate() {
            if i > 0 {
                out.push(':');
            }
            for ch in part.chars() {
                if ch == ':' || ch == '\\' {
                    out.push('\\');
                }
                out.push(ch);
            }
        }
        out
    }

    /// Parses the display form produced by [`EventKey::display`]. Missing
    /// trailing fields are empty.
    pub fn parse_display(text: &str) -> Result<Self> {
        let mut parts: Vec<String> = vec![String::new()];
        let mut chars = text.chars();
        while let Some(ch) = chars.next() {
            match ch {
                '\\' => match chars.next() {
                    Some(next) => parts.last_mut().expect("non-empty").push(next),
                    None => {
                        return Err(Error::Field {
                            field: "event",
                            reason: format!("{text:?} ends with a dangling escape"),
                        })
                    }
                },
                ':' => parts.push(String::new()),
                _ => parts.last_mut().expect("non-empty").push(ch),
            }
        }
        if parts.len() < 2 || parts.len() > 4 {
            return Err(Error::Field {
                field: "event",
                reason: format!("{text:?} is not DOMAIN:CODE[:CODE_TYPE[:STATUS]]"),
            });
        }
        parts.resize(4, String::new());
        canonicalize_event_key(&parts[0], &parts[1], &parts[2], &parts[3])
    }
}

impl Ord for EventKey {
    fn cmp(&self, other: &Self) -> Ordering {
        self.canonical_bytes().cmp(other.canonical_bytes())
    }
}

impl PartialOrd for EventKey {
    fn partial_cmp(&self, other: &Self) -> Option<Ordering> {
        Some(self.cmp(other))
    }
}

impl fmt::Display for EventKey {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.display())
    }
}

fn clean_field(field: &'static str, value: &str) -> Result<String> {
    let value = value.trim();
    if value.contains(UNIT_SEPARATOR) {
        return Err(Error::Field {
            field,
            reason: "contains the unit separator character".into(),
        });
    }
    Ok(value.to_string())
}

/// Builds an [`EventKey`] from raw fields: the domain is matched
/// case-insensitively, every field is whitespace-trimmed and the remaining
/// fields keep their case.
pub fn canonicalize_event_key(
    domain: &str,
    code: &str,
    code_type: &str,
    status: &str,
) -> Result<EventKey> {
    let domain: Domain = domain.parse()?;
    let code = clean_field("code", code)?;
    if code.is_empty() {
        return Err(Error::Field {
            field: "code",
            reason: "must not be empty".into(),
        });
    }
    Ok(EventKey {
        domain,
        code,
        code_type: clean_field("code_type", code_type)?,
        status: clean_field("status", status)?,
    })
}

/// Dense 1-based event identifier; smaller ids belong to more common events.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(try_from = "u32", into = "u32")]
pub struct EventId(u32);

impl EventId {
    pub fn new(value: u32) -> Result<Self> {
        if value == 0 {
            return Err(Error::InvalidArgument("event id 0 is reserved".into()));
        }
        Ok(EventId(value))
    }

    pub fn get(self) -> u32 {
        self.0
    }

    pub(crate) fn from_raw(value: u32) -> Self {
        debug_assert!(value != 0);
        EventId(value)
    }
}

impl TryFrom<u32> for EventId {
    type Error = Error;

    fn try_from(value: u32) -> Result<Self> {
        EventId::new(value)
    }
}

impl From<EventId> for u32 {
    fn from(id: EventId) -> u32 {
        id.0
    }
}

impl fmt::Display for EventId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}", self.0)
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct CatalogEntry {
    pub event_id: EventId,
    pub key: EventKey,
    pub patient_count: u64,
    pub label: String,
}

/// Relation of a related event to an anchor event, at date granularity.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub enum Relation {
    #[serde(rename = "before")]
    Before,
    #[serde(rename = "after")]
    After,
    #[serde(rename = "co-occur", alias = "co_occur", alias = "cooccur")]
    CoOccur,
}

impl Relation {
    pub const ALL: [Relation; 3] = [Relation::Before, Relation::After, Relation::CoOccur];

    /// The relation seen from the other operand.
    pub fn flip(self) -> Self {
        match self {
            Relation::Before => Relation::After,
            Relation::After => Relation::Before,
            Relation::CoOccur => Relation::CoOccur,
        }
    }

    pub fn as_str(self) -> &'static str {
        match self {
            Relation::Before => "before",
            Relation::After => "after",
            Relation::CoOccur => "co-occur",
        }
    }

    pub(crate) fn code(self) -> u8 {
        match self {
            Relation::Before => 0,
            Relation::After => 1,
            Relation::CoOccur => 2,
        }
    }

    pub(crate) fn from_code(code: u8) -> Option<Self> {
        Relation::ALL.into_iter().find(|r| r.code() == code)
    }
}

impl FromStr for Relation {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.trim().to_ascii_lowercase().as_str() {
            "before" => Ok(Relation::Before),
            "after" => Ok(Relation::After),
            "co-occur" | "co_occur" | "cooccur" => Ok(Relation::CoOccur),
            other => Err(Error::InvalidArgument(format!(
                "unknown relation {other:?}; expected before, after or co-occur"
            ))),
        }
    }
}

impl fmt::Display for Relation {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn parse_day_examples() {
        assert_eq!(parse_day("1970-01-01").unwrap(), DayStamp(0));
        assert_eq!(parse_day("1970-02-01").unwrap(), DayStamp(31));
        // POSIX: 1580515200 / 86400
        assert_eq!(parse_day("2020-02-01").unwrap(), DayStamp(18293));
        assert_eq!(parse_day("1969-12-31").unwrap(), DayStamp(-1));
    }

    #[test]
    fn parse_day_names_offending_field() {
        let field = |t: &str| match parse_day(t) {
            Err(Error::Date { field, .. }) => field,
            other => panic!("expected date error for {t:?}, got {other:?}"),
        };
        assert_eq!(field("2020-2-01"), "format");
        assert_eq!(field("2020/02/01"), "format");
        assert_eq!(field("2020-13-01"), "month");
        assert_eq!(field("2020-00-01"), "month");
        assert_eq!(field("2021-02-29"), "day");
        assert_eq!(field("1899-12-31"), "year");
        assert!(parse_day("2020-02-29").is_ok());
    }

    proptest! {
        #[test]
        fn format_then_parse_is_identity(days in -25567i32..=47846) {
            let day = DayStamp(days);
            prop_assert_eq!(parse_day(&format_day(day)).unwrap(), day);
        }
    }

    #[test]
    fn canonical_key_trims_and_uppercases_domain() {
        let key = canonicalize_event_key("diagnosis", " U07.1 ", "ICD-10", "Diagnosis of").unwrap();
        assert_eq!(key.canonical(), "DIAGNOSIS\u{1f}U07.1\u{1f}ICD-10\u{1f}Diagnosis of");
        let bare = canonicalize_event_key("DIAGNOSIS", "U07.1", "", "").unwrap();
        assert_ne!(key, bare);
        let again = canonicalize_event_key("Diagnosis", "U07.1 ", " ICD-10", "Diagnosis of ").unwrap();
        assert_eq!(key, again);
    }

    #[test]
    fn unknown_domain_lists_accepted() {
        let err = canonicalize_event_key("vitals", "x", "", "").unwrap_err();
        assert!(matches!(err, Error::UnknownDomain(_)));
        assert!(err.to_string().contains("OBSERVATION"));
    }

    #[test]
    fn display_round_trips_with_escapes() {
        let key = canonicalize_event_key("lab", "a:b\\c", "", "st:x").unwrap();
        assert_eq!(key.display(), "LAB:a\\:b\\\\c::st\\:x");
        assert_eq!(EventKey::parse_display(&key.display()).unwrap(), key);
        let short = canonicalize_event_key("derived", "COVID19_PCR_POSITIVE", "", "").unwrap();
        assert_eq!(short.display(), "DERIVED:COVID19_PCR_POSITIVE");
        assert_eq!(EventKey::parse_display("DERIVED:COVID19_PCR_POSITIVE").unwrap(), short);
    }

    fn field() -> impl Strategy<Value = String> {
        "[ -~\u{1}]{0,6}"
    }

    proptest! {
        #[test]
        fn key_order_matches_canonical_bytes(a in field(), b in field(), c in field(), d in field()) {
            let k1 = canonicalize_event_key("LAB", &format!("x{a}"), &b, "");
            let k2 = canonicalize_event_key("LAB", &format!("x{c}"), &d, "");
            if let (Ok(k1), Ok(k2)) = (k1, k2) {
                prop_assert_eq!(k1.cmp(&k2), k1.canonical().as_bytes().cmp(k2.canonical().as_bytes()));
                prop_assert_eq!(k1 == k2, k1.canonical() == k2.canonical());
            }
        }
    }

    #[test]
    fn relation_flip_is_dual() {
        assert_eq!(Relation::Before.flip(), Relation::After);
        assert_eq!(Relation::After.flip(), Relation::Before);
        assert_eq!(Relation::CoOccur.flip(), Relation::CoOccur);
        for r in Relation::ALL {
            assert_eq!(Relation::from_code(r.code()), Some(r));
            assert_eq!(r.as_str().parse::<Relation>().unwrap(), r);
        }
    }

    #[test]
    fn patient_id_rejects_empty_and_separators() {
        assert!(PatientId::new("").is_err());
        assert!(PatientId::new("PT\u{1f}1").is_err());
        assert!(PatientId::new("PT\n1").is_err());
        assert_eq!(PatientId::new("PT0000001").unwrap().as_str(), "PT0000001");
    }
}
