//! The event catalog: id ↔ key maps plus patient counts, persisted as
//! `catalog.jsonl`.

use std::collections::HashMap;
use std::io::{BufRead, Write};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{canonicalize_event_key, CatalogEntry, Domain, EventId, EventKey};

#[derive(Debug, Clone, Default)]
pub struct Catalog {
    entries: Vec<CatalogEntry>,
    by_key: HashMap<EventKey, EventId>,
}

#[derive(Serialize, Deserialize)]
struct CatalogLine {
    event_id: u32,
    domain: Domain,
    code: String,
    code_type: String,
    status: String,
    patient_count: u64,
    label: String,
}

impl Catalog {
    /// Wraps entries that must already be in id order with ids `1..=n`.
    pub fn new(entries: Vec<CatalogEntry>) -> Result<Self> {
        let mut by_key = HashMap::with_capacity(entries.len());
        for (i, entry) in entries.iter().enumerate() {
            if entry.event_id.get() as usize != i + 1 {
                return Err(Error::Build(format!(
                    "catalog ids must be dense and ordered; found id {} at position {}",
                    entry.event_id,
                    i + 1
                )));
            }
            if by_key.insert(entry.key.clone(), entry.event_id).is_some() {
                return Err(Error::Build(format!("duplicate catalog key {}", entry.key)));
            }
        }
        Ok(Catalog { entries, by_key })
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn entries(&self) -> &[CatalogEntry] {
        &self.entries
    }

    pub fn get(&self, id: EventId) -> Option<&CatalogEntry> {
        self.entries.get(id.get() as usize - 1)
    }

    pub fn id_of(&self, key: &EventKey) -> Option<EventId> {
        self.by_key.get(key).copied()
    }

    pub fn patient_count(&self, id: EventId) -> u64 {
        self.get(id).map_or(0, |e| e.patient_count)
    }

    /// Resolves an event reference: a numeric id, a display-form key
    /// (`DIAGNOSIS:U07.1:ICD-10:Diagnosis of`) or a derived-rule name.
    pub fn resolve(&self, reference: &str) -> Result<EventId> {
        let text = reference.trim();
        let text = text.strip_prefix('#').unwrap_or(text);
        if !text.is_empty() && text.bytes().all(|b| b.is_ascii_digit()) {
            if let Ok(id) = text.parse::<u32>() {
                if let Some(entry) = EventId::new(id).ok().and_then(|id| self.get(id)) {
                    return Ok(entry.event_id);
                }
            }
        }
        if let Ok(key) = EventKey::parse_display(text) {
            if let Some(id) = self.id_of(&key) {
                return Ok(id);
            }
        }
        if let Ok(key) = canonicalize_event_key("DERIVED", text, "", "") {
            if let Some(id) = self.id_of(&key) {
                return Ok(id);
            }
        }
        Err(Error::NotFound {
            reference: reference.to_string(),
            near: self
                .search(near_needle(text), 5)
                .into_iter()
                .map(|e| e.label.clone())
                .collect(),
        })
    }

    /// Entries whose label or code contains `query` (case-insensitive),
    /// by descending patient count. An empty query returns the most common
    /// events.
    pub fn search(&self, query: &str, limit: usize) -> Vec<&CatalogEntry> {
        let needle = query.trim().to_lowercase();
        // Entries are already ordered by descending patient count.
        self.entries
            .iter()
            .filter(|e| {
                needle.is_empty()
                    || e.label.to_lowercase().contains(&needle)
                    || e.key.code().to_lowercase().contains(&needle)
            })
            .take(limit)
            .collect()
    }

    pub fn write_jsonl(&self, mut out: impl Write) -> Result<()> {
        for e in &self.entries {
            let line = CatalogLine {
                event_id: e.event_id.get(),
                domain: e.key.domain(),
                code: e.key.code().to_string(),
                code_type: e.key.code_type().to_string(),
                status: e.key.status().to_string(),
                patient_count: e.patient_count,
                label: e.label.clone(),
            };
            serde_json::to_writer(&mut out, &line)?;
            out.write_all(b"\n")?;
        }
        Ok(())
    }

    pub fn read_jsonl(input: impl BufRead) -> Result<Self> {
        let mut entries = Vec::new();
        for line in input.lines() {
            let line = line?;
            if line.trim().is_empty() {
                continue;
            }
            let raw: CatalogLine = serde_json::from_str(&line)?;
            entries.push(CatalogEntry {
                event_id: EventId::new(raw.event_id)?,
                key: canonicalize_event_key(raw.domain.as_str(), &raw.code, &raw.code_type, &raw.status)?,
                patient_count: raw.patient_count,
                label: raw.label,
            });
        }
        Catalog::new(entries)
    }
}

/// The code portion of a reference, used to suggest near matches.
fn near_needle(text: &str) -> &str {
    text.split(':').nth(1).filter(|c| !c.is_empty()).unwrap_or(text)
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::collections::BTreeMap;

    use crate::ingest::assign_event_ids;

    fn catalog() -> Catalog {
        let k = |d: &str, c: &str, t: &str, s: &str| canonicalize_event_key(d, c, t, s).unwrap();
        let draft = BTreeMap::from([
            (k("DIAGNOSIS", "I10", "ICD-10", "Diagnosis of"), 50),
            (k("DIAGNOSIS", "R52", "ICD-10", "Diagnosis of"), 20),
            (k("DERIVED", "COVID19_PCR_POSITIVE", "", ""), 10),
            (k("LAB", "a:b", "", ""), 5),
        ]);
        Catalog::new(assign_event_ids(&draft)).unwrap()
    }

    #[test]
    fn resolves_ids_keys_and_rule_names() {
        let c = catalog();
        assert_eq!(c.resolve("1").unwrap().get(), 1);
        assert_eq!(c.resolve("#2").unwrap().get(), 2);
        assert_eq!(c.resolve("DIAGNOSIS:R52:ICD-10:Diagnosis of").unwrap().get(), 2);
        assert_eq!(c.resolve("COVID19_PCR_POSITIVE").unwrap().get(), 3);
        assert_eq!(c.resolve("DERIVED:COVID19_PCR_POSITIVE").unwrap().get(), 3);
        assert_eq!(c.resolve("LAB:a\\:b").unwrap().get(), 4);
    }

    #[test]
    fn unresolved_reference_suggests_near_matches() {
        let c = catalog();
        match c.resolve("DIAGNOSIS:R52") {
            Err(Error::NotFound { near, .. }) => {
                assert_eq!(near, vec!["DIAGNOSIS:R52:ICD-10:Diagnosis of".to_string()])
            }
            other => panic!("expected not found, got {other:?}"),
        }
        assert!(c.resolve("99").is_err());
        assert!(c.resolve("0").is_err());
    }

    #[test]
    fn search_orders_by_patient_count() {
        let c = catalog();
        let hits: Vec<u32> = c.search("diagnosis", 10).iter().map(|e| e.event_id.get()).collect();
        assert_eq!(hits, vec![1, 2]);
        assert_eq!(c.search("", 2).len(), 2);
    }

    #[test]
    fn jsonl_round_trip() {
        let c = catalog();
        let mut buf = Vec::new();
        c.write_jsonl(&mut buf).unwrap();
        let back = Catalog::read_jsonl(buf.as_slice()).unwrap();
        assert_eq!(back.entries(), c.entries());
    }
}
