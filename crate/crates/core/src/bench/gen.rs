//! Seeded synthetic record generator with Zipf-distributed event
//! popularity.

use std::io::{BufWriter, Write};
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Poisson, Zipf};
use serde::Serialize;

use crate::error::{Error, Result};
use crate::model::{format_day, DayStamp};

/// Code of the generated lab test whose records carry a
/// `DETECTED`/`NOT DETECTED` value.
pub const PCR_CODE: &str = "94500-6";

#[derive(Debug, Clone, PartialEq)]
pub struct GenConfig {
    pub patients: u32,
    pub events: u32,
    pub zipf_s: f64,
    pub mean_events_per_patient: u32,
    pub start: DayStamp,
    pub end: DayStamp,
    pub seed: u64,
}

impl GenConfig {
    pub fn validate(&self) -> Result<()> {
        let fail = |m: &str| Err(Error::InvalidArgument(m.to_string()));
        if self.patients == 0 || self.events == 0 || self.mean_events_per_patient == 0 {
            return fail("patients, events and mean events per patient must be positive");
        }
        if !(self.zipf_s > 0.0 && self.zipf_s.is_finite()) {
            return fail("zipf exponent must be positive");
        }
        if self.start > self.end {
            return fail("start date is after end date");
        }
        Ok(())
    }
}

#[derive(Serialize)]
struct Line<'a> {
    patient_id: &'a str,
    date: String,
    domain: &'static str,
    code: &'a str,
    #[serde(skip_serializing_if = "Option::is_none")]
    value: Option<&'static str>,
}

const DOMAINS: [(&str, char); 5] = [
    ("DIAGNOSIS", 'D'),
    ("LAB", 'L'),
    ("MEDICATION", 'M'),
    ("PROCEDURE", 'P'),
    ("OBSERVATION", 'O'),
];

/// `(domain, code)` of the event with popularity rank `rank` (1-based).
/// Rank 2 is the PCR lab test.
pub fn event_for_rank(rank: u32) -> (&'static str, String) {
    if rank == 2 {
        return ("LAB", PCR_CODE.to_string());
    }
    let (domain, prefix) = DOMAINS[(rank as usize - 1) % DOMAINS.len()];
    (domain, format!("{prefix}{rank:05}"))
}

/// Writes a records file and returns the number of records.
pub fn gen_synthetic(cfg: &GenConfig, out: &Path) -> Result<u64> {
    cfg.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let zipf = Zipf::new(f64::from(cfg.events), cfg.zipf_s)
        .map_err(|e| Error::InvalidArgument(format!("zipf: {e}")))?;
    let poisson = Poisson::new(f64::from(cfg.mean_events_per_patient))
        .map_err(|e| Error::InvalidArgument(format!("poisson: {e}")))?;
    let events: Vec<(&str, String)> = (1..=cfg.events).map(event_for_rank).collect();

    let mut writer = BufWriter::with_capacity(1 << 20, std::fs::File::create(out)?);
    let mut count = 0u64;
    let mut occurrences: Vec<(i32, u32)> = Vec::new();
    for p in 1..=cfg.patients {
        let patient_id = format!("PT{p:07}");
        let n = (poisson.sample(&mut rng) as u64).max(1);
        occurrences.clear();
        for _ in 0..n {
            let rank = zipf.sample(&mut rng) as u32;
            let day = rng.random_range(cfg.start.0..=cfg.end.0);
            occurrences.push((day, rank));
        }
        occurrences.sort_unstable();
        for &(day, rank) in &occurrences {
            let (domain, code) = &events[rank as usize - 1];
            let value = (rank == 2).then(|| if rng.random_bool(0.3) { "DETECTED" } else { "NOT DETECTED" });
            let line = Line {
                patient_id: &patient_id,
                date: format_day(DayStamp(day)),
                domain,
                code,
                value,
            };
            serde_json::to_writer(&mut writer, &line)?;
            writer.write_all(b"\n")?;
            count += 1;
        }
    }
    writer.flush()?;
    Ok(count)
}

/// A rules file deriving `PCR_POSITIVE` from detected PCR results.
pub fn pcr_rules_json() -> String {
    format!(
        r#"[{{"name":"PCR_POSITIVE","clauses":[{{"conditions":[{{"field":"domain","equals":"LAB"}},{{"field":"code","equals":"{PCR_CODE}"}},{{"field":"value","matches":"^detected$"}}]}}]}}]"#
    )
}
