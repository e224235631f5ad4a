#![allow(dead_code)]

use std::path::{Path, PathBuf};

use telii::bench::GenConfig;
use telii::ingest::{parse_rules, DerivedEventRule, ScanMode};
use telii::model::parse_day;
use telii::pipeline::{self, BuildOptions};

pub fn config(patients: u32, events: u32, mean: u32, seed: u64) -> GenConfig {
    GenConfig {
        patients,
        events,
        zipf_s: 1.2,
        mean_events_per_patient: mean,
        start: parse_day("2019-01-01").unwrap(),
        end: parse_day("2020-12-31").unwrap(),
        seed,
    }
}

pub fn pcr_rules() -> Vec<DerivedEventRule> {
    parse_rules(&telii::bench::gen::pcr_rules_json()).unwrap()
}

pub struct Corpus {
    pub records: PathBuf,
    pub data: PathBuf,
    pub rules: Vec<DerivedEventRule>,
}

/// Generates, ingests and builds a corpus under `root`.
pub fn corpus(root: &Path, cfg: &GenConfig, opts: &BuildOptions) -> Corpus {
    std::fs::create_dir_all(root).unwrap();
    let records = root.join("records.jsonl");
    let data = root.join("data");
    telii::bench::gen_synthetic(cfg, &records).unwrap();
    let rules = pcr_rules();
    pipeline::ingest(&records, &rules, &data, ScanMode::Strict).unwrap();
    pipeline::build(&data, opts).unwrap();
    Corpus { records, data, rules }
}
