//! Synthetic corpora, the brute-force oracle and the latency benchmark
//! comparing the temporal index against the event-level baseline.

pub mod gen;
pub mod oracle;

use std::fmt;
use std::path::{Path, PathBuf};
use std::str::FromStr;
use std::time::Instant;

use rand::seq::IndexedRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use crate::catalog::Catalog;
use crate::error::{Error, Result};
use crate::ingest::DerivedEventRule;
use crate::model::{EventId, EventKey, PatientId, Relation};
use crate::postings::PostingList;
use crate::query::{DayRange, Engine, ExploreRow, QueryEngine};
use crate::store::StoreHandle;

pub use gen::{gen_synthetic, GenConfig};
pub use oracle::Oracle;

pub const REPETITIONS: usize = 5;
pub const EXPLORE_TOP_K: usize = 10;
const STRATA: u32 = 5;

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Serialize)]
#[serde(rename_all = "UPPERCASE")]
pub enum Task {
    Coexist2,
    Group,
    Before,
    Explore,
}

impl Task {
    pub const ALL: [Task; 4] = [Task::Coexist2, Task::Group, Task::Before, Task::Explore];

    pub fn as_str(self) -> &'static str {
        match self {
            Task::Coexist2 => "COEXIST2",
            Task::Group => "GROUP",
            Task::Before => "BEFORE",
            Task::Explore => "EXPLORE",
        }
    }
}

impl fmt::Display for Task {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Suite {
    Task1,
    Task2,
    Task3,
    Task4,
    All,
}

impl Suite {
    pub fn tasks(self) -> Vec<Task> {
        match self {
            Suite::Task1 => vec![Task::Coexist2],
            Suite::Task2 => vec![Task::Group],
            Suite::Task3 => vec![Task::Before],
            Suite::Task4 => vec![Task::Explore],
            Suite::All => Task::ALL.to_vec(),
        }
    }
}

impl FromStr for Suite {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "task1" => Ok(Suite::Task1),
            "task2" => Ok(Suite::Task2),
            "task3" => Ok(Suite::Task3),
            "task4" => Ok(Suite::Task4),
            "all" => Ok(Suite::All),
            _ => Err(Error::InvalidArgument(format!("unknown suite {s:?}; expected task1..task4 or all"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum BenchQuery {
    Coexist(Vec<EventId>),
    Before {
        a: EventId,
        b: EventId,
        within: Option<DayRange>,
    },
    Explore {
        input: EventId,
        direction: Relation,
        within: Option<DayRange>,
        top_k: usize,
    },
}

impl BenchQuery {
    pub fn task(&self) -> Task {
        match self {
            BenchQuery::Coexist(events) if events.len() == 2 => Task::Coexist2,
            BenchQuery::Coexist(_) => Task::Group,
            BenchQuery::Before { .. } => Task::Before,
            BenchQuery::Explore { .. } => Task::Explore,
        }
    }
}

impl fmt::Display for BenchQuery {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let within = |w: &Option<DayRange>| w.map(|w| format!(" within {w}")).unwrap_or_default();
        match self {
            BenchQuery::Coexist(events) => {
                let ids: Vec<String> = events.iter().map(|e| e.to_string()).collect();
                write!(f, "coexist {}", ids.join(","))
            }
            BenchQuery::Before { a, b, within: w } => write!(f, "{a} before {b}{}", within(w)),
            BenchQuery::Explore { input, direction, within: w, top_k } => {
                write!(f, "explore {input} {direction}{} top {top_k}", within(w))
            }
        }
    }
}

/// Answer of one query: a patient cohort or ranked explore rows.
#[derive(Debug, Clone, PartialEq)]
pub enum Answer {
    Patients(Vec<PatientId>),
    /// `(related event key, patient count)` in rank order.
    Rows(Vec<(EventKey, u64)>),
}

impl Answer {
    pub fn len(&self) -> usize {
        match self {
            Answer::Patients(p) => p.len(),
            Answer::Rows(r) => r.len(),
        }
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

/// Picks events for benchmark queries: ids are split into popularity
/// strata of equal width and query `i` draws its primary event from
/// stratum `i mod 5`. The first query of every task uses the rarest event.
pub struct QuerySampler<'a> {
    catalog: &'a Catalog,
    rng: ChaCha8Rng,
}

impl<'a> QuerySampler<'a> {
    pub fn new(catalog: &'a Catalog, seed: u64) -> Self {
        QuerySampler {
            catalog,
            rng: ChaCha8Rng::seed_from_u64(seed),
        }
    }

    fn n(&self) -> u32 {
        self.catalog.len() as u32
    }

    fn pick_in_stratum(&mut self, stratum: u32) -> EventId {
        let n = self.n();
        let strata = STRATA.min(n);
        let s = stratum % strata;
        let lo = s * n / strata + 1;
        let hi = (s + 1) * n / strata;
        EventId::new(self.rng.random_range(lo..=hi)).expect("ids start at 1")
    }

    fn any_except(&mut self, taken: &[EventId]) -> EventId {
        loop {
            let stratum = self.rng.random_range(0..STRATA);
            let e = self.pick_in_stratum(stratum);
            if !taken.contains(&e) {
                return e;
            }
        }
    }

    fn primary(&mut self, i: usize) -> EventId {
        if i == 0 {
            EventId::new(self.n()).expect("non-empty catalog")
        } else {
            self.pick_in_stratum(i as u32)
        }
    }

    pub fn sample(&mut self, task: Task, count: usize) -> Result<Vec<BenchQuery>> {
        let n = self.n() as usize;
        let needed = match task {
            Task::Group => 3,
            Task::Explore => 1,
            _ => 2,
        };
        if n < needed {
            return Err(Error::InvalidArgument(format!("catalog has {n} events; {task} queries need {needed}")));
        }
        let ranges = [None, Some(DayRange::new(0, 30)?), Some(DayRange::new(31, 60)?), Some(DayRange::new(0, 60)?)];
        let mut out = Vec::with_capacity(count);
        for i in 0..count {
            let first = self.primary(i);
            let query = match task {
                Task::Coexist2 => BenchQuery::Coexist(vec![first, self.any_except(&[first])]),
                Task::Group => {
                    let size = self.rng.random_range(3..=7).min(n);
                    let mut events = vec![first];
                    while events.len() < size {
                        let e = self.any_except(&events);
                        events.push(e);
                    }
                    BenchQuery::Coexist(events)
                }
                Task::Before => {
                    let other = self.any_except(&[first]);
                    let (a, b) = if self.rng.random_bool(0.5) { (first, other) } else { (other, first) };
                    BenchQuery::Before {
                        a,
                        b,
                        within: ranges[i % ranges.len()],
                    }
                }
                Task::Explore => BenchQuery::Explore {
                    input: first,
                    direction: *[Relation::After, Relation::Before].choose(&mut self.rng).expect("non-empty"),
                    within: ranges[1 + i % 2],
                    top_k: EXPLORE_TOP_K,
                },
            };
            out.push(query);
        }
        Ok(out)
    }
}

/// Runs a query on an index engine, returning patient ordinals or rows.
pub enum EngineOutput {
    Patients(PostingList),
    Rows(Vec<ExploreRow>),
}

pub fn run_engine(engine: &QueryEngine<'_>, query: &BenchQuery) -> Result<EngineOutput> {
    Ok(match query {
        BenchQuery::Coexist(events) if events.len() == 2 => EngineOutput::Patients(engine.coexist_two(events[0], events[1])?),
        BenchQuery::Coexist(events) => EngineOutput::Patients(engine.coexist_group(events)?),
        BenchQuery::Before { a, b, within } => EngineOutput::Patients(engine.before(*a, *b, *within)?),
        BenchQuery::Explore { input, direction, within, top_k } => {
            EngineOutput::Rows(engine.explore(*input, *direction, *within, *top_k)?)
        }
    })
}

impl EngineOutput {
    pub fn len(&self) -> usize {
        match self {
            EngineOutput::Patients(p) => p.len(),
            EngineOutput::Rows(r) => r.len(),
        }
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn into_answer(self, store: &StoreHandle) -> Answer {
        match self {
            EngineOutput::Patients(p) => Answer::Patients(store.patient_ids(&p)),
            EngineOutput::Rows(rows) => Answer::Rows(
                rows.into_iter()
                    .map(|r| {
                        let key = store.catalog().get(r.related_event).expect("row event in catalog").key.clone();
                        (key, r.patient_count)
                    })
                    .collect(),
            ),
        }
    }
}

fn key_of(catalog: &Catalog, id: EventId) -> EventKey {
    catalog.get(id).expect("sampled from catalog").key.clone()
}

/// Reference answer, ranked with the engines' tie rule.
pub fn run_oracle(oracle: &Oracle, catalog: &Catalog, query: &BenchQuery) -> Result<Answer> {
    Ok(match query {
        BenchQuery::Coexist(events) => {
            let keys: Vec<EventKey> = events.iter().map(|e| key_of(catalog, *e)).collect();
            Answer::Patients(oracle.coexist(&keys))
        }
        BenchQuery::Before { a, b, within } => {
            Answer::Patients(oracle.before(&key_of(catalog, *a), &key_of(catalog, *b), *within)?)
        }
        BenchQuery::Explore { input, direction, within, top_k } => {
            let counts = oracle.explore(&key_of(catalog, *input), *direction, *within)?;
            let mut rows: Vec<(EventId, EventKey, u64)> = counts
                .into_iter()
                .map(|(key, count)| {
                    let id = catalog.id_of(&key).ok_or_else(|| Error::NotFound {
                        reference: key.display(),
                        near: Vec::new(),
                    })?;
                    Ok((id, key, count))
                })
                .collect::<Result<_>>()?;
            rows.sort_by(|x, y| y.2.cmp(&x.2).then(x.0.cmp(&y.0)));
            rows.truncate(*top_k);
            Answer::Rows(rows.into_iter().map(|(_, k, c)| (k, c)).collect())
        }
    })
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct BenchRow {
    pub task: Task,
    pub query: String,
    pub engine: String,
    pub elapsed_ms: f64,
    pub result_count: u64,
    /// Set only when an oracle was available.
    pub oracle_match: Option<bool>,
}

fn median(values: &mut [f64]) -> f64 {
    values.sort_by(f64::total_cmp);
    let n = values.len();
    if n == 0 {
        return f64::NAN;
    }
    if n % 2 == 1 {
        values[n / 2]
    } else {
        (values[n / 2 - 1] + values[n / 2]) / 2.0
    }
}

/// Times `query` on `engine`, single-threaded, over [`REPETITIONS`] runs
/// and returns the median latency with the last output.
pub fn time_query(engine: &QueryEngine<'_>, query: &BenchQuery) -> Result<(f64, EngineOutput)> {
    let mut times = Vec::with_capacity(REPETITIONS);
    let mut output = None;
    for _ in 0..REPETITIONS {
        let start = Instant::now();
        let out = run_engine(engine, query)?;
        times.push(start.elapsed().as_secs_f64() * 1e3);
        output = Some(out);
    }
    Ok((median(&mut times), output.expect("at least one repetition")))
}

/// Benchmarks both engines on the sampled queries of `store`, checking
/// each answer against `oracle` when given.
pub fn run_suite_on(
    store: &StoreHandle,
    oracle: Option<&Oracle>,
    suite: Suite,
    queries_per_task: usize,
    seed: u64,
) -> Result<Vec<BenchRow>> {
    let engines = [QueryEngine::new(store, Engine::Telii)?, QueryEngine::new(store, Engine::Elii)?];
    let mut rows = Vec::new();
    for task in suite.tasks() {
        let mut sampler = QuerySampler::new(store.catalog(), seed ^ (task as u64 + 1).wrapping_mul(0x9E37_79B9_7F4A_7C15));
        let queries = sampler.sample(task, queries_per_task)?;
        for query in &queries {
            let expected = oracle.map(|o| run_oracle(o, store.catalog(), query)).transpose()?;
            for engine in &engines {
                let (elapsed_ms, output) = time_query(engine, query)?;
                let result_count = output.len() as u64;
                let oracle_match = expected.as_ref().map(|e| *e == output.into_answer(store));
                rows.push(BenchRow {
                    task,
                    query: query.to_string(),
                    engine: engine.engine().as_str().to_string(),
                    elapsed_ms,
                    result_count,
                    oracle_match,
                });
            }
        }
        tracing::info!(task = %task, queries = queries.len(), "benchmarked task");
    }
    Ok(rows)
}

/// Opens `data_dir` (which must hold both indexes) and, when `records` is
/// given, the oracle, then runs [`run_suite_on`].
pub fn run_suite(
    data_dir: &Path,
    records: Option<&Path>,
    rules: &[DerivedEventRule],
    suite: Suite,
    queries_per_task: usize,
    seed: u64,
) -> Result<Vec<BenchRow>> {
    let store = StoreHandle::open(data_dir)?;
    if !store.has_telii() || !store.has_elii() {
        return Err(Error::MissingIndex("temporal and event-level (build with --mode both)".into()));
    }
    let oracle = records.map(|r| Oracle::load(r, rules)).transpose()?;
    run_suite_on(&store, oracle.as_ref(), suite, queries_per_task, seed)
}

/// Per-task medians and the speedup `X = (t_elii - t_telii) / t_telii`,
/// where `t` is each engine's median latency.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct TaskSummary {
    pub task: Task,
    pub queries: usize,
    pub telii_median_ms: f64,
    pub elii_median_ms: f64,
    pub speedup: f64,
    pub oracle_mismatches: usize,
}

pub fn summarize(rows: &[BenchRow]) -> Vec<TaskSummary> {
    let mut out = Vec::new();
    for task in Task::ALL {
        let of = |engine: &str| -> Vec<f64> {
            rows.iter()
                .filter(|r| r.task == task && r.engine == engine)
                .map(|r| r.elapsed_ms)
                .collect()
        };
        let (mut telii, mut elii) = (of("telii"), of("elii"));
        if telii.is_empty() && elii.is_empty() {
            continue;
        }
        let (t, e) = (median(&mut telii), median(&mut elii));
        out.push(TaskSummary {
            task,
            queries: telii.len().max(elii.len()),
            telii_median_ms: t,
            elii_median_ms: e,
            speedup: (e - t) / t,
            oracle_mismatches: rows.iter().filter(|r| r.task == task && r.oracle_match == Some(false)).count(),
        });
    }
    out
}

/// Writes `rows` as CSV to `out` and a markdown summary next to it
/// (same path with an `.md` extension). Returns the summary path.
pub fn report(rows: &[BenchRow], out: &Path) -> Result<PathBuf> {
    let mut writer = csv::Writer::from_path(out).map_err(csv_error)?;
    writer
        .write_record(["task", "query", "engine", "elapsed_ms", "result_count", "oracle_match"])
        .map_err(csv_error)?;
    for row in rows {
        writer
            .write_record([
                row.task.as_str().to_string(),
                row.query.clone(),
                row.engine.clone(),
                format!("{:.4}", row.elapsed_ms),
                row.result_count.to_string(),
                row.oracle_match.map(|m| m.to_string()).unwrap_or_default(),
            ])
            .map_err(csv_error)?;
    }
    writer.flush()?;

    let mut md = String::from(
        "| task | queries | telii median ms | elii median ms | speedup X | oracle mismatches |\n|---|---|---|---|---|---|\n",
    );
    for s in summarize(rows) {
        md.push_str(&format!(
            "| {} | {} | {:.3} | {:.3} | {:.1} | {} |\n",
            s.task, s.queries, s.telii_median_ms, s.elii_median_ms, s.speedup, s.oracle_mismatches
        ));
    }
    md.push_str("\nX = (elii - telii) / telii on median latencies.\n");
    let md_path = out.with_extension("md");
    std::fs::write(&md_path, md)?;
    Ok(md_path)
}

fn csv_error(e: csv::Error) -> Error {
    match e.into_kind() {
        csv::ErrorKind::Io(io) => Error::Io(io),
        other => Error::InvalidArgument(format!("csv: {other:?}")),
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn median_of_odd_and_even() {
        assert_eq!(median(&mut [3.0, 1.0, 2.0]), 2.0);
        assert_eq!(median(&mut [4.0, 1.0, 2.0, 3.0]), 2.5);
    }

    #[test]
    fn speedup_definition() {
        let row = |engine: &str, ms: f64| BenchRow {
            task: Task::Before,
            query: "q".into(),
            engine: engine.into(),
            elapsed_ms: ms,
            result_count: 0,
            oracle_match: None,
        };
        let s = summarize(&[row("telii", 2.0), row("elii", 10.0)]);
        assert_eq!(s.len(), 1);
        assert_eq!(s[0].speedup, 4.0);
    }

    #[test]
    fn suite_parsing() {
        assert_eq!("all".parse::<Suite>().unwrap().tasks().len(), 4);
        assert_eq!("task3".parse::<Suite>().unwrap().tasks(), vec![Task::Before]);
        assert!("task9".parse::<Suite>().is_err());
    }
}
