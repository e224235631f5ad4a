//! Request and response bodies, and the synchronous query execution shared
//! by the HTTP handlers and the command-line client.

use std::time::Instant;

use serde::{Deserialize, Serialize};
use telii::model::CatalogEntry;
use telii::query::{percent_2dp, DayRange, Engine, EventRef, ExploreRow, QueryEngine};
use telii::{EventId, PatientId, PostingList, Relation, StoreHandle};

pub const MAX_PAGE: usize = 10_000;
pub const DEFAULT_PAGE: usize = 1_000;

#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct EventView {
    pub event_id: u32,
    pub label: String,
    pub domain: String,
    pub code: String,
    pub code_type: String,
    pub status: String,
    pub patient_count: u64,
}

impl From<&CatalogEntry> for EventView {
    fn from(e: &CatalogEntry) -> Self {
        EventView {
            event_id: e.event_id.get(),
            label: e.label.clone(),
            domain: e.key.domain().to_string(),
            code: e.key.code().to_string(),
            code_type: e.key.code_type().to_string(),
            status: e.key.status().to_string(),
            patient_count: e.patient_count,
        }
    }
}

#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct Page {
    pub limit: Option<usize>,
    pub offset: Option<usize>,
}

impl Page {
    /// Everything, for the command line.
    pub fn all() -> Self {
        Page {
            limit: Some(usize::MAX),
            offset: None,
        }
    }

    fn window(&self, cap: usize) -> (usize, usize) {
        (self.offset.unwrap_or(0), self.limit.unwrap_or(DEFAULT_PAGE).min(cap))
    }
}

#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CoexistRequest {
    pub events: Vec<EventRef>,
    #[serde(default)]
    pub count_only: bool,
    #[serde(default)]
    pub engine: Option<Engine>,
    #[serde(default)]
    pub limit: Option<usize>,
    #[serde(default)]
    pub offset: Option<usize>,
}

#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct BeforeRequest {
    pub a: EventRef,
    pub b: EventRef,
    #[serde(default)]
    pub within: Option<DayRange>,
    #[serde(default)]
    pub count_only: bool,
    #[serde(default)]
    pub engine: Option<Engine>,
    #[serde(default)]
    pub limit: Option<usize>,
    #[serde(default)]
    pub offset: Option<usize>,
}

fn default_top_k() -> usize {
    10
}

#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExploreRequest {
    pub event: EventRef,
    pub direction: Relation,
    #[serde(default)]
    pub within: Option<DayRange>,
    #[serde(default = "default_top_k")]
    pub top_k: usize,
    #[serde(default)]
    pub engine: Option<Engine>,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct CohortResponse {
    pub query: String,
    pub engine: Engine,
    pub elapsed_ms: f64,
    pub count: usize,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub offset: Option<usize>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub patients: Option<Vec<PatientId>>,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct RowView {
    pub event_id: u32,
    pub label: String,
    pub patient_count: u64,
    /// Percentage of the input event's patients, two decimals.
    pub pct: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ExploreResponse {
    pub query: String,
    pub engine: Engine,
    pub elapsed_ms: f64,
    pub count: usize,
    pub rows: Vec<RowView>,
}

fn engine_for(store: &StoreHandle, requested: Option<Engine>) -> telii::Result<QueryEngine<'_>> {
    let engine = requested.unwrap_or(if store.has_telii() { Engine::Telii } else { Engine::Elii });
    QueryEngine::new(store, engine)
}

fn elapsed_ms(started: Instant) -> f64 {
    (started.elapsed().as_secs_f64() * 1e6).round() / 1e3
}

fn cohort(
    store: &StoreHandle,
    engine: Engine,
    query: String,
    started: Instant,
    list: PostingList,
    count_only: bool,
    page: &Page,
) -> CohortResponse {
    let count = list.len();
    let (offset, limit) = page.window(usize::MAX);
    let patients = (!count_only).then(|| {
        list.as_slice()
            .iter()
            .skip(offset)
            .take(limit)
            .map(|p| store.patient_id(*p).clone())
            .collect()
    });
    CohortResponse {
        query,
        engine,
        elapsed_ms: elapsed_ms(started),
        count,
        offset: (!count_only && offset > 0).then_some(offset),
        patients,
    }
}

fn label(store: &StoreHandle, id: EventId) -> String {
    store.catalog().get(id).map(|e| e.label.clone()).unwrap_or_default()
}

/// Runs a co-existence query; two events use the pairwise path.
pub fn coexist(store: &StoreHandle, req: &CoexistRequest, page_cap: usize) -> telii::Result<CohortResponse> {
    let started = Instant::now();
    let engine = engine_for(store, req.engine)?;
    let ids = req
        .events
        .iter()
        .map(|e| engine.resolve(e))
        .collect::<telii::Result<Vec<_>>>()?;
    let list = match ids.as_slice() {
        [a, b] => engine.coexist_two(*a, *b)?,
        _ => engine.coexist_group(&ids)?,
    };
    let labels: Vec<String> = ids.iter().map(|id| label(store, *id)).collect();
    let page = capped(&Page { limit: req.limit, offset: req.offset }, page_cap);
    Ok(cohort(store, engine.engine(), format!("coexist {}", labels.join(", ")), started, list, req.count_only, &page))
}

pub fn before(store: &StoreHandle, req: &BeforeRequest, page_cap: usize) -> telii::Result<CohortResponse> {
    let started = Instant::now();
    let engine = engine_for(store, req.engine)?;
    let a = engine.resolve(&req.a)?;
    let b = engine.resolve(&req.b)?;
    let mut query = format!("{} before {}", label(store, a), label(store, b));
    if let Some(w) = req.within {
        query.push_str(&format!(" within {w}"));
    }
    let page = capped(&Page { limit: req.limit, offset: req.offset }, page_cap);
    if req.count_only {
        let count = engine.before_count(a, b, req.within)?;
        return Ok(CohortResponse {
            query,
            engine: engine.engine(),
            elapsed_ms: elapsed_ms(started),
            count,
            offset: None,
            patients: None,
        });
    }
    let list = engine.before(a, b, req.within)?;
    Ok(cohort(store, engine.engine(), query, started, list, false, &page))
}

pub fn explore(store: &StoreHandle, req: &ExploreRequest) -> telii::Result<ExploreResponse> {
    let started = Instant::now();
    let engine = engine_for(store, req.engine)?;
    let input = engine.resolve(&req.event)?;
    let rows = engine.explore(input, req.direction, req.within, req.top_k)?;
    let mut query = format!("explore {} {}", label(store, input), req.direction);
    if let Some(w) = req.within {
        query.push_str(&format!(" within {w}"));
    }
    Ok(ExploreResponse {
        query,
        engine: engine.engine(),
        elapsed_ms: elapsed_ms(started),
        count: rows.len(),
        rows: rows.iter().map(|r| row_view(store, r)).collect(),
    })
}

pub fn row_view(store: &StoreHandle, row: &ExploreRow) -> RowView {
    RowView {
        event_id: row.related_event.get(),
        label: label(store, row.related_event),
        patient_count: row.patient_count,
        pct: percent_2dp(row.pct),
    }
}

fn capped(page: &Page, cap: usize) -> Page {
    let (offset, limit) = page.window(cap);
    Page {
        limit: Some(limit),
        offset: Some(offset),
    }
}

#[derive(Debug, Clone, Serialize)]
pub struct StatsResponse {
    pub patients: u64,
    pub events: u64,
    pub records: u64,
    pub skipped_records: u64,
    pub derived_rules: Vec<String>,
    pub index: Option<telii::store::IndexParams>,
    pub segments: std::collections::BTreeMap<String, u64>,
}

pub fn stats(store: &StoreHandle) -> StatsResponse {
    let m = store.manifest();
    StatsResponse {
        patients: m.patients,
        events: m.events,
        records: m.records,
        skipped_records: m.skipped_records,
        derived_rules: m.derived_rules.clone(),
        index: m.index.clone(),
        segments: store.segment_counts().into_iter().collect(),
    }
}
