use std::path::Path;
use std::sync::{Arc, OnceLock};

use axum::body::Body;
use axum::http::{Request, StatusCode};
use http_body_util::BodyExt;
use serde_json::{json, Value};
use telii::bench::{gen_synthetic, GenConfig};
use telii::model::parse_day;
use telii::pipeline::{self, BuildOptions};
use telii::StoreHandle;
use telii_service::{api, router, ServeError};
use tower::ServiceExt;

fn build(dir: &Path, patients: u32, opts: &BuildOptions) -> Arc<StoreHandle> {
    let records = dir.join("records.jsonl");
    let cfg = GenConfig {
        patients,
        events: 60,
        zipf_s: 1.2,
        mean_events_per_patient: 10,
        start: parse_day("2019-01-01").unwrap(),
        end: parse_day("2020-12-31").unwrap(),
        seed: 9,
    };
    gen_synthetic(&cfg, &records).unwrap();
    let data = dir.join("data");
    pipeline::ingest(&records, &[], &data, Default::default()).unwrap();
    pipeline::build(&data, opts).unwrap();
    Arc::new(StoreHandle::open(&data).unwrap())
}

fn store() -> Arc<StoreHandle> {
    static STORE: OnceLock<(tempfile::TempDir, Arc<StoreHandle>)> = OnceLock::new();
    STORE
        .get_or_init(|| {
            let dir = tempfile::tempdir().unwrap();
            let store = build(dir.path(), 25_000, &BuildOptions::default());
            (dir, store)
        })
        .1
        .clone()
}

async fn call(app: axum::Router, method: &str, uri: &str, body: Option<Value>) -> (StatusCode, Value) {
    let mut req = Request::builder().method(method).uri(uri);
    let body = match body {
        Some(v) => {
            req = req.header("content-type", "application/json");
            Body::from(v.to_string())
        }
        None => Body::empty(),
    };
    let resp = app.oneshot(req.body(body).unwrap()).await.unwrap();
    let status = resp.status();
    let bytes = resp.into_body().collect().await.unwrap().to_bytes();
    (status, serde_json::from_slice(&bytes).unwrap_or(Value::Null))
}

fn app() -> axum::Router {
    router(store(), None).unwrap()
}

#[tokio::test]
async fn healthz_reports_sizes() {
    let (status, body) = call(app(), "GET", "/healthz", None).await;
    assert_eq!(status, StatusCode::OK);
    assert_eq!(body["status"], "ok");
    assert_eq!(body["patients"], 25_000);
    assert_eq!(body["events"], store().catalog().len());
}

#[tokio::test]
async fn event_search_is_ordered_by_patient_count() {
    let (status, body) = call(app(), "GET", "/events?q=d0&limit=5", None).await;
    assert_eq!(status, StatusCode::OK);
    let events = body["events"].as_array().unwrap();
    assert!(!events.is_empty() && events.len() <= 5);
    let counts: Vec<u64> = events.iter().map(|e| e["patient_count"].as_u64().unwrap()).collect();
    assert!(counts.windows(2).all(|w| w[0] >= w[1]));
    assert!(events.iter().all(|e| e["code"].as_str().unwrap().to_lowercase().contains("d0")));

    let (_, top) = call(app(), "GET", "/events", None).await;
    assert_eq!(top["events"][0]["event_id"], 1);
}

#[tokio::test]
async fn event_lookup_by_id() {
    let (status, body) = call(app(), "GET", "/events/2", None).await;
    assert_eq!(status, StatusCode::OK);
    assert_eq!(body["event_id"], 2);
    let (status, body) = call(app(), "GET", "/events/99999", None).await;
    assert_eq!(status, StatusCode::NOT_FOUND);
    assert_eq!(body["code"], "NOT_FOUND");
}

#[tokio::test]
async fn unknown_event_is_not_found() {
    let (status, body) = call(app(), "POST", "/query/before", Some(json!({"a": "DIAGNOSIS:D0000", "b": 2}))).await;
    assert_eq!(status, StatusCode::NOT_FOUND);
    assert_eq!(body["code"], "NOT_FOUND");
    assert!(body["near"].as_array().is_some_and(|n| !n.is_empty()), "{body}");
}

#[tokio::test]
async fn before_matches_direct_query_and_paginates() {
    let store = store();
    let req = json!({"a": 1, "b": 3, "within": {"lo": 0, "hi": 60}});
    let (status, full) = call(app(), "POST", "/query/before", Some(req.clone())).await;
    assert_eq!(status, StatusCode::OK);
    let direct: api::BeforeRequest = serde_json::from_value(json!({"a": 1, "b": 3, "within": {"lo": 0, "hi": 60}, "limit": 100000})).unwrap();
    let direct = api::before(&store, &direct, usize::MAX).unwrap();
    assert_eq!(full["count"], direct.count);
    let all: Vec<Value> = direct.patients.unwrap().iter().map(|p| json!(p)).collect();
    assert!(all.len() > 1000);
    // Default page is the first 1000.
    assert_eq!(full["patients"].as_array().unwrap()[..], all[..1000]);

    let mut paged = req.clone();
    paged["offset"] = json!(10);
    paged["limit"] = json!(5);
    let (_, page) = call(app(), "POST", "/query/before", Some(paged)).await;
    assert_eq!(page["patients"].as_array().unwrap()[..], all[10..15]);
    assert_eq!(page["offset"], 10);

    let (_, count) = call(app(), "POST", "/query/before", Some(json!({"a": 1, "b": 3, "count_only": true}))).await;
    assert!(count.get("patients").is_none());
    assert!(count["count"].as_u64().unwrap() > 0);
}

#[tokio::test]
async fn page_size_is_capped() {
    let (status, body) = call(
        app(),
        "POST",
        "/query/coexist",
        Some(json!({"events": [1, 2], "limit": 50000, "engine": "elii"})),
    )
    .await;
    assert_eq!(status, StatusCode::OK);
    assert!(body["count"].as_u64().unwrap() > 10_000, "{}", body["count"]);
    assert_eq!(body["patients"].as_array().unwrap().len(), 10_000);
    assert_eq!(body["engine"], "elii");
}

#[tokio::test]
async fn coexist_group_and_count() {
    let (status, group) = call(app(), "POST", "/query/coexist", Some(json!({"events": [1, 2, 5], "count_only": true}))).await;
    assert_eq!(status, StatusCode::OK);
    let (_, pair) = call(app(), "POST", "/query/coexist", Some(json!({"events": [1, 2], "count_only": true}))).await;
    assert!(group["count"].as_u64().unwrap() <= pair["count"].as_u64().unwrap());
    let (status, body) = call(app(), "POST", "/query/coexist", Some(json!({"events": [1]}))).await;
    assert_eq!(status, StatusCode::BAD_REQUEST);
    assert_eq!(body["code"], "INVALID_ARGUMENT");
}

#[tokio::test]
async fn explore_rows_have_percentages() {
    let (status, body) = call(
        app(),
        "POST",
        "/query/explore",
        Some(json!({"event": 4, "direction": "after", "within": {"lo": 0, "hi": 30}, "top_k": 5})),
    )
    .await;
    assert_eq!(status, StatusCode::OK);
    let rows = body["rows"].as_array().unwrap();
    assert_eq!(rows.len(), 5);
    let total = store().catalog().patient_count(telii::EventId::new(4).unwrap()) as f64;
    for row in rows {
        let pct = row["pct"].as_f64().unwrap();
        let exact = 100.0 * row["patient_count"].as_f64().unwrap() / total;
        assert!((pct - exact).abs() <= 0.005 + 1e-9);
        assert!(row["label"].as_str().is_some());
    }
    assert!(body["elapsed_ms"].as_f64().is_some());
}

#[tokio::test]
async fn invalid_requests() {
    let (status, body) = call(
        app(),
        "POST",
        "/query/explore",
        Some(json!({"event": 4, "direction": "co-occur", "within": {"lo": 0, "hi": 30}})),
    )
    .await;
    assert_eq!(status, StatusCode::BAD_REQUEST);
    assert_eq!(body["code"], "INVALID_ARGUMENT");

    let (status, body) = call(app(), "POST", "/query/before", Some(json!({"a": 1}))).await;
    assert_eq!(status, StatusCode::BAD_REQUEST);
    assert_eq!(body["code"], "INVALID_ARGUMENT");

    let (status, body) = call(app(), "POST", "/query/before", Some(json!({"a": 1, "b": 2, "within": {"lo": 9, "hi": 1}}))).await;
    assert_eq!(status, StatusCode::BAD_REQUEST);
    assert_eq!(body["code"], "INVALID_ARGUMENT");

    let (status, body) = call(app(), "GET", "/nope", None).await;
    assert_eq!(status, StatusCode::NOT_FOUND);
    assert_eq!(body["code"], "NOT_FOUND");
}

#[tokio::test]
async fn cap_exceeded_is_reported() {
    let dir = tempfile::tempdir().unwrap();
    let capped = build(
        dir.path(),
        500,
        &BuildOptions {
            max_abs_diff: Some(30),
            ..BuildOptions::default()
        },
    );
    let app = router(capped, None).unwrap();
    let (status, body) = call(app, "POST", "/query/before", Some(json!({"a": 1, "b": 2, "within": {"lo": 0, "hi": 90}}))).await;
    assert_eq!(status, StatusCode::UNPROCESSABLE_ENTITY);
    assert_eq!(body["code"], "CAP_EXCEEDED");
    assert!(body["message"].as_str().unwrap().contains("capped at 30"));
}

#[tokio::test]
async fn stats_lists_segments() {
    let (status, body) = call(app(), "GET", "/stats", None).await;
    assert_eq!(status, StatusCode::OK);
    assert_eq!(body["index"]["mode"], "both");
    assert!(body["segments"]["timediff.0000.seg"].as_u64().unwrap() > 0);
}

#[tokio::test]
async fn cors_origin_is_echoed() {
    let app = router(store(), Some("http://localhost:5173")).unwrap();
    let resp = app
        .oneshot(
            Request::builder()
                .uri("/healthz")
                .header("origin", "http://localhost:5173")
                .body(Body::empty())
                .unwrap(),
        )
        .await
        .unwrap();
    assert_eq!(resp.headers()["access-control-allow-origin"], "http://localhost:5173");
}

#[tokio::test]
async fn port_in_use_fails_at_startup() {
    let held = std::net::TcpListener::bind("127.0.0.1:0").unwrap();
    let addr = held.local_addr().unwrap();
    let err = telii_service::bind(addr).await.unwrap_err();
    assert!(matches!(err, ServeError::Bind { .. }));
    assert!(err.to_string().contains(&addr.to_string()));
}

#[tokio::test]
async fn concurrent_requests_agree() {
    let req = json!({"a": 2, "b": 1, "count_only": true});
    let handles: Vec<_> = (0..8)
        .map(|_| tokio::spawn(call(app(), "POST", "/query/before", Some(req.clone()))))
        .collect();
    let mut counts = Vec::new();
    for h in handles {
        let (status, body) = h.await.unwrap();
        assert_eq!(status, StatusCode::OK);
        counts.push(body["count"].clone());
    }
    assert!(counts.windows(2).all(|w| w[0] == w[1]));
}
