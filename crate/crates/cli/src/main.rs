use std::net::{IpAddr, SocketAddr};
use std::path::{Path, PathBuf};
use std::time::Instant;

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand, ValueEnum};
use serde_json::{json, Value};
use telii::bench::{self, BenchQuery, GenConfig, Oracle, Suite};
use telii::ingest::{load_rules, DerivedEventRule, ScanMode};
use telii::model::parse_day;
use telii::pipeline::{self, BuildOptions};
use telii::query::{DayRange, Engine, EventRef, ExploreRow};
use telii::store::BuildMode;
use telii::{Relation, StoreHandle};
use telii_service::api;

#[derive(Parser)]
#[command(name = "telii", version, about = "Temporal event-level inverted index for patient event records")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic records file.
    Gen(GenArgs),
    /// Ingest a records file into a data directory.
    Ingest(IngestArgs),
    /// Build indexes in an ingested data directory.
    Build(BuildArgs),
    /// Run a query and print the answer as JSON.
    Query {
        #[command(subcommand)]
        query: QueryCommand,
    },
    /// Benchmark the temporal index against the event-level baseline.
    Bench(BenchArgs),
    /// Serve the HTTP API.
    Serve(ServeArgs),
}

#[derive(Args)]
struct GenArgs {
    #[arg(long)]
    patients: u32,
    #[arg(long)]
    events: u32,
    #[arg(long, default_value_t = 1.2)]
    zipf: f64,
    #[arg(long = "mean-per-patient", default_value_t = 40)]
    mean_per_patient: u32,
    #[arg(long, default_value = "2019-01-01")]
    start: String,
    #[arg(long, default_value = "2020-12-31")]
    end: String,
    #[arg(long, default_value_t = 42)]
    seed: u64,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct IngestArgs {
    #[arg(long)]
    records: PathBuf,
    /// Derived-event rules (JSON).
    #[arg(long)]
    rules: Option<PathBuf>,
    /// Data directory to write.
    #[arg(long = "data", alias = "out")]
    data: PathBuf,
    /// Skip malformed lines instead of failing.
    #[arg(long)]
    skip_malformed: bool,
}

#[derive(Clone, Copy, ValueEnum)]
enum ModeArg {
    Telii,
    Elii,
    Both,
}

#[derive(Args)]
struct BuildArgs {
    #[arg(long)]
    data: PathBuf,
    #[arg(long, value_enum, default_value_t = ModeArg::Both)]
    mode: ModeArg,
    /// Index only day differences with |d| <= this.
    #[arg(long)]
    max_abs_diff: Option<u32>,
    /// Answer pairs whose less common event has fewer patients than this
    /// from the event-level index.
    #[arg(long)]
    hybrid_min_patients: Option<u64>,
    /// Sort buffer per index, in MiB.
    #[arg(long, default_value_t = 256)]
    sort_memory_mb: usize,
}

#[derive(Clone, Copy, PartialEq, Eq, ValueEnum)]
enum EngineArg {
    Telii,
    Elii,
    Oracle,
}

#[derive(Args)]
struct QueryCommon {
    #[arg(long)]
    data: PathBuf,
    #[arg(long, value_enum, default_value_t = EngineArg::Telii)]
    engine: EngineArg,
    /// Records file, required by the oracle engine.
    #[arg(long)]
    records: Option<PathBuf>,
    /// Rules used at ingest, for the oracle engine.
    #[arg(long)]
    rules: Option<PathBuf>,
}

#[derive(Clone, Copy, ValueEnum)]
enum DirectionArg {
    Before,
    After,
    #[value(name = "co-occur")]
    CoOccur,
}

#[derive(Subcommand)]
enum QueryCommand {
    /// Patients having every listed event.
    Coexist {
        #[command(flatten)]
        common: QueryCommon,
        #[arg(long, value_delimiter = ',', required = true)]
        events: Vec<String>,
        #[arg(long)]
        count: bool,
    },
    /// Patients with event A on or before event B.
    Before {
        #[command(flatten)]
        common: QueryCommon,
        #[arg(long)]
        a: String,
        #[arg(long)]
        b: String,
        /// Day range LO..HI for t_b - t_a.
        #[arg(long, allow_hyphen_values = true)]
        within: Option<DayRange>,
        #[arg(long)]
        count: bool,
    },
    /// Related events ranked by patient count.
    Explore {
        #[command(flatten)]
        common: QueryCommon,
        #[arg(long)]
        event: String,
        #[arg(long, value_enum)]
        direction: DirectionArg,
        #[arg(long, allow_hyphen_values = true)]
        within: Option<DayRange>,
        #[arg(long = "top", default_value_t = 10)]
        top: usize,
    },
}

#[derive(Args)]
struct BenchArgs {
    #[arg(long)]
    data: PathBuf,
    /// Records file; enables oracle checks.
    #[arg(long)]
    records: Option<PathBuf>,
    #[arg(long)]
    rules: Option<PathBuf>,
    #[arg(long, default_value = "all")]
    suite: Suite,
    #[arg(long, default_value_t = 20)]
    queries_per_task: usize,
    #[arg(long, default_value_t = 42)]
    seed: u64,
    /// CSV output; a markdown summary is written next to it.
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct ServeArgs {
    #[arg(long)]
    data: PathBuf,
    #[arg(long, default_value_t = 8080)]
    port: u16,
    #[arg(long, default_value = "127.0.0.1")]
    host: IpAddr,
    #[arg(long)]
    cors_origin: Option<String>,
}

fn main() -> Result<()> {
    tracing_subscriber::fmt()
        .with_env_filter(
            tracing_subscriber::EnvFilter::try_from_default_env().unwrap_or_else(|_| "info".into()),
        )
        .with_writer(std::io::stderr)
        .init();
    match Cli::parse().command {
        Command::Gen(args) => gen(args),
        Command::Ingest(args) => ingest(args),
        Command::Build(args) => build(args),
        Command::Query { query } => query_cmd(query),
        Command::Bench(args) => bench_cmd(args),
        Command::Serve(args) => serve(args),
    }
}

fn print(value: &impl serde::Serialize) -> Result<()> {
    println!("{}", serde_json::to_string_pretty(value)?);
    Ok(())
}

fn gen(args: GenArgs) -> Result<()> {
    let cfg = GenConfig {
        patients: args.patients,
        events: args.events,
        zipf_s: args.zipf,
        mean_events_per_patient: args.mean_per_patient,
        start: parse_day(&args.start)?,
        end: parse_day(&args.end)?,
        seed: args.seed,
    };
    let records = bench::gen_synthetic(&cfg, &args.out)
        .with_context(|| format!("writing {}", args.out.display()))?;
    print(&json!({"records": records, "out": args.out}))
}

fn rules(path: Option<&Path>) -> Result<Vec<DerivedEventRule>> {
    match path {
        Some(p) => load_rules(p).with_context(|| format!("loading rules from {}", p.display())),
        None => Ok(Vec::new()),
    }
}

fn ingest(args: IngestArgs) -> Result<()> {
    let rules = rules(args.rules.as_deref())?;
    let mode = if args.skip_malformed { ScanMode::Skip } else { ScanMode::Strict };
    let started = Instant::now();
    let summary = pipeline::ingest(&args.records, &rules, &args.data, mode)?;
    print(&json!({
        "records": summary.records,
        "skipped": summary.skipped,
        "patients": summary.patients,
        "events": summary.events,
        "event_time_docs": summary.event_time_docs,
        "elapsed_ms": started.elapsed().as_millis() as u64,
    }))
}

fn build(args: BuildArgs) -> Result<()> {
    let opts = BuildOptions {
        mode: match args.mode {
            ModeArg::Telii => BuildMode::Telii,
            ModeArg::Elii => BuildMode::Elii,
            ModeArg::Both => BuildMode::Both,
        },
        max_abs_diff: args.max_abs_diff,
        hybrid_min_patients: args.hybrid_min_patients,
        memory_bytes: args.sort_memory_mb.max(1) << 20,
    };
    let started = Instant::now();
    let summary = pipeline::build(&args.data, &opts)?;
    print(&json!({
        "relation_docs": summary.relation_docs,
        "timediff_docs": summary.timediff_docs,
        "elii_docs": summary.elii_docs,
        "elapsed_ms": started.elapsed().as_millis() as u64,
    }))
}

fn refs(texts: &[String]) -> Vec<EventRef> {
    texts.iter().map(|t| EventRef::Text(t.trim().to_string())).collect()
}

fn relation(d: DirectionArg) -> Relation {
    match d {
        DirectionArg::Before => Relation::Before,
        DirectionArg::After => Relation::After,
        DirectionArg::CoOccur => Relation::CoOccur,
    }
}

fn engine(e: EngineArg) -> Option<Engine> {
    match e {
        EngineArg::Telii => Some(Engine::Telii),
        EngineArg::Elii => Some(Engine::Elii),
        EngineArg::Oracle => None,
    }
}

fn query_cmd(query: QueryCommand) -> Result<()> {
    let common = match &query {
        QueryCommand::Coexist { common, .. } | QueryCommand::Before { common, .. } | QueryCommand::Explore { common, .. } => common,
    };
    let store = StoreHandle::open(&common.data).with_context(|| format!("opening {}", common.data.display()))?;
    if common.engine == EngineArg::Oracle {
        return oracle_query(&store, &query);
    }
    let engine = engine(common.engine);
    let out = match query {
        QueryCommand::Coexist { events, count, .. } => serde_json::to_value(api::coexist(
            &store,
            &api::CoexistRequest {
                events: refs(&events),
                count_only: count,
                engine,
                limit: Some(usize::MAX),
                offset: None,
            },
            usize::MAX,
        )?)?,
        QueryCommand::Before { a, b, within, count, .. } => serde_json::to_value(api::before(
            &store,
            &api::BeforeRequest {
                a: EventRef::Text(a),
                b: EventRef::Text(b),
                within,
                count_only: count,
                engine,
                limit: Some(usize::MAX),
                offset: None,
            },
            usize::MAX,
        )?)?,
        QueryCommand::Explore { event, direction, within, top, .. } => serde_json::to_value(api::explore(
            &store,
            &api::ExploreRequest {
                event: EventRef::Text(event),
                direction: relation(direction),
                within,
                top_k: top,
                engine,
            },
        )?)?,
    };
    print(&out)
}

fn oracle_query(store: &StoreHandle, query: &QueryCommand) -> Result<()> {
    let common = match query {
        QueryCommand::Coexist { common, .. } | QueryCommand::Before { common, .. } | QueryCommand::Explore { common, .. } => common,
    };
    let Some(records) = &common.records else {
        bail!("the oracle engine answers from raw records; pass --records (and --rules if ingest used them)");
    };
    let oracle = Oracle::load(records, &rules(common.rules.as_deref())?)?;
    let catalog = store.catalog();
    let resolve = |text: &str| catalog.resolve(text.trim());
    let started = Instant::now();
    let (bench_query, count_only) = match query {
        QueryCommand::Coexist { events, count, .. } => (
            BenchQuery::Coexist(events.iter().map(|e| resolve(e)).collect::<Result<_, _>>()?),
            *count,
        ),
        QueryCommand::Before { a, b, within, count, .. } => (
            BenchQuery::Before {
                a: resolve(a)?,
                b: resolve(b)?,
                within: *within,
            },
            *count,
        ),
        QueryCommand::Explore { event, direction, within, top, .. } => (
            BenchQuery::Explore {
                input: resolve(event)?,
                direction: relation(*direction),
                within: *within,
                top_k: *top,
            },
            false,
        ),
    };
    let answer = bench::run_oracle(&oracle, catalog, &bench_query)?;
    let elapsed_ms = started.elapsed().as_secs_f64() * 1e3;
    let mut out = json!({
        "query": bench_query.to_string(),
        "engine": "oracle",
        "elapsed_ms": elapsed_ms,
        "count": answer.len(),
    });
    match (answer, &bench_query) {
        (bench::Answer::Patients(patients), _) => {
            if !count_only {
                out["patients"] = serde_json::to_value(patients)?;
            }
        }
        (bench::Answer::Rows(rows), BenchQuery::Explore { input, .. }) => {
            let total = oracle.event_count(&catalog.get(*input).expect("resolved").key) as f64;
            let views: Vec<Value> = rows
                .into_iter()
                .map(|(key, patient_count)| {
                    let row = ExploreRow {
                        related_event: catalog.id_of(&key).expect("oracle rows map to catalog events"),
                        patient_count,
                        pct: patient_count as f64 / total,
                    };
                    serde_json::to_value(api::row_view(store, &row))
                })
                .collect::<Result<_, _>>()?;
            out["rows"] = Value::Array(views);
        }
        (bench::Answer::Rows(_), _) => unreachable!("rows only answer explore"),
    }
    print(&out)
}

fn bench_cmd(args: BenchArgs) -> Result<()> {
    let rules = rules(args.rules.as_deref())?;
    let rows = bench::run_suite(&args.data, args.records.as_deref(), &rules, args.suite, args.queries_per_task, args.seed)?;
    let summary_path = bench::report(&rows, &args.out)?;
    print!("{}", std::fs::read_to_string(&summary_path)?);
    let mismatches = rows.iter().filter(|r| r.oracle_match == Some(false)).count();
    if mismatches > 0 {
        bail!("{mismatches} benchmark answers differ from the oracle; see {}", args.out.display());
    }
    Ok(())
}

fn serve(args: ServeArgs) -> Result<()> {
    let runtime = tokio::runtime::Runtime::new()?;
    runtime.block_on(telii_service::serve(telii_service::ServeConfig {
        data_dir: args.data,
        addr: SocketAddr::new(args.host, args.port),
        cors_origin: args.cors_origin,
    }))?;
    Ok(())
}
