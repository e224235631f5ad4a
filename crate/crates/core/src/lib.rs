//! Temporal event-level inverted index over patient event records.
//!
//! Records are ingested into a data directory holding an event catalog and
//! per-patient Event-Time documents ([`pipeline::ingest`]). From those,
//! [`pipeline::build`] derives two indexes:
//!
//! * the temporal index, which precomputes, for every pair of events, the
//!   patients in each before/after/co-occur relation and the patients at
//!   every exact day difference;
//! * the event-level baseline index, one patient list per event, against
//!   which temporal predicates must be checked on the fly.
//!
//! [`query`] answers co-existence, before-within and explore queries
//! against either index.

pub mod bench;
pub mod catalog;
pub mod error;
pub mod index;
pub mod ingest;
pub mod model;
pub mod pipeline;
pub mod postings;
pub mod query;
pub mod relate;
pub mod store;

pub use catalog::Catalog;
pub use error::{Error, Result};
pub use model::{DayStamp, Domain, EventId, EventKey, PatientId, Relation};
pub use postings::PostingList;
pub use store::StoreHandle;
