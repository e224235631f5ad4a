//! Fixed-width big-endian key encodings for each segment kind.

use crate::model::{EventId, Relation};

fn day_diff_bytes(d: i32) -> [u8; 4] {
    ((d as u32) ^ 0x8000_0000).to_be_bytes()
}

fn day_diff_from(bytes: &[u8]) -> i32 {
    (be_u32(bytes) ^ 0x8000_0000) as i32
}

pub(crate) fn be_u32(bytes: &[u8]) -> u32 {
    u32::from_be_bytes(bytes[..4].try_into().expect("4 bytes"))
}

fn event(bytes: &[u8]) -> EventId {
    EventId::from_raw(be_u32(bytes))
}

pub(crate) fn id_key(id: u32) -> [u8; 4] {
    id.to_be_bytes()
}

/// `(anchor, relation, related)`
pub(crate) fn relation(anchor: EventId, relation: Relation, related: EventId) -> [u8; 9] {
    let mut k = [0u8; 9];
    k[..4].copy_from_slice(&anchor.get().to_be_bytes());
    k[4] = relation.code();
    k[5..].copy_from_slice(&related.get().to_be_bytes());
    k
}

pub(crate) fn decode_relation(k: &[u8]) -> (EventId, Relation, EventId) {
    (
        event(&k[..4]),
        Relation::from_code(k[4]).expect("valid relation code"),
        event(&k[5..9]),
    )
}

/// `(relation, related, anchor)`
pub(crate) fn relation_by_related(relation: Relation, related: EventId, anchor: EventId) -> [u8; 9] {
    let mut k = [0u8; 9];
    k[0] = relation.code();
    k[1..5].copy_from_slice(&related.get().to_be_bytes());
    k[5..].copy_from_slice(&anchor.get().to_be_bytes());
    k
}

/// `(anchor, related, day_diff)`
pub(crate) fn timediff(anchor: EventId, related: EventId, d: i32) -> [u8; 12] {
    let mut k = [0u8; 12];
    k[..4].copy_from_slice(&anchor.get().to_be_bytes());
    k[4..8].copy_from_slice(&related.get().to_be_bytes());
    k[8..].copy_from_slice(&day_diff_bytes(d));
    k
}

pub(crate) fn decode_timediff(k: &[u8]) -> (EventId, EventId, i32) {
    (event(&k[..4]), event(&k[4..8]), day_diff_from(&k[8..12]))
}

/// `(related, day_diff, anchor)`
pub(crate) fn timediff_by_related(related: EventId, d: i32, anchor: EventId) -> [u8; 12] {
    timediff_by_related_raw(related.get(), d, anchor.get())
}

pub(crate) fn timediff_by_related_raw(related: u32, d: i32, anchor: u32) -> [u8; 12] {
    let mut k = [0u8; 12];
    k[..4].copy_from_slice(&related.to_be_bytes());
    k[4..8].copy_from_slice(&day_diff_bytes(d));
    k[8..].copy_from_slice(&anchor.to_be_bytes());
    k
}

/// `(patient, event)`
pub(crate) fn event_time(patient: u32, event_id: EventId) -> [u8; 8] {
    let mut k = [0u8; 8];
    k[..4].copy_from_slice(&patient.to_be_bytes());
    k[4..].copy_from_slice(&event_id.get().to_be_bytes());
    k
}

pub(crate) fn decode_event_time(k: &[u8]) -> (u32, EventId) {
    (be_u32(&k[..4]), event(&k[4..8]))
}

/// `(event, patient)`
pub(crate) fn event_time_by_event(event_id: EventId, patient: u32) -> [u8; 8] {
    let mut k = [0u8; 8];
    k[..4].copy_from_slice(&event_id.get().to_be_bytes());
    k[4..].copy_from_slice(&patient.to_be_bytes());
    k
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    proptest! {
        #[test]
        fn timediff_key_order_matches_tuple_order(
            a in (1u32..50, 1u32..50, any::<i32>()),
            b in (1u32..50, 1u32..50, any::<i32>()),
        ) {
            let ka = timediff(EventId::from_raw(a.0), EventId::from_raw(a.1), a.2);
            let kb = timediff(EventId::from_raw(b.0), EventId::from_raw(b.1), b.2);
            prop_assert_eq!(ka.cmp(&kb), a.cmp(&b));
            let (x, y, d) = decode_timediff(&ka);
            prop_assert_eq!((x.get(), y.get(), d), a);
        }
    }
}
