//! Sorted, deduplicated lists of patient ordinals and their set algebra.
//!
//! Patients are stored as dense ordinals assigned in bytewise
//! [`PatientId`](crate::model::PatientId) order, so ordinal order and id
//! order agree.

use std::cmp::Ordering;

/// Strictly ascending patient ordinals.
#[derive(Debug, Clone, Default, PartialEq, Eq, Hash)]
pub struct PostingList(Vec<u32>);

impl PostingList {
    pub fn new() -> Self {
        PostingList(Vec::new())
    }

    /// Sorts and deduplicates arbitrary ordinals.
    pub fn from_unsorted(mut ids: Vec<u32>) -> Self {
        ids.sort_unstable();
        ids.dedup();
        PostingList(ids)
    }

    /// Wraps ids that are already strictly ascending.
    pub fn from_sorted(ids: Vec<u32>) -> Self {
        debug_assert!(ids.windows(2).all(|w| w[0] < w[1]));
        PostingList(ids)
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    pub fn as_slice(&self) -> &[u32] {
        &self.0
    }

    pub fn into_vec(self) -> Vec<u32> {
        self.0
    }

    pub fn contains(&self, id: u32) -> bool {
        self.0.binary_search(&id).is_ok()
    }

    pub fn is_subset(&self, other: &PostingList) -> bool {
        intersect(&self.0, &other.0).len() == self.0.len()
    }

    pub fn intersect(&self, other: &PostingList) -> PostingList {
        PostingList(intersect(&self.0, &other.0))
    }

    pub fn union(&self, other: &PostingList) -> PostingList {
        PostingList(union(&self.0, &other.0))
    }

    /// Union of many lists.
    pub fn union_all<'a>(lists: impl IntoIterator<Item = &'a PostingList>) -> PostingList {
        let mut all: Vec<u32> = Vec::new();
        let mut parts = 0;
        for list in lists {
            all.extend_from_slice(&list.0);
            parts += 1;
        }
        if parts > 1 {
            all.sort_unstable();
            all.dedup();
        }
        PostingList(all)
    }

    /// Intersection of many lists, smallest first. An empty input yields an
    /// empty list.
    pub fn intersect_all(mut lists: Vec<PostingList>) -> PostingList {
        lists.sort_by_key(|l| l.len());
        let mut iter = lists.into_iter();
        let Some(mut acc) = iter.next() else {
            return PostingList::new();
        };
        for list in iter {
            if acc.is_empty() {
                break;
            }
            acc = acc.intersect(&list);
        }
        acc
    }

    pub fn iter(&self) -> impl Iterator<Item = u32> + '_ {
        self.0.iter().copied()
    }

    /// `[count u32][ordinal u32]...`, little-endian.
    pub fn encode(&self, out: &mut Vec<u8>) {
        encode_ids(&self.0, out);
    }
}

pub(crate) fn encode_ids(ids: &[u32], out: &mut Vec<u8>) {
    out.reserve(4 + ids.len() * 4);
    out.extend_from_slice(&(ids.len() as u32).to_le_bytes());
    for id in ids {
        out.extend_from_slice(&id.to_le_bytes());
    }
}

/// Number of ordinals in an encoded list without decoding it.
pub(crate) fn encoded_len(bytes: &[u8]) -> usize {
    u32::from_le_bytes(bytes[..4].try_into().expect("count prefix")) as usize
}

pub(crate) fn decode(bytes: &[u8]) -> PostingList {
    let n = encoded_len(bytes);
    let ids = bytes[4..4 + n * 4]
        .chunks_exact(4)
        .map(|c| u32::from_le_bytes(c.try_into().expect("4 bytes")))
        .collect();
    PostingList(ids)
}

impl FromIterator<u32> for PostingList {
    fn from_iter<T: IntoIterator<Item = u32>>(iter: T) -> Self {
        PostingList::from_unsorted(iter.into_iter().collect())
    }
}

fn intersect(a: &[u32], b: &[u32]) -> Vec<u32> {
    let (small, large) = if a.len() <= b.len() { (a, b) } else { (b, a) };
    let mut out = Vec::with_capacity(small.len());
    if small.is_empty() {
        return out;
    }
    if large.len() / small.len() >= 32 {
        // Galloping: binary search the large side from the last match.
        let mut lo = 0;
        for &x in small {
            match large[lo..].binary_search(&x) {
                Ok(i) => {
                    out.push(x);
                    lo += i + 1;
                }
                Err(i) => lo += i,
            }
            if lo >= large.len() {
                break;
            }
        }
        return out;
    }
    let (mut i, mut j) = (0, 0);
    while i < small.len() && j < large.len() {
        match small[i].cmp(&large[j]) {
            Ordering::Less => i += 1,
            Ordering::Greater => j += 1,
            Ordering::Equal => {
                out.push(small[i]);
                i += 1;
                j += 1;
            }
        }
    }
    out
}

fn union(a: &[u32], b: &[u32]) -> Vec<u32> {
    let mut out = Vec::with_capacity(a.len() + b.len());
    let (mut i, mut j) = (0, 0);
    while i < a.len() && j < b.len() {
        match a[i].cmp(&b[j]) {
            Ordering::Less => {
                out.push(a[i]);
                i += 1;
            }
            Ordering::Greater => {
                out.push(b[j]);
                j += 1;
            }
            Ordering::Equal => {
                out.push(a[i]);
                i += 1;
                j += 1;
            }
        }
    }
    out.extend_from_slice(&a[i..]);
    out.extend_from_slice(&b[j..]);
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use std::collections::BTreeSet;

    fn set() -> impl Strategy<Value = BTreeSet<u32>> {
        prop::collection::btree_set(0u32..2000, 0..300)
    }

    fn list(s: &BTreeSet<u32>) -> PostingList {
        PostingList::from_sorted(s.iter().copied().collect())
    }

    proptest! {
        #[test]
        fn set_algebra_matches_btreeset(a in set(), b in set(), c in prop::collection::btree_set(0u32..2000, 0..4)) {
            let (la, lb, lc) = (list(&a), list(&b), list(&c));
            prop_assert_eq!(la.intersect(&lb).into_vec(), a.intersection(&b).copied().collect::<Vec<_>>());
            prop_assert_eq!(la.union(&lb).into_vec(), a.union(&b).copied().collect::<Vec<_>>());
            // skewed sizes take the galloping path
            prop_assert_eq!(lc.intersect(&la).into_vec(), c.intersection(&a).copied().collect::<Vec<_>>());
            let all = PostingList::intersect_all(vec![la.clone(), lb.clone(), lc.clone()]);
            let expected: Vec<u32> = a.iter().filter(|x| b.contains(x) && c.contains(x)).copied().collect();
            prop_assert_eq!(all.into_vec(), expected);
            let u = PostingList::union_all([&la, &lb, &lc]);
            prop_assert_eq!(u.len(), a.union(&b).copied().collect::<BTreeSet<_>>().union(&c).count());
            let mut bytes = Vec::new();
            la.encode(&mut bytes);
            prop_assert_eq!(decode(&bytes), la);
        }
    }

    #[test]
    fn empty_inputs() {
        assert!(PostingList::intersect_all(vec![]).is_empty());
        let a = PostingList::from_unsorted(vec![3, 1, 3, 2]);
        assert_eq!(a.as_slice(), &[1, 2, 3]);
        assert!(a.intersect(&PostingList::new()).is_empty());
        assert!(PostingList::new().is_subset(&a));
        assert!(!a.is_subset(&PostingList::new()));
    }
}
