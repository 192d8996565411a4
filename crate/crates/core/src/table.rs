//! The address table a cluster head keeps for its pool.
//!
//! Suffix 0 is the head itself and never appears in a table. Allocation is
//! lowest-free. Every mutation bumps `version`, which subordinates use to
//! tell a fresher snapshot from a stale one.
//!
//! Snapshot encoding (big-endian throughout):
//!
//! ```text
//! head: 4 bytes | version: 8 bytes | count: 1 byte |
//! count * (suffix: 1 byte | node_id: 8 bytes | last_seen: 8 bytes)
//! ```
//!
//! Entries are written in ascending suffix order so equal tables encode to
//! equal bytes.

use alloc::collections::BTreeMap;
use alloc::string::String;
use alloc::vec::Vec;
use core::fmt::Write;

use thiserror::Error;

use crate::addressing::Address;
use crate::{NodeId, Tick};

const HEADER_LEN: usize = 4 + 8 + 1;
const ENTRY_LEN: usize = 1 + 8 + 8;

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum TableError {
    #[error("no free address in pool")]
    NoFreeAddress,
    #[error("node {0} already holds an address in this table")]
    DuplicateNodeId(NodeId),
    #[error("node {0} is not in this table")]
    UnknownNode(NodeId),
    #[error("suffix {0} is not allocated")]
    NotAllocated(u8),
    #[error("suffix {0} is already allocated")]
    Occupied(u8),
    #[error("suffix 0 is reserved for the head")]
    ReservedSuffix,
    #[error("malformed snapshot: {0}")]
    Decode(&'static str),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct TableEntry {
    pub suffix: u8,
    pub node_id: NodeId,
    pub last_seen: Tick,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct AddressTable {
    head: Address,
    entries: BTreeMap<u8, (NodeId, Tick)>,
    by_id: BTreeMap<NodeId, u8>,
    version: u64,
}

impl AddressTable {
    pub fn new(head: Address) -> Self {
        AddressTable { head, entries: BTreeMap::new(), by_id: BTreeMap::new(), version: 0 }
    }

    pub fn head(&self) -> Address {
        self.head
    }

    /// Re-label the table after the head's address changed (merge offset,
    /// re-prefix, handover). Entries are keyed by suffix and survive as is.
    pub fn set_head(&mut self, head: Address) {
        if head != self.head {
            self.head = head;
            self.version += 1;
        }
    }

    pub fn version(&self) -> u64 {
        self.version
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn is_full(&self) -> bool {
        self.entries.len() >= 255
    }

    pub fn get(&self, suffix: u8) -> Option<TableEntry> {
        self.entries.get(&suffix).map(|&(node_id, last_seen)| TableEntry { suffix, node_id, last_seen })
    }

    pub fn suffix_of(&self, id: NodeId) -> Option<u8> {
        self.by_id.get(&id).copied()
    }

    pub fn entries(&self) -> impl Iterator<Item = TableEntry> + '_ {
        self.entries.iter().map(|(&suffix, &(node_id, last_seen))| TableEntry { suffix, node_id, last_seen })
    }

    pub fn max_suffix(&self) -> Option<u8> {
        self.entries.keys().next_back().copied()
    }

    /// Lowest unoccupied suffix for which `skip` is false.
    pub fn lowest_free_where(&self, mut skip: impl FnMut(u8) -> bool) -> Option<u8> {
        (1..=255u8).find(|s| !self.entries.contains_key(s) && !skip(*s))
    }

    pub fn lowest_free(&self) -> Option<u8> {
        self.lowest_free_where(|_| false)
    }

    /// Allocate the lowest free suffix to `node_id`.
    pub fn allocate_next_free(&mut self, node_id: NodeId, now: Tick) -> Result<u8, TableError> {
        if self.by_id.contains_key(&node_id) {
            return Err(TableError::DuplicateNodeId(node_id));
        }
        let suffix = self.lowest_free().ok_or(TableError::NoFreeAddress)?;
        self.insert(suffix, node_id, now);
        Ok(suffix)
    }

    /// Commit a specific suffix, e.g. one reserved during a handshake.
    pub fn assign(&mut self, suffix: u8, node_id: NodeId, now: Tick) -> Result<(), TableError> {
        if suffix == 0 {
            return Err(TableError::ReservedSuffix);
        }
        if self.entries.contains_key(&suffix) {
            return Err(TableError::Occupied(suffix));
        }
        if self.by_id.contains_key(&node_id) {
            return Err(TableError::DuplicateNodeId(node_id));
        }
        self.insert(suffix, node_id, now);
        Ok(())
    }

    /// Record `node_id` as the holder of `suffix`, displacing whoever the
    /// table previously had there and dropping any other suffix the node was
    /// listed under. Used when ground truth (an alive update or probe reply
    /// from the address itself) contradicts the table.
    pub fn set_holder(&mut self, suffix: u8, node_id: NodeId, now: Tick) -> Result<(), TableError> {
        if suffix == 0 {
            return Err(TableError::ReservedSuffix);
        }
        if let Some(old) = self.by_id.get(&node_id).copied() {
            if old != suffix {
                self.entries.remove(&old);
            }
        }
        if let Some((prev, _)) = self.entries.get(&suffix).copied() {
            if prev != node_id {
                self.by_id.remove(&prev);
            }
        }
        self.insert(suffix, node_id, now);
        Ok(())
    }

    fn insert(&mut self, suffix: u8, node_id: NodeId, now: Tick) {
        self.entries.insert(suffix, (node_id, now));
        self.by_id.insert(node_id, suffix);
        self.version += 1;
    }

    pub fn mark_alive(&mut self, node_id: NodeId, now: Tick) -> Result<(), TableError> {
        let suffix = *self.by_id.get(&node_id).ok_or(TableError::UnknownNode(node_id))?;
        let entry = self.entries.get_mut(&suffix).expect("index consistent");
        entry.1 = entry.1.max(now);
        self.version += 1;
        Ok(())
    }

    /// Entries not heard from for more than `threshold` ticks. Nothing is
    /// removed; the caller probes before releasing.
    pub fn collect_stale(&self, now: Tick, threshold: Tick) -> Vec<(u8, NodeId)> {
        self.entries
            .iter()
            .filter(|(_, &(_, seen))| now.saturating_sub(seen) > threshold)
            .map(|(&s, &(id, _))| (s, id))
            .collect()
    }

    /// Earliest tick at which some entry becomes stale under `threshold`.
    pub fn next_stale_at(&self, threshold: Tick) -> Option<Tick> {
        self.entries.values().map(|&(_, seen)| seen + threshold + 1).min()
    }

    pub fn release(&mut self, suffix: u8) -> Result<NodeId, TableError> {
        let (id, _) = self.entries.remove(&suffix).ok_or(TableError::NotAllocated(suffix))?;
        self.by_id.remove(&id);
        self.version += 1;
        Ok(id)
    }

    pub fn snapshot(&self) -> Vec<u8> {
        let mut out = Vec::with_capacity(HEADER_LEN + ENTRY_LEN * self.entries.len());
        out.extend_from_slice(&self.head.octets());
        out.extend_from_slice(&self.version.to_be_bytes());
        out.push(self.entries.len() as u8);
        for (&suffix, &(id, seen)) in &self.entries {
            out.push(suffix);
            out.extend_from_slice(&id.0.to_be_bytes());
            out.extend_from_slice(&seen.to_be_bytes());
        }
        out
    }

    pub fn restore(bytes: &[u8]) -> Result<Self, TableError> {
        if bytes.len() < HEADER_LEN {
            return Err(TableError::Decode("truncated header"));
        }
        let head = Address([bytes[0], bytes[1], bytes[2], bytes[3]]);
        let version = u64::from_be_bytes(bytes[4..12].try_into().expect("8 bytes"));
        let count = bytes[12] as usize;
        let body = &bytes[HEADER_LEN..];
        if body.len() != count * ENTRY_LEN {
            return Err(TableError::Decode("entry count does not match length"));
        }
        let mut table = AddressTable::new(head);
        let mut prev = 0u8;
        for chunk in body.chunks_exact(ENTRY_LEN) {
            let suffix = chunk[0];
            if suffix <= prev {
                return Err(TableError::Decode("suffixes not strictly ascending"));
            }
            prev = suffix;
            let id = NodeId(u64::from_be_bytes(chunk[1..9].try_into().expect("8 bytes")));
            let seen = u64::from_be_bytes(chunk[9..17].try_into().expect("8 bytes"));
            if table.by_id.contains_key(&id) {
                return Err(TableError::Decode("duplicate node id"));
            }
            table.entries.insert(suffix, (id, seen));
            table.by_id.insert(id, suffix);
        }
        table.version = version;
        Ok(table)
    }

    /// `suffix node_id last_seen`, one entry per line.
    pub fn dump(&self) -> String {
        let mut s = String::new();
        for e in self.entries() {
            let _ = writeln!(s, "{} {} {}", e.suffix, e.node_id, e.last_seen);
        }
        s
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use alloc::collections::BTreeSet;
    use proptest::prelude::*;

    fn head() -> Address {
        Address::new(10, 1, 23, 0)
    }

    fn brute_lowest_free(occupied: &BTreeSet<u8>) -> Option<u8> {
        let mut s = 1u16;
        while s <= 255 {
            if !occupied.contains(&(s as u8)) {
                return Some(s as u8);
            }
            s += 1;
        }
        None
    }

    #[test]
    fn empty_table_allocates_one() {
        let mut t = AddressTable::new(head());
        assert_eq!(t.allocate_next_free(NodeId(9), 0), Ok(1));
    }

    #[test]
    fn fills_first_gap() {
        let mut t = AddressTable::new(head());
        for (s, id) in [(1, 11), (2, 12), (4, 14)] {
            t.assign(s, NodeId(id), 0).unwrap();
        }
        let occupied: BTreeSet<u8> = [1, 2, 4].into_iter().collect();
        let expect = brute_lowest_free(&occupied).unwrap();
        assert_eq!(expect, 3);
        assert_eq!(t.allocate_next_free(NodeId(99), 0), Ok(expect));
    }

    #[test]
    fn full_pool() {
        let mut t = AddressTable::new(head());
        for i in 0..255u64 {
            t.allocate_next_free(NodeId(i), 0).unwrap();
        }
        assert!(t.is_full());
        assert_eq!(t.allocate_next_free(NodeId(1000), 0), Err(TableError::NoFreeAddress));
    }

    #[test]
    fn duplicate_node() {
        let mut t = AddressTable::new(head());
        t.allocate_next_free(NodeId(1), 0).unwrap();
        assert_eq!(t.allocate_next_free(NodeId(1), 0), Err(TableError::DuplicateNodeId(NodeId(1))));
    }

    #[test]
    fn alive_refresh() {
        let mut t = AddressTable::new(head());
        t.allocate_next_free(NodeId(1), 10).unwrap();
        t.mark_alive(NodeId(1), 50).unwrap();
        assert_eq!(t.get(1).unwrap().last_seen, 50);
        t.mark_alive(NodeId(1), 40).unwrap();
        assert_eq!(t.get(1).unwrap().last_seen, 50);
        assert_eq!(t.mark_alive(NodeId(2), 60), Err(TableError::UnknownNode(NodeId(2))));
    }

    #[test]
    fn stale_collection() {
        let mut t = AddressTable::new(head());
        assert!(t.collect_stale(100, 30).is_empty());
        t.allocate_next_free(NodeId(1), 0).unwrap();
        assert_eq!(t.collect_stale(100, 30), [(1, NodeId(1))]);
        t.mark_alive(NodeId(1), 90).unwrap();
        assert!(t.collect_stale(100, 30).is_empty());
        assert_eq!(t.next_stale_at(30), Some(121));
    }

    #[test]
    fn release_and_reuse() {
        let mut t = AddressTable::new(head());
        t.assign(3, NodeId(3), 0).unwrap();
        assert_eq!(t.release(3), Ok(NodeId(3)));
        assert_eq!(t.release(3), Err(TableError::NotAllocated(3)));
        assert_eq!(t.release(7), Err(TableError::NotAllocated(7)));
        assert_eq!(t.allocate_next_free(NodeId(5), 0), Ok(1));
        assert_eq!(t.allocate_next_free(NodeId(6), 0), Ok(2));
        assert_eq!(t.allocate_next_free(NodeId(7), 0), Ok(3));
    }

    #[test]
    fn set_holder_displaces() {
        let mut t = AddressTable::new(head());
        t.assign(2, NodeId(1), 0).unwrap();
        t.assign(5, NodeId(2), 0).unwrap();
        t.set_holder(5, NodeId(1), 9).unwrap();
        assert_eq!(t.len(), 1);
        assert_eq!(t.suffix_of(NodeId(1)), Some(5));
        assert_eq!(t.suffix_of(NodeId(2)), None);
    }

    #[test]
    fn snapshot_golden() {
        let mut t = AddressTable::new(head());
        t.assign(1, NodeId(0x0102), 7).unwrap();
        let bytes = t.snapshot();
        let expect: [u8; 30] = [
            10, 1, 23, 0, // head
            0, 0, 0, 0, 0, 0, 0, 1, // version
            1, // count
            1, 0, 0, 0, 0, 0, 0, 1, 2, // suffix, id
            0, 0, 0, 0, 0, 0, 0, 7, // last_seen
        ];
        assert_eq!(bytes, expect);
        assert_eq!(t.dump(), "1 n258 7\n");
    }

    #[test]
    fn restore_rejects_truncation() {
        let mut t = AddressTable::new(head());
        t.assign(1, NodeId(1), 7).unwrap();
        let bytes = t.snapshot();
        assert!(matches!(AddressTable::restore(&bytes[..bytes.len() - 1]), Err(TableError::Decode(_))));
        assert!(matches!(AddressTable::restore(&bytes[..5]), Err(TableError::Decode(_))));
        let empty = AddressTable::new(head());
        assert_eq!(AddressTable::restore(&empty.snapshot()), Ok(empty));
    }

    #[derive(Debug, Clone)]
    enum Op {
        Alloc(u64),
        Release(u8),
        Alive(u64),
    }

    fn arb_op() -> impl Strategy<Value = Op> {
        prop_oneof![
            (0u64..300).prop_map(Op::Alloc),
            (1u8..=255).prop_map(Op::Release),
            (0u64..300).prop_map(Op::Alive),
        ]
    }

    proptest! {
        #[test]
        fn invariants_under_random_ops(ops in proptest::collection::vec(arb_op(), 0..400)) {
            let mut t = AddressTable::new(head());
            let mut model: BTreeMap<u8, u64> = BTreeMap::new();
            for (now, op) in ops.into_iter().enumerate() {
                let before = t.version();
                let mutated = match op {
                    Op::Alloc(id) => {
                        let occupied: BTreeSet<u8> = model.keys().copied().collect();
                        let dup = model.values().any(|&v| v == id);
                        let r = t.allocate_next_free(NodeId(id), now as u64);
                        if dup {
                            prop_assert_eq!(r, Err(TableError::DuplicateNodeId(NodeId(id))));
                            false
                        } else {
                            let expect = brute_lowest_free(&occupied);
                            prop_assert_eq!(r.clone().ok(), expect);
                            if let Ok(s) = r { model.insert(s, id); }
                            r.is_ok()
                        }
                    }
                    Op::Release(s) => {
                        let r = t.release(s);
                        prop_assert_eq!(r.is_ok(), model.remove(&s).is_some());
                        r.is_ok()
                    }
                    Op::Alive(id) => t.mark_alive(NodeId(id), now as u64).is_ok(),
                };
                if mutated { prop_assert!(t.version() > before); } else { prop_assert_eq!(t.version(), before); }
                let suffixes: BTreeSet<u8> = t.entries().map(|e| e.suffix).collect();
                let ids: BTreeSet<NodeId> = t.entries().map(|e| e.node_id).collect();
                prop_assert_eq!(suffixes.len(), t.len());
                prop_assert_eq!(ids.len(), t.len());
                prop_assert!(t.len() <= 255);
            }
            let restored = AddressTable::restore(&t.snapshot()).unwrap();
            prop_assert_eq!(&restored, &t);
        }
    }
}
