//! Hierarchical address allocation for mobile ad hoc networks.
//!
//! Addresses mirror topology: a node's address names the cluster it sits in,
//! and each cluster head owns a disjoint pool of 255 child addresses. A new
//! node obtains an address from a neighbour's cluster head without any
//! network-wide broadcast or duplicate-address detection.
//!
//! This crate is `no_std` (with `alloc`). It holds the address arithmetic,
//! the per-head address table, merge planning, and the per-node protocol
//! state machine as a pure step function. The simulator, scenario harness
//! and CLI live in `topoaddr-sim`.

#![cfg_attr(not(test), no_std)]

extern crate alloc;

use core::fmt;

pub mod addressing;
pub mod merge;
pub mod protocol;
pub mod table;

pub use addressing::{Address, AddressError, Level, NetId, NetworkPrefix};
pub use protocol::{NodeState, ProtocolConfig, Role};
pub use table::{AddressTable, TableEntry, TableError};

/// Simulation time in integer ticks.
pub type Tick = u64;

/// Stable, globally unique node identifier (stands in for a MAC address).
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct NodeId(pub u64);

impl fmt::Display for NodeId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "n{}", self.0)
    }
}

/// splitmix64 finaliser; deterministic mixing for NetIDs and prefixes.
pub(crate) fn mix64(mut x: u64) -> u64 {
    x = x.wrapping_add(0x9e37_79b9_7f4a_7c15);
    x = (x ^ (x >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    x = (x ^ (x >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    x ^ (x >> 31)
}
