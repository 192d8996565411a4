//! The join-cost experiment: settle networks of several sizes, then attach
//! fresh nodes one at a time beside level-0 nodes whose heads have room and
//! count the messages each join costs.

use std::collections::BTreeSet;

use topoaddr_core::{Level, NodeId, Tick};

use super::generator::{generate_random, GenParams};
use super::metrics::collect_metrics;
use super::runner::world_for;
use crate::simnet::{External, World};

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct SweepRow {
    pub nodes: u64,
    pub configured: usize,
    /// Message count of each probe join, in order.
    pub costs: Vec<u64>,
}

impl SweepRow {
    /// The common cost when every probe paid the same.
    pub fn constant(&self) -> Option<u64> {
        let first = *self.costs.first()?;
        self.costs.iter().all(|&c| c == first).then_some(first)
    }
}

/// Level-0 node with the lowest id whose head still has a free suffix.
fn anchor(world: &World, used: &BTreeSet<NodeId>) -> Option<NodeId> {
    world.nodes().filter(|n| n.level() == Some(Level(0)) && !used.contains(&n.id())).map(|n| n.id()).find(|&id| {
        let n = world.node(id).expect("listed");
        let Some(head) = n.prefix().and_then(|p| topoaddr_core::addressing::cluster_head_of(n.address()?, &p).ok())
        else {
            return false;
        };
        world.find_by_addr(head).iter().any(|&h| world.node(h).and_then(|s| s.table()).is_some_and(|t| !t.is_full()))
    })
}

pub fn join_cost(nodes: u64, probes: usize, seed: u64) -> SweepRow {
    let gen = GenParams { nodes, batch: 25, lookups: 0, seed, ..GenParams::default() };
    let s = generate_random(&gen);
    let mut world = world_for(&s);
    world.run_until(s.header.horizon);
    world.run_until_quiescent(s.header.horizon + s.header.settle_window());
    let configured = world.nodes().filter(|n| n.address().is_some()).count();

    let spacing: Tick = 4 * s.header.t_handshake + s.header.t_init * 4;
    let mut used = BTreeSet::new();
    let mut probe_ids = Vec::new();
    let mut next = nodes + 1;
    for _ in 0..probes {
        let Some(a) = anchor(&world, &used) else { break };
        used.insert(a);
        let id = NodeId(next);
        next += 1;
        let at = world.now() + 1;
        world.schedule(at, External::Arrive { id, prefix: None });
        world.schedule(at, External::LinkUp(id, a));
        world.run_until(at + spacing);
        world.run_until_quiescent(at + spacing * 4);
        probe_ids.push(id);
    }
    let report = collect_metrics(world.trace()).expect("simulator traces are well formed");
    let costs = probe_ids
        .iter()
        .filter_map(|id| {
            let key = format!("{id}#");
            report.joins.iter().find(|j| j.join.starts_with(&key)).map(|j| j.messages)
        })
        .collect();
    SweepRow { nodes, configured, costs }
}
