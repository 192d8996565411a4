use std::collections::{BTreeMap, BTreeSet, VecDeque};

use thiserror::Error;
use topoaddr_core::NodeId;

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum TopologyError {
    #[error("unknown node {0}")]
    UnknownNode(NodeId),
    #[error("self-loop on {0}")]
    SelfLoop(NodeId),
}

/// Undirected connectivity graph.
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct Topology {
    adj: BTreeMap<NodeId, BTreeSet<NodeId>>,
}

impl Topology {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn add_node(&mut self, id: NodeId) {
        self.adj.entry(id).or_default();
    }

    /// Remove `id` and every edge touching it.
    pub fn remove_node(&mut self, id: NodeId) {
        if let Some(ns) = self.adj.remove(&id) {
            for n in ns {
                if let Some(s) = self.adj.get_mut(&n) {
                    s.remove(&id);
                }
            }
        }
    }

    pub fn contains(&self, id: NodeId) -> bool {
        self.adj.contains_key(&id)
    }

    pub fn nodes(&self) -> impl Iterator<Item = NodeId> + '_ {
        self.adj.keys().copied()
    }

    pub fn len(&self) -> usize {
        self.adj.len()
    }

    pub fn is_empty(&self) -> bool {
        self.adj.is_empty()
    }

    /// Each edge once, as `(low, high)`.
    pub fn edges(&self) -> impl Iterator<Item = (NodeId, NodeId)> + '_ {
        self.adj.iter().flat_map(|(&a, ns)| ns.iter().filter(move |&&b| a < b).map(move |&b| (a, b)))
    }

    pub fn link_up(&mut self, a: NodeId, b: NodeId) -> Result<bool, TopologyError> {
        self.check_pair(a, b)?;
        let added = self.adj.get_mut(&a).expect("checked").insert(b);
        self.adj.get_mut(&b).expect("checked").insert(a);
        Ok(added)
    }

    pub fn link_down(&mut self, a: NodeId, b: NodeId) -> Result<bool, TopologyError> {
        self.check_pair(a, b)?;
        let removed = self.adj.get_mut(&a).expect("checked").remove(&b);
        self.adj.get_mut(&b).expect("checked").remove(&a);
        Ok(removed)
    }

    fn check_pair(&self, a: NodeId, b: NodeId) -> Result<(), TopologyError> {
        if a == b {
            return Err(TopologyError::SelfLoop(a));
        }
        for id in [a, b] {
            if !self.contains(id) {
                return Err(TopologyError::UnknownNode(id));
            }
        }
        Ok(())
    }

    pub fn adjacent(&self, a: NodeId, b: NodeId) -> bool {
        self.adj.get(&a).is_some_and(|s| s.contains(&b))
    }

    /// Sorted neighbour list.
    pub fn neighbors(&self, id: NodeId) -> Result<Vec<NodeId>, TopologyError> {
        self.adj.get(&id).map(|s| s.iter().copied().collect()).ok_or(TopologyError::UnknownNode(id))
    }

    /// Hop counts from `src` to everything reachable, `src` included at 0.
    pub fn distances(&self, src: NodeId) -> BTreeMap<NodeId, u32> {
        let mut dist = BTreeMap::new();
        if !self.contains(src) {
            return dist;
        }
        dist.insert(src, 0);
        let mut q = VecDeque::from([src]);
        while let Some(u) = q.pop_front() {
            let d = dist[&u];
            for &v in &self.adj[&u] {
                if let std::collections::btree_map::Entry::Vacant(e) = dist.entry(v) {
                    e.insert(d + 1);
                    q.push_back(v);
                }
            }
        }
        dist
    }

    pub fn hops(&self, a: NodeId, b: NodeId) -> Option<u32> {
        self.distances(a).get(&b).copied()
    }

    /// Connected components, each sorted, ordered by smallest member.
    pub fn components(&self) -> Vec<Vec<NodeId>> {
        let mut seen = BTreeSet::new();
        let mut out = Vec::new();
        for id in self.nodes() {
            if seen.contains(&id) {
                continue;
            }
            let comp: Vec<NodeId> = self.distances(id).into_keys().collect();
            seen.extend(comp.iter().copied());
            out.push(comp);
        }
        out
    }

    pub fn is_connected(&self) -> bool {
        self.components().len() <= 1
    }
}
