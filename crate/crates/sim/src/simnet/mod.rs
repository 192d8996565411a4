//! Deterministic discrete-event world: connectivity graph, delivery with
//! per-hop delay and seeded loss, and a text trace of everything delivered.

mod topology;

use std::collections::{BTreeMap, BTreeSet};
use std::fmt::Write as _;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use topoaddr_core::protocol::{Bucket, Ctx, Dest, Envelope, Input, Neighbor, Notice, Output};
use topoaddr_core::{Address, NetId, NodeId, NodeState, ProtocolConfig, Tick};

pub use topology::{Topology, TopologyError};

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct DeliveryModel {
    pub per_hop_delay: Tick,
    pub drop_probability: f64,
    pub seed: u64,
}

impl Default for DeliveryModel {
    fn default() -> Self {
        DeliveryModel { per_hop_delay: 1, drop_probability: 0.0, seed: 0 }
    }
}

/// Stimuli from outside the protocol.
#[derive(Debug, Clone, PartialEq, Eq)]
pub enum External {
    /// A node powers up; `prefix` overrides the octets a founder would use.
    Arrive { id: NodeId, prefix: Option<Vec<u8>> },
    Exit(NodeId),
    Crash(NodeId),
    LinkUp(NodeId, NodeId),
    LinkDown(NodeId, NodeId),
    Lookup { origin: NodeId, target: NodeId },
}

impl External {
    pub(crate) fn trace_args(&self) -> String {
        match self {
            External::Arrive { id, prefix: None } => format!("ARRIVE {id}"),
            External::Arrive { id, prefix: Some(p) } => format!("ARRIVE {id} {}", dotted(p)),
            External::Exit(id) => format!("EXIT {id}"),
            External::Crash(id) => format!("CRASH {id}"),
            External::LinkUp(a, b) => format!("LINKUP {a} {b}"),
            External::LinkDown(a, b) => format!("LINKDOWN {a} {b}"),
            External::Lookup { origin, target } => format!("LOOKUP {origin} {target}"),
        }
    }
}

pub(crate) fn dotted(octets: &[u8]) -> String {
    octets.iter().map(|o| o.to_string()).collect::<Vec<_>>().join(".")
}

#[derive(Debug, Clone)]
enum Ev {
    External(External),
    Deliver { dst: NodeId, env: Envelope },
    Bounce { to: NodeId, env: Envelope },
    Wake(NodeId),
}

impl Ev {
    /// A message whose arrival may still change some node's state.
    /// Periodic background traffic does not count.
    fn in_flight(&self) -> bool {
        match self {
            Ev::Deliver { env, .. } => env.msg.bucket() != Bucket::Background,
            Ev::Bounce { .. } => true,
            _ => false,
        }
    }
}

/// A notice raised by a node, with when and who.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Noted {
    pub at: Tick,
    pub node: NodeId,
    pub notice: Notice,
}

pub struct World {
    cfg: ProtocolConfig,
    model: DeliveryModel,
    now: Tick,
    topo: Topology,
    nodes: BTreeMap<NodeId, NodeState>,
    queue: BTreeMap<(Tick, u64), Ev>,
    seq: u64,
    rng: ChaCha8Rng,
    index: BTreeMap<(NetId, Address), BTreeSet<NodeId>>,
    held: BTreeMap<NodeId, (NetId, Address)>,
    in_flight: usize,
    trace: String,
    notes: Vec<Noted>,
}

impl World {
    pub fn new(cfg: ProtocolConfig, model: DeliveryModel) -> Self {
        let mut trace = String::new();
        let _ = writeln!(trace, "# seed {}", model.seed);
        World {
            cfg,
            model,
            now: 0,
            topo: Topology::new(),
            nodes: BTreeMap::new(),
            queue: BTreeMap::new(),
            seq: 0,
            rng: ChaCha8Rng::seed_from_u64(model.seed),
            index: BTreeMap::new(),
            held: BTreeMap::new(),
            in_flight: 0,
            trace,
            notes: Vec::new(),
        }
    }

    pub fn now(&self) -> Tick {
        self.now
    }

    pub fn config(&self) -> &ProtocolConfig {
        &self.cfg
    }

    pub fn topology(&self) -> &Topology {
        &self.topo
    }

    pub fn node(&self, id: NodeId) -> Option<&NodeState> {
        self.nodes.get(&id)
    }

    pub fn nodes(&self) -> impl Iterator<Item = &NodeState> {
        self.nodes.values()
    }

    pub fn trace(&self) -> &str {
        &self.trace
    }

    pub fn notes(&self) -> &[Noted] {
        &self.notes
    }

    /// Ids currently holding `addr` in network `net`.
    pub fn holders(&self, net: NetId, addr: Address) -> Vec<NodeId> {
        self.index.get(&(net, addr)).map(|s| s.iter().copied().collect()).unwrap_or_default()
    }

    /// Configured node at `addr`, whichever network it is in.
    pub fn find_by_addr(&self, addr: Address) -> Vec<NodeId> {
        self.held.iter().filter(|(_, &(_, a))| a == addr).map(|(&id, _)| id).collect()
    }

    pub fn schedule(&mut self, at: Tick, ev: External) {
        self.push(at.max(self.now), Ev::External(ev));
    }

    /// Place an already-built node, for worlds assembled by hand. It is woken
    /// at the current tick.
    pub fn insert_node(&mut self, state: NodeState) {
        let id = state.id();
        self.topo.add_node(id);
        self.nodes.insert(id, state);
        self.reindex(id);
        self.push(self.now, Ev::Wake(id));
    }

    pub fn link(&mut self, a: NodeId, b: NodeId) -> Result<(), TopologyError> {
        self.topo.link_up(a, b).map(|_| ())
    }

    fn push(&mut self, at: Tick, ev: Ev) {
        if ev.in_flight() {
            self.in_flight += 1;
        }
        self.queue.insert((at, self.seq), ev);
        self.seq += 1;
    }

    pub fn next_event_at(&self) -> Option<Tick> {
        self.queue.keys().next().map(|&(t, _)| t)
    }

    /// Process every event up to and including `until`, then stand at `until`.
    pub fn run_until(&mut self, until: Tick) {
        while let Some(entry) = self.queue.first_entry() {
            if entry.key().0 > until {
                break;
            }
            let ((at, _), ev) = entry.remove_entry();
            self.dispatch(at, ev);
        }
        self.now = self.now.max(until);
    }

    pub fn in_flight(&self) -> usize {
        self.in_flight
    }

    /// Each node with unfinished work, and what it is.
    pub fn busy(&self) -> Vec<(NodeId, Vec<&'static str>)> {
        self.nodes.values().map(|n| (n.id(), n.pending())).filter(|(_, p)| !p.is_empty()).collect()
    }

    /// No state-changing message in flight and every node idle.
    pub fn is_quiescent(&self) -> bool {
        self.in_flight == 0 && self.nodes.values().all(NodeState::is_idle)
    }

    /// Run event by event until quiescent or `limit`; true on quiescence.
    /// External events due before quiescence are left queued.
    pub fn run_until_quiescent(&mut self, limit: Tick) -> bool {
        loop {
            if self.is_quiescent() {
                return true;
            }
            let Some(entry) = self.queue.first_entry() else { return self.is_quiescent() };
            if entry.key().0 > limit || matches!(entry.get(), Ev::External(_)) {
                return false;
            }
            let ((at, _), ev) = entry.remove_entry();
            self.dispatch(at, ev);
        }
    }

    fn dispatch(&mut self, at: Tick, ev: Ev) {
        self.now = at;
        if ev.in_flight() {
            self.in_flight -= 1;
        }
        match ev {
            Ev::External(e) => self.external(e),
            Ev::Deliver { dst, env } => {
                if !self.nodes.contains_key(&dst) {
                    self.line(format_args!("LOST {} {dst} {} {}", env.src, env.msg.kind(), env.msg));
                    return;
                }
                self.line(format_args!("{} {dst} {} {}", env.src, env.msg.kind(), env.msg));
                self.step(dst, Input::Deliver(env));
            }
            Ev::Bounce { to, env } => {
                if self.nodes.contains_key(&to) {
                    self.step(to, Input::Undeliverable(env));
                }
            }
            Ev::Wake(id) => {
                if self.nodes.contains_key(&id) {
                    self.step(id, Input::Wake);
                }
            }
        }
    }

    fn external(&mut self, e: External) {
        self.line(format_args!("EVENT {}", e.trace_args()));
        match e {
            External::Arrive { id, prefix } => {
                if self.nodes.contains_key(&id) {
                    return;
                }
                let cfg = match &prefix {
                    Some(p) => self.cfg.with_prefix(p),
                    None => self.cfg,
                };
                self.topo.add_node(id);
                self.nodes.insert(id, NodeState::new(id, cfg));
                self.step(id, Input::Arrive);
            }
            External::Exit(id) => {
                if self.nodes.contains_key(&id) {
                    self.step(id, Input::Leave);
                    self.remove(id);
                }
            }
            External::Crash(id) => self.remove(id),
            External::LinkUp(a, b) => {
                let _ = self.topo.link_up(a, b);
            }
            External::LinkDown(a, b) => {
                let _ = self.topo.link_down(a, b);
            }
            External::Lookup { origin, target } => {
                if self.nodes.contains_key(&origin) {
                    self.step(origin, Input::Lookup { target });
                }
            }
        }
    }

    fn remove(&mut self, id: NodeId) {
        self.nodes.remove(&id);
        self.topo.remove_node(id);
        self.reindex(id);
    }

    fn line(&mut self, rest: std::fmt::Arguments<'_>) {
        let _ = writeln!(self.trace, "{} {rest}", self.now);
    }

    fn ctx_neighbors(&self, id: NodeId) -> Vec<Neighbor> {
        self.topo
            .neighbors(id)
            .unwrap_or_default()
            .into_iter()
            .filter_map(|n| self.nodes.get(&n).map(|s| Neighbor { id: n, view: s.beacon() }))
            .collect()
    }

    fn step(&mut self, id: NodeId, input: Input) {
        let neighbors = self.ctx_neighbors(id);
        let ctx = Ctx { now: self.now, neighbors: &neighbors };
        let Some(state) = self.nodes.get_mut(&id) else { return };
        let outs = state.step(&ctx, input);
        self.reindex(id);
        for o in outs {
            match o {
                Output::Send(env) => self.route(env),
                Output::Wake(at) => self.push(at.max(self.now + 1), Ev::Wake(id)),
                Output::Note(n) => {
                    self.line(format_args!("NOTE {id} {n}"));
                    self.notes.push(Noted { at: self.now, node: id, notice: n });
                }
            }
        }
    }

    fn reindex(&mut self, id: NodeId) {
        let now_held = self.nodes.get(&id).and_then(|s| Some((s.netid()?, s.address()?)));
        let before = self.held.get(&id).copied();
        if before == now_held {
            return;
        }
        if let Some(k) = before {
            if let Some(set) = self.index.get_mut(&k) {
                set.remove(&id);
                if set.is_empty() {
                    self.index.remove(&k);
                }
            }
            self.held.remove(&id);
        }
        if let Some(k) = now_held {
            self.index.entry(k).or_default().insert(id);
            self.held.insert(id, k);
        }
    }

    fn dropped(&mut self) -> bool {
        self.model.drop_probability > 0.0 && self.rng.random::<f64>() < self.model.drop_probability
    }

    fn route(&mut self, env: Envelope) {
        let src = env.src;
        let delay = self.model.per_hop_delay.max(1);
        match env.dst {
            Dest::Link(dst) => {
                if self.topo.adjacent(src, dst) {
                    self.deliver(dst, env, delay);
                } else {
                    self.line(format_args!("NOROUTE {src} {dst} {} {}", env.msg.kind(), env.msg));
                }
            }
            Dest::Local => {
                for dst in self.topo.neighbors(src).unwrap_or_default() {
                    self.deliver(dst, env.clone(), delay);
                }
            }
            Dest::Addr { net, addr } => {
                let holders = self.holders(net, addr);
                let dist = if holders.is_empty() { BTreeMap::new() } else { self.topo.distances(src) };
                let reach: Vec<(NodeId, u32)> =
                    holders.into_iter().filter_map(|h| dist.get(&h).map(|&d| (h, d))).collect();
                if reach.is_empty() {
                    self.line(format_args!("NOROUTE {src} {addr} {} {}", env.msg.kind(), env.msg));
                    self.push(self.now + 1, Ev::Bounce { to: src, env });
                    return;
                }
                for (h, d) in reach {
                    self.deliver(h, env.clone(), delay * Tick::from(d.max(1)));
                }
            }
        }
    }

    fn deliver(&mut self, dst: NodeId, env: Envelope, after: Tick) {
        if self.dropped() {
            self.line(format_args!("DROP {} {dst} {} {}", env.src, env.msg.kind(), env.msg));
            return;
        }
        self.push(self.now + after, Ev::Deliver { dst, env });
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn world() -> World {
        World::new(ProtocolConfig::default(), DeliveryModel::default())
    }

    #[test]
    fn empty_world_has_only_the_header() {
        let mut w = world();
        w.run_until(1000);
        assert_eq!(w.trace(), "# seed 0\n");
    }

    #[test]
    fn lone_node_founds_a_network() {
        let mut w = world();
        w.schedule(0, External::Arrive { id: NodeId(1), prefix: None });
        w.run_until(100);
        let n = w.node(NodeId(1)).unwrap();
        assert_eq!(n.address(), Some("10.1.0.0".parse().unwrap()));
        assert!(w.trace().contains("NOTE n1 supreme addr=10.1.0.0"));
    }

    #[test]
    fn second_node_joins_under_the_first() {
        let mut w = world();
        w.schedule(0, External::Arrive { id: NodeId(1), prefix: None });
        w.schedule(50, External::Arrive { id: NodeId(2), prefix: None });
        w.schedule(50, External::LinkUp(NodeId(1), NodeId(2)));
        w.run_until(200);
        assert_eq!(w.node(NodeId(2)).unwrap().address(), Some("10.1.1.0".parse().unwrap()));
        assert!(w.run_until_quiescent(1000));
    }
}
