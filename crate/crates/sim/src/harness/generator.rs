//! Seeded random scenarios: connected growth in batches, with churn and
//! drift that never disconnect the graph, and sprinkled lookups.

use rand::seq::{IndexedRandom, SliceRandom};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use topoaddr_core::{NodeId, Tick};

use super::scenario::{Header, Scenario};
use crate::simnet::{External, Topology};

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GenParams {
    pub nodes: u64,
    /// Arrivals per batch.
    pub batch: u64,
    /// Per batch, the chance each node leaves (half gracefully, half by crash).
    pub churn: f64,
    /// Per batch, the chance each node drifts to a new neighbourhood.
    pub mobility: f64,
    pub lookups: u32,
    pub drop: f64,
    pub seed: u64,
}

impl Default for GenParams {
    fn default() -> Self {
        GenParams { nodes: 20, batch: 10, churn: 0.0, mobility: 0.0, lookups: 2, drop: 0.0, seed: 0 }
    }
}

struct Builder {
    rng: ChaCha8Rng,
    topo: Topology,
    scenario: Scenario,
    declared: Vec<NodeId>,
}

impl Builder {
    fn ev(&mut self, at: Tick, e: External) {
        match &e {
            External::Arrive { id, .. } => self.topo.add_node(*id),
            External::Exit(id) | External::Crash(id) => self.topo.remove_node(*id),
            External::LinkUp(a, b) => {
                let _ = self.topo.link_up(*a, *b);
            }
            External::LinkDown(a, b) => {
                let _ = self.topo.link_down(*a, *b);
            }
            External::Lookup { .. } => {}
        }
        self.scenario.push(at, e);
    }

    fn live(&self) -> Vec<NodeId> {
        self.topo.nodes().collect()
    }

    /// Nodes whose removal keeps the rest connected.
    fn removable(&self) -> Vec<NodeId> {
        self.live()
            .into_iter()
            .filter(|&v| {
                let mut t = self.topo.clone();
                t.remove_node(v);
                t.is_connected()
            })
            .collect()
    }

    fn pick_links(&mut self, from: &[NodeId], avoid: NodeId) -> Vec<NodeId> {
        let pool: Vec<NodeId> = from.iter().copied().filter(|&n| n != avoid).collect();
        let k = self.rng.random_range(1..=2usize).min(pool.len());
        pool.choose_multiple(&mut self.rng, k).copied().collect()
    }
}

pub fn generate_random(p: &GenParams) -> Scenario {
    let base = Header { drop: p.drop, seed: p.seed, ..Header::default() };
    let gap = base.settle_window() + 200;
    let mut b = Builder {
        rng: ChaCha8Rng::seed_from_u64(p.seed),
        topo: Topology::new(),
        scenario: Scenario::new(base),
        declared: Vec::new(),
    };
    let batch = p.batch.max(1);
    let mut next_id = 1u64;
    let mut t: Tick = 0;
    b.ev(0, External::Arrive { id: NodeId(next_id), prefix: None });
    b.declared.push(NodeId(next_id));
    next_id += 1;
    t += gap;

    while next_id <= p.nodes {
        let settled = b.live();
        let mut at = t;
        for _ in 0..batch {
            if next_id > p.nodes {
                break;
            }
            let id = NodeId(next_id);
            next_id += 1;
            b.ev(at, External::Arrive { id, prefix: None });
            b.declared.push(id);
            for n in b.pick_links(&settled, id) {
                b.ev(at, External::LinkUp(id, n));
            }
            at += 2;
        }
        at += 10;

        let mut leavers = b.removable();
        leavers.shuffle(&mut b.rng);
        let quota = leavers.iter().filter(|_| b.rng.random_bool(p.churn.clamp(0.0, 1.0))).count();
        for _ in 0..quota {
            // Recheck: an earlier removal may have made this one a cut vertex.
            let Some(&v) = b.removable().choose(&mut b.rng) else { break };
            if b.topo.len() <= 2 {
                break;
            }
            let e = if b.rng.random_bool(0.5) { External::Exit(v) } else { External::Crash(v) };
            b.ev(at, e);
            at += 3;
        }

        let movers = b.live().len();
        let quota = (0..movers).filter(|_| b.rng.random_bool(p.mobility.clamp(0.0, 1.0))).count();
        for _ in 0..quota {
            let Some(&v) = b.removable().choose(&mut b.rng) else { break };
            let old = b.topo.neighbors(v).unwrap_or_default();
            let others: Vec<NodeId> = b.live().into_iter().filter(|n| *n != v && !old.contains(n)).collect();
            if others.is_empty() {
                continue;
            }
            for n in &old {
                b.ev(at, External::LinkDown(v, *n));
            }
            for n in b.pick_links(&others, v) {
                b.ev(at, External::LinkUp(v, n));
            }
            at += 3;
        }

        for _ in 0..p.lookups {
            let live = b.live();
            let Some(&origin) = live.choose(&mut b.rng) else { break };
            let Some(&target) = b.declared.choose(&mut b.rng) else { break };
            if origin != target {
                b.ev(at, External::Lookup { origin, target });
            }
        }
        t = at + gap;
    }
    b.scenario.header.horizon = t;
    b.scenario
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn one_node_is_one_arrival() {
        let s = generate_random(&GenParams { nodes: 1, ..GenParams::default() });
        assert_eq!(s.events, vec![(0, External::Arrive { id: NodeId(1), prefix: None })]);
    }

    #[test]
    fn same_seed_same_text() {
        let p = GenParams { nodes: 60, churn: 0.1, mobility: 0.1, seed: 9, ..GenParams::default() };
        assert_eq!(generate_random(&p).render(), generate_random(&p).render());
        let q = GenParams { seed: 10, ..p };
        assert_ne!(generate_random(&p).render(), generate_random(&q).render());
    }

    #[test]
    fn generated_scenarios_validate_and_round_trip() {
        for seed in 0..20 {
            let p = GenParams { nodes: 40, churn: 0.1, mobility: 0.1, drop: 0.05, seed, ..GenParams::default() };
            let s = generate_random(&p);
            s.validate().unwrap();
            assert_eq!(Scenario::parse(&s.render()).unwrap(), s);
        }
    }
}
