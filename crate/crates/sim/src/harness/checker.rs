//! Steady-state invariants, evaluated against ground truth at quiescence.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt;

use thiserror::Error;
use topoaddr_core::addressing::{cluster_head_of, pool_of};
use topoaddr_core::{Address, Level, NetId, NodeId, NodeState, Role};

use crate::simnet::World;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Error)]
#[error("world is not quiescent")]
pub struct NotQuiescent;

#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord)]
pub enum Violation {
    /// Several nodes of one network in one component hold `addr`.
    Uniqueness { addr: Address, nodes: Vec<NodeId> },
    /// `head` lists `node` at `addr` but `node` is not there.
    TableExtra { head: NodeId, addr: Address, node: NodeId },
    /// `node` holds `addr` in `head`'s pool but the table does not say so.
    TableMissing { head: NodeId, addr: Address, node: NodeId },
    /// A level-0 node with cluster peers in its component touches none of them.
    Connectivity { node: NodeId, addr: Address },
    /// One component carries several networks.
    MixedNetworks { component: NodeId, nets: Vec<NetId> },
    /// One network spans several components.
    SplitNetwork { net: NetId, components: Vec<NodeId> },
    /// A network inside a component with other than one supreme.
    SupremeCount { net: NetId, component: NodeId, supremes: Vec<NodeId> },
    /// The head address of `node` is held by nobody in its network.
    Orphan { node: NodeId, addr: Address, head: Address },
}

impl Violation {
    pub fn is_uniqueness(&self) -> bool {
        matches!(self, Violation::Uniqueness { .. })
    }

    pub fn is_table_agreement(&self) -> bool {
        matches!(self, Violation::TableExtra { .. } | Violation::TableMissing { .. })
    }
}

fn ids(v: &[NodeId]) -> String {
    v.iter().map(|n| n.to_string()).collect::<Vec<_>>().join(",")
}

impl fmt::Display for Violation {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Violation::Uniqueness { addr, nodes } => write!(f, "uniqueness addr={addr} nodes={}", ids(nodes)),
            Violation::TableExtra { head, addr, node } => write!(f, "table_extra head={head} addr={addr} node={node}"),
            Violation::TableMissing { head, addr, node } => {
                write!(f, "table_missing head={head} addr={addr} node={node}")
            }
            Violation::Connectivity { node, addr } => write!(f, "connectivity node={node} addr={addr}"),
            Violation::MixedNetworks { component, nets } => {
                let n: Vec<String> = nets.iter().map(|n| n.to_string()).collect();
                write!(f, "mixed_networks component={component} nets={}", n.join(","))
            }
            Violation::SplitNetwork { net, components } => {
                write!(f, "split_network net={net} components={}", ids(components))
            }
            Violation::SupremeCount { net, component, supremes } => {
                write!(f, "supreme_count net={net} component={component} supremes=[{}]", ids(supremes))
            }
            Violation::Orphan { node, addr, head } => write!(f, "orphan node={node} addr={addr} head={head}"),
        }
    }
}

/// Every invariant, in a stable order. Refuses a world with work in flight.
pub fn check_invariants(world: &World) -> Result<Vec<Violation>, NotQuiescent> {
    if !world.is_quiescent() {
        return Err(NotQuiescent);
    }
    let mut out = Vec::new();
    let mut net_components: BTreeMap<NetId, BTreeSet<NodeId>> = BTreeMap::new();
    for comp in world.topology().components() {
        let key = comp[0];
        let members: Vec<&NodeState> = comp.iter().filter_map(|&id| world.node(id)).collect();
        let nets: BTreeSet<NetId> = members.iter().filter_map(|n| n.netid()).collect();
        for &net in &nets {
            net_components.entry(net).or_default().insert(key);
        }
        if nets.len() > 1 {
            out.push(Violation::MixedNetworks { component: key, nets: nets.iter().copied().collect() });
        }
        for net in nets {
            let local: Vec<&NodeState> = members.iter().copied().filter(|n| n.netid() == Some(net)).collect();
            check_network(world, net, key, &local, &mut out);
        }
    }
    for (net, comps) in net_components {
        if comps.len() > 1 {
            out.push(Violation::SplitNetwork { net, components: comps.into_iter().collect() });
        }
    }
    out.sort();
    Ok(out)
}

fn check_network(world: &World, net: NetId, component: NodeId, nodes: &[&NodeState], out: &mut Vec<Violation>) {
    let mut by_addr: BTreeMap<Address, Vec<NodeId>> = BTreeMap::new();
    for n in nodes {
        if let Some(a) = n.address() {
            by_addr.entry(a).or_default().push(n.id());
        }
    }
    for (addr, holders) in &by_addr {
        if holders.len() > 1 {
            out.push(Violation::Uniqueness { addr: *addr, nodes: holders.clone() });
        }
    }

    let supremes: Vec<NodeId> = nodes.iter().filter(|n| n.role() == Role::Supreme).map(|n| n.id()).collect();
    if supremes.len() != 1 {
        out.push(Violation::SupremeCount { net, component, supremes });
    }

    for n in nodes {
        let (Some(addr), Some(prefix)) = (n.address(), n.prefix()) else { continue };
        let id = n.id();

        if let Some(table) = n.table() {
            if let Ok(pool) = pool_of(addr, &prefix) {
                for e in table.entries() {
                    let child = pool.child(e.suffix);
                    if !by_addr.get(&child).is_some_and(|h| h.contains(&e.node_id)) {
                        out.push(Violation::TableExtra { head: id, addr: child, node: e.node_id });
                    }
                }
                for child_addr in pool.iter() {
                    let Some(holders) = by_addr.get(&child_addr) else { continue };
                    let s = pool.suffix_of(child_addr).expect("address from this pool");
                    for &h in holders {
                        if table.get(s).is_none_or(|e| e.node_id != h) {
                            out.push(Violation::TableMissing { head: id, addr: child_addr, node: h });
                        }
                    }
                }
            }
        }

        let Ok(head) = cluster_head_of(addr, &prefix) else { continue };
        if !by_addr.contains_key(&head) {
            out.push(Violation::Orphan { node: id, addr, head });
        }

        if n.level() == Some(Level(0)) && !n.joining() {
            let same_cluster = |other: &NodeState| {
                other.id() != id
                    && other.netid() == Some(net)
                    && other.address().is_some_and(|a| {
                        a == head || other.prefix().and_then(|p| cluster_head_of(a, &p).ok()) == Some(head)
                    })
            };
            let has_peer = nodes.iter().any(|o| same_cluster(o));
            let touches = world
                .topology()
                .neighbors(id)
                .unwrap_or_default()
                .into_iter()
                .filter_map(|m| world.node(m))
                .any(same_cluster);
            if has_peer && !touches {
                out.push(Violation::Connectivity { node: id, addr });
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::simnet::DeliveryModel;
    use topoaddr_core::{AddressTable, NetworkPrefix, ProtocolConfig};

    fn a(s: &str) -> Address {
        s.parse().unwrap()
    }

    fn prefix() -> NetworkPrefix {
        NetworkPrefix::new(&[10, 1], NetId(7)).unwrap()
    }

    /// Supreme n1 at 10.1.0.0 and head n2 at 10.1.1.0 with `members` below it.
    fn hand_built(members: &[(u64, &str)], table: &[(u8, u64)]) -> World {
        let cfg = ProtocolConfig::default();
        let mut w = World::new(cfg, DeliveryModel::default());
        let mut top = AddressTable::new(a("10.1.0.0"));
        top.assign(1, NodeId(2), 0).unwrap();
        w.insert_node(NodeState::configured(NodeId(1), cfg, a("10.1.0.0"), prefix(), Some(top), 0));
        let mut t = AddressTable::new(a("10.1.1.0"));
        for &(s, id) in table {
            t.assign(s, NodeId(id), 0).unwrap();
        }
        w.insert_node(NodeState::configured(NodeId(2), cfg, a("10.1.1.0"), prefix(), Some(t), 0));
        w.link(NodeId(1), NodeId(2)).unwrap();
        for &(id, addr) in members {
            w.insert_node(NodeState::configured(NodeId(id), cfg, a(addr), prefix(), None, 0));
            w.link(NodeId(2), NodeId(id)).unwrap();
        }
        w
    }

    #[test]
    fn consistent_world_is_clean() {
        let w = hand_built(&[(3, "10.1.1.1"), (4, "10.1.1.2")], &[(1, 3), (2, 4)]);
        assert_eq!(check_invariants(&w), Ok(vec![]));
    }

    #[test]
    fn duplicate_address_names_both_nodes() {
        let w = hand_built(&[(3, "10.1.1.1"), (4, "10.1.1.1")], &[(1, 3)]);
        let v = check_invariants(&w).unwrap();
        let dups: Vec<_> = v.iter().filter(|x| x.is_uniqueness()).collect();
        assert_eq!(dups, vec![&Violation::Uniqueness { addr: a("10.1.1.1"), nodes: vec![NodeId(3), NodeId(4)] }]);
    }

    #[test]
    fn orphan_table_entry_is_reported() {
        let w = hand_built(&[(3, "10.1.1.1")], &[(1, 3), (5, 9)]);
        assert_eq!(
            check_invariants(&w).unwrap(),
            vec![Violation::TableExtra { head: NodeId(2), addr: a("10.1.1.5"), node: NodeId(9) }]
        );
    }

    #[test]
    fn unlisted_member_is_reported() {
        let w = hand_built(&[(3, "10.1.1.1")], &[]);
        assert_eq!(
            check_invariants(&w).unwrap(),
            vec![Violation::TableMissing { head: NodeId(2), addr: a("10.1.1.1"), node: NodeId(3) }]
        );
    }

    #[test]
    fn stranded_member_breaks_connectivity() {
        let mut w = hand_built(&[(3, "10.1.1.1")], &[(1, 3)]);
        let cfg = ProtocolConfig::default();
        w.insert_node(NodeState::configured(NodeId(5), cfg, a("10.1.1.2"), prefix(), None, 0));
        w.link(NodeId(1), NodeId(5)).unwrap();
        let v = check_invariants(&w).unwrap();
        assert!(v.contains(&Violation::Connectivity { node: NodeId(5), addr: a("10.1.1.2") }), "{v:?}");
    }

    #[test]
    fn in_flight_world_is_refused() {
        let mut w = hand_built(&[], &[]);
        // Alive traffic does not count, but a joiner's handshake does.
        w.schedule(0, crate::simnet::External::Arrive { id: NodeId(9), prefix: None });
        w.schedule(0, crate::simnet::External::LinkUp(NodeId(9), NodeId(2)));
        w.run_until(1);
        assert_eq!(check_invariants(&w), Err(NotQuiescent));
    }
}
