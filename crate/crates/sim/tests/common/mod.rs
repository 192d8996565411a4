//! Hand-built worlds shared by the integration tests.

#![allow(dead_code)]

use topoaddr_core::addressing::pool_of;
use topoaddr_core::{Address, AddressTable, NetId, NetworkPrefix, NodeId, NodeState, ProtocolConfig};
use topoaddr_sim::simnet::{DeliveryModel, World};

pub fn a(s: &str) -> Address {
    s.parse().expect("test address")
}

pub fn prefix(octets: &[u8], net: u64) -> NetworkPrefix {
    NetworkPrefix::new(octets, NetId(net)).expect("test prefix")
}

/// One network laid out by hand: a supreme with `heads` level-1 children,
/// and `members` level-0 nodes under the head at suffix `under`.
pub struct Layout {
    pub prefix: NetworkPrefix,
    pub first_id: u64,
    pub heads: u8,
    pub under: u8,
    pub members: u8,
}

pub struct Built {
    pub supreme: NodeId,
    /// `heads[i]` holds suffix `i + 1`.
    pub heads: Vec<NodeId>,
    pub members: Vec<NodeId>,
}

/// Place `l` into `w`. Heads sit beside the supreme, members beside their
/// head.
pub fn build(w: &mut World, cfg: ProtocolConfig, l: &Layout) -> Built {
    let p = l.prefix;
    let top = p.supreme_address();
    let mut id = l.first_id;
    let mut next = || {
        let n = NodeId(id);
        id += 1;
        n
    };
    let supreme = next();
    let top_pool = pool_of(top, &p).expect("supreme pool");
    let heads: Vec<NodeId> = (0..l.heads).map(|_| next()).collect();
    let members: Vec<NodeId> = (0..l.members).map(|_| next()).collect();

    let mut t = AddressTable::new(top);
    for (i, h) in heads.iter().enumerate() {
        t.assign(i as u8 + 1, *h, w.now()).expect("free suffix");
    }
    w.insert_node(NodeState::configured(supreme, cfg, top, p, Some(t), w.now()));
    for (i, h) in heads.iter().enumerate() {
        let addr = top_pool.child(i as u8 + 1);
        let mut t = AddressTable::new(addr);
        if i as u8 + 1 == l.under {
            for (j, m) in members.iter().enumerate() {
                t.assign(j as u8 + 1, *m, w.now()).expect("free suffix");
            }
        }
        w.insert_node(NodeState::configured(*h, cfg, addr, p, Some(t), w.now()));
        w.link(supreme, *h).expect("both placed");
    }
    if l.members > 0 {
        let hid = heads[l.under as usize - 1];
        let pool = pool_of(top_pool.child(l.under), &p).expect("head pool");
        for (j, m) in members.iter().enumerate() {
            w.insert_node(NodeState::configured(*m, cfg, pool.child(j as u8 + 1), p, None, w.now()));
            w.link(hid, *m).expect("both placed");
        }
    }
    Built { supreme, heads, members }
}

pub fn world() -> World {
    World::new(ProtocolConfig::default(), DeliveryModel::default())
}
