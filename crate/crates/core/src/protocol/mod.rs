//! The per-node protocol state machine.
//!
//! A node is driven by [`NodeState::step`]: one input in, a list of outputs
//! (sends, wake-up requests, notices) out. Nodes never read each other's
//! state. What a node knows about its surroundings comes from the [`Ctx`]
//! passed to each step: the clock and the beacons of its direct neighbours.
//!
//! Each node keeps its own due times for periodic and deadline work. After
//! handling an input it runs everything that has come due, then asks for a
//! single wake-up at the earliest future due time.

mod heal;
mod join;
mod lookup;
pub mod message;
mod upkeep;

use alloc::collections::{BTreeMap, BTreeSet};
use alloc::vec::Vec;
use core::fmt;

use crate::addressing::{cluster_head_of, level_of, pool_of, Address, Level, NetId, NetworkPrefix, Pool};
use crate::table::AddressTable;
use crate::{NodeId, Tick};

pub use message::{Bucket, Dest, Envelope, JoinId, MergeKind, MergeStage, Message, QueryId};

use heal::{Adopted, Claim, MergeState};
use join::{JoinState, Relay, Reservation};
use lookup::LookupState;
use upkeep::{HeadProbe, OldRelease, Probe};

/// Timer constants and the prefix a fresh network starts with.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ProtocolConfig {
    pub prefix: [u8; 3],
    pub prefix_len: u8,
    /// Interval between discovery broadcasts.
    pub t_init: Tick,
    pub init_attempts: u8,
    pub t_alive: Tick,
    pub t_stale: Tick,
    pub t_probe: Tick,
    pub t_scan: Tick,
    pub t_rehome: Tick,
    pub t_partition: Tick,
    /// Deadline for each handshake stage.
    pub t_handshake: Tick,
    pub handshake_attempts: u8,
}

impl Default for ProtocolConfig {
    fn default() -> Self {
        ProtocolConfig {
            prefix: [10, 1, 1],
            prefix_len: 2,
            t_init: 5,
            init_attempts: 3,
            t_alive: 20,
            t_stale: 60,
            t_probe: 10,
            t_scan: 10,
            t_rehome: 20,
            t_partition: 60,
            t_handshake: 30,
            handshake_attempts: 3,
        }
    }
}

impl ProtocolConfig {
    pub fn with_prefix(mut self, octets: &[u8]) -> Self {
        let n = octets.len().min(3);
        self.prefix = [0; 3];
        self.prefix[..n].copy_from_slice(&octets[..n]);
        self.prefix_len = n as u8;
        self
    }

    pub fn base_prefix(&self, netid: NetId) -> NetworkPrefix {
        NetworkPrefix::new(&self.prefix[..self.prefix_len as usize], netid).expect("validated prefix length")
    }

    /// Alive bounces before a node starts suspecting a partition.
    fn partition_bounces(&self) -> u32 {
        self.t_partition.div_ceil(self.t_alive.max(1)).max(1) as u32
    }

    /// Spacing of retries inside one probe window.
    fn probe_retry(&self) -> Tick {
        (self.t_probe / 3).max(1)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum Role {
    Unconfigured,
    Member,
    Subordinate,
    Head,
    Supreme,
}

/// What a neighbour advertises about itself.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Beacon {
    pub addr: Address,
    pub prefix: NetworkPrefix,
}

impl Beacon {
    pub fn level(&self) -> Level {
        level_of(self.addr, &self.prefix).unwrap_or(Level(0))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Neighbor {
    pub id: NodeId,
    /// `None` while the neighbour is unconfigured.
    pub view: Option<Beacon>,
}

/// Per-step context.
#[derive(Debug, Clone, Copy)]
pub struct Ctx<'a> {
    pub now: Tick,
    /// Sorted by id.
    pub neighbors: &'a [Neighbor],
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum Input {
    Arrive,
    /// Graceful exit; the node is gone after this step.
    Leave,
    Deliver(Envelope),
    /// The network found no holder for an addressed send.
    Undeliverable(Envelope),
    Wake,
    Lookup { target: NodeId },
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum Notice {
    Configured { addr: Address, prefix: NetworkPrefix },
    BecameSupreme { addr: Address },
    Committed { suffix: u8, node: NodeId },
    Released { suffix: u8, node: NodeId },
    Promoted { addr: Address },
    Abandoned { addr: Address },
    Rehoming { join: JoinId },
    HandshakeFailed { join: JoinId },
    LookupDone { query: QueryId, target: NodeId, result: Option<Address> },
    Claimed { prefix: NetworkPrefix },
    Reprefixed { prefix: NetworkPrefix },
    MergeWon { loser: NetId },
    MergeLost { winner: NetId },
}

impl fmt::Display for Notice {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Notice::Configured { addr, prefix } => write!(f, "configured addr={addr} net={}", prefix.netid),
            Notice::BecameSupreme { addr } => write!(f, "supreme addr={addr}"),
            Notice::Committed { suffix, node } => write!(f, "commit suffix={suffix} node={node}"),
            Notice::Released { suffix, node } => write!(f, "release suffix={suffix} node={node}"),
            Notice::Promoted { addr } => write!(f, "promoted addr={addr}"),
            Notice::Abandoned { addr } => write!(f, "abandon addr={addr}"),
            Notice::Rehoming { join } => write!(f, "rehome join={join}"),
            Notice::HandshakeFailed { join } => write!(f, "handshake_failed join={join}"),
            Notice::LookupDone { query, target, result } => match result {
                Some(a) => write!(f, "lookup query={query} target={target} addr={a}"),
                None => write!(f, "lookup query={query} target={target} fail"),
            },
            Notice::Claimed { prefix } => write!(f, "claim prefix={prefix} net={}", prefix.netid),
            Notice::Reprefixed { prefix } => write!(f, "reprefix prefix={prefix} net={}", prefix.netid),
            Notice::MergeWon { loser } => write!(f, "merge_won loser={loser}"),
            Notice::MergeLost { winner } => write!(f, "merge_lost winner={winner}"),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum Output {
    Send(Envelope),
    /// Step me again with [`Input::Wake`] at this tick.
    Wake(Tick),
    Note(Notice),
}

/// Uplink health as seen from alive-update bounces.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
struct Uplink {
    streak: u32,
    bounced: bool,
}

#[derive(Debug, Clone)]
pub struct NodeState {
    id: NodeId,
    cfg: ProtocolConfig,
    addr: Option<Address>,
    prefix: Option<NetworkPrefix>,
    held_since: Tick,

    table: Option<AddressTable>,
    /// When each table holder acquired its suffix, where known.
    since: BTreeMap<u8, Tick>,
    /// Committed suffixes whose holder has not yet been heard from.
    unconfirmed: BTreeSet<u8>,
    replica: Option<AddressTable>,
    last_sync: Tick,
    subordinate: Option<(NodeId, Address)>,

    join: Option<JoinState>,
    join_seq: u32,
    /// The last rehome timed out without an offer.
    rehome_failed: bool,
    /// No cluster-mate in reach at the last scan.
    detached: bool,
    /// After losing a merge: join only the winner, and never found a
    /// network, until the deadline.
    rejoin: Option<(NetId, Tick)>,
    relays: BTreeMap<JoinId, Relay>,
    reservations: BTreeMap<u8, Reservation>,

    probes: BTreeMap<u8, Probe>,
    head_probe: Option<HeadProbe>,
    old_release: Option<OldRelease>,
    uplink: Uplink,

    lookups: BTreeMap<QueryId, LookupState>,
    query_seq: u32,

    claim: Option<Claim>,
    adopted: BTreeMap<NetId, Adopted>,
    /// Claims we once followed and then dropped for a stronger one, mapped
    /// to the network both were claiming.
    superseded: BTreeMap<NetId, NetId>,
    heal_counter: u32,
    merge: Option<MergeState>,
    merge_reported: BTreeMap<NetId, Tick>,
    banned: BTreeSet<NetId>,

    alive_due: Tick,
    scan_due: Tick,
    last_cluster_contact: Tick,
    /// Since when our head has been known gone while the network itself
    /// is still reachable.
    orphaned: Option<Tick>,
    scheduled: BTreeSet<Tick>,
}

impl NodeState {
    pub fn new(id: NodeId, cfg: ProtocolConfig) -> Self {
        NodeState {
            id,
            cfg,
            addr: None,
            prefix: None,
            held_since: 0,
            table: None,
            since: BTreeMap::new(),
            unconfirmed: BTreeSet::new(),
            replica: None,
            last_sync: 0,
            subordinate: None,
            join: None,
            join_seq: 0,
            rehome_failed: false,
            detached: false,
            rejoin: None,
            relays: BTreeMap::new(),
            reservations: BTreeMap::new(),
            probes: BTreeMap::new(),
            head_probe: None,
            old_release: None,
            uplink: Uplink::default(),
            lookups: BTreeMap::new(),
            query_seq: 0,
            claim: None,
            adopted: BTreeMap::new(),
            superseded: BTreeMap::new(),
            heal_counter: 0,
            merge: None,
            merge_reported: BTreeMap::new(),
            banned: BTreeSet::new(),
            alive_due: 0,
            scan_due: 0,
            last_cluster_contact: 0,
            orphaned: None,
            scheduled: BTreeSet::new(),
        }
    }

    /// A node that already holds `addr`, for building worlds by hand. Heads
    /// get `table` (or an empty one).
    pub fn configured(
        id: NodeId,
        cfg: ProtocolConfig,
        addr: Address,
        prefix: NetworkPrefix,
        table: Option<AddressTable>,
        now: Tick,
    ) -> Self {
        let mut n = NodeState::new(id, cfg);
        n.configure(addr, prefix, now, &mut Vec::new());
        if let (Some(t), Some(own)) = (table, n.table.as_mut()) {
            *own = t;
            own.set_head(addr);
        }
        n
    }

    pub fn id(&self) -> NodeId {
        self.id
    }

    pub fn config(&self) -> &ProtocolConfig {
        &self.cfg
    }

    pub fn address(&self) -> Option<Address> {
        self.addr
    }

    pub fn prefix(&self) -> Option<NetworkPrefix> {
        self.prefix
    }

    pub fn netid(&self) -> Option<NetId> {
        self.prefix.map(|p| p.netid)
    }

    pub fn level(&self) -> Option<Level> {
        let (a, p) = (self.addr?, self.prefix?);
        level_of(a, &p).ok()
    }

    pub fn role(&self) -> Role {
        match (self.level(), self.prefix) {
            (None, _) | (_, None) => Role::Unconfigured,
            (Some(l), Some(p)) if l == p.max_level() => Role::Supreme,
            (Some(l), _) if l.0 >= 1 => Role::Head,
            _ if self.replica.is_some() => Role::Subordinate,
            _ => Role::Member,
        }
    }

    pub fn table(&self) -> Option<&AddressTable> {
        self.table.as_ref()
    }

    pub fn replica(&self) -> Option<&AddressTable> {
        self.replica.as_ref()
    }

    pub fn subordinate(&self) -> Option<NodeId> {
        self.subordinate.map(|(id, _)| id)
    }

    pub fn beacon(&self) -> Option<Beacon> {
        Some(Beacon { addr: self.addr?, prefix: self.prefix? })
    }

    /// A join or rehome handshake of this node's own is in flight.
    pub fn joining(&self) -> bool {
        self.join.is_some()
    }

    /// Nothing in flight: no handshakes, relays, reservations, probes,
    /// lookups, claims or merges. Periodic timers do not count.
    pub fn is_idle(&self) -> bool {
        self.pending().is_empty()
    }

    /// Names of whatever keeps this node from being idle.
    pub fn pending(&self) -> Vec<&'static str> {
        let mut v = Vec::new();
        for (busy, what) in [
            (self.join.is_some(), "join"),
            (!self.relays.is_empty(), "relay"),
            (!self.reservations.is_empty(), "reservation"),
            (self.awaiting_holder(), "unconfirmed"),
            (!self.probes.is_empty(), "probe"),
            (self.head_probe.is_some(), "head_probe"),
            (self.old_release.is_some(), "old_release"),
            (self.orphaned.is_some(), "orphaned"),
            (self.detached, "detached"),
            (!self.lookups.is_empty(), "lookup"),
            (self.claim.is_some(), "claim"),
            (self.merge.is_some(), "merge"),
        ] {
            if busy {
                v.push(what);
            }
        }
        v
    }

    fn awaiting_holder(&self) -> bool {
        let Some(t) = self.table.as_ref() else { return false };
        self.unconfirmed.iter().any(|&s| t.get(s).is_some())
    }

    pub fn step(&mut self, ctx: &Ctx<'_>, input: Input) -> Vec<Output> {
        let mut out = Vec::new();
        match input {
            Input::Arrive => self.start_join(ctx.now, &mut out),
            Input::Leave => {
                self.leave(ctx, &mut out);
                return out;
            }
            Input::Deliver(env) => self.on_deliver(ctx, env, &mut out),
            Input::Undeliverable(env) => self.on_bounce(ctx, env, &mut out),
            Input::Wake => {}
            Input::Lookup { target } => self.start_lookup(ctx, target, &mut out),
        }
        self.scheduled.retain(|&t| t > ctx.now);
        self.run_due(ctx, &mut out);
        if let Some(at) = self.next_due(ctx.now) {
            if self.scheduled.insert(at) {
                out.push(Output::Wake(at));
            }
        }
        out
    }

    fn on_deliver(&mut self, ctx: &Ctx<'_>, env: Envelope, out: &mut Vec<Output>) {
        use Message::*;
        let src = env.src;
        let src_addr = env.src_addr;
        match env.msg {
            JoinNetworkRequest { join, requestor_id } => self.on_join_request(join, requestor_id, out),
            JoinReply { join, responder_addr, prefix, .. } => {
                self.on_join_reply(ctx.now, join, src, responder_addr, prefix)
            }
            AddressRequest { join, requestor_id } | ChangeAddressRequest { join, node_id: requestor_id } => {
                self.on_address_request(ctx.now, join, src, requestor_id, out)
            }
            HeadAddressQuery { join, requestor_id, origin } => {
                self.on_head_query(ctx.now, join, requestor_id, origin, out)
            }
            AddressOffer { join, addr } => self.on_offer(ctx.now, join, addr, out),
            AddressAccept { join, addr, requestor_id } => self.on_accept(ctx.now, join, addr, requestor_id, out),
            AllocationAck { join, addr, requestor_id } => {
                self.on_ack(ctx.now, join, addr, requestor_id, src_addr, out)
            }
            ProcessComplete { join, addr } => self.on_process_complete(join, addr, out),
            JoinComplete { join, addr, prefix } => self.on_join_complete(ctx, join, addr, prefix, out),
            NetworkFull { join } => self.on_network_full(ctx.now, join, out),

            AliveUpdate { sender_addr, sender_id, held_since } => {
                self.on_alive(ctx.now, sender_addr, sender_id, held_since, out)
            }
            ProbeNode { target_addr } => self.on_probe(target_addr, src_addr, out),
            ProbeReply { addr, id } => self.on_probe_reply(ctx.now, addr, id),
            AddressRevoked { addr, id } => self.on_revoked(ctx.now, addr, id, out),

            DepartureNotice { leaver_addr, leaver_id } => self.on_departure_notice(ctx.now, leaver_addr, leaver_id, out),
            DeallocateRequest { leaver_addr, leaver_id } => {
                self.on_deallocate(leaver_addr, leaver_id, src_addr, out)
            }
            DeallocateConfirm { leaver_addr } => self.on_deallocate_confirm(leaver_addr),

            TableSync { snapshot, for_merge } => self.on_table_sync(ctx.now, &snapshot, for_merge, env.src_net, out),
            BecomeHead { head_addr } => self.on_become_head(ctx.now, head_addr, out),

            FindAddress { target_id, query_id, origin_addr, visited_level } => {
                self.on_find(ctx.now, target_id, query_id, origin_addr, visited_level, src_addr, out)
            }
            FindAddressReply { target_id, current_addr, query_id } => {
                self.on_find_result(ctx.now, query_id, target_id, Some(current_addr), src_addr, out)
            }
            FindAddressFail { target_id, query_id } => {
                self.on_find_result(ctx.now, query_id, target_id, None, src_addr, out)
            }

            SupremeAnnounce { new_prefix, old_netid, claimant_id, claimant_level } => {
                self.on_announce(ctx.now, new_prefix, old_netid, claimant_id, claimant_level, out)
            }
            MergeProbe { stage, prefix, supreme_addr, supreme_id, n_children } => {
                self.on_merge_probe(ctx.now, stage, prefix, supreme_addr, supreme_id, n_children, out)
            }
            MergeDirective { kind, prefix } => self.on_merge_directive(ctx.now, kind, prefix, env.src_net, out),
        }
    }

    fn on_bounce(&mut self, ctx: &Ctx<'_>, env: Envelope, out: &mut Vec<Output>) {
        match env.msg {
            Message::AliveUpdate { .. } => self.on_alive_bounce(ctx.now, out),
            Message::ProbeNode { target_addr } => self.on_probe_bounce(ctx, target_addr, out),
            Message::DeallocateRequest { leaver_addr, .. } => self.on_deallocate_confirm(leaver_addr),
            Message::FindAddress { query_id, .. } => {
                if let Dest::Addr { addr, .. } = env.dst {
                    self.on_find_lost(ctx.now, query_id, addr, out);
                }
            }
            // Every other kind is covered by its stage deadline.
            _ => {}
        }
    }

    fn run_due(&mut self, ctx: &Ctx<'_>, out: &mut Vec<Output>) {
        let now = ctx.now;
        self.join_due(ctx, out);
        self.expire_relays(now);
        self.probe_due(now, out);
        self.head_probe_due(ctx, out);
        self.old_release_due(now, out);
        self.lookup_due(now, out);
        self.heal_due(ctx, out);
        if self.addr.is_some() && self.alive_due <= now {
            self.alive_due = now + self.cfg.t_alive;
            self.emit_alive(ctx, out);
        }
        if self.addr.is_some() && self.scan_due <= now {
            self.scan_due = now + self.cfg.t_scan;
            self.scan(ctx, out);
        }
        self.sweep(now, out);
        self.watchdog(now, out);
    }

    fn next_due(&self, now: Tick) -> Option<Tick> {
        let mut due: Vec<Tick> = Vec::new();
        if self.addr.is_some() {
            due.push(self.alive_due);
            due.push(self.scan_due);
        }
        if let Some(j) = &self.join {
            due.push(j.due());
        }
        due.extend(self.relays.values().map(|r| r.deadline));
        due.extend(self.reservations.values().map(|r| r.deadline));
        due.extend(self.probes.values().map(|p| p.due(&self.cfg)));
        due.extend(self.head_probe.as_ref().map(|p| p.due(&self.cfg)));
        due.extend(self.old_release.as_ref().map(|r| r.due(&self.cfg)));
        due.extend(self.lookups.values().map(|l| l.deadline));
        due.extend(self.claim.as_ref().map(|c| c.finalize_at));
        due.extend(self.merge.as_ref().map(|m| m.deadline()));
        due.extend(self.next_stale());
        due.extend(self.watchdog_due());
        due.into_iter().filter(|&t| t > now).min()
    }

    fn send(&self, out: &mut Vec<Output>, dst: Dest, msg: Message) {
        out.push(Output::Send(Envelope { src: self.id, src_addr: self.addr, src_net: self.netid(), dst, msg }));
    }

    fn note(out: &mut Vec<Output>, n: Notice) {
        out.push(Output::Note(n));
    }

    /// Multi-hop destination inside this node's own network.
    fn to_addr(&self, addr: Address) -> Dest {
        Dest::Addr { net: self.netid().unwrap_or(NetId(0)), addr }
    }

    fn head_addr(&self) -> Option<Address> {
        cluster_head_of(self.addr?, self.prefix.as_ref()?).ok()
    }

    fn pool(&self) -> Option<Pool> {
        pool_of(self.addr?, self.prefix.as_ref()?).ok()
    }

    fn is_supreme(&self) -> bool {
        self.role() == Role::Supreme
    }

    /// Neighbours configured in this node's own network.
    fn same_net<'a>(&self, ctx: &Ctx<'a>) -> impl Iterator<Item = (NodeId, Beacon)> + 'a {
        let net = self.netid();
        ctx.neighbors.iter().filter_map(move |n| n.view.filter(|b| Some(b.prefix.netid) == net).map(|b| (n.id, b)))
    }

    /// Take `addr`, becoming a head (with an empty table) at level >= 1.
    fn configure(&mut self, addr: Address, prefix: NetworkPrefix, now: Tick, out: &mut Vec<Output>) {
        let level = level_of(addr, &prefix).unwrap_or(Level(0));
        self.addr = Some(addr);
        self.prefix = Some(prefix);
        self.held_since = now;
        self.table = (level.0 >= 1).then(|| AddressTable::new(addr));
        self.since.clear();
        self.unconfirmed.clear();
        self.replica = None;
        self.subordinate = None;
        self.reservations.clear();
        self.probes.clear();
        self.head_probe = None;
        self.uplink = Uplink::default();
        self.alive_due = now;
        self.scan_due = now + self.cfg.t_scan;
        self.last_cluster_contact = now;
        self.orphaned = None;
        self.detached = false;
        self.rehome_failed = false;
        self.detached = false;
        // A fresh address supersedes any partition claim in progress.
        self.claim = None;
        self.last_sync = now;
        Self::note(out, Notice::Configured { addr, prefix });
        if level == prefix.max_level() {
            Self::note(out, Notice::BecameSupreme { addr });
        }
    }

    /// Drop the address and everything tied to it, then join afresh.
    fn abandon(&mut self, now: Tick, out: &mut Vec<Output>) {
        if let Some(addr) = self.addr.take() {
            Self::note(out, Notice::Abandoned { addr });
        }
        self.prefix = None;
        self.table = None;
        self.since.clear();
        self.unconfirmed.clear();
        self.replica = None;
        self.subordinate = None;
        self.relays.clear();
        self.reservations.clear();
        self.probes.clear();
        self.head_probe = None;
        self.uplink = Uplink::default();
        self.claim = None;
        self.merge = None;
        self.join = None;
        self.orphaned = None;
        self.detached = false;
        self.old_release = None;
        self.start_join(now, out);
    }
}

#[cfg(test)]
mod tests;
